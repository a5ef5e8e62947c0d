"""Linear bicycle-model lateral error dynamics, RK4 stepping and road profiles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

STRAIGHT_RADIUS = 1e9
BLOWUP_BOUND = 1e3


class BlowUp(RuntimeError):
    """State left the configured divergence bound."""


@dataclass(frozen=True)
class VehicleParams:
    m: float = 1500.0
    I_z: float = 3000.0
    l_f: float = 1.2
    l_r: float = 1.6

    def __post_init__(self):
        for name in ("m", "I_z", "l_f", "l_r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def check_geometry(self):
        """Raise unless l_r >= l_f and I_z*l_r/l_f - m >= 0."""
        if self.l_r < self.l_f:
            raise ValueError(f"geometry assumption violated: l_r={self.l_r} < l_f={self.l_f}")
        if self.I_z * self.l_r / self.l_f - self.m < 0:
            raise ValueError("inertia assumption violated: I_z*l_r/l_f - m < 0")


@dataclass(frozen=True)
class DynamicsMatrices:
    A: np.ndarray
    b: np.ndarray
    g: np.ndarray
    V: float
    C: float
    C_r: float | None = None


def build_matrices(params: VehicleParams, V: float, C_f: float, C_r: float | None = None) -> DynamicsMatrices:
    if not V > 0:
        raise ValueError(f"velocity must be positive, got {V}")
    if C_r is None:
        C_r = C_f
    if not (C_f > 0 and C_r > 0):
        raise ValueError("cornering stiffness must be positive")
    m, Iz, lf, lr = params.m, params.I_z, params.l_f, params.l_r
    csum = C_f + C_r
    moment = C_f * lf - C_r * lr
    inertia_term = C_f * lf**2 + C_r * lr**2
    A = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, -2 * csum / (m * V), 2 * csum / m, 2 * (-C_f * lf + C_r * lr) / (m * V)],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, -2 * moment / (Iz * V), 2 * moment / Iz, -2 * inertia_term / (Iz * V)],
    ])
    b = np.array([0.0, 2 * C_f / m, 0.0, 2 * C_f * lf / Iz])
    g = np.array([0.0, -2 * moment / (m * V) - V, 0.0, -2 * inertia_term / (Iz * V)])
    return DynamicsMatrices(A, b, g, float(V), float(C_f), float(C_r))


def rk4_affine_operators(A: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Operators (Phi, Psi) with x+ = Phi x + Psi f reproducing one classical RK4 step
    of x' = A x + f when f is held constant over the step."""
    n = A.shape[0]
    hA = dt * A
    term = np.eye(n)
    Phi = np.eye(n)
    Psi = dt * np.eye(n)
    fact = 1.0
    for j in range(1, 5):
        term = term @ hA
        fact *= j
        Phi = Phi + term / fact
        if j <= 3:
            Psi = Psi + dt * term / (fact * (j + 1))
    return Phi, Psi


def rk4_step(A: np.ndarray, x: np.ndarray, forcing: np.ndarray, dt: float) -> np.ndarray:
    """Textbook RK4 on x' = A x + forcing with constant forcing."""
    f = lambda z: A @ z + forcing
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def step(state, control: float, mats: DynamicsMatrices, yaw_rate_des: float, dt: float,
         blowup_bound: float = BLOWUP_BOUND) -> np.ndarray:
    if not dt > 0:
        raise ValueError("dt must be positive")
    s = np.asarray(state, dtype=float)
    nxt = rk4_step(mats.A, s, mats.b * control + mats.g * yaw_rate_des, dt)
    if not np.all(np.abs(nxt) <= blowup_bound):
        raise BlowUp(f"|s| exceeded {blowup_bound}")
    return nxt


def desired_yaw_rate(V: float, R: float, R_min: float = 0.0) -> float:
    if not R > 0 or R < R_min:
        raise ValueError(f"road radius {R} below the admissible minimum {R_min}")
    return V / R


@dataclass(frozen=True)
class RoadSegment:
    duration: float
    C: float
    R: float = STRAIGHT_RADIUS


@dataclass(frozen=True)
class RoadProfile:
    segments: tuple
    curvature_rate_bound: float = 0.0
    R_min: float | None = None

    def __post_init__(self):
        segs = tuple(s if isinstance(s, RoadSegment) else RoadSegment(**s) for s in self.segments)
        if not segs:
            raise ValueError("road profile needs at least one segment")
        for s in segs:
            if not s.duration > 0:
                raise ValueError("segment duration must be positive")
            if not s.C > 0:
                raise ValueError("segment stiffness must be positive")
            if not s.R > 0:
                raise ValueError("segment radius must be positive")
        object.__setattr__(self, "segments", segs)
        floor = min(s.R for s in segs)
        if self.R_min is None:
            object.__setattr__(self, "R_min", floor)
        elif floor < self.R_min:
            raise ValueError(f"segment radius {floor} below R_min={self.R_min}")

    @property
    def duration(self) -> float:
        return sum(s.duration for s in self.segments)

    def with_stiffness(self, C: float) -> "RoadProfile":
        segs = tuple(RoadSegment(s.duration, C, s.R) for s in self.segments)
        return RoadProfile(segs, self.curvature_rate_bound, self.R_min)

    def schedule(self, dt: float, length: float | None = None):
        """Per-step (C, R) arrays over `length` seconds; the last segment is held."""
        total = self.duration if length is None else length
        n = int(round(total / dt))
        t = np.arange(n) * dt
        ends = np.cumsum([s.duration for s in self.segments])
        idx = np.minimum(np.searchsorted(ends, t, side="right"), len(self.segments) - 1)
        C = np.array([s.C for s in self.segments])[idx]
        R = np.array([s.R for s in self.segments])[idx]
        return C, R

    @classmethod
    def from_mapping(cls, data: dict) -> "RoadProfile":
        segs = []
        for i, raw in enumerate(data.get("segments", [])):
            try:
                segs.append(RoadSegment(float(raw["duration"]), float(raw["C"]),
                                        float(raw.get("R", STRAIGHT_RADIUS))))
            except KeyError as exc:
                raise ValueError(f"road.segments[{i}] missing field {exc.args[0]!r}") from None
        return cls(tuple(segs), float(data.get("curvature_rate_bound", 0.0)),
                   data.get("R_min"))

    @classmethod
    def straight(cls, duration: float, C: float) -> "RoadProfile":
        return cls((RoadSegment(duration, C, STRAIGHT_RADIUS),))


def random_road(rng: np.random.Generator, C: float, duration: float = 10.0, R_range=(200.0, 2000.0),
                n_segments: Sequence[int] = (2, 5)) -> RoadProfile:
    """Random piecewise road: straight pieces and one-sided curves."""
    k = int(rng.integers(n_segments[0], n_segments[1] + 1))
    cuts = np.sort(rng.uniform(0, duration, k - 1))
    lengths = np.diff(np.concatenate([[0.0], cuts, [duration]]))
    lengths = np.maximum(lengths, 1e-2)
    segs = []
    for d in lengths:
        if rng.random() < 0.3:
            R = STRAIGHT_RADIUS
        else:
            R = float(np.exp(rng.uniform(np.log(R_range[0]), np.log(R_range[1]))))
        segs.append(RoadSegment(float(d), C, R))
    return RoadProfile(tuple(segs), R_min=R_range[0])
