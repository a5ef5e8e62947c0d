"""Synthetic perception models, stiffness tables, safe sets and PGD attacks."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from .controller import StiffnessInterval
from .smoothing import SafeSetPolicy

PHYSICAL_RANGE = (20_000.0, 120_000.0)

WEATHER = ("Sunny", "Light Rain", "Heavy Rain", "Snow")
SURFACE = ("Asphalt", "Cobblestone", "Sand")

DEFAULT_STIFFNESS = {
    "Sunny": (80_000.0, 120_000.0),
    "Light Rain": (60_000.0, 80_000.0),
    "Heavy Rain": (40_000.0, 60_000.0),
    "Snow": (20_000.0, 40_000.0),
    "Asphalt": (40_000.0, 60_000.0),
    "Cobblestone": (40_000.0, 60_000.0),
    "Sand": (30_000.0, 45_000.0),
}

DEFAULT_SAFE_SETS = {
    "Sunny": ("Sunny", "Heavy Rain", "Light Rain", "Snow"),
    "Light Rain": ("Light Rain", "Heavy Rain", "Snow"),
    "Heavy Rain": ("Heavy Rain", "Snow"),
    "Snow": ("Snow",),
    "Asphalt": ("Asphalt", "Cobblestone", "Sand"),
    "Cobblestone": ("Cobblestone", "Sand"),
    "Sand": ("Sand",),
}


@dataclass(frozen=True)
class StiffnessTable:
    rows: Mapping[str, tuple]

    def __post_init__(self):
        rows = {}
        for lab, (lo, hi) in self.rows.items():
            lo, hi = float(lo), float(hi)
            if not 0 < lo < hi:
                raise ValueError(f"stiffness row {lab!r} needs 0 < lower < upper, got [{lo}, {hi}]")
            rows[lab] = (lo, hi)
        object.__setattr__(self, "rows", rows)

    @classmethod
    def default(cls) -> "StiffnessTable":
        return cls(dict(DEFAULT_STIFFNESS))

    def labels(self) -> tuple:
        return tuple(self.rows)


def label_to_stiffness(label, table: StiffnessTable) -> StiffnessInterval:
    try:
        lo, hi = table.rows[label]
    except KeyError:
        raise KeyError(f"unknown label {label!r}") from None
    return StiffnessInterval(lo, hi)


def hull_interval(labels, table: StiffnessTable) -> StiffnessInterval:
    rows = [table.rows[lab] for lab in labels]
    return StiffnessInterval(min(lo for lo, _ in rows), max(hi for _, hi in rows))


def safe_set_interval(label, policy: SafeSetPolicy, table: StiffnessTable) -> StiffnessInterval:
    """Hull of the stiffness rows over the safe set of `label`."""
    return hull_interval(policy.safe_sets[label], table)


def default_policy(labels: Sequence[str] = WEATHER, safe_sets: Mapping | None = None) -> SafeSetPolicy:
    src = DEFAULT_SAFE_SETS if safe_sets is None else safe_sets
    keep = set(labels)
    return SafeSetPolicy(tuple(labels), {lab: frozenset(s for s in src[lab] if s in keep) for lab in labels})


def check_safe_set_semantics(policy: SafeSetPolicy, table: StiffnessTable) -> list:
    """Members of S(l) whose stiffness upper bound exceeds l's. Empty when consistent."""
    bad = []
    for lab, members in policy.safe_sets.items():
        cap = table.rows[lab][1]
        bad += [(lab, other) for other in members if table.rows[other][1] > cap]
    return bad


class NearestCentroidClassifier:
    """Hard nearest-centroid classifier; ties go to the earlier label."""

    def __init__(self, label_centroids: Mapping[str, Sequence[float]], sharpness: float = 1.0):
        self.labels = tuple(label_centroids)
        self.centroids = np.array([np.asarray(label_centroids[k], dtype=float) for k in self.labels])
        if len(self.labels) < 1:
            raise ValueError("need at least one centroid")
        if len({c.tobytes() for c in self.centroids}) != len(self.labels):
            raise ValueError("centroids must be distinct")
        self.sharpness = float(sharpness)
        self._sq = np.sum(self.centroids**2, axis=1)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def _dist2(self, X):
        X = np.atleast_2d(X)
        return np.sum(X**2, axis=1)[:, None] - 2 * X @ self.centroids.T + self._sq[None, :]

    def batch(self, X):
        idx = np.argmin(self._dist2(X), axis=1)
        return [self.labels[i] for i in idx]

    def __call__(self, x):
        return self.labels[int(np.argmin(self._dist2(x)[0]))]

    def scores(self, x) -> np.ndarray:
        """Softmax of -sharpness * squared distance (a differentiable surrogate)."""
        z = -self.sharpness * self._dist2(x)[0]
        return special.softmax(z)

    # exact Gaussian smoothing, available when the centroids are collinear

    def _line(self):
        c0 = self.centroids[0]
        if len(self.labels) == 1:
            return c0, None, np.zeros(1)
        diffs = self.centroids - c0
        far = diffs[np.argmax(np.linalg.norm(diffs, axis=1))]
        u = far / np.linalg.norm(far)
        t = diffs @ u
        off = diffs - np.outer(t, u)
        if np.max(np.linalg.norm(off, axis=1)) > 1e-9 * max(1.0, np.max(np.abs(t))):
            raise ValueError("exact smoothed masses need collinear centroids")
        return c0, u, t

    def exact_smoothed_masses(self, x, noise_std: float) -> np.ndarray:
        """P[f(x + N(0, v^2 I)) = label] for every label, in label order."""
        c0, u, t = self._line()
        if u is None:
            return np.ones(1)
        pos = float((np.asarray(x, float) - c0) @ u)
        order = np.argsort(t, kind="stable")
        ts = t[order]
        cuts = np.concatenate([[-np.inf], 0.5 * (ts[1:] + ts[:-1]), [np.inf]])
        cdf = special.ndtr((cuts - pos) / noise_std)
        masses = np.empty(len(ts))
        masses[order] = np.diff(cdf)
        return masses

    def exact_smoothed_argmax(self, x, noise_std: float):
        return self.labels[int(np.argmax(self.exact_smoothed_masses(x, noise_std)))]


def make_synthetic_classifier(label_centroids: Mapping, sharpness: float = 1.0) -> NearestCentroidClassifier:
    return NearestCentroidClassifier(label_centroids, sharpness)


class StiffnessScore:
    """Differentiable surrogate for the stiffness a classifier implies: the
    softmax-weighted mean of each label's interval midpoint."""

    def __init__(self, classifier: NearestCentroidClassifier, table: StiffnessTable):
        self.classifier = classifier
        self.values = np.array([np.mean(table.rows[lab]) for lab in classifier.labels])

    def __call__(self, x) -> float:
        return float(self.classifier.scores(x) @ self.values)

    def gradient(self, x) -> np.ndarray:
        clf = self.classifier
        p = clf.scores(x)
        mean = p @ self.values
        dz = -2 * clf.sharpness * (np.asarray(x, float)[None, :] - clf.centroids)
        return (p * (self.values - mean)) @ dz


class SyntheticRegressor:
    """f(x) = smooth clamp of w.x + b into [lo, hi]; monotone in w.x."""

    def __init__(self, weight, bias: float, squash_range=PHYSICAL_RANGE, softness: float | None = None):
        self.w = np.asarray(weight, dtype=float)
        self.bias = float(bias)
        self.lo, self.hi = map(float, squash_range)
        if not self.lo < self.hi:
            raise ValueError("squash range must have lo < hi")
        self.softness = 0.005 * (self.hi - self.lo) if softness is None else float(softness)

    def _squash(self, z):
        k = self.softness
        return self.lo + k * (np.logaddexp(0, (z - self.lo) / k) - np.logaddexp(0, (z - self.hi) / k))

    def _slope(self, z):
        k = self.softness
        return special.expit((z - self.lo) / k) - special.expit((z - self.hi) / k)

    def batch(self, X):
        return self._squash(np.atleast_2d(X) @ self.w + self.bias)

    def __call__(self, x) -> float:
        return float(self._squash(float(np.asarray(x, float) @ self.w) + self.bias))

    def gradient(self, x) -> np.ndarray:
        z = float(np.asarray(x, float) @ self.w) + self.bias
        return float(self._slope(z)) * self.w

    def smoothed_quantile(self, x, p: float, noise_std: float) -> float:
        """Exact p-quantile of f(x + N(0, v^2 I)) (monotone map of a Gaussian)."""
        z = float(np.asarray(x, float) @ self.w) + self.bias
        return float(self._squash(z + np.linalg.norm(self.w) * noise_std * special.ndtri(p)))

    def smoothed_median(self, x, noise_std: float) -> float:
        return self(x)


def make_synthetic_regressor(weight, bias: float, squash_range=PHYSICAL_RANGE) -> SyntheticRegressor:
    return SyntheticRegressor(weight, bias, squash_range)


class Objective(str, enum.Enum):
    STABILITY = "STABILITY"
    EFFICIENCY = "EFFICIENCY"


@dataclass(frozen=True)
class AttackConfig:
    objective: Objective = Objective.STABILITY
    epsilon: float = 12.0
    steps: int = 100
    step_size: float | None = None  # default epsilon / 4
    seed: int = 0
    random_start: bool = True

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective(self.objective))
        if self.epsilon < 0:
            raise ValueError("attack epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("attack steps must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("attack step_size must be positive")

    @property
    def step(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size


def numerical_gradient(f, x, scale: float = 1.0) -> np.ndarray:
    h = 1e-5 * scale
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def project_l2(delta: np.ndarray, eps: float) -> np.ndarray:
    n = np.linalg.norm(delta)
    if n <= eps:
        return delta
    return delta * (eps / n)


def pgd_attack(model, x, cfg: AttackConfig) -> np.ndarray:
    """l2 PGD on model(x + delta); ascent for STABILITY, descent for EFFICIENCY.

    Returns the best iterate seen, with delta = 0 as the first candidate.
    """
    x = np.asarray(x, dtype=float)
    if cfg.epsilon == 0:
        return np.zeros_like(x)
    sign = 1.0 if cfg.objective is Objective.STABILITY else -1.0
    grad = getattr(model, "gradient", None)
    if grad is None:
        scale = max(1.0, float(np.linalg.norm(x)))
        grad = lambda z: numerical_gradient(model, z, scale)
    best = np.zeros_like(x)
    best_val = sign * float(model(x))
    rng = np.random.default_rng(cfg.seed)
    if cfg.random_start:
        d = rng.standard_normal(x.size)
        d *= cfg.epsilon * rng.random() ** (1.0 / x.size) / max(np.linalg.norm(d), 1e-300)
        delta = d
    else:
        delta = np.zeros_like(x)
    for _ in range(cfg.steps + 1):
        val = sign * float(model(x + delta))
        if val > best_val:
            best, best_val = delta.copy(), val
        g = sign * np.asarray(grad(x + delta), dtype=float)
        gn = np.linalg.norm(g)
        if not gn > 0:
            break
        delta = project_l2(delta + cfg.step * g / gn, cfg.epsilon)
    return best


@dataclass(frozen=True)
class SceneModel:
    """Gaussian scene clusters along one feature axis, ordered by stiffness."""
    labels: tuple = WEATHER
    dim: int = 16
    separation: float = 4.0
    cluster_std: float = 0.3
    sharpness: float = 0.05
    reg_gain: float = 10_000.0  # N/rad of predicted stiffness per scene unit
    reg_offset: float = 70_000.0
    reg_noise: float = 0.05  # scene-unit noise along the regression axis

    def positions(self, table: StiffnessTable) -> dict:
        order = sorted(range(len(self.labels)),
                       key=lambda i: (np.mean(table.rows[self.labels[i]]), -i))
        return {self.labels[i]: rank * self.separation for rank, i in enumerate(order)}

    def centroids(self, table: StiffnessTable) -> dict:
        out = {}
        for lab, p in self.positions(table).items():
            c = np.zeros(self.dim)
            c[0] = p
            out[lab] = c
        return {lab: out[lab] for lab in self.labels}

    def classifier(self, table: StiffnessTable) -> NearestCentroidClassifier:
        return NearestCentroidClassifier(self.centroids(table), self.sharpness)

    def regressor(self) -> SyntheticRegressor:
        w = np.zeros(self.dim)
        w[0] = self.reg_gain
        return SyntheticRegressor(w, self.reg_offset, PHYSICAL_RANGE)

    def sample_label_scene(self, label, table: StiffnessTable, rng: np.random.Generator) -> np.ndarray:
        c = self.centroids(table)[label]
        return c + self.cluster_std * rng.standard_normal(self.dim)

    def sample_regression_scene(self, C: float, rng: np.random.Generator) -> np.ndarray:
        x = self.cluster_std * rng.standard_normal(self.dim)
        x[0] = (C - self.reg_offset) / self.reg_gain + self.reg_noise * rng.standard_normal()
        return x


def sample_true_stiffness(label, table: StiffnessTable, rng: np.random.Generator) -> float:
    lo, hi = table.rows[label]
    return float(rng.uniform(lo, hi))


def estimate_beta(scene: SceneModel, rng: np.random.Generator, n_val: int = 2000, quantile: float = 0.95) -> float:
    """Held-out allowance: quantile of |f(x) - C| over fresh synthetic scenes."""
    reg = scene.regressor()
    C = rng.uniform(*PHYSICAL_RANGE, size=n_val)
    X = np.stack([scene.sample_regression_scene(c, rng) for c in C])
    return float(np.quantile(np.abs(reg.batch(X) - C), quantile))
