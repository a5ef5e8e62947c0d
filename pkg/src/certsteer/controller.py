"""L1 adaptive lane-keeping controller: nominal model, predictor, adaptation, filter, L1 norm."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import (BLOWUP_BOUND, RoadProfile, VehicleParams, build_matrices,
                       rk4_affine_operators, rk4_step)

OUTPUT_MAP = np.array([1.0, 0.0, 0.0, 0.0])
PROJECTION_MARGIN = 0.05  # shell thickness as a fraction of each bound interval's width
MAX_GAMMA_DT = 50.0


class Uncontrollable(ValueError):
    pass


class NotHurwitz(ValueError):
    pass


class NonConvergent(RuntimeError):
    pass


@dataclass(frozen=True)
class StiffnessInterval:
    lower: float
    upper: float
    nominal: float | None = None

    def __post_init__(self):
        if not 0 < self.lower <= self.upper:
            raise ValueError(f"need 0 < lower <= upper, got [{self.lower}, {self.upper}]")
        if self.nominal is None:
            object.__setattr__(self, "nominal", 0.5 * (self.lower + self.upper))
        if not self.lower <= self.nominal <= self.upper:
            raise ValueError("nominal stiffness must lie inside the interval")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, c: float) -> bool:
        return self.lower <= c <= self.upper

    def hull(self, other: "StiffnessInterval") -> "StiffnessInterval":
        return StiffnessInterval(min(self.lower, other.lower), max(self.upper, other.upper))

    def as_tuple(self):
        return (self.lower, self.upper)


@dataclass(frozen=True)
class NominalModel:
    A_m: np.ndarray
    b_m: np.ndarray
    c: np.ndarray
    k_m: np.ndarray
    C_hat: float
    V: float
    k_g: float


def _polyval_matrix(coeffs: np.ndarray, A: np.ndarray) -> np.ndarray:
    out = np.zeros_like(A)
    eye = np.eye(A.shape[0])
    for c in coeffs:  # Horner, highest power first
        out = out @ A + c * eye
    return out


def _check_targets(targets: np.ndarray):
    if np.any(targets.real >= 0):
        raise ValueError("pole targets must have negative real parts")
    cplx = targets[np.abs(targets.imag) > 1e-12]
    for p in cplx:
        if np.min(np.abs(targets - np.conj(p))) > 1e-9 * max(1.0, abs(p)):
            raise ValueError("complex pole targets must come in conjugate pairs")


def ackermann_gain(A: np.ndarray, b: np.ndarray, targets: Sequence[complex], tol: float = 1e-8) -> np.ndarray:
    """State-feedback gain k with eig(A - b k^T) = targets (single input)."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    n = A.shape[0]
    targets = np.asarray(targets, dtype=complex)
    if targets.size != n:
        raise ValueError(f"need {n} pole targets, got {targets.size}")
    _check_targets(targets)
    # rescale time so the characteristic polynomial coefficients stay O(1)
    scale = max(np.max(np.abs(targets)), np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
    As, bs = A / scale, b / scale
    ctrb = np.empty((n, n))
    col = bs.copy()
    for j in range(n):
        ctrb[:, j] = col
        col = As @ col
    sv = np.linalg.svd(ctrb, compute_uv=False)
    if sv[-1] <= tol * sv[0]:
        raise Uncontrollable(f"controllability matrix rank-deficient (sigma_min/sigma_max={sv[-1] / sv[0]:.2e})")
    coeffs = np.real(np.poly(targets / scale))
    last_row = np.linalg.solve(ctrb.T, np.eye(n)[:, -1])
    return last_row @ _polyval_matrix(coeffs, As)


def build_nominal(params: VehicleParams, C_hat: float, V: float, pole_targets: Sequence[complex],
                  c: np.ndarray = OUTPUT_MAP) -> NominalModel:
    mats = build_matrices(params, V, C_hat, C_hat)
    k_m = ackermann_gain(mats.A, mats.b, pole_targets)
    A_m = mats.A - np.outer(mats.b, k_m)
    worst = np.max(np.linalg.eigvals(A_m).real)
    if not worst < -1e-9:
        raise NotHurwitz(f"closed-loop nominal matrix not Hurwitz (max real part {worst:.3g})")
    dc = float(c @ np.linalg.solve(A_m, mats.b))
    if dc == 0 or not math.isfinite(dc):
        raise ValueError("c^T A_m^-1 b_m vanishes; feed-forward gain undefined")
    return NominalModel(A_m, mats.b.copy(), np.asarray(c, float), k_m, float(C_hat), float(V), -1.0 / dc)


def lyapunov_solve(A_m: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve A_m P + P A_m^T = -Q for symmetric positive definite P."""
    A = np.asarray(A_m, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = A.shape[0]
    if np.max(np.linalg.eigvals(A).real) >= 0:
        raise NotHurwitz("Lyapunov solve needs a Hurwitz matrix")
    if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max())):
        raise ValueError("Q must be symmetric")
    eye = np.eye(n)
    # row-major vec: vec(A P) = (A kron I) vec P, vec(P A^T) = (I kron A) vec P
    K = np.kron(A, eye) + np.kron(eye, A)
    rhs = -Q.ravel()
    p = np.linalg.solve(K, rhs)
    for _ in range(3):  # iterative refinement
        r = rhs - K @ p
        p = p + np.linalg.solve(K, r)
    P = p.reshape(n, n)
    P = 0.5 * (P + P.T)
    if np.min(np.linalg.eigvalsh(P)) <= 0:
        raise ValueError("Lyapunov solution not positive definite (is Q positive definite?)")
    return P


@dataclass(frozen=True)
class UncertaintyBounds:
    omega: tuple
    theta_box: tuple  # four (lo, hi) pairs
    sigma_bound: float
    b_m_dagger: np.ndarray
    xi: tuple
    delta: float = 0.0
    d_sigma: float = 0.0

    @property
    def theta_lo(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.theta_box])

    @property
    def theta_hi(self) -> np.ndarray:
        return np.array([hi for _, hi in self.theta_box])

    @property
    def theta_l1_max(self) -> float:
        """max over the theta box of ||theta||_1."""
        return float(sum(max(abs(lo), abs(hi)) for lo, hi in self.theta_box))


def _scaled(k: float, xi: tuple) -> tuple:
    a, b = k * xi[0], k * xi[1]
    return (min(a, b), max(a, b))


def uncertainty_bounds(params: VehicleParams, interval: StiffnessInterval, V: float, R_lo: float,
                       Rdot_bound: float, k_m: np.ndarray, C_r_interval: StiffnessInterval | None = None
                       ) -> UncertaintyBounds:
    params.check_geometry()
    if not V > 0:
        raise ValueError("velocity must be positive")
    if not R_lo > 0:
        raise ValueError("minimum road radius must be positive")
    rear = interval if C_r_interval is None else C_r_interval
    m, Iz, lf, lr = params.m, params.I_z, params.l_f, params.l_r
    c_lo, c_hat, c_hi = interval.lower, interval.nominal, interval.upper
    r_lo, r_hat, r_hi = rear.lower, rear.nominal, rear.upper
    omega = (c_lo / c_hat, c_hi / c_hat)
    xi = (c_hat / c_hi - 1.0, c_hat / c_lo - 1.0)
    base = 2 * c_hi * lf + r_hi * lr * (lr / lf - 1) + m * V**2 / 2
    delta = base / (2 * c_hat * R_lo)
    d_sigma = Rdot_bound * base / (2 * c_hat)
    lean = Iz * lr / lf - m
    row_lo = -(m + Iz) * (c_hi - c_hat) / (2 * m * c_lo) + lean * (r_lo - r_hat) / (2 * m * c_hi)
    row_hi = -(m + Iz) * (c_lo - c_hat) / (2 * m * c_hi) + lean * (r_hi - r_hat) / (2 * m * c_lo)
    k = np.asarray(k_m, dtype=float)
    boxes = []
    for j in range(4):
        lo, hi = _scaled(k[j] * V, xi)
        if j in (1, 3):
            lo, hi = lo + row_lo, hi + row_hi
        boxes.append((lo / V, hi / V))
    dagger = np.array([0.0, m / (4 * c_hat), 0.0, Iz / (4 * c_hat * lf)])
    return UncertaintyBounds(omega, tuple(boxes), float(delta + d_sigma), dagger, xi, float(delta),
                             float(d_sigma))


def projection(estimate: float, update: float, lo: float, hi: float, margin: float = PROJECTION_MARGIN) -> float:
    """Smooth projection of a scalar update onto the interval [lo, hi].

    Uses f(x) = ((1+e) x^2 - 1)/e on the normalized coordinate x in [-1, 1]; e is
    chosen so the transition shell covers `margin` of the width on each side.
    """
    half = 0.5 * (hi - lo)
    if half <= 0:
        return 0.0
    e = 1.0 / (1.0 - 2.0 * margin) ** 2 - 1.0
    x = (estimate - 0.5 * (lo + hi)) / half
    f = ((1 + e) * x * x - 1) / e
    if f > 0 and update * x > 0:
        return update * (1.0 - f)
    return update


@dataclass
class AdaptiveControllerState:
    s_hat: np.ndarray
    w_hat: float = 1.0
    theta_hat: np.ndarray = field(default_factory=lambda: np.zeros(4))
    sigma_hat: float = 0.0
    filter_state: float = 0.0

    @property
    def u_ad(self) -> float:
        return self.filter_state

    @classmethod
    def initial(cls, s0) -> "AdaptiveControllerState":
        return cls(np.array(s0, dtype=float))

    def copy(self) -> "AdaptiveControllerState":
        return AdaptiveControllerState(self.s_hat.copy(), self.w_hat, self.theta_hat.copy(), self.sigma_hat,
                                       self.filter_state)


def predictor_step(ctrl_state: AdaptiveControllerState, measured_s, u_ad: float, nominal: NominalModel,
                   dt: float) -> np.ndarray:
    s = np.asarray(measured_s, dtype=float)
    eta = ctrl_state.w_hat * u_ad + ctrl_state.theta_hat @ s + ctrl_state.sigma_hat
    return rk4_step(nominal.A_m, ctrl_state.s_hat, nominal.b_m * eta, dt)


def _check_gain(gamma: float, dt: float):
    if not gamma > 0:
        raise ValueError("adaptation gain must be positive")
    if gamma * dt > MAX_GAMMA_DT:
        raise ValueError(f"adaptation gain too large for the step: gamma*dt={gamma * dt:g} > {MAX_GAMMA_DT}")


def _clip(x, lo, hi):
    return lo if x < lo else hi if x > hi else x


def adaptation_step(ctrl_state: AdaptiveControllerState, measured_s, u_ad: float, nominal: NominalModel,
                    P: np.ndarray, gamma: float, bounds: UncertaintyBounds, dt: float):
    _check_gain(gamma, dt)
    s = np.asarray(measured_s, dtype=float)
    err = float(-((ctrl_state.s_hat - s) @ P @ nominal.b_m))
    gd = gamma * dt
    wlo, whi = bounds.omega
    w = _clip(ctrl_state.w_hat + gd * projection(ctrl_state.w_hat, err * u_ad, wlo, whi), wlo, whi)
    theta = np.empty(4)
    for j, (lo, hi) in enumerate(bounds.theta_box):
        th = ctrl_state.theta_hat[j]
        theta[j] = _clip(th + gd * projection(th, err * s[j], lo, hi), lo, hi)
    sb = bounds.sigma_bound
    sig = _clip(ctrl_state.sigma_hat + gd * projection(ctrl_state.sigma_hat, err, -sb, sb), -sb, sb)
    return w, theta, sig


def filter_update(u_ad: float, w_hat: float, rest: float, k: float, k_g_r: float, dt: float) -> float:
    """Advance u' = -k (w_hat u + rest - k_g r) over dt with w_hat and rest held.

    Solved exactly so the update stays stable for any k*w_hat*dt.
    """
    a = k * w_hat
    drive = k_g_r - rest
    if abs(a * dt) < 1e-12:
        return u_ad + k * dt * (drive - w_hat * u_ad)
    u_eq = drive / w_hat
    return u_eq + (u_ad - u_eq) * math.exp(-a * dt)


def control_law(ctrl_state: AdaptiveControllerState, reference_r: float, nominal: NominalModel, k: float,
                dt: float, measured_s=None) -> tuple[float, float]:
    """Returns (steering command, next u_ad).

    The command uses the current u_ad; the filter then advances one step.
    """
    if not k > 0:
        raise ValueError("filter bandwidth k must be positive")
    s = ctrl_state.s_hat if measured_s is None else np.asarray(measured_s, dtype=float)
    u = float(-nominal.k_m @ s + ctrl_state.filter_state)
    rest = float(ctrl_state.theta_hat @ s + ctrl_state.sigma_hat)
    nxt = filter_update(ctrl_state.filter_state, ctrl_state.w_hat, rest, k, nominal.k_g * reference_r, dt)
    return u, nxt


# L1 norm of G(s) = H(s)(1 - F(s))

def _augmented(A, b, c, k, w):
    n = A.shape[0]
    Aa = np.zeros((n + 1, n + 1))
    Aa[:n, :n] = A
    Aa[:n, n] = -w * k * b
    Aa[n, n] = -w * k
    Ba = np.concatenate([b, [1.0]])
    Ca = np.concatenate([c, [0.0]])
    return Aa, Ba, Ca


def _segment_grid(rates: np.ndarray, freqs: np.ndarray, t_end: float, per_segment: int = 1000) -> np.ndarray:
    fast = float(np.max(rates))
    t0 = min(1.0 / fast, t_end)
    pieces = [np.linspace(0.0, t0, per_segment + 1)]
    a = t0
    wmax = float(np.max(freqs)) if freqs.size else 0.0
    while a < t_end:
        bnd = min(2 * a, t_end)
        npts = per_segment
        if wmax > 0:
            npts = max(npts, int(math.ceil((bnd - a) * wmax * 20)))
        pieces.append(np.linspace(a, bnd, npts + 1)[1:])
        a = bnd
    return np.concatenate(pieces)


def _impulse_l1(A: np.ndarray, b: np.ndarray, c: np.ndarray, tol: float = 1e-9) -> float:
    lam, vecs = np.linalg.eig(A)
    if np.max(lam.real) >= 0:
        raise NonConvergent("impulse response does not decay (non-Hurwitz augmented system)")
    rates = -lam.real
    slow = float(np.min(rates))
    cond = np.linalg.cond(vecs)
    if cond < 1e8:
        coef = (c @ vecs) * np.linalg.solve(vecs, b.astype(complex))
        amp = np.abs(coef)
        head = max(float(amp.sum()), 1e-300)
        # envelope sum |c_i| exp(-r_i t) falls below tol * max(1, head)
        t_end = max(float(np.max(np.log(np.maximum(amp, 1e-300) * len(amp) / (tol * max(1.0, head))) / rates)),
                    1.0 / slow)
        t = _segment_grid(rates, np.abs(lam.imag), t_end)
        y = np.real(np.exp(np.outer(t, lam)) @ coef)
        return float(np.trapezoid(np.abs(y), t))
    return _impulse_l1_expm(A, b, c, slow, tol)


def _impulse_l1_expm(A, b, c, slow, tol):
    # defective or badly conditioned modes: march the state with exact exponentials
    from scipy.linalg import expm
    rates = np.array([float(np.max(np.abs(np.linalg.eigvals(A))))])
    t_end = 60.0 / slow
    total, x = 0.0, b.astype(float)
    y_prev = float(c @ x)
    grid = _segment_grid(rates, np.array([]), t_end)
    for a_, b_ in zip(grid[:-1], grid[1:]):
        h = b_ - a_
        x = expm(A * h) @ x if h > 0 else x
        y = float(c @ x)
        total += 0.5 * h * (abs(y_prev) + abs(y))
        y_prev = y
        if np.max(np.abs(x)) < tol * 1e-3 and b_ > 1.0 / slow:
            break
    return total


def l1_norm_filtered(A, b, c, k: float, w: float) -> float:
    """||H (1 - F)||_1 for H = c^T (sI - A)^-1 b and F = wk/(s + wk)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    c = np.asarray(c, dtype=float).ravel()
    if w * k == 0:
        return _impulse_l1(A, b, c)
    if w * k < 0:
        raise NonConvergent("loop gain w*k must be positive")
    return _impulse_l1(*_augmented(A, b, c, k, w))


def l1_norm_G(nominal: NominalModel, k: float, w: float) -> float:
    return l1_norm_filtered(nominal.A_m, nominal.b_m, nominal.c, k, w)


# closed loop

@dataclass
class SimulationResult:
    t: np.ndarray
    states: np.ndarray  # (T, 4)
    controls: np.ndarray  # (T,) total steering
    u_ad: np.ndarray
    w_hat: np.ndarray
    theta_hat: np.ndarray  # (T, 4)
    sigma_hat: np.ndarray
    peak: float  # sup over every integration step of ||s||_inf
    diverged: bool
    final_second_mean: float
    containment_ok: bool = True

    def rows(self):
        for i in range(len(self.t)):
            s = self.states[i]
            yield (self.t[i], s[0], s[1], s[2], s[3], self.controls[i], self.u_ad[i], self.w_hat[i],
                   *self.theta_hat[i], self.sigma_hat[i])


TRAJECTORY_COLUMNS = ("t", "s1", "s1_dot", "s2", "s2_dot", "u", "u_ad", "w_hat", "theta_hat1", "theta_hat2",
                      "theta_hat3", "theta_hat4", "sigma_hat")


@dataclass(frozen=True)
class ControllerSetup:
    """Everything the closed loop needs once V, k and the interval are fixed."""
    params: VehicleParams
    nominal: NominalModel
    bounds: UncertaintyBounds
    P: np.ndarray
    k: float
    gamma: float


def normalized_lyapunov(nominal: NominalModel, q_scale: float | str = "auto") -> np.ndarray:
    """P from A_m P + P A_m^T = -q I. With q_scale='auto' q is set so b_m^T P b_m = 1.

    The scaling keeps gamma*dt*b_m^T P b_m moderate, which the explicit adaptation step needs.
    """
    P = lyapunov_solve(nominal.A_m, np.eye(4))
    if q_scale == "auto":
        return P / float(nominal.b_m @ P @ nominal.b_m)
    return float(q_scale) * P


def make_setup(params: VehicleParams, nominal: NominalModel, interval: StiffnessInterval, k: float,
               gamma: float, R_lo: float, Rdot_bound: float, q_scale: float | str = "auto") -> ControllerSetup:
    bounds = uncertainty_bounds(params, interval, nominal.V, R_lo, Rdot_bound, nominal.k_m)
    return ControllerSetup(params, nominal, bounds, normalized_lyapunov(nominal, q_scale), float(k), float(gamma))


def simulate(setup: ControllerSetup, road: RoadProfile, length: float | None = None, dt: float = 1e-3,
             s0=(0.0, 0.0, 0.0, 0.0), record_every: int = 1, blowup_bound: float = BLOWUP_BOUND,
             reference: float = 0.0, check_containment: bool = False) -> SimulationResult:
    """Closed-loop episode: plant on the road's true stiffness, controller from `setup`.

    Same arithmetic as predictor_step / adaptation_step / control_law, unrolled for speed.
    """
    _check_gain(setup.gamma, dt)
    nom, bnd = setup.nominal, setup.bounds
    V = nom.V
    C_sched, R_sched = road.schedule(dt, length)
    steps = len(C_sched)

    Phm, Psm = rk4_affine_operators(nom.A_m, dt)
    pm_b = (Psm @ nom.b_m).tolist()
    Phm = Phm.tolist()
    Pb = (setup.P @ nom.b_m).tolist()
    km = nom.k_m.tolist()
    plant_cache = {}

    def plant(C):
        if C not in plant_cache:
            mats = build_matrices(setup.params, V, C, C)
            Ph, Ps = rk4_affine_operators(mats.A, dt)
            plant_cache[C] = (Ph.tolist(), (Ps @ mats.b).tolist(), (Ps @ mats.g).tolist())
        return plant_cache[C]

    gd = setup.gamma * dt
    k = setup.k
    kgr = nom.k_g * reference
    wlo, whi = bnd.omega
    tlo = bnd.theta_lo.tolist()
    thi = bnd.theta_hi.tolist()
    sb = bnd.sigma_bound
    proj = projection

    s = [float(v) for v in s0]
    sh = list(s)
    wh, th, sg, ua = 1.0, [0.0] * 4, 0.0, 0.0
    nrec = (steps + record_every - 1) // record_every + 1
    rec = np.empty((nrec, 14))
    r = 0
    peak = max(abs(v) for v in s)
    diverged = False
    contained = True
    last_second = max(1, int(round(1.0 / dt)))
    tail_sum, tail_n = 0.0, 0

    def store(i, u_cmd):
        rec[r] = (i * dt, s[0], s[1], s[2], s[3], u_cmd, ua, wh, th[0], th[1], th[2], th[3], sg, 0.0)

    i = 0
    for i in range(steps):
        Ph, pb, pg = plant(C_sched[i])
        psi = V / R_sched[i]
        u = ua - (km[0] * s[0] + km[1] * s[1] + km[2] * s[2] + km[3] * s[3])
        if i % record_every == 0:
            store(i, u)
            r += 1
        eta = wh * ua + th[0] * s[0] + th[1] * s[1] + th[2] * s[2] + th[3] * s[3] + sg
        s_new = [Ph[j][0] * s[0] + Ph[j][1] * s[1] + Ph[j][2] * s[2] + Ph[j][3] * s[3] + pb[j] * u + pg[j] * psi
                 for j in range(4)]
        sh_new = [Phm[j][0] * sh[0] + Phm[j][1] * sh[1] + Phm[j][2] * sh[2] + Phm[j][3] * sh[3] + pm_b[j] * eta
                  for j in range(4)]
        err = -((sh[0] - s[0]) * Pb[0] + (sh[1] - s[1]) * Pb[1] + (sh[2] - s[2]) * Pb[2] + (sh[3] - s[3]) * Pb[3])
        wh = min(max(wh + gd * proj(wh, err * ua, wlo, whi), wlo), whi)
        for j in range(4):
            th[j] = min(max(th[j] + gd * proj(th[j], err * s[j], tlo[j], thi[j]), tlo[j]), thi[j])
        sg = min(max(sg + gd * proj(sg, err, -sb, sb), -sb), sb)
        if check_containment:
            contained &= wlo <= wh <= whi and -sb <= sg <= sb and all(
                tlo[j] <= th[j] <= thi[j] for j in range(4))
        rest = th[0] * s[0] + th[1] * s[1] + th[2] * s[2] + th[3] * s[3] + sg
        a = k * wh
        if a * dt < 1e-12:
            ua = ua + k * dt * (kgr - rest - wh * ua)
        else:
            ueq = (kgr - rest) / wh
            ua = ueq + (ua - ueq) * math.exp(-a * dt)
        s, sh = s_new, sh_new
        mag = max(abs(s[0]), abs(s[1]), abs(s[2]), abs(s[3]))
        if mag > peak:
            peak = mag
        if not mag <= blowup_bound:  # also catches nan
            diverged = True
            break
        if i >= steps - last_second:
            tail_sum += mag
            tail_n += 1
    if not diverged:
        u = ua - (km[0] * s[0] + km[1] * s[1] + km[2] * s[2] + km[3] * s[3])
        store(steps, u)
        r += 1
    rec = rec[:r]
    return SimulationResult(rec[:, 0], rec[:, 1:5], rec[:, 5], rec[:, 6], rec[:, 7], rec[:, 8:12], rec[:, 12],
                            float(peak) if not diverged else math.inf, diverged,
                            tail_sum / tail_n if tail_n else math.nan, contained)
