"""Monte Carlo randomized smoothing: safe-set certificates and certified intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np
from scipy import special, stats

Label = Hashable

# largest batch of noisy inputs materialized at once
_BATCH = 8192


class InsufficientSamples(ValueError):
    """Raised when n is too small for the requested order-statistic confidence."""


@dataclass(frozen=True)
class SmoothingConfig:
    noise_std: float
    n0: int = 100
    n: int = 10_000
    alpha: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if not (self.noise_std > 0 and math.isfinite(self.noise_std)):
            raise ValueError(f"noise_std must be positive, got {self.noise_std}")
        if self.n0 < 1:
            raise ValueError(f"n0 must be >= 1, got {self.n0}")
        if self.n < self.n0:
            raise ValueError(f"n must be >= n0, got n={self.n} n0={self.n0}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class SafeSetPolicy:
    labels: tuple
    safe_sets: Mapping[Label, frozenset]

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate labels in policy")
        sets = {}
        for lab in labels:
            if lab not in self.safe_sets:
                raise ValueError(f"no safe set for label {lab!r}")
            s = frozenset(self.safe_sets[lab])
            if lab not in s:
                raise ValueError(f"safe set of {lab!r} must contain {lab!r}")
            extra = s - set(labels)
            if extra:
                raise ValueError(f"safe set of {lab!r} has unknown labels {sorted(map(str, extra))}")
            sets[lab] = s
        object.__setattr__(self, "safe_sets", sets)

    def index(self, label) -> int:
        return self.labels.index(label)

    def safe_mask(self, label) -> np.ndarray:
        s = self.safe_sets[label]
        return np.array([lab in s for lab in self.labels])


ABSTAIN = "ABSTAIN"


@dataclass(frozen=True)
class CertificateOutcome:
    predicted_label: Label
    certified_radius: float | str
    p_safe_lower: float
    p_unsafe_upper: float
    counts_selection: tuple = field(default=(), repr=False)
    counts_estimation: tuple = field(default=(), repr=False)

    @property
    def abstained(self) -> bool:
        return self.certified_radius == ABSTAIN

    @property
    def radius(self) -> float:
        """Certified radius as a number (0 for ABSTAIN)."""
        return 0.0 if self.abstained else float(self.certified_radius)


@dataclass(frozen=True)
class CertifiedInterval:
    lower: float
    upper: float
    epsilon: float
    p_lo: float
    p_hi: float
    beta: float
    median: float = float("nan")

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("lower > upper")

    def contains(self, y: float) -> bool:
        return self.lower <= y <= self.upper


def inverse_normal_cdf(p):
    """Standard normal quantile. Accepts scalars or arrays."""
    arr = np.asarray(p, dtype=float)
    if np.any(~((arr > 0) & (arr < 1))):
        raise ValueError("inverse_normal_cdf needs p strictly inside (0, 1)")
    out = special.ndtri(arr)
    return float(out) if out.ndim == 0 else out


def normal_cdf(z):
    out = special.ndtr(np.asarray(z, dtype=float))
    return float(out) if out.ndim == 0 else out


def _probit(p: float) -> float:
    # like inverse_normal_cdf but maps the closed endpoints to +-inf
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    return float(special.ndtri(p))


def lower_confidence_bound(successes: int, trials: int, alpha: float) -> float:
    """One-sided exact Clopper-Pearson lower bound on a binomial proportion."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if trials < 1 or not 0 <= successes <= trials:
        raise ValueError(f"need 0 <= successes <= trials and trials >= 1, got {successes}/{trials}")
    if successes == 0:
        return 0.0
    return float(stats.beta.ppf(alpha, successes, trials - successes + 1))


def upper_confidence_bound(successes: int, trials: int, alpha: float) -> float:
    return 1.0 - lower_confidence_bound(trials - successes, trials, alpha)


def certified_radius(p_safe_lower: float, p_unsafe_upper: float, noise_std: float) -> float | str:
    gap = _probit(p_safe_lower) - _probit(p_unsafe_upper)
    if not gap > 0:
        return ABSTAIN
    return 0.5 * noise_std * gap


def _streams(seed: int, purpose: int) -> np.random.Generator:
    # counter-style split: each (seed, purpose) pair owns an independent stream
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(purpose,))
    return np.random.Generator(np.random.PCG64(ss))


_SELECT, _ESTIMATE, _REGRESS = 0, 1, 2


def _noisy_batches(x: np.ndarray, noise_std: float, count: int, rng: np.random.Generator):
    x = np.asarray(x, dtype=float).ravel()
    done = 0
    while done < count:
        m = min(_BATCH, count - done)
        yield x + noise_std * rng.standard_normal((m, x.size))
        done += m


def _evaluate(model: Callable, batch: np.ndarray):
    """Apply model to a batch. Uses a vectorized entry point if the model has one."""
    vec = getattr(model, "batch", None)
    if vec is not None:
        return list(vec(batch))
    return [model(row) for row in batch]


def _count(model, x, noise_std, count, labels, rng) -> np.ndarray:
    pos = {lab: i for i, lab in enumerate(labels)}
    counts = np.zeros(len(labels), dtype=np.int64)
    for batch in _noisy_batches(x, noise_std, count, rng):
        for lab in _evaluate(model, batch):
            try:
                counts[pos[lab]] += 1
            except KeyError:
                raise ValueError(f"model returned label {lab!r} outside the label set") from None
    return counts


def _model_labels(model, labels):
    if labels is not None:
        return tuple(labels)
    got = getattr(model, "labels", None)
    if got is None:
        raise ValueError("label order unknown: pass labels or use a model with a .labels attribute")
    return tuple(got)


def sample_under_noise(base_model, x, cfg: SmoothingConfig, count: int, labels: Sequence | None = None,
                       stream: int = _ESTIMATE) -> dict:
    """Counts of base-model labels on x + N(0, noise_std^2 I) draws."""
    if count < 1:
        raise ValueError("count must be >= 1")
    labels = _model_labels(base_model, labels)
    counts = _count(base_model, x, cfg.noise_std, count, labels, _streams(cfg.seed, stream))
    return dict(zip(labels, counts.tolist()))


def _top(counts: np.ndarray) -> int:
    # np.argmax returns the first maximum, which is the declaration-order tie break
    return int(np.argmax(counts))


def certify_safe_set(base_model, x, policy: SafeSetPolicy, cfg: SmoothingConfig) -> CertificateOutcome:
    labels = policy.labels
    sel = _count(base_model, x, cfg.noise_std, cfg.n0, labels, _streams(cfg.seed, _SELECT))
    a_hat = labels[_top(sel)]
    est = _count(base_model, x, cfg.noise_std, cfg.n, labels, _streams(cfg.seed, _ESTIMATE))
    n_safe = int(est[policy.safe_mask(a_hat)].sum())
    p_lo = lower_confidence_bound(n_safe, cfg.n, cfg.alpha)
    p_up = 1.0 - p_lo
    radius = certified_radius(p_lo, p_up, cfg.noise_std)
    return CertificateOutcome(a_hat, radius, p_lo, p_up, tuple(sel.tolist()), tuple(est.tolist()))


def smoothed_predict(base_model, x, cfg: SmoothingConfig, labels: Sequence | None = None):
    labels = _model_labels(base_model, labels)
    counts = _count(base_model, x, cfg.noise_std, cfg.n, labels, _streams(cfg.seed, _ESTIMATE))
    return labels[_top(counts)]


def percentile_bounds(p: float, epsilon: float, noise_std: float) -> tuple[float, float]:
    if not 0 < p < 1:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if noise_std <= 0:
        raise ValueError("noise_std must be positive")
    z = inverse_normal_cdf(p)
    shift = epsilon / noise_std
    return normal_cdf(z - shift), normal_cdf(z + shift)


def order_statistic_indices(n: int, p_lo: float, p_hi: float, alpha: float) -> tuple[int, int]:
    """1-based order-statistic ranks (k_lo, k_hi) bracketing the p_lo and p_hi quantiles.

    X_(k) <= q(p_lo) holds iff Binom(n, p_lo) >= k, so the lower rank is the
    largest k with P[Binom(n, p_lo) <= k-1] <= alpha/2. Symmetrically
    X_(j) >= q(p_hi) holds iff Binom(n, p_hi) <= j-1, so the upper rank is the
    smallest j with P[Binom(n, p_hi) <= j-1] >= 1 - alpha/2.
    """
    half = alpha / 2
    ks = np.arange(0, n + 1)
    cdf_lo = stats.binom.cdf(ks, n, p_lo)  # cdf_lo[k-1] = P[B <= k-1]
    ok = np.nonzero(cdf_lo[:n] <= half)[0]
    if ok.size == 0:
        raise InsufficientSamples(
            f"n={n} too small for a lower order statistic at p={p_lo:.3g}, alpha/2={half:.3g}")
    k_lo = int(ok[-1]) + 1
    cdf_hi = stats.binom.cdf(ks, n, p_hi)
    ok = np.nonzero(cdf_hi[:n] >= 1 - half)[0]
    if ok.size == 0:
        raise InsufficientSamples(
            f"n={n} too small for an upper order statistic at p={p_hi:.3g}, alpha/2={half:.3g}")
    k_hi = int(ok[0]) + 1
    return k_lo, k_hi


def regression_samples(base_regressor, x, cfg: SmoothingConfig) -> np.ndarray:
    rng = _streams(cfg.seed, _REGRESS)
    out = []
    for batch in _noisy_batches(x, cfg.noise_std, cfg.n, rng):
        out.append(np.asarray(_evaluate(base_regressor, batch), dtype=float))
    return np.concatenate(out)


def certified_interval(base_regressor, x, cfg: SmoothingConfig, epsilon: float, beta: float) -> CertifiedInterval:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    p_lo, p_hi = percentile_bounds(0.5, epsilon, cfg.noise_std)
    k_lo, k_hi = order_statistic_indices(cfg.n, p_lo, p_hi, cfg.alpha)
    ys = np.sort(regression_samples(base_regressor, x, cfg))
    med = float(np.median(ys))
    h_lo, h_hi = float(ys[k_lo - 1]), float(ys[k_hi - 1])
    return CertifiedInterval(min(h_lo, med - beta), max(h_hi, med + beta), float(epsilon), p_lo, p_hi,
                             float(beta), med)
