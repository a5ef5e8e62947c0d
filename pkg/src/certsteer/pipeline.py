"""Episode runner: perceive, certify, map to a stiffness interval, design, simulate, score."""

from __future__ import annotations

import enum
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .controller import SimulationResult, StiffnessInterval, make_setup, simulate
from .design import DesignResult, RelativePoles, admissible_lambda, design_parameters
from .dynamics import RoadProfile, RoadSegment, VehicleParams
from .perception import (PHYSICAL_RANGE, SURFACE, WEATHER, AttackConfig, Objective, SceneModel, StiffnessScore,
                         StiffnessTable, default_policy, estimate_beta, label_to_stiffness,
                         pgd_attack, safe_set_interval, sample_true_stiffness)
from .smoothing import (ABSTAIN, CertificateOutcome, CertifiedInterval, InsufficientSamples, SafeSetPolicy,
                        SmoothingConfig, certified_interval, certify_safe_set)


class Mode(str, enum.Enum):
    CLASSIFICATION = "CLASSIFICATION"
    REGRESSION = "REGRESSION"
    NONROBUST_CLS = "NONROBUST_CLS"
    NONROBUST_REG = "NONROBUST_REG"

    @property
    def is_classification(self) -> bool:
        return self in (Mode.CLASSIFICATION, Mode.NONROBUST_CLS)

    @property
    def robust(self) -> bool:
        return self in (Mode.CLASSIFICATION, Mode.REGRESSION)


FULL_RANGE = StiffnessInterval(*PHYSICAL_RANGE)


@dataclass(frozen=True)
class ControlSettings:
    params: VehicleParams = VehicleParams()
    poles: RelativePoles = RelativePoles()
    gamma: float = 1e4
    q_scale: Any = "auto"
    dt: float = 1e-3
    blowup_bound: float = 1e3
    s0: tuple = (0.2, 0.0, 0.0, 0.0)
    record_every: int = 10
    V_min: float = 5.0
    V_max: float = 40.0
    k_bar: float = 1e4
    lambda_rho: float = 0.9
    lambda_gp: float = 0.0  # 0 selects rho / max_V L(V) per interval


@dataclass(frozen=True)
class PipelineConfig:
    mode: Mode
    smoothing: SmoothingConfig
    attack: AttackConfig | None
    episode_length: float
    road: RoadProfile
    beta: float
    control: ControlSettings = ControlSettings()
    table: StiffnessTable = field(default_factory=StiffnessTable.default)
    policy: SafeSetPolicy = field(default_factory=default_policy)
    scene: SceneModel = SceneModel()
    regression_epsilon: float | None = None  # defaults to the attack budget
    lane_half_width: float = 1.75
    instability_cap: float = 200.0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not self.episode_length > 0:
            raise ValueError("episode_length must be positive")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    @property
    def certify_epsilon(self) -> float:
        if self.regression_epsilon is not None:
            return self.regression_epsilon
        return 0.0 if self.attack is None else self.attack.epsilon


@dataclass
class EpisodeResult:
    mode: str
    stiffness_interval_used: tuple
    certificate: CertificateOutcome | CertifiedInterval | None
    V_commanded: float
    k_star: float
    instability_metric: float
    covered: bool
    true_C: float
    delta_norm: float
    predicted: Any
    peak: float
    diverged: bool
    degenerate: bool
    fallback: str | None = None
    trajectory: SimulationResult | None = field(default=None, repr=False)

    def summary(self) -> dict:
        cert = self.certificate
        if isinstance(cert, CertificateOutcome):
            cdict = {"type": "classification", "label": cert.predicted_label, "radius": cert.radius,
                     "abstain": cert.abstained, "p_safe_lower": cert.p_safe_lower,
                     "p_unsafe_upper": cert.p_unsafe_upper}
        elif isinstance(cert, CertifiedInterval):
            cdict = {"type": "regression", "lower": cert.lower, "upper": cert.upper, "median": cert.median,
                     "epsilon": cert.epsilon, "p_lo": cert.p_lo, "p_hi": cert.p_hi, "beta": cert.beta}
        else:
            cdict = None
        return {
            "mode": self.mode,
            "interval": list(self.stiffness_interval_used),
            "certificate": cdict,
            "V_commanded": self.V_commanded,
            "k_star": self.k_star,
            "instability": self.instability_metric,
            "covered": self.covered,
            "true_C": self.true_C,
            "delta_norm": self.delta_norm,
            "predicted": self.predicted,
            "peak": None if math.isinf(self.peak) else self.peak,
            "diverged": self.diverged,
            "degenerate": self.degenerate,
            "fallback": self.fallback,
        }


def instability_metric(trajectory, lane_half_width: float = 1.75, cap: float = 200.0) -> float:
    """min(cap, sup ||s||_inf / lane_half_width); a diverged run scores the cap."""
    if isinstance(trajectory, SimulationResult):
        if trajectory.diverged:
            return cap
        peak = trajectory.peak
    else:
        arr = np.asarray(trajectory, dtype=float)
        if arr.size == 0:
            raise ValueError("empty trajectory")
        if not np.all(np.isfinite(arr)):
            return cap
        peak = float(np.max(np.abs(arr)))
    return float(min(cap, peak / lane_half_width))


class DesignCache:
    """Designs keyed by interval; the design program is deterministic, so reuse is exact."""

    def __init__(self, control: ControlSettings, R_lo: float, Rdot: float):
        self.control = control
        self.R_lo = R_lo
        self.Rdot = Rdot
        self._store: dict = {}

    def get(self, interval: StiffnessInterval) -> DesignResult:
        key = (interval.lower, interval.upper, interval.nominal)
        if key not in self._store:
            c = self.control
            lam = c.lambda_gp if c.lambda_gp > 0 else admissible_lambda(
                c.params, interval, c.V_min, c.V_max, c.poles, c.lambda_rho)
            self._store[key] = design_parameters(c.params, interval, c.V_min, c.V_max, lam, c.k_bar, c.poles,
                                                 R_lo=self.R_lo, Rdot_bound=self.Rdot)
        return self._store[key]


def _cache_for(cfg: PipelineConfig) -> DesignCache:
    return DesignCache(cfg.control, cfg.road.R_min, cfg.road.curvature_rate_bound)


def _clip_interval(lo: float, hi: float) -> StiffnessInterval:
    lo = min(max(lo, PHYSICAL_RANGE[0]), PHYSICAL_RANGE[1])
    hi = min(max(hi, PHYSICAL_RANGE[0]), PHYSICAL_RANGE[1])
    return StiffnessInterval(lo, max(lo, hi))


def perceive(cfg: PipelineConfig, x: np.ndarray):
    """Interval handed to the controller for input x, plus the certificate and prediction."""
    mode = cfg.mode
    if mode.is_classification:
        clf = cfg.scene.classifier(cfg.table)
        if mode is Mode.NONROBUST_CLS:
            label = clf(x)
            return label_to_stiffness(label, cfg.table), None, label, None
        cert = certify_safe_set(clf, x, cfg.policy, cfg.smoothing)
        if cert.abstained:
            return FULL_RANGE, cert, ABSTAIN, "abstain"
        return safe_set_interval(cert.predicted_label, cfg.policy, cfg.table), cert, cert.predicted_label, None
    reg = cfg.scene.regressor()
    if mode is Mode.NONROBUST_REG:
        y = reg(x)
        return _clip_interval(y - cfg.beta, y + cfg.beta), None, y, None
    try:
        ci = certified_interval(reg, x, cfg.smoothing, cfg.certify_epsilon, cfg.beta)
    except InsufficientSamples:
        return FULL_RANGE, None, None, "insufficient_samples"
    return _clip_interval(ci.lower, ci.upper), ci, ci.median, None


def attack_delta(cfg: PipelineConfig, scene: np.ndarray) -> np.ndarray:
    if cfg.attack is None or cfg.attack.epsilon == 0:
        return np.zeros_like(scene)
    if cfg.mode.is_classification:
        target = StiffnessScore(cfg.scene.classifier(cfg.table), cfg.table)
    else:
        target = cfg.scene.regressor()
    return pgd_attack(target, scene, cfg.attack)


def _road_for(cfg: PipelineConfig, true_C: float) -> RoadProfile:
    return cfg.road.with_stiffness(true_C)


def closed_loop(cfg: PipelineConfig, interval: StiffnessInterval, design: DesignResult, true_C: float):
    c = cfg.control
    if design.degenerate:
        # stopped vehicle: the error state stays where it started
        s0 = np.asarray(c.s0, float)
        traj = SimulationResult(np.array([0.0]), s0[None, :], np.zeros(1), np.zeros(1), np.ones(1),
                                np.zeros((1, 4)), np.zeros(1), float(np.max(np.abs(s0))), False,
                                float(np.max(np.abs(s0))))
        return traj
    setup = make_setup(c.params, design.nominal, interval, design.k_star, c.gamma, cfg.road.R_min,
                       cfg.road.curvature_rate_bound, c.q_scale)
    return simulate(setup, _road_for(cfg, true_C), length=cfg.episode_length, dt=c.dt, s0=c.s0,
                    record_every=c.record_every, blowup_bound=c.blowup_bound)


def run_episode(cfg: PipelineConfig, scene, true_C: float, cache: DesignCache | None = None,
                sim_cache: dict | None = None) -> EpisodeResult:
    if not PHYSICAL_RANGE[0] <= true_C <= PHYSICAL_RANGE[1]:
        raise ValueError(f"true stiffness {true_C} outside the physical range {PHYSICAL_RANGE}")
    scene = np.asarray(scene, dtype=float)
    cache = cache or _cache_for(cfg)
    delta = attack_delta(cfg, scene)
    interval, cert, predicted, fallback = perceive(cfg, scene + delta)
    design = cache.get(interval)
    key = (interval.lower, interval.upper, interval.nominal, float(true_C))
    if sim_cache is not None and key in sim_cache:
        traj = sim_cache[key]
    else:
        traj = closed_loop(cfg, interval, design, true_C)
        if sim_cache is not None:
            sim_cache[key] = traj
    metric = instability_metric(traj, cfg.lane_half_width, cfg.instability_cap)
    if isinstance(predicted, np.generic):
        predicted = predicted.item()
    return EpisodeResult(cfg.mode.value, interval.as_tuple(), cert, design.V_star, design.k_star, metric,
                         interval.contains(true_C), float(true_C), float(np.linalg.norm(delta)), predicted,
                         traj.peak, traj.diverged, design.degenerate, fallback, traj)


# experiment grid

def _seed_for(base: int, *key: int) -> int:
    ss = np.random.SeedSequence(entropy=int(base), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def victim_label(objective: Objective, labels: Sequence[str], table: StiffnessTable) -> str:
    """Scenes for STABILITY cells come from the softest label, EFFICIENCY cells from the stiffest."""
    ranked = sorted(labels, key=lambda lab: np.mean(table.rows[lab]))
    return ranked[0] if objective is Objective.STABILITY else ranked[-1]


@dataclass(frozen=True)
class GridSpec:
    base: PipelineConfig
    modes: tuple
    noise_levels: tuple
    objectives: tuple
    trials: int
    seed: int = 0


def _trial(spec: GridSpec, cfg: PipelineConfig, objective: Objective, noise_idx: int, obj_idx: int, trial: int,
           cache: DesignCache, sim_cache: dict) -> dict:
    # scenes and true stiffness depend on (noise, objective, trial) only, so modes share them
    rng = np.random.default_rng(_seed_for(spec.seed, 1, noise_idx, obj_idx, trial))
    lab = victim_label(objective, cfg.scene.labels, cfg.table)
    true_C = sample_true_stiffness(lab, cfg.table, rng)
    if cfg.mode.is_classification:
        scene = cfg.scene.sample_label_scene(lab, cfg.table, rng)
    else:
        scene = cfg.scene.sample_regression_scene(true_C, rng)
    smooth = replace(cfg.smoothing, seed=_seed_for(spec.seed, 2, noise_idx, obj_idx, trial))
    atk = replace(cfg.attack or AttackConfig(), objective=objective,
                  seed=_seed_for(spec.seed, 3, noise_idx, obj_idx, trial))
    eps = cfg.regression_epsilon if cfg.regression_epsilon is not None else atk.epsilon
    attacked = replace(cfg, smoothing=smooth, attack=atk, regression_epsilon=eps)
    benign = replace(cfg, smoothing=smooth, attack=None, regression_epsilon=eps)
    out = run_episode(attacked, scene, true_C, cache, sim_cache)
    base = run_episode(benign, scene, true_C, cache, sim_cache)
    row = out.summary()
    row.update({"trial": trial, "victim_label": lab, "benign_V": base.V_commanded,
                "benign_instability": base.instability_metric, "benign_covered": base.covered,
                "benign_certificate": base.summary()["certificate"], "benign_interval": list(base.stiffness_interval_used)})
    return row


def _run_cell(args) -> dict:
    spec, mode, noise_idx, obj_idx = args
    noise = spec.noise_levels[noise_idx]
    objective = Objective(spec.objectives[obj_idx])
    cfg = replace(spec.base, mode=Mode(mode), smoothing=replace(spec.base.smoothing, noise_std=float(noise)))
    cache = _cache_for(cfg)
    sim_cache: dict = {}
    t0 = time.perf_counter()
    trials, errors = [], []
    for t in range(spec.trials):
        try:
            trials.append(_trial(spec, cfg, objective, noise_idx, obj_idx, t, cache, sim_cache))
        except Exception as exc:  # recorded, run continues
            errors.append(f"trial {t}: {type(exc).__name__}: {exc}")
    return {"mode": Mode(mode).value, "noise_std": float(noise), "objective": objective.value, "trials": trials,
            "errors": errors, "seconds": time.perf_counter() - t0}


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def summarize_cell(cell: dict) -> dict:
    tr = cell["trials"]
    radii = [t["certificate"]["radius"] for t in tr if t["certificate"] and t["certificate"]["type"] == "classification"]
    widths = [t["interval"][1] - t["interval"][0] for t in tr]
    return {
        "mode": cell["mode"],
        "noise_std": cell["noise_std"],
        "objective": cell["objective"],
        "trials": len(tr),
        "mean_instability": _mean([t["instability"] for t in tr]),
        "max_instability": max((t["instability"] for t in tr), default=None),
        "capped_episodes": sum(1 for t in tr if t["diverged"]),
        "mean_velocity": _mean([t["V_commanded"] for t in tr]),
        "mean_benign_velocity": _mean([t["benign_V"] for t in tr]),
        "mean_benign_instability": _mean([t["benign_instability"] for t in tr]),
        "coverage_rate": _mean([1.0 if t["covered"] else 0.0 for t in tr]),
        "abstain_rate": _mean([1.0 if t["fallback"] else 0.0 for t in tr]),
        "mean_radius": _mean(radii),
        "mean_interval_width": _mean(widths),
        "mean_delta_norm": _mean([t["delta_norm"] for t in tr]),
        "errors": len(cell["errors"]),
    }


def run_experiment_grid(base: PipelineConfig, trials: int, modes: Sequence = tuple(Mode),
                        noise_levels: Sequence[float] = (0.25, 0.5, 1.0),
                        objectives: Sequence = (Objective.STABILITY, Objective.EFFICIENCY), seed: int = 0,
                        workers: int = 1) -> dict:
    """Every (mode, noise, objective) cell with `trials` attacked/benign episode pairs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    spec = GridSpec(base, tuple(Mode(m).value for m in modes), tuple(float(v) for v in noise_levels),
                    tuple(Objective(o).value for o in objectives), int(trials), int(seed))
    jobs = [(spec, m, i, j) for m in spec.modes for i in range(len(spec.noise_levels))
            for j in range(len(spec.objectives))]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    cells.sort(key=lambda c: (spec.modes.index(c["mode"]), c["noise_std"], spec.objectives.index(c["objective"])))
    timings = {f'{c["mode"]}/{c["noise_std"]}/{c["objective"]}': c.pop("seconds") for c in cells}
    return {"rows": [summarize_cell(c) for c in cells], "cells": cells, "beta": base.beta, "timings": timings}


# settings -> config

def control_from_settings(s: dict) -> ControlSettings:
    v, c, d = s["vehicle"], s["controller"], s["design"]
    return ControlSettings(VehicleParams(v["m"], v["I_z"], v["l_f"], v["l_r"]),
                           RelativePoles(tuple(float(r) for r in c["pole_ratios"])), c["gamma"], c["q_scale"],
                           c["dt"], c["blowup_bound"], tuple(float(x) for x in c["initial_state"]),
                           max(1, int(c["record_every"])), d["V_min"], d["V_max"], d["k_bar"], d["lambda_rho"],
                           d["lambda_gp"])


def road_from_settings(s: dict, C: float = 70_000.0) -> RoadProfile:
    r = s["road"]
    segs = tuple(RoadSegment(float(g["duration"]), float(g.get("C", C)), float(g.get("R", 1e9)))
                 for g in r["segments"])
    return RoadProfile(segs, float(r["curvature_rate_bound"]), float(r["R_min"]))


def scene_from_settings(s: dict) -> SceneModel:
    sc = s["scene"]
    labels = WEATHER if sc["domain"] == "weather" else SURFACE
    return SceneModel(labels, sc["dim"], sc["separation"], sc["cluster_std"], sc["sharpness"], sc["reg_gain"],
                      sc["reg_offset"], sc["reg_noise"])


def config_from_settings(s: dict) -> PipelineConfig:
    table = StiffnessTable({k: tuple(v) for k, v in s["tables"]["stiffness"].items()})
    scene = scene_from_settings(s)
    policy = default_policy(scene.labels, s["tables"]["safe_sets"])
    sm = s["smoothing"]
    smoothing = SmoothingConfig(sm["noise_std"], sm["n0"], sm["n"], sm["alpha"], int(s["seed"]))
    a = s["attack"]
    attack = AttackConfig(a["objective"], a["epsilon"], a["steps"], a["step_size"] or None, int(s["seed"])) \
        if a["enabled"] else None
    beta = s["regression"]["beta"]
    if beta < 0:
        rng = np.random.default_rng(_seed_for(int(s["seed"]), 99))
        beta = estimate_beta(scene, rng, s["scene"]["beta_samples"], s["scene"]["beta_quantile"])
    reg_eps = s["regression"]["epsilon"] if s["regression"]["epsilon"] > 0 else None
    return PipelineConfig(Mode(s["mode"]), smoothing, attack, s["episode_length"], road_from_settings(s), beta,
                          control_from_settings(s), table, policy, scene, reg_eps, s["lane_half_width"],
                          s["instability_cap"])
