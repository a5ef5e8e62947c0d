"""Velocity / filter-bandwidth design: largest V with ||G||_1 <= lambda over the stiffness interval."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .controller import (NominalModel, StiffnessInterval, build_nominal, l1_norm_G, uncertainty_bounds)
from .dynamics import VehicleParams

DEFAULT_POLE_RATIOS = (-0.06, -0.07, -0.2, -9.0)


@dataclass(frozen=True)
class RelativePoles:
    """Pole targets expressed as multiples of the open-loop lateral rate 4*C_hat/(m*V).

    Scaling the targets this way keeps the closed-loop shape similar across speeds
    and stiffness levels, so the L1 constraint grades with V and interval width.
    """
    ratios: tuple = DEFAULT_POLE_RATIOS

    def resolve(self, params: VehicleParams, C_hat: float, V: float) -> list:
        rate = 4.0 * C_hat / (params.m * V)
        return [complex(r) * rate for r in self.ratios]


def resolve_poles(pole_targets, params, C_hat, V):
    if isinstance(pole_targets, RelativePoles):
        return pole_targets.resolve(params, C_hat, V)
    return list(pole_targets)


@dataclass(frozen=True)
class DesignResult:
    V_star: float
    k_star: float
    l1_norm_G: float
    feasible: bool
    degenerate: bool = False
    lambda_gp: float = math.nan
    L: float = math.nan
    nominal: NominalModel | None = None


def _omega_points(omega: tuple) -> tuple:
    return (omega[0], 0.5 * (omega[0] + omega[1]), omega[1])


class _Evaluator:
    def __init__(self, params, interval, pole_targets, R_lo, Rdot_bound):
        self.params = params
        self.interval = interval
        self.poles = pole_targets
        self.R_lo = R_lo
        self.Rdot = Rdot_bound
        self._cache = {}

    def at(self, V: float):
        if V not in self._cache:
            nom = build_nominal(self.params, self.interval.nominal, V,
                                resolve_poles(self.poles, self.params, self.interval.nominal, V))
            bnd = uncertainty_bounds(self.params, self.interval, V, self.R_lo, self.Rdot, nom.k_m)
            self._cache[V] = (nom, bnd)
        return self._cache[V]

    def worst_G(self, V: float, k: float) -> float:
        nom, bnd = self.at(V)
        return max(l1_norm_G(nom, k, w) for w in _omega_points(bnd.omega))

    def L(self, V: float) -> float:
        return self.at(V)[1].theta_l1_max

    def feasible(self, V: float, lam: float, k_bar: float) -> bool:
        if lam * self.L(V) >= 1.0:
            return False
        return self.worst_G(V, k_bar) <= lam


def max_theta_l1(params: VehicleParams, interval: StiffnessInterval, V_min: float, V_max: float,
                 pole_targets, n_grid: int = 36, R_lo: float = 100.0, Rdot_bound: float = 0.0) -> float:
    ev = _Evaluator(params, interval, pole_targets, R_lo, Rdot_bound)
    return max(ev.L(float(V)) for V in np.linspace(max(V_min, 1e-3), V_max, n_grid))


def admissible_lambda(params, interval, V_min, V_max, pole_targets, rho: float = 0.9, n_grid: int = 36) -> float:
    """lambda = rho / max_V L(V), so lambda * L(V) < 1 at every candidate speed.

    With no parametric uncertainty L is 0 and any lambda works; rho itself is used.
    """
    L = max_theta_l1(params, interval, V_min, V_max, pole_targets, n_grid)
    return rho / L if L > 0 else rho


def smallest_gain(ev: _Evaluator, V: float, lam: float, k_bar: float, rel_tol: float = 1e-3) -> float:
    """Smallest k <= k_bar (to rel_tol, rounded up) with worst-case ||G||_1 <= lam."""
    lo, hi = k_bar * 1e-8, k_bar
    if ev.worst_G(V, lo) <= lam:
        return lo
    while hi / lo > 1 + rel_tol:
        mid = math.sqrt(lo * hi)
        if ev.worst_G(V, mid) <= lam:
            hi = mid
        else:
            lo = mid
    return hi


def design_parameters(params: VehicleParams, interval: StiffnessInterval, V_min: float, V_max: float,
                      lambda_gp: float, k_bar: float, pole_targets, R_lo: float = 100.0,
                      Rdot_bound: float = 0.0, v_tol: float = 0.01) -> DesignResult:
    if not 0 <= V_min <= V_max:
        raise ValueError("need 0 <= V_min <= V_max")
    if not (lambda_gp > 0 and k_bar > 0):
        raise ValueError("lambda_gp and k_bar must be positive")
    ev = _Evaluator(params, interval, pole_targets, R_lo, Rdot_bound)
    lo = max(V_min, 1e-3)
    stopped = DesignResult(0.0, 0.0, 0.0, True, True, lambda_gp, math.nan, None)
    if ev.feasible(V_max, lambda_gp, k_bar):
        best = V_max
    elif not ev.feasible(lo, lambda_gp, k_bar):
        return stopped
    else:
        hi = V_max
        while hi - lo > v_tol:
            mid = 0.5 * (lo + hi)
            if ev.feasible(mid, lambda_gp, k_bar):
                lo = mid
            else:
                hi = mid
        best = lo
    k = smallest_gain(ev, best, lambda_gp, k_bar)
    nom, _ = ev.at(best)
    return DesignResult(float(best), float(k), float(ev.worst_G(best, k)), True, False, lambda_gp, ev.L(best), nom)


def grid_scan(params, interval, V_min, V_max, lambda_gp, k_bar, pole_targets, step: float = 0.1,
              R_lo: float = 100.0, Rdot_bound: float = 0.0) -> float:
    """Largest feasible V on a uniform grid (0 if none); reference for the bisection."""
    ev = _Evaluator(params, interval, pole_targets, R_lo, Rdot_bound)
    best = 0.0
    for V in np.arange(max(V_min, 1e-3), V_max + 1e-9, step):
        if ev.feasible(float(V), lambda_gp, k_bar):
            best = float(V)
    return best


def feasibility_profile(params, interval, V_values, lambda_gp, k_bar, pole_targets, R_lo=100.0, Rdot_bound=0.0):
    ev = _Evaluator(params, interval, pole_targets, R_lo, Rdot_bound)
    return [ev.feasible(float(V), lambda_gp, k_bar) for V in V_values]


def recheck(params, interval, result: DesignResult, pole_targets, k_bar: float, R_lo=100.0,
            Rdot_bound=0.0) -> dict:
    """Independently re-evaluate a design's declared constraints."""
    if result.degenerate:
        return {"ok": result.V_star == 0.0}
    ev = _Evaluator(params, interval, pole_targets, R_lo, Rdot_bound)
    g = ev.worst_G(result.V_star, result.k_star)
    L = ev.L(result.V_star)
    ok = g <= result.lambda_gp * (1 + 1e-9) and result.k_star <= k_bar and result.lambda_gp * L < 1
    return {"ok": ok, "G": g, "L": L}
