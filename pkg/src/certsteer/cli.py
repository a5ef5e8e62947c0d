"""Command line: certify, simulate, attack, experiment, report.

Exit codes: 0 ok, 1 usage/config error, 2 ABSTAIN, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import MANIFEST_NAME, atomic_write_text, build_manifest, write_csv, write_json
from .config import ConfigError, load_settings
from .controller import TRAJECTORY_COLUMNS, StiffnessInterval, make_setup, simulate
from .perception import Objective, StiffnessScore, pgd_attack
from .pipeline import DesignCache, Mode, config_from_settings, instability_metric, run_experiment_grid
from .smoothing import InsufficientSamples, certified_interval, certify_safe_set

EXIT_OK, EXIT_CONFIG, EXIT_ABSTAIN, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; 2 is reserved for ABSTAIN here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--mode", type=str.upper, choices=[m.value for m in Mode])
    p.add_argument("--epsilon", type=float, help="attack budget (l2)")
    p.add_argument("--noise-std", type=float, help="smoothing noise std")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="certsteer", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"certsteer {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    c = sub.add_parser("certify", help="certify one scene")
    _common(c)
    c.add_argument("--label", help="scene label (centroid of that class)")
    c.add_argument("--position", type=float, help="place the scene at this coordinate along the class axis")
    c.add_argument("--features", help="comma-separated feature vector")
    s = sub.add_parser("simulate", help="one closed-loop episode to CSV")
    _common(s)
    s.add_argument("--interval", help="C_lo,C_hi used for the controller design")
    s.add_argument("--true-c", type=float, help="true stiffness of the plant")
    a = sub.add_parser("attack", help="PGD against the perception model")
    _common(a)
    a.add_argument("--label")
    a.add_argument("--objective", type=str.upper, choices=[o.value for o in Objective])
    e = sub.add_parser("experiment", help="full mode x noise x objective grid")
    _common(e)
    e.add_argument("--trials", type=int)
    r = sub.add_parser("report", help="summarize an experiment directory")
    r.add_argument("--out-dir", default="out")
    return ap


def _settings(args) -> dict:
    overrides = {
        "seed": args.seed,
        "out_dir": args.out_dir,
        "experiment.workers": args.workers,
        "mode": args.mode,
        "attack.epsilon": args.epsilon,
        "smoothing.noise_std": args.noise_std,
    }
    if getattr(args, "trials", None) is not None:
        overrides["experiment.trials"] = args.trials
    if getattr(args, "label", None) is not None:
        overrides["certify.label"] = args.label
    if getattr(args, "position", None) is not None:
        overrides["certify.position"] = args.position
    if getattr(args, "features", None) is not None:
        overrides["certify.features"] = args.features
    if getattr(args, "objective", None) is not None:
        overrides["attack.objective"] = args.objective
    if getattr(args, "interval", None) is not None:
        overrides["simulate.interval"] = args.interval
    if getattr(args, "true_c", None) is not None:
        overrides["simulate.true_C"] = args.true_c
    return load_settings(args.config, overrides=overrides)


def _scene(settings, cfg, regression: bool):
    spec = settings["certify"]
    if spec["features"]:
        x = np.asarray(spec["features"], dtype=float)
        if x.size != cfg.scene.dim:
            raise ConfigError(f"certify.features has {x.size} entries, scene.dim is {cfg.scene.dim}")
        return x, None
    label = spec["label"]
    if label not in cfg.scene.labels:
        raise ConfigError(f"certify.label: unknown label {label!r} (known: {', '.join(cfg.scene.labels)})")
    if regression:
        C = float(np.mean(cfg.table.rows[label]))
        x = np.zeros(cfg.scene.dim)
        x[0] = (C - cfg.scene.reg_offset) / cfg.scene.reg_gain
        return x, label
    x = cfg.scene.centroids(cfg.table)[label].copy()
    if spec["position"] >= 0:
        x[0] = spec["position"]
    return x, label


def _finish(out_dir: Path, command: str, settings: dict, outputs: list, extra=None):
    write_json(out_dir / MANIFEST_NAME, build_manifest(command, settings, outputs, extra))


def cmd_certify(settings: dict) -> int:
    cfg = config_from_settings(settings)
    out_dir = Path(settings["out_dir"])
    regression = not cfg.mode.is_classification
    x, label = _scene(settings, cfg, regression)
    sm = cfg.smoothing
    report = {"manifest": MANIFEST_NAME, "mode": cfg.mode.value, "scene_label": label, "features": x.tolist(),
              "noise_std": sm.noise_std, "n0": sm.n0, "n": sm.n, "alpha": sm.alpha, "seed": sm.seed}
    code = EXIT_OK
    if regression:
        eps = cfg.certify_epsilon
        try:
            ci = certified_interval(cfg.scene.regressor(), x, sm, eps, cfg.beta)
        except InsufficientSamples as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        report.update({"median": ci.median, "lower": ci.lower, "upper": ci.upper, "epsilon": ci.epsilon,
                       "p_lo": ci.p_lo, "p_hi": ci.p_hi, "beta": ci.beta})
        print(f"median {ci.median:.1f}  certified interval [{ci.lower:.1f}, {ci.upper:.1f}]  "
              f"epsilon={eps:g} beta={ci.beta:.1f}")
    else:
        cert = certify_safe_set(cfg.scene.classifier(cfg.table), x, cfg.policy, sm)
        report.update({"predicted_label": cert.predicted_label, "abstain": cert.abstained,
                       "certified_radius": None if cert.abstained else cert.radius,
                       "p_safe_lower": cert.p_safe_lower, "p_unsafe_upper": cert.p_unsafe_upper,
                       "safe_set": sorted(cfg.policy.safe_sets[cert.predicted_label])})
        if cert.abstained:
            print(f"ABSTAIN (top label {cert.predicted_label}, p_safe_lower={cert.p_safe_lower:.4f})")
            code = EXIT_ABSTAIN
        else:
            print(f"label {cert.predicted_label}  radius {cert.radius:.4f}  p_safe_lower={cert.p_safe_lower:.4f}")
    print(f"noise_std={sm.noise_std:g} n0={sm.n0} n={sm.n} alpha={sm.alpha:g} seed={sm.seed}")
    path = write_json(out_dir / "certificate.json", report)
    _finish(out_dir, "certify", settings, [path])
    return code


def _parse_interval(raw) -> StiffnessInterval:
    vals = [float(v) for v in raw]
    if len(vals) != 2:
        raise ConfigError("simulate.interval needs exactly two numbers")
    try:
        return StiffnessInterval(*vals)
    except ValueError as exc:
        raise ConfigError(f"simulate.interval: {exc}") from None


def cmd_simulate(settings: dict) -> int:
    cfg = config_from_settings(settings)
    out_dir = Path(settings["out_dir"])
    interval = _parse_interval(settings["simulate"]["interval"])
    true_C = float(settings["simulate"]["true_C"])
    design = DesignCache(cfg.control, cfg.road.R_min, cfg.road.curvature_rate_bound).get(interval)
    footer = {"interval": f"{interval.lower:g};{interval.upper:g}", "true_C": f"{true_C:g}",
              "V_star": f"{design.V_star:.6g}", "k_star": f"{design.k_star:.6g}"}
    path = out_dir / "trajectory.csv"
    if design.degenerate:
        footer.update({"degenerate": "true", "diverged": "false"})
        s0 = cfg.control.s0
        write_csv(path, TRAJECTORY_COLUMNS, [(0.0, *s0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)], footer)
        print("design infeasible above V_min: vehicle stopped")
    else:
        c = cfg.control
        setup = make_setup(c.params, design.nominal, interval, design.k_star, c.gamma, cfg.road.R_min,
                           cfg.road.curvature_rate_bound, c.q_scale)
        res = simulate(setup, cfg.road.with_stiffness(true_C), length=cfg.episode_length, dt=c.dt, s0=c.s0,
                       record_every=c.record_every, blowup_bound=c.blowup_bound)
        final = abs(res.states[-1, 0]) if len(res.states) else float("nan")
        metric = instability_metric(res, cfg.lane_half_width, cfg.instability_cap)
        footer.update({"diverged": str(res.diverged).lower(), "final_abs_s1": f"{final:.6g}",
                       "below_threshold": str(metric < 1.0).lower(), "instability": f"{metric:.6g}"})
        write_csv(path, TRAJECTORY_COLUMNS, res.rows(), footer)
        print(f"V*={design.V_star:.2f} k*={design.k_star:.4g} instability={metric:.3f} diverged={res.diverged}")
    _finish(out_dir, "simulate", settings, [path])
    return EXIT_OK


def cmd_attack(settings: dict) -> int:
    cfg = config_from_settings(settings)
    if cfg.attack is None:
        raise ConfigError("attack.enabled is false")
    out_dir = Path(settings["out_dir"])
    regression = not cfg.mode.is_classification
    x, label = _scene(settings, cfg, regression)
    target = cfg.scene.regressor() if regression else StiffnessScore(cfg.scene.classifier(cfg.table), cfg.table)
    delta = pgd_attack(target, x, cfg.attack)
    rep = {"manifest": MANIFEST_NAME, "mode": cfg.mode.value, "objective": cfg.attack.objective.value,
           "epsilon": cfg.attack.epsilon, "delta": delta.tolist(), "delta_norm": float(np.linalg.norm(delta)),
           "objective_before": float(target(x)), "objective_after": float(target(x + delta))}
    if not regression:
        clf = cfg.scene.classifier(cfg.table)
        rep.update({"label_before": clf(x), "label_after": clf(x + delta)})
        print(f"{clf(x)} -> {clf(x + delta)}  |delta|={rep['delta_norm']:.4f}")
    else:
        print(f"{rep['objective_before']:.1f} -> {rep['objective_after']:.1f}  |delta|={rep['delta_norm']:.4f}")
    path = write_json(out_dir / "attack.json", rep)
    _finish(out_dir, "attack", settings, [path])
    return EXIT_OK


ROW_COLUMNS = ("mode", "noise_std", "objective", "trials", "mean_instability", "max_instability", "capped_episodes",
               "mean_velocity", "mean_benign_velocity", "mean_benign_instability", "coverage_rate", "abstain_rate",
               "mean_radius", "mean_interval_width", "mean_delta_norm", "errors")


def summary_table(rows) -> str:
    head = ("mode", "noise", "objective", "instab", "V", "V_benign", "covered", "abstain")
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    f = lambda v, p=2: "-" if v is None else f"{v:.{p}f}"
    for r in rows:
        lines.append(f"| {r['mode']} | {r['noise_std']:g} | {r['objective']} | {f(r['mean_instability'])} | "
                     f"{f(r['mean_velocity'])} | {f(r['mean_benign_velocity'])} | {f(r['coverage_rate'])} | "
                     f"{f(r['abstain_rate'])} |")
    return "\n".join(lines)


def cmd_experiment(settings: dict) -> int:
    cfg = config_from_settings(settings)
    ex = settings["experiment"]
    out_dir = Path(settings["out_dir"])
    res = run_experiment_grid(cfg, ex["trials"], ex["modes"], ex["noise_levels"], ex["objectives"],
                              int(settings["seed"]), ex["workers"])
    doc = {"schema_version": "1", "manifest": MANIFEST_NAME, "beta": res["beta"], "rows": res["rows"],
           "cells": res["cells"]}
    jpath = write_json(out_dir / "results.json", doc)
    cpath = write_csv(out_dir / "results.csv", ROW_COLUMNS, [[r[k] for k in ROW_COLUMNS] for r in res["rows"]])
    _finish(out_dir, "experiment", settings, [jpath, cpath], {"timings_seconds": res["timings"]})
    print(summary_table(res["rows"]))
    errs = sum(len(c["errors"]) for c in res["cells"])
    if errs:
        print(f"{errs} trial(s) failed; see results.json", file=sys.stderr)
    return EXIT_OK


def cmd_report(out_dir: str) -> int:
    path = Path(out_dir) / "results.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        print(f"error: {path} not found (run the experiment command first)", file=sys.stderr)
        return EXIT_CONFIG
    text = "# Experiment summary\n\n" + summary_table(doc["rows"]) + f"\n\nbeta = {doc['beta']:.1f}\n"
    atomic_write_text(Path(out_dir) / "report.md", text)
    print(text)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.out_dir)
        settings = _settings(args)
        return {"certify": cmd_certify, "simulate": cmd_simulate, "attack": cmd_attack,
                "experiment": cmd_experiment}[args.command](settings)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        raise
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
