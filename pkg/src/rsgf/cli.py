"""Command-line entry point: ``rsgf {flow,train,validate,certify}``.

Each run writes ``manifest.json`` and ``config.json`` into its output
directory next to schema-tagged CSV files. Exit codes: 0 success, 1 a check
failed, 2 usage or config error, 3 run aborted.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .certify import episodes_required, horizon_confidence, margin
from .config import (PRESETS, ConfigError, ExperimentConfig, build_env, build_policy, load_config, preset,
                     _preset_dict)
from .flow import Schedule, get_fixture, integrate, kkt_check, max_stepsize
from .train import TrainingAborted, train
from .validate import FAIL, validate_estimators

__all__ = ["main", "build_parser", "run_flow", "run_train", "run_validate", "run_certify", "DEFAULT_PRESETS"]

log = logging.getLogger("rsgf")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3
DEFAULT_PRESETS = {"flow": "flow-disk", "train": "nav2d-desk", "validate": "validate-tabular",
                   "certify": "certify-example"}


class UsageError(Exception):
    pass


def _versions() -> dict:
    return {"rsgf": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out) if cfg.out else Path("runs") / f"{cfg.mode}-seed{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    return out


def _write_manifest(out: Path, cfg: ExperimentConfig, **extra) -> None:
    manifest = {"format": "rsgf-run/1", "mode": cfg.mode, "seed": cfg.seed, "versions": _versions(),
                "experiment": cfg.to_dict(), **extra}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _write_table(path: Path, schema: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- modes --------------------------------------------------------------------------

def run_flow(cfg: ExperimentConfig) -> int:
    fc = cfg.flow
    try:
        problem = get_fixture(fc.fixture)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    theta0 = np.asarray(fc.theta0, dtype=float)
    if theta0.shape != (problem.dim,):
        raise UsageError(f"flow.theta0 must have {problem.dim} entries")
    h = fc.h
    if h is None:
        cap = max_stepsize(fc.alpha, fc.beta, problem.lipschitz)
        if problem.objective_lipschitz > 0:
            cap = min(cap, 1.0 / problem.objective_lipschitz)
        h = 0.5 * cap
    try:
        schedule = Schedule(fc.schedule, h=h, c=h, alpha=fc.alpha)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _prepare_out(cfg)
    _write_manifest(out, cfg, stepsize=h)
    try:
        trace = integrate(problem, theta0, fc.alpha, fc.beta, schedule, iters=fc.iterations, track_kkt=True)
    except FloatingPointError as exc:
        log.error("flow aborted: %s", exc)
        return EXIT_ABORT
    trace.write_csv(out / "flow.csv")
    if trace.status == "infeasible":
        log.error("flow aborted: infeasible subproblem at iteration %d", trace.stopped_at)
        return EXIT_ABORT
    report = kkt_check(problem, trace.final, fc.tol)
    print(f"fixture        {problem.name}")
    print(f"iterations     {len(trace.directions)}")
    print(f"final theta    {np.array2string(trace.final, precision=8)}")
    print(f"objective      {trace.objective_values[-1]:.10g}")
    print(f"max violation  {trace.max_violation():.3e}")
    print(f"kkt residual   {report.residual:.3e} ({'ok' if report.is_kkt else 'above tolerance'})")
    print(f"output         {out / 'flow.csv'}")
    return EXIT_OK


def run_train(cfg: ExperimentConfig) -> int:
    try:
        env = build_env(cfg.env)
        policy = build_policy(cfg.policy, env)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = _prepare_out(cfg)
    try:
        result = train(cfg.train, env, policy, out_dir=out,
                       manifest_extra={"mode": cfg.mode, "experiment": cfg.to_dict()})
    except TrainingAborted as exc:
        log.error("training aborted: %s", exc)
        return EXIT_ABORT
    rows = result.rows
    first, last = rows[0], rows[-1]
    q = env.n_constraints
    print(f"iterations     {cfg.train.iterations}")
    print(f"v0_hat         {first['v0_hat']:.6g} -> {last['v0_hat']:.6g}")
    for j in range(1, q + 1):
        frac = np.mean([r[f"v{j}_hat"] <= 0 for r in rows])
        print(f"v{j}_hat <= 0    {100 * frac:.1f}% of updates")
    print(f"max |theta|^2  {max(r['theta_norm_sq'] for r in rows):.6g} (C = {cfg.train.bound_C:g})")
    print(f"events         {len(result.events)}")
    print(f"output         {out}")
    return EXIT_OK


def run_validate(cfg: ExperimentConfig) -> int:
    vc = cfg.validate
    out = _prepare_out(cfg)
    _write_manifest(out, cfg)
    results = validate_estimators(
        n_batches=vc.batches, batch_size=vc.batch_size, theta=vc.theta, behavior_theta=vc.behavior_theta,
        clip=None if vc.clip is None else tuple(vc.clip), epsilons=vc.epsilons, horizon=vc.horizon,
        gamma=vc.gamma, seed=cfg.seed, tail_trials=vc.tail_trials, tail_batch_size=vc.tail_batch_size)
    for r in results:
        print(r.line())
    _write_table(out / "validate.csv", "rsgf-validate/1", ["check", "status", "detail"],
                 [[r.name, r.status, r.detail] for r in results])
    return EXIT_FAILED if any(r.status == FAIL for r in results) else EXIT_OK


def run_certify(cfg: ExperimentConfig) -> int:
    cc = cfg.certify
    M = cc.margin
    if M is None:
        needed = {"v_hat": cc.v_hat, "alpha": cc.alpha, "h": cc.h, "beta": cc.beta, "L": cc.L, "r_norm": cc.r_norm}
        missing = [k for k, v in needed.items() if v is None]
        if missing:
            raise UsageError(f"certify needs either margin or all of: {', '.join(missing)}")
        M = margin(cc.v_hat, cc.alpha, cc.h, cc.beta, cc.L, cc.r_norm)
    try:
        req = episodes_required(M, cc.delta, cc.phi, cc.phi_bar, cc.psi, cc.psi_bar, cc.d)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    conf = horizon_confidence(cc.q, cc.horizon, cc.delta)
    table = [("margin", M), ("delta", cc.delta), ("value_threshold", req["value_threshold"])]
    if req.get("gradient_threshold") is not None:
        table.append(("gradient_threshold", req["gradient_threshold"]))
    table += [("episodes_required", req["min_batch"]), ("constraints", cc.q), ("horizon", cc.horizon),
              ("joint_confidence", conf)]
    for name, value in table:
        text = str(value) if isinstance(value, (int, np.integer)) else f"{value:.6g}"
        print(f"{name:20s} {text}")
    out = _prepare_out(cfg)
    _write_manifest(out, cfg)
    _write_table(out / "certify.csv", "rsgf-certify/1", ["quantity", "value"],
                 [[k, v if isinstance(v, (int, np.integer)) else repr(float(v))] for k, v in table])
    return EXIT_OK


RUNNERS = {"flow": run_flow, "train": run_train, "validate": run_validate, "certify": run_certify}


# -- argument handling --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsgf", description="Safe gradient-flow policy optimization runs.")
    parser.add_argument("--version", action="version", version=f"rsgf {__version__}")
    parser.add_argument("--dump-preset", metavar="NAME", help="print a preset config as JSON and exit")
    parser.add_argument("--list-presets", action="store_true", help="list preset names and exit")
    sub = parser.add_subparsers(dest="mode", metavar="MODE")
    helps = {"flow": "integrate the deterministic flow on an analytic fixture",
             "train": "train a policy on a simulated environment",
             "validate": "check estimators against the exact tabular oracle",
             "certify": "evaluate episode counts and confidences for a certified step"}
    for mode, text in helps.items():
        p = sub.add_parser(mode, help=text, description=text)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--config", metavar="PATH", help="JSON config file")
        src.add_argument("--preset", metavar="NAME", help=f"built-in config (default {DEFAULT_PRESETS[mode]})")
        p.add_argument("--seed", type=int, metavar="N", help="override the config seed")
        p.add_argument("--out", metavar="DIR", help="output directory (created if missing)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config:
        try:
            cfg = load_config(args.config, default_mode=args.mode)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    else:
        name = args.preset or DEFAULT_PRESETS[args.mode]
        cfg = preset(name)
    if cfg.mode != args.mode:
        raise ConfigError(f"config mode {cfg.mode!r} does not match subcommand {args.mode!r}")
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def main(argv=None) -> int:
    level = os.environ.get("RSGF_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.list_presets:
        print("\n".join(PRESETS))
        return EXIT_OK
    if args.dump_preset:
        try:
            print(json.dumps(_preset_dict(args.dump_preset), indent=2))
        except ConfigError as exc:
            print(f"rsgf: error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        return EXIT_OK
    if args.mode is None:
        parser.print_usage(sys.stderr)
        print("rsgf: error: a mode is required (flow, train, validate, certify)", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = resolve_config(args)
        return RUNNERS[args.mode](cfg)
    except (ConfigError, UsageError) as exc:
        print(f"rsgf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
