"""Command-line entry point: experiment dispatch, certificates, curves.

Exit codes: 0 on success (verdict PASS where applicable), 2 on a FAIL
verdict or invalid certificate, 1 on configuration or I/O errors, which
are reported as a single line prefixed ``ERR:``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import calibration as calib
from .core import FiniteSupportModel, LabelSpace, TaskLoss
from .experiments import EXPERIMENTS, ConfigError, run_experiment, validate_config
from .surrogate import (
    MarginLoss,
    StructuredHinge,
    bipartite_hinge,
    check_certificate,
    make_cert_bipartite,
    make_cert_margin,
    make_cert_structured,
    margin_by_name,
)

DESCRIPTIONS = {
    "E1": "ranking cycle degeneracy: convex pairwise surrogates misorder perturbed targets",
    "E2": "ranking consistency: squared loss on frequency aggregates recovers the target ordering",
    "E3": "binary linear fit nearly orthogonal to the signal; majority vote realigns it",
    "E4": "comparison inequality sweep over random hypotheses, label counts, and class counts",
    "E5": "misspecified multiclass link: direction error shrinks under aggregation",
    "E6": "bipartite matching certificates and comparison checks",
    "E7": "nearest-neighbor aggregation drives disagreement with the optimal label to zero",
}


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.12g}"
    return str(x)


def write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(c) for c in row) + "\n")


def _out_dir(args) -> str:
    if args.out:
        return args.out
    return os.environ.get("AGG_LAB_OUT", "out")


def _load_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def cmd_run(args) -> int:
    cfg = _load_json(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.mc_trials:
        for key in ("trials", "n_trials"):
            if key in SCHED(cfg):
                cfg[key] = args.mc_trials
    cfg = validate_config(cfg)
    report = run_experiment(cfg)

    base = os.path.join(_out_dir(args), report.experiment)
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime()) + f"{time.time() % 1:.6f}"[1:]
    run_dir = os.path.join(base, stamp)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "report.txt"), "w") as fh:
        fh.write(report.summary())
    for name, (header, rows) in report.tables.items():
        write_csv(os.path.join(run_dir, f"{name}.csv"), header, rows)
    with open(os.path.join(base, "LATEST"), "w") as fh:
        fh.write(stamp + "\n")

    print(f"{report.experiment}: {report.verdict} (outputs in {run_dir})")
    return 0 if report.verdict == "PASS" else 2


def SCHED(cfg):
    """Fields of the target experiment schema (helper for overrides)."""
    from .experiments import SCHEMAS

    exp = cfg.get("experiment")
    return SCHEMAS.get(exp, {})


def cmd_validate(args) -> int:
    cfg = validate_config(_load_json(args.config))
    print(json.dumps(cfg, indent=2, sort_keys=True, default=str))
    return 0


def cmd_list(args) -> int:
    for exp in EXPERIMENTS:
        print(f"{exp}: {DESCRIPTIONS[exp]}")
    return 0


def _build_cert(spec_cfg: dict):
    kind = spec_cfg.get("kind")
    if kind == "margin":
        phi0 = margin_by_name(spec_cfg.get("phi0", "hinge"), spec_cfg.get("step_delta", 0.5))
        delta = float(spec_cfg.get("delta", 1.0))
        return MarginLoss(phi0), make_cert_margin(phi0, delta)
    if kind == "bipartite":
        N = int(spec_cfg["N"])
        return bipartite_hinge(N), make_cert_bipartite(N)
    if kind == "structured":
        k = int(spec_cfg["k"])
        loss = TaskLoss.zero_one(LabelSpace.plain(k))
        table = np.asarray(spec_cfg.get("embedding", np.eye(k)), dtype=float)
        return StructuredHinge(table, loss), make_cert_structured(table, loss)
    raise ConfigError(f"unknown certificate kind {kind!r}")


def cmd_cert(args) -> int:
    spec, cert = _build_cert(_load_json(args.spec))
    report = check_certificate(spec, cert)
    print(
        f"c1={_fmt(cert.c1)} c2={_fmt(cert.c2)} valid={'true' if report.valid else 'false'}"
    )
    print(
        f"worst_slack_1={_fmt(report.worst_slack_1)} worst_slack_2={_fmt(report.worst_slack_2)}"
    )
    return 0 if report.valid else 2


CALIB_SCENARIOS = ("binary-margin", "multiclass", "bipartite")


def _calib_setup(args):
    from .surrogate import HingeMargin

    if args.scenario == "binary-margin":
        spec = MarginLoss(HingeMargin())
        cert = make_cert_margin(HingeMargin(), 1.0)
        space = LabelSpace.plain(2)
        probs = [[args.p, 1 - args.p], [0.6, 0.4]]
        model = FiniteSupportModel(space, [0.5, 0.5], probs)
        loss = TaskLoss.zero_one(space)
    elif args.scenario == "multiclass":
        k = args.k
        space = LabelSpace.plain(k)
        loss = TaskLoss.zero_one(space)
        spec = StructuredHinge(np.eye(k), loss)
        cert = make_cert_structured(np.eye(k), loss)
        base = np.full(k, (1 - args.p) / (k - 1))
        base[0] = args.p
        model = FiniteSupportModel(space, [1.0], [base])
    elif args.scenario == "bipartite":
        from .scenarios import bipartite_noise_model

        N = args.N
        model = bipartite_noise_model(N, 0.3)
        loss = TaskLoss.matching_hamming(N)
        spec = bipartite_hinge(N)
        cert = make_cert_bipartite(N)
    else:
        raise ConfigError(f"unknown scenario {args.scenario!r}")
    return spec, cert, model, loss


def cmd_calib(args) -> int:
    spec, cert, model, loss = _calib_setup(args)
    agg = calib.MajorityVoteAggregator(loss, cert)
    eps_grid = np.linspace(0.0, 1.0, args.eps_points)
    curve = calib.calibration_curve(spec, agg, model, args.m, x_id=None, eps_grid=eps_grid)
    header = ["x_id", "epsilon", "psi_raw", "psi_convex"]
    rows = list(curve.csv_rows())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, f"calib_{args.scenario}_m{args.m}.csv")
        write_csv(path, header, rows)
        print(f"wrote {path}")
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(_fmt(c) for c in row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agglab", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="override the config seed (default 42)")
    parser.add_argument("--out", type=str, default=None, help="output directory (or $AGG_LAB_OUT)")
    parser.add_argument("--threads", type=int, default=None, help="worker threads; results are thread-count invariant")
    parser.add_argument("--mc-trials", type=int, default=0, help="override Monte Carlo trial counts")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.set_defaults(fn=cmd_run)

    p_val = sub.add_parser("validate", help="schema-check a config and print it resolved")
    p_val.add_argument("config")
    p_val.set_defaults(fn=cmd_validate)

    p_list = sub.add_parser("list", help="list available experiments")
    p_list.set_defaults(fn=cmd_list)

    p_cert = sub.add_parser("cert", help="build and check an identifiability certificate")
    p_cert.add_argument("spec")
    p_cert.set_defaults(fn=cmd_cert)

    p_cal = sub.add_parser("calib", help="emit a calibration curve as CSV")
    p_cal.add_argument("scenario", choices=CALIB_SCENARIOS)
    p_cal.add_argument("--m", type=int, default=1)
    p_cal.add_argument("--p", type=float, default=0.75)
    p_cal.add_argument("--k", type=int, default=3)
    p_cal.add_argument("--N", type=int, default=2)
    p_cal.add_argument("--eps-points", type=int, default=101)
    p_cal.set_defaults(fn=cmd_calib)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"ERR: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
