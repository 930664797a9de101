"""Command line entry point: ``deki run | repeat | audit | lowerbound``.

Output goes to ``--out``, else ``$DEKI_OUTPUT_DIR``, else ``./results``.
The exit code is 1 when an audit or a lower-bound trial fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import typing

import numpy as np

from . import bench
from .bench import ExperimentConfig
from .lowerbound import GAP_FLOOR, adversarial_pair
from .models import LinearModel
from .theory import audit_collapse, audit_stability, linearization_bounds, operator_norm, residual_norms

OUTPUT_ENV = "DEKI_OUTPUT_DIR"


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _converter(tp):
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    base = args[0] if args else tp
    if base is bool:
        return _parse_bool
    return base


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    hints = typing.get_type_hints(ExperimentConfig)
    p.add_argument("--config", help="JSON config file (flat key-value)")
    for f in dataclasses.fields(ExperimentConfig):
        if f.name == "schema_version":
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=_converter(hints[f.name]), default=None)


def _config(ns) -> ExperimentConfig:
    d = {}
    if ns.config:
        with open(ns.config) as fh:
            d = json.load(fh)
        ExperimentConfig.from_dict(d)  # reject unknown keys early
    for f in dataclasses.fields(ExperimentConfig):
        v = getattr(ns, f.name, None)
        if v is not None:
            d[f.name] = v
    d.setdefault("schema_version", bench.SCHEMA_VERSION)
    return ExperimentConfig.from_dict(d)


def _outdir(ns) -> str:
    return ns.out or os.environ.get(OUTPUT_ENV) or "results"


def cmd_run(ns) -> int:
    cfg = _config(ns)
    rec = bench.run(cfg)
    csv_path, _ = bench.write_run(rec, _outdir(ns))
    last = rec.rows[-1] if rec.rows else rec.initial
    print(f"{cfg.scheme} seed={rec.seed} steps={rec.n_steps} e_n={last['e_n']:.6g} -> {csv_path}")
    return 0


def cmd_repeat(ns) -> int:
    cfg = _config(ns)
    agg = bench.repeat(cfg, workers=ns.workers)
    csv_path, _ = bench.write_aggregate(agg, cfg, _outdir(ns), stem=f"{cfg.scheme}_aggregate")
    print(
        f"{cfg.scheme} n={len(agg.seeds)} median final e_n={np.median(agg.final):.6g} "
        f"rate={agg.rate_mean:.6g}+-{agg.rate_std:.6g} failed={len(agg.failed)} -> {csv_path}"
    )
    return 0 if not agg.failed else 1


def cmd_audit(ns) -> int:
    cfg = _config(ns).replace(scheme="deki")
    inst = bench.build_problem(cfg, cfg.seed)
    rec = bench.run(cfg, instance=inst, trace=True)
    report = audit_collapse(rec)
    out = {"collapse": json.loads(report.to_json())}
    ok = report.passed
    model = inst.problem.model
    if isinstance(model, LinearModel):
        stack = np.vstack([model.matrix, inst.problem.reg_matrix()])
        M = operator_norm(stack)
        stable = audit_stability(residual_norms(rec), M, cfg.resolved_mean_step)
        out["stability"] = {"M": M, "passed": stable}
        ok = ok and stable
    gamma, M_lin = linearization_bounds(rec)
    out["gamma"], out["M"] = gamma, M_lin
    os.makedirs(_outdir(ns), exist_ok=True)
    path = os.path.join(_outdir(ns), f"audit_seed{cfg.seed}.json")
    with open(path, "w") as fh:
        json.dump(out, fh)
    print(f"audit {'passed' if ok else 'FAILED'} ({len(report.flags)} flags) -> {path}")
    return 0 if ok else 1


def cmd_lowerbound(ns) -> int:
    rng = np.random.default_rng(ns.seed)
    dims = [int(x) for x in ns.dims.split(",")]
    bad = 0
    lines = []
    for t in range(ns.trials):
        d_u = dims[t % len(dims)]
        n = d_u // 2
        d_y = int(rng.integers(1, 2 * d_u + 1))
        U = rng.standard_normal((d_u, n))
        G = rng.standard_normal((d_y, d_u))
        G /= np.linalg.norm(G, 2) * rng.uniform(1.0, 2.0)
        y = rng.standard_normal(d_y)
        pair = adversarial_pair(U, y, G)
        agree = float(np.abs((pair.G0 - pair.GB) @ U).max())
        ok = (
            agree <= 1e-10 * max(1.0, np.abs(U).max())
            and np.linalg.norm(pair.GB, 2) <= 2 + 1e-10
            and pair.gap >= (GAP_FLOOR - 1e-9) * np.linalg.norm(y)
        )
        bad += not ok
        lines.append(json.dumps({"trial": t, "d_u": d_u, "queries": n, "d_y": d_y, "gap": pair.gap,
                                 "y_norm": float(np.linalg.norm(y)), "branch": pair.branch, "ok": bool(ok)}))
    os.makedirs(_outdir(ns), exist_ok=True)
    path = os.path.join(_outdir(ns), "lowerbound.jsonl")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"{ns.trials - bad}/{ns.trials} trials passed -> {path}")
    return 0 if bad == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deki", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, helptext in (
        ("run", cmd_run, "one seeded run; writes CSV and JSON"),
        ("repeat", cmd_repeat, "n_rep seeds; writes per-step mean/std"),
        ("audit", cmd_audit, "DEKI run with collapse and stability audits"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_config_flags(p)
        p.add_argument("--out", default=None)
        if name == "repeat":
            p.add_argument("--workers", type=int, default=1, help="worker processes")
        p.set_defaults(fn=fn)
    p = sub.add_parser("lowerbound", help="random adversarial-pair trials")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--dims", default="4,20,50")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_lowerbound)
    return parser


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        return ns.fn(ns)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
