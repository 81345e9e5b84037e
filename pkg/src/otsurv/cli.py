"""Command-line surface.

Subcommands: gen-synth, solve, train, ablate, km, bench.  Config values
come from defaults, then an optional JSON config file, then CLI flags
(last wins).  Relative output paths are resolved under $OTSURV_OUT_ROOT
when it is set.

Exit codes: 0 success, 2 parse/config, 3 data, 4 solver, 5 numeric.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bags, survival, train as training
from .config import ExperimentConfig, load_config, merge_overrides
from .errors import (ConfigError, ConstraintError, DataError, FormatError,
                     NumericError, OtsurvError, ParameterError, SolverError)
from .microbatch import OTSettings, solve_batch

EXIT_PARSE = 2
EXIT_DATA = 3
EXIT_SOLVER = 4
EXIT_NUMERIC = 5


def _exit_code(exc: OtsurvError) -> int:
    if isinstance(exc, (ConfigError, ParameterError, FormatError)):
        return EXIT_PARSE
    if isinstance(exc, (SolverError, ConstraintError)):
        return EXIT_SOLVER
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, DataError):
        return EXIT_DATA
    return EXIT_DATA


def _out_path(raw: str) -> Path:
    path = Path(raw)
    root = os.environ.get("OTSURV_OUT_ROOT")
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _load_effective_config(args) -> ExperimentConfig:
    config = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {
        name: getattr(args, name, None)
        for name in ("seed", "folds", "micro_batch", "epsilon", "tau", "epochs",
                     "lr", "weight_decay", "grad_accum_steps", "bins",
                     "attention_mode", "cost_metric", "normalize_cost")
    }
    return merge_overrides(config, overrides)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--micro-batch", dest="micro_batch", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--grad-accum-steps", dest="grad_accum_steps", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--attention-mode", dest="attention_mode",
                   choices=("umbot", "emd", "dense"))
    p.add_argument("--cost-metric", dest="cost_metric",
                   choices=("l2", "squared_l2", "cosine_distance"))
    p.add_argument("--normalize-cost", dest="normalize_cost",
                   action=argparse.BooleanOptionalAction)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otsurv",
        description="Transport-based co-attention survival pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic multimodal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-cases", type=int, default=50)
    p.add_argument("--m-p", type=int, default=48, help="pathology instances per case")
    p.add_argument("--m-g", type=int, default=6, help="genomic categories")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--signal-fraction", type=float, default=0.5)
    p.add_argument("--noise-scale", type=float, default=0.25)
    p.add_argument("--censor-rate", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("solve", help="stand-alone transport solve on two bag CSVs")
    p.add_argument("--source", required=True, help="source bag CSV")
    p.add_argument("--target", required=True, help="target bag CSV")
    p.add_argument("--solver", choices=("emd", "sinkhorn", "uot"), default="uot")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--metric", choices=("l2", "squared_l2", "cosine_distance"),
                   default="l2")
    p.add_argument("--normalize-cost", dest="normalize_cost", default=True,
                   action=argparse.BooleanOptionalAction)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="k-fold cross-validated training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="micro-batch size x attention mode sweep")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m-values", default="64,128,256",
                   help="comma-separated micro-batch sizes")
    p.add_argument("--modes", default="umbot",
                   help="comma-separated attention modes")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("km", help="Kaplan-Meier curves + log-rank from risk scores")
    p.add_argument("--risks", required=True, help="CSV with case_id,risk columns")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_km)

    p = sub.add_parser("bench", help="solver wall-clock scaling over bag sizes")
    p.add_argument("--m-values", dest="M_values", default="2048,4096,8192",
                   help="comma-separated bag sizes")
    p.add_argument("--m", type=int, default=256, help="micro-batch size")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def cmd_gen_synth(args) -> int:
    out = _out_path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory not writable: {out} ({exc})", file=sys.stderr)
        return EXIT_DATA
    manifest = bags.generate_synthetic_dataset(
        n_cases=args.n_cases, M_p=args.m_p, M_g=args.m_g, d=args.dim,
        signal_fraction=args.signal_fraction, noise_scale=args.noise_scale,
        censor_rate=args.censor_rate, seed=args.seed, output_dir=out)
    print(out / "manifest.json")
    return 0 if manifest else EXIT_DATA


def cmd_solve(args) -> int:
    source = bags.load_bag(args.source, "csv", "pathology")
    target = bags.load_bag(args.target, "csv", "genomic")
    settings = OTSettings(epsilon=args.epsilon, tau=args.tau, metric=args.metric,
                          normalize=args.normalize_cost, solver=args.solver)
    plan = solve_batch(source.features, target.features, settings)
    from .transport import write_plan

    coupling_path, json_path = write_plan(plan, _out_path(args.out_prefix),
                                          solver=args.solver)
    print(coupling_path)
    print(json_path)
    return 0


def cmd_train(args) -> int:
    config = _load_effective_config(args)
    manifest = bags.load_manifest(args.manifest)
    cases = training.load_cases(manifest)
    out = _out_path(args.out)
    report = training.cross_validate(cases, config, out)
    print(f"c-index: {report['c_index_mean']:.4f} +/- {report['c_index_std']:.4f} "
          f"({config.folds} folds)")
    print(out / "metrics.json")
    return 0


def cmd_ablate(args) -> int:
    config = _load_effective_config(args)
    manifest = bags.load_manifest(args.manifest)
    cases = training.load_cases(manifest)
    m_values = [int(x) for x in args.m_values.split(",") if x]
    modes = [x.strip() for x in args.modes.split(",") if x.strip()]
    for mode in modes:
        if mode not in ("umbot", "emd", "dense"):
            raise ParameterError(f"unknown attention mode {mode!r}")
    out = _out_path(args.out)
    training.ablation_sweep(cases, config, m_values, modes, out)
    print(out / "ablation.csv")
    return 0


def cmd_km(args) -> int:
    manifest = bags.load_manifest(args.manifest, validate=False)
    risks_by_id: dict[str, float] = {}
    with open(args.risks, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        try:
            id_col, risk_col = header.index("case_id"), header.index("risk")
        except ValueError as exc:
            raise FormatError(f"{args.risks}: need case_id and risk columns") from exc
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) < len(header):
                continue
            risks_by_id[parts[id_col]] = float(parts[risk_col])
    missing = [c.case_id for c in manifest.cases if c.case_id not in risks_by_id]
    if missing:
        raise DataError(f"risk file misses manifest case ids: {', '.join(missing[:5])}"
                        + (" ..." if len(missing) > 5 else ""))
    records = [bags.SurvivalRecord(c.time_months, c.censor) for c in manifest.cases]
    risks = np.array([risks_by_id[c.case_id] for c in manifest.cases])
    low, high = survival.median_split(risks)
    rec_low = [records[i] for i in low]
    rec_high = [records[i] for i in high]
    result = survival.logrank(rec_low, rec_high)
    curves = {"low": survival.km_estimate(rec_low),
              "high": survival.km_estimate(rec_high)}
    for path in survival.write_km_outputs(curves, result, _out_path(args.out_prefix)):
        print(path)
    return 0


def cmd_bench(args) -> int:
    M_values = [int(x) for x in args.M_values.split(",") if x]
    rows = training.bench_solves(M_values, args.m, args.dim)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("M,seconds,instances_per_second\n")
        for M, secs, ips in rows:
            fh.write(f"{M},{secs:.6g},{ips:.6g}\n")
    print(out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OtsurvError as exc:
        print(json.dumps({"error_class": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return _exit_code(exc)
    except OSError as exc:
        print(json.dumps({"error_class": "OSError", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
