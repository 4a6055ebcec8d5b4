"""Command line entry point: ``kan-symreg <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import harness as H
from .data import DataError, HeatGenConfig, generate_heat
from .metrics import METRIC_FIELDS

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _generate(args) -> int:
    table = generate_heat(HeatGenConfig(n_samples=args.n, seed=args.seed, conductivity=args.conductivity))
    table.to_csv(args.out)
    print(f"wrote {table.values.shape[0]} rows to {args.out} ({table.resamples} resamples)")
    return EXIT_OK


def _tune(args) -> int:
    cfg = H.load_config(args.config)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    best, trials = H.tune(cfg, args.max_evals, log_path=out / "trials.jsonl")
    (out / "best_trial.json").write_text(json.dumps(asdict(best), indent=1))
    skipped = sum(t.status != "ok" for t in trials)
    print(f"{len(trials)} trials ({skipped} skipped); best #{best.index} objective {best.objective:.5f}")
    print(json.dumps(best.params))
    return EXIT_OK


def _train(args) -> int:
    bundle = H.run_pipeline(H.load_config(args.config))
    print(f"bundle written to {bundle}")
    print((bundle / H.EQUATIONS).read_text(), end="")
    return EXIT_OK


def _evaluate(args) -> int:
    for model, rows in H.evaluate_bundle(args.bundle).items():
        for r in rows:
            vals = "  ".join(f"{f}={getattr(r, f):.6g}" for f in METRIC_FIELDS)
            print(f"{model:10s} {r.output:10s} {vals}")
    return EXIT_OK


def _explain(args) -> int:
    info = H.explain_bundle(args.bundle)
    for model, ranks in info["rankings"].items():
        for output, feats in ranks.items():
            print(f"{model} {output}: {', '.join(feats[:H.TOP_FEATURES])}")
    return EXIT_OK


def _report(args) -> int:
    rep = H.report(args.bundle, args.against)
    print(rep.text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kan-symreg", description="KAN symbolic regression experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-heat", help="write the synthetic heat-conduction dataset")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--conductivity", choices=("constant", "cubic"), default="constant")
    g.set_defaults(func=_generate)

    t = sub.add_parser("tune", help="random hyperparameter search")
    t.add_argument("--config", required=True)
    t.add_argument("--max-evals", type=int, default=200)
    t.set_defaults(func=_tune)

    for name, func, helptext in (("train", _train, "run the full pipeline"),):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.set_defaults(func=func)

    for name, func, helptext in (("evaluate", _evaluate, "recompute test metrics from a bundle"),
                                 ("explain", _explain, "recompute SHAP files for a bundle")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--bundle", required=True)
        s.set_defaults(func=func)

    r = sub.add_parser("report", help="KAN vs FNN comparison table")
    r.add_argument("--bundle", required=True)
    r.add_argument("--against")
    r.set_defaults(func=_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (H.ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (H.StageError, H.TuneError, H.ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
