"""Command-line entry point: gen-data, train, eval, ablate, report.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autograd import NumericError
from .config import ANALYSES, ConfigError, load_config, parse_assignments
from .experiments import DataError, gen_data, run_ablation, run_eval, run_training
from .synth import CorpusError
from .trainer import MODES, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _parser():
    p = argparse.ArgumentParser(prog="caml-nmt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(cmd, help_text):
        c = sub.add_parser(cmd, help=help_text)
        c.add_argument("--config", help="YAML config file (flat section.key entries, 'include' allowed)")
        c.add_argument("--seed", type=int, help="overrides train.seed")
        c.add_argument("--out", help="output directory")
        c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config entry; repeatable")
        return c

    common("gen-data", "generate the corpus, aligner table and equivalence sets")
    t = common("train", "pretrain then train in the configured mode")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint")
    e = common("eval", "evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True, help="directory holding params.bin and model.json")
    e.add_argument("--analyses", help=f"comma-separated subset of {','.join(ANALYSES)}")
    common("ablate", "run the ablation grid")
    r = sub.add_parser("report", help="print a table from ablation or metrics JSON files")
    r.add_argument("paths", nargs="+")
    return p


def _flags(args):
    flags = parse_assignments(args.set)
    if getattr(args, "seed", None) is not None:
        flags["train.seed"] = args.seed
    if getattr(args, "mode", None):
        flags["train.mode"] = args.mode
    if getattr(args, "analyses", None):
        flags["eval.analyses"] = [a.strip() for a in args.analyses.split(",") if a.strip()]
    return flags


def _report(paths):
    for path in paths:
        data = json.loads(Path(path).read_text())
        if "table" in data:
            keys = ("dev_bleu", "dev_exact_match", "test_exact_match", "drop", "low_quality")
            print("| arm | " + " | ".join(keys) + " |")
            print("|---" * (len(keys) + 1) + "|")
            for row in data["table"]:
                cells = [f"{row[k + '_mean']:.3f} ± {row[k + '_sd']:.3f}" for k in keys]
                print(f"| {row['arm']} | " + " | ".join(cells) + " |")
        else:
            print(f"{path}: run {data['run_id']} seed {data['seed']}")
            for name, section in data["sections"].items():
                print(f"  {name}: {json.dumps(section, sort_keys=True)}")


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "report":
            _report(args.paths)
            return EXIT_OK
        cfg = load_config(args.config, _flags(args))
        out = Path(args.out) if args.out else None
        if args.command == "gen-data":
            gen_data(cfg, out or Path(cfg.data.dir))
        elif args.command == "train":
            run_training(cfg, out or Path("runs") / cfg.train.mode, resume=args.resume)
        elif args.command == "eval":
            report = run_eval(args.checkpoint, cfg, out or Path(args.checkpoint) / "eval")
            print(json.dumps(report.to_dict(), sort_keys=True, indent=1))
        elif args.command == "ablate":
            run_ablation(cfg, out or Path("runs") / "ablation")
    except ConfigError as exc:
        for line in exc.errors:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainingDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
