"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/integrity error, 3 divergence
or failed numerical check.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConvsegError, DivergenceError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
SEED_ENV = "CONVSEG_SEED"

log = logging.getLogger("convseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _env_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _cmd_generate(args) -> int:
    from .dataset import write_synthetic_dataset
    from .model import CATEGORIES

    seed = args.seed if args.seed is not None else _env_seed()
    cats = CATEGORIES if args.category == "all" else (args.category,)
    for i, cat in enumerate(cats):
        paths = write_synthetic_dataset(args.out, cat, args.scenes, args.points, seed + i,
                                        n_dev=args.dev_scenes, n_test=args.test_scenes)
        for name, p in paths.items():
            print(f"{cat} {name}: {p}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .model import CATEGORIES
    from .training import load_train_configs, run_session, train_all

    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            from .errors import ParseError
            raise ParseError(f"{args.config}: {exc.msg}") from None
    if args.epochs is not None:
        doc["epochs"] = args.epochs
        doc.setdefault("schedule", None)
        if doc["schedule"] is None or doc["schedule"].get("kind", "sgdr") == "sgdr":
            doc["schedule"] = {**(doc["schedule"] or {"kind": "sgdr"}), "t0": args.epochs}
    if args.seed is not None:
        doc["seed"] = args.seed
    elif "seed" not in doc and SEED_ENV in os.environ:
        doc["seed"] = _env_seed()
    if args.all:
        configs = load_train_configs(doc, args.data, CATEGORIES)
        paths = train_all(configs, args.data, args.out, jobs=args.jobs,
                          figures=not args.no_figures)
        for cat, p in paths.items():
            print(f"{cat}: {p}")
        return EXIT_OK
    category = args.category or doc.get("category")
    if category is None:
        raise UsageError("train needs --category, --all, or a config file naming a category")
    config = load_train_configs(doc, args.data, (category,))[category]
    print(run_session(config, args.data, args.out, figures=not args.no_figures))
    return EXIT_OK


def _load_eval_inputs(args):
    from .dataset import load_split
    from .training import checkpoint_load

    mp, config = checkpoint_load(args.checkpoint)
    split = load_split(args.data, config.category, args.split)
    return mp, split


def _cmd_evaluate(args) -> int:
    from .evaluation import evaluate_model

    mp, split = _load_eval_inputs(args)
    report = evaluate_model(mp, split.scenes, include_absent=args.include_absent_as_1)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(report_path)
    if not args.no_figures:
        from .reports import plot_confusion
        plot_confusion(report.counts, report_path.with_suffix(".png"),
                       title=f"{mp.config.category} ({args.split})")
    print(f"point_accuracy={report.point_accuracy:.4f} "
          f"component_accuracy={report.component_accuracy:.4f} mean_iou={report.mean_iou:.4f}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    from .evaluation import emit_submission, predict_records

    mp, split = _load_eval_inputs(args)
    records = predict_records(mp, split.scenes)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    emit_submission(records, args.out)
    print(f"{len(records)} rows -> {args.out}")
    return EXIT_OK


def _cmd_merge(args) -> int:
    from .evaluation import merge_submissions
    from .model import CATEGORIES

    if len(args.inputs) != len(CATEGORIES):
        raise UsageError(f"merge needs exactly {len(CATEGORIES)} input files "
                         f"(one per category), got {len(args.inputs)}")
    n = merge_submissions(args.inputs, args.out)
    print(f"{n} rows -> {args.out}")
    return EXIT_OK


def _cmd_plot_schedule(args) -> int:
    from .optimizers import SGDR, StepDecay, lr_schedule

    if args.kind == "step":
        schedule = StepDecay(args.factor, args.period)
    else:
        schedule = SGDR(args.t0 if args.t0 is not None else args.epochs, args.t_mult, args.eta_min)
    lrs = lr_schedule(schedule, args.base_lr, args.epochs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr"])
        for e, lr in enumerate(lrs):
            w.writerow([e, format(lr, ".15g")])
    if not args.no_figures:
        from .reports import plot_schedule
        plot_schedule(range(args.epochs), lrs, out.with_suffix(".png"), label=args.kind)
    print(out)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(points=args.points, seed=args.seed)
    for name, err in results.items():
        print(f"{name:24s} {err:.3e}")
    worst = max(results.values())
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if worst < args.tolerance else EXIT_DIVERGED


def build_parser() -> argparse.ArgumentParser:
    from .model import CATEGORIES

    p = _Parser(prog="convseg", description="Per-category DGCNN part segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate-synth", help="write a synthetic dataset")
    g.add_argument("--category", required=True, choices=(*CATEGORIES, "all"),
                   help="object category, or 'all' for the five categories")
    g.add_argument("--scenes", type=int, required=True, help="number of training scenes")
    g.add_argument("--points", type=int, default=256, help="points per scene (default 256)")
    g.add_argument("--seed", type=int, default=None, help=f"seed (default ${SEED_ENV} or 0)")
    g.add_argument("--out", required=True, help="dataset root directory")
    g.add_argument("--dev-scenes", type=int, default=5, help="labelled dev scenes (default 5)")
    g.add_argument("--test-scenes", type=int, default=5, help="unlabelled test scenes (default 5)")
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", help="train one category, or all five with --all")
    t.add_argument("--config", help="JSON training config (keys mirror TrainConfig)")
    t.add_argument("--data", required=True, help="dataset root directory")
    t.add_argument("--out", required=True, help="output directory for checkpoints and histories")
    t.add_argument("--category", choices=CATEGORIES, help="category to train")
    t.add_argument("--all", action="store_true", help="train all five categories")
    t.add_argument("--jobs", type=int, default=1, help="parallel sessions with --all (default 1)")
    t.add_argument("--epochs", type=int, help="override the epoch count (and SGDR cycle length)")
    t.add_argument("--seed", type=int, help=f"override the seed (fallback ${SEED_ENV})")
    t.add_argument("--no-figures", action="store_true", help="skip the history figure")
    t.set_defaults(func=_cmd_train)

    for name, helptext in (("evaluate", "metrics report for a checkpoint"),
                           ("predict", "submission CSV for a checkpoint")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True, help="checkpoint JSON file")
        e.add_argument("--data", required=True, help="dataset root directory")
        e.add_argument("--split", choices=("train", "dev", "test"),
                       default="dev" if name == "evaluate" else "test",
                       help="split to run on (default %(default)s)")
        if name == "evaluate":
            e.add_argument("--report", required=True, help="output metrics JSON")
            e.add_argument("--include-absent-as-1", action="store_true",
                           help="count classes absent from prediction and truth as IoU 1")
            e.add_argument("--no-figures", action="store_true", help="skip the confusion figure")
            e.set_defaults(func=_cmd_evaluate)
        else:
            e.add_argument("--out", required=True, help="output submission CSV")
            e.set_defaults(func=_cmd_predict)

    m = sub.add_parser("merge", help="merge the five per-category submissions")
    m.add_argument("--inputs", nargs="+", required=True, help="five submission CSV files")
    m.add_argument("--out", required=True, help="merged submission CSV")
    m.set_defaults(func=_cmd_merge)

    s = sub.add_parser("plot-schedule", help="write epoch,lr CSV (and a figure) for a schedule")
    s.add_argument("--kind", choices=("sgdr", "step"), required=True, help="schedule kind")
    s.add_argument("--epochs", type=int, required=True, help="number of epochs")
    s.add_argument("--out", required=True, help="output CSV path")
    s.add_argument("--base-lr", type=float, default=0.001, help="initial rate (default 0.001)")
    s.add_argument("--factor", type=float, default=0.8, help="step decay factor (default 0.8)")
    s.add_argument("--period", type=int, default=25, help="step decay period (default 25)")
    s.add_argument("--t0", type=int, help="first SGDR cycle length (default: --epochs)")
    s.add_argument("--t-mult", type=int, default=2, help="SGDR cycle multiplier (default 2)")
    s.add_argument("--eta-min", type=float, default=0.0, help="SGDR floor (default 0)")
    s.add_argument("--no-figures", action="store_true", help="skip the PNG next to the CSV")
    s.set_defaults(func=_cmd_plot_schedule)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--points", type=int, default=20, help="probe points per op (default 20)")
    c.add_argument("--seed", type=int, default=0, help="probe seed (default 0)")
    c.add_argument("--tolerance", type=float, default=1e-4, help="pass threshold (default 1e-4)")
    c.set_defaults(func=_cmd_gradcheck)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"convseg: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConvsegError, OSError) as exc:
        print(f"convseg: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
