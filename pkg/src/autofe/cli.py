"""Command-line front end: run a search, score a single feature string, or
report the raw-feature baseline.

Exit codes: 0 success, 2 configuration/parse error, 3 ingestion error,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import dsl
from .data import IngestionError, TargetColumnMissing, load_csv
from .evaluator import cross_val_metric, evaluate_baseline
from .evolve import SearchConfig, SearchEngine
from .forest import LearnerConfig
from .metrics import ConstantTarget
from .model import save_checkpoint, write_loss_history

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INGEST = 3
EXIT_RUNTIME = 4

log = logging.getLogger("autofe")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="autofe",
        description="Search for engineered features by gradient-guided evolution",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--data", required=True, help="CSV file with a header row")
        p.add_argument("--target", required=True, help="target column name")
        p.add_argument("--task", choices=["auto", "clf", "reg"], default="auto")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--folds", type=int, default=5)
        p.add_argument("--learner", choices=["random_forest", "decision_tree", "linear"],
                       default="random_forest")

    p_run = sub.add_parser("run", help="run the full feature search")
    common(p_run)
    p_run.add_argument("--budget", type=int, default=4096)
    p_run.add_argument("--population", type=int, default=512)
    p_run.add_argument("--max-order", type=int, default=5)
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--train-epochs", type=int, default=400)
    p_run.add_argument("--fine-tune-epochs", type=int, default=100)
    p_run.add_argument("--out", default="autofe_out", help="output directory")

    p_eval = sub.add_parser("eval", help="score one post-order feature string")
    common(p_eval)
    p_eval.add_argument("feature", help="post-order token string, e.g. 'a b add'")

    p_base = sub.add_parser("baseline", help="raw-feature cross-validated score")
    common(p_base)
    return parser


def _load_dataset(args):
    registry = dsl.default_registry()
    return load_csv(args.data, args.target, args.task, reserved_names=registry.names)


def cmd_run(args) -> int:
    try:
        config = SearchConfig(
            max_order=args.max_order,
            population_size=args.population,
            budget=args.budget,
            folds=args.folds,
            train_epochs=args.train_epochs,
            fine_tune_epochs=args.fine_tune_epochs,
            workers=args.workers,
        )
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    dataset = _load_dataset(args)
    learner = LearnerConfig(kind=args.learner, seed=args.seed)

    engine = SearchEngine(dataset, config, learner, seed=args.seed)
    report = engine.run()

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_checkpoint(engine.model, os.path.join(args.out, "optimizer.npz"))
    write_loss_history(engine.loss_history, os.path.join(args.out, "loss_history.csv"))
    _write_augmented(engine, os.path.join(args.out, "augmented.csv"))
    log.info("report written to %s (budget spent %d/%d)",
             args.out, engine.budget.spent, engine.budget.cap)
    return EXIT_OK


def _write_augmented(engine, path: str):
    """Raw columns plus the selected features, named by their infix strings."""
    dataset = engine.dataset
    chosen, _ = engine.select_final_features()
    names = list(dataset.feature_names)
    columns = [dataset.columns[:, i] for i in range(dataset.n_features)]
    for cand in chosen:
        from .evaluator import materialize

        col = materialize(cand.tree, dataset)
        if col is None:
            continue
        names.append(dsl.to_infix(cand.tree, dataset.feature_names))
        columns.append(col)
    names.append(dataset.target_name)
    columns.append(dataset.target)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        writer.writerows(zip(*(c.tolist() for c in columns)))


def cmd_eval(args) -> int:
    dataset = _load_dataset(args)
    tokens = args.feature.split()
    if not tokens:
        print("empty feature string", file=sys.stderr)
        return EXIT_CONFIG
    registry = dsl.default_registry()
    try:
        tree = dsl.parse_postorder(tokens, registry, dataset.feature_names)
    except dsl.DslError as err:
        print(f"parse error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    from .evaluator import materialize

    column = materialize(tree, dataset)
    result = {
        "infix": dsl.to_infix(tree, dataset.feature_names),
        "order": dsl.order(tree),
    }
    if column is None:
        result["valid"] = False
    else:
        learner = LearnerConfig(kind=args.learner, seed=args.seed)
        X = np.hstack([dataset.columns, column[:, None]])
        metric, folds = cross_val_metric(X, dataset, learner, args.folds, args.seed)
        result.update(valid=True, metric=float(np.clip(metric, 0.0, 1.0)),
                      fold_metrics=list(folds))
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_baseline(args) -> int:
    dataset = _load_dataset(args)
    learner = LearnerConfig(kind=args.learner, seed=args.seed)
    record = evaluate_baseline(dataset, learner, args.folds, args.seed)
    print(json.dumps(
        {"metric": record.metric, "fold_metrics": list(record.fold_metrics),
         "task": dataset.task.value, "rows": dataset.n_rows,
         "dropped_rows": dataset.dropped_rows},
        sort_keys=True,
    ))
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("AUTOFE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_CONFIG if err.code not in (0, None) else 0
    handlers = {"run": cmd_run, "eval": cmd_eval, "baseline": cmd_baseline}
    try:
        return handlers[args.command](args)
    except TargetColumnMissing as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, ConstantTarget, FileNotFoundError) as err:
        print(f"ingestion error: {err}", file=sys.stderr)
        return EXIT_INGEST
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
