"""Command line: ``python -m app <command>``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import uvicorn

from app import __version__
from app.errors import NaimError, SchemaError, UsageError
from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.data import (
    SchemaSpec,
    apply_preprocessor,
    fit_preprocessor,
    label_column,
    load_csv,
    restore_raw,
    stratified_kfold,
)
from app.services.experiments import ExperimentConfig, MethodEnum, derive_seed, run_grid
from app.services.gradcheck import TOLERANCE, run_gradcheck
from app.services.imputers import ImputerEnum, apply_imputer, fit_imputer
from app.services.metrics import auc
from app.services.missingness import McarSpec, inject_mcar
from app.services.model import NaimConfig, init_parameters, predict_proba_batch
from app.services.trainer import TrainConfig, train
from app.settings import configure_logging, default_jobs

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fraction_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated fractions, got '{text}'")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="naim", description="Missing-value-aware transformer for tabular data")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log one line per epoch")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    train_cmd = commands.add_parser("train", help="Fit one model and write a checkpoint")
    train_cmd.add_argument("--config", help="Experiment config JSON (model/train sections are used)")
    train_cmd.add_argument("--data", help="Training CSV")
    train_cmd.add_argument("--schema", help="Schema JSON")
    train_cmd.add_argument("--out", required=True, help="Checkpoint path (.npz)")
    train_cmd.add_argument("--method", type=MethodEnum, choices=list(MethodEnum), default=MethodEnum.naim)
    train_cmd.add_argument("--seed", type=int)
    train_cmd.add_argument("--max-epochs", type=int)
    train_cmd.add_argument("--history", help="Per-epoch history CSV")

    evaluate_cmd = commands.add_parser("evaluate", help="Score a checkpoint on a CSV")
    evaluate_cmd.add_argument("--checkpoint", required=True)
    evaluate_cmd.add_argument("--data", required=True)
    evaluate_cmd.add_argument("--schema", required=True)
    evaluate_cmd.add_argument("--test-missing", type=float, default=0.0, help="Inject MCAR at this rate first")
    evaluate_cmd.add_argument("--seed", type=int, default=0)

    grid_cmd = commands.add_parser("grid", help="Run a cross-validated missingness grid")
    grid_cmd.add_argument("--config", required=True)
    grid_cmd.add_argument("--jobs", type=int, default=None)
    grid_cmd.add_argument("--seed", type=int)
    grid_cmd.add_argument("--out")
    grid_cmd.add_argument("--method", type=MethodEnum, choices=list(MethodEnum), action="append")
    grid_cmd.add_argument("--train-missing", type=_fraction_list)
    grid_cmd.add_argument("--test-missing", type=_fraction_list)
    grid_cmd.add_argument("--folds", type=int)
    grid_cmd.add_argument("--max-epochs", type=int)

    impute_cmd = commands.add_parser("impute", help="Impute a CSV with the mean or KNN imputer")
    impute_cmd.add_argument("--data", required=True)
    impute_cmd.add_argument("--schema", required=True)
    impute_cmd.add_argument("--imputer", type=ImputerEnum, choices=list(ImputerEnum), default=ImputerEnum.mean)
    impute_cmd.add_argument("--k", type=int, default=5)
    impute_cmd.add_argument("--fit", help="Fit on this CSV instead of --data")
    impute_cmd.add_argument("--out", required=True)

    gradcheck_cmd = commands.add_parser("gradcheck", help="Finite-difference check of all gradients")
    gradcheck_cmd.add_argument("--seed", type=int, default=0)

    serve_cmd = commands.add_parser("serve", help="Serve a checkpoint over HTTP")
    serve_cmd.add_argument("--host", default="0.0.0.0")
    serve_cmd.add_argument("--port", type=int, default=8000)
    serve_cmd.add_argument("--checkpoint", help="Overrides NAIM_CHECKPOINT")
    return parser


def _train_settings(args):
    if args.config:
        config = ExperimentConfig.from_file(args.config)
        data = args.data or config.dataset_path
        schema = args.schema or config.schema_path
        model, training, seed = config.model, config.train, config.seed
    else:
        if not (args.data and args.schema):
            raise UsageError("train needs --config or both --data and --schema")
        data, schema = args.data, args.schema
        model, training, seed = NaimConfig(), TrainConfig(), 0
    if args.seed is not None:
        seed = args.seed
    if args.max_epochs is not None:
        training = training.model_copy(update={"max_epochs": args.max_epochs})
    return data, schema, model, training, seed


def cmd_train(args) -> int:
    data, schema_path, model, training, seed = _train_settings(args)
    dataset = load_csv(data, SchemaSpec.from_file(schema_path))
    split = stratified_kfold(dataset.labels, 5, derive_seed(seed, "split")).folds[0]
    train_idx = np.sort(np.concatenate([split.train, split.test]))
    train_raw, val_raw = dataset.take(train_idx), dataset.take(split.validation)

    preprocessor = fit_preprocessor(train_raw)
    train_set, val_set = apply_preprocessor(preprocessor, train_raw), apply_preprocessor(preprocessor, val_raw)
    if args.method.imputer is not None:
        logger.warning("⚠️ The saved checkpoint does not include the imputer; serve it with complete rows")
        imputer = fit_imputer(args.method.imputer, train_set)
        train_set, val_set = apply_imputer(imputer, train_set), apply_imputer(imputer, val_set)

    model = model.model_copy(update={"n_classes": train_set.schema.n_classes})
    training = training.model_copy(update={"augmentation_enabled": args.method.augmentation, "seed": seed})
    params = init_parameters(model, train_set.schema, derive_seed(seed, "model"))
    best, history = train(params, train_set, val_set, training, history_path=args.history)
    save_checkpoint(args.out, best, preprocessor)
    print(f"best epoch {history.best_epoch}, validation loss {history.best_val_loss:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    params, preprocessor = load_checkpoint(args.checkpoint)
    if preprocessor is None:
        raise SchemaError("checkpoint has no preprocessor; cannot score raw CSV data")
    dataset = load_csv(args.data, SchemaSpec.from_file(args.schema))
    if not dataset.schema.same_layout(params.schema):
        raise SchemaError("data schema does not match the checkpoint")
    if args.test_missing > 0:
        dataset = inject_mcar(dataset, McarSpec(p=args.test_missing, seed=args.seed))
    encoded = apply_preprocessor(preprocessor, dataset)
    probs = predict_proba_batch(params, encoded.values, encoded.present)
    score = auc(probs[:, 1], encoded.labels)
    print(json.dumps({"samples": len(encoded), "auc": score}))
    return 0


def cmd_grid(args) -> int:
    overrides = {
        "seed": args.seed,
        "output_dir": args.out,
        "methods": [m.value for m in args.method] if args.method else None,
        "train_missing": args.train_missing,
        "test_missing": args.test_missing,
        "folds": args.folds,
    }
    config = ExperimentConfig.from_file(args.config, **overrides)
    if args.max_epochs is not None:
        config = config.model_copy(update={"train": config.train.model_copy(update={"max_epochs": args.max_epochs})})
    jobs = args.jobs if args.jobs is not None else default_jobs()
    if jobs < 1:
        raise UsageError("--jobs must be at least 1")
    report = run_grid(config, jobs=jobs)
    print((report.output_dir / "grid.txt").read_text(encoding="utf-8"))
    return 0


def cmd_impute(args) -> int:
    spec = SchemaSpec.from_file(args.schema)
    target = load_csv(args.data, spec)
    source = load_csv(args.fit, spec) if args.fit else target
    preprocessor = fit_preprocessor(source)
    imputer = fit_imputer(args.imputer, apply_preprocessor(preprocessor, source), args.k)
    imputed = apply_imputer(imputer, apply_preprocessor(preprocessor, target))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    restore_raw(preprocessor, imputed, label_column(args.data, target.schema)).to_csv(args.out, index=False)
    logger.info(f"✅ Wrote {len(imputed)} imputed rows to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<24} {r.max_rel_error:.2e}")
    if failed:
        logger.error(f"❌ {len(failed)} gradient checks exceed {TOLERANCE:g}")
        return 3
    return 0


def cmd_serve(args) -> int:
    if args.checkpoint:
        os.environ["NAIM_CHECKPOINT"] = args.checkpoint
    uvicorn.run("app.main:app", host=args.host, port=args.port)
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "impute": cmd_impute,
    "gradcheck": cmd_gradcheck,
    "serve": cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e.message}", file=sys.stderr)
        return e.exit_code
    configure_logging(debug=args.verbose)
    try:
        return COMMANDS[args.command](args)
    except NaimError as e:
        logger.error(f"❌ {e.error}: {e.message}")
        return e.exit_code
    except Exception:
        logger.exception("❌ Unexpected failure")
        return 3
