"""Command-line entry point.

Exit codes are a stable contract: 0 success, 1 runtime failure
(including a failed budget check), 2 usage or config error.
"""

import argparse
import logging
import sys

import torch

from .ablation import SCHEDULER_REFERENCE, ablate_finetune_depth, ablate_scheduler, write_report
from .config import parse_config
from .data import load_manifest, make_loader
from .errors import BudgetError, ConfigError, HdffError
from .evaluation import evaluate
from .fusion import FusionHead, layout_of, load_grand_model
from .pipeline import (
    _split_records,
    init_adapters,
    run_pipeline,
    run_single_stage,
    write_predictions,
)
from .registry import budget_of, check_budget, default_registry
from .seeding import INIT, torch_generator

log = logging.getLogger(__name__)


def _cmd_budget(args) -> int:
    cfg = parse_config(args.config)
    registry = default_registry()
    adapters = init_adapters(cfg, registry)
    head = FusionHead(
        layout_of(adapters).width,
        cfg.data.num_classes,
        generator=torch_generator(cfg.data.seed, INIT, "fusion_head"),
    )
    report = check_budget(budget_of(adapters, head, limit=cfg.registry.param_limit))
    print(report.as_table())
    return 0 if report.passed else 1


def _cmd_train(args) -> int:
    cfg = parse_config(args.config)
    if args.stage:
        report = run_single_stage(
            cfg, args.stage, args.backbone, resume_checkpoint=args.resume
        )
        best = report.best_val_accuracy
        print(
            f"stage {args.stage} ({report.target}) finished; "
            f"best val accuracy {best if best is None else f'{best:.4f}'}"
        )
        return 0
    result = run_pipeline(cfg, resume_checkpoint=args.resume)
    print(f"run directory: {result.run_dir}")
    print(f"grand model: {result.grand_checkpoint}")
    print(
        f"final val accuracy {result.final_metrics.accuracy:.4f}, "
        f"auc {result.final_metrics.auc:.4f}"
    )
    return 0


def _cmd_predict(args) -> int:
    registry = default_registry()
    grand = load_grand_model(args.checkpoint, registry)
    records = load_manifest(args.manifest, grand.head.num_classes)
    input_size = grand.adapters[0].spec.input_size
    out = write_predictions(grand, records, args.out, input_size=input_size)
    print(f"wrote {len(records)} predictions to {out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = parse_config(args.config)
    registry = default_registry()
    grand = load_grand_model(args.checkpoint, registry)
    _, val_records = _split_records(cfg)
    loader = make_loader(
        val_records,
        batch_size=32,
        shuffle_seed=0,
        augment=None,
        input_size=cfg.data.input_size,
        shuffle=False,
    )
    metrics = evaluate(list(grand.adapters), grand.head, loader)
    print(
        f"n={metrics.n} accuracy={metrics.accuracy:.4f} "
        f"auc={metrics.auc:.4f} mean_loss={metrics.mean_loss:.4f}"
    )
    return 0


def _cmd_ablate(args) -> int:
    cfg = parse_config(args.config)
    torch.set_num_threads(1)
    if args.axis == "scheduler":
        results = ablate_scheduler(cfg)
        reference = SCHEDULER_REFERENCE
    else:
        results = ablate_finetune_depth(cfg)
        reference = None
    json_path, table_path = write_report(results, args.out, reference=reference)
    print(table_path.read_text(encoding="utf-8"))
    print(f"report written to {json_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hdff",
        description="Feature-fusion training and inference for image forgery detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_budget = sub.add_parser("budget", help="print the parameter-budget report")
    p_budget.add_argument("--config", required=True)
    p_budget.set_defaults(func=_cmd_budget)

    p_train = sub.add_parser("train", help="run the four-stage training pipeline")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--stage", choices=["selective", "full", "fusion"])
    p_train.add_argument("--backbone")
    p_train.add_argument("--resume")
    p_train.set_defaults(func=_cmd_train)

    p_predict = sub.add_parser("predict", help="write per-sample forgery probabilities")
    p_predict.add_argument("--checkpoint", required=True)
    p_predict.add_argument("--manifest", required=True)
    p_predict.add_argument("--out", default="predictions.csv")
    p_predict.set_defaults(func=_cmd_predict)

    p_eval = sub.add_parser("eval", help="evaluate a grand model on the val split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.set_defaults(func=_cmd_eval)

    p_ablate = sub.add_parser("ablate", help="run an ablation comparison")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--axis", choices=["scheduler", "finetune_depth"], required=True)
    p_ablate.add_argument("--out", required=True)
    p_ablate.set_defaults(func=_cmd_ablate)

    return parser


def dispatch(argv) -> int:
    """Route argv to a subcommand and map errors to the exit-code contract."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except BudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except HdffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    sys.exit(dispatch(sys.argv[1:]))
