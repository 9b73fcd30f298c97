"""End-to-end pipeline: init, per-backbone fine-tuning, fusion, export.

One run directory per invocation holds the resolved config, per-stage
checkpoints and reports, the exported grand model, and prediction files.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .augment import imagenet_policy, load_policy
from .config import RunConfig, write_resolved_config
from .data import BatchLoader, holdout_split, load_manifest, make_loader
from .errors import BudgetError, DataError, StageError
from .evaluation import Metrics
from .fusion import FusionHead, GrandModel, layout_of, predict_proba
from .registry import BackboneAdapter, budget_of, check_budget, default_registry
from .seeding import AUGMENT, INIT, SHUFFLE, derive_seed, torch_generator
from .training import (
    GrandModelUnit,
    StageId,
    StageTracker,
    SubModelUnit,
    load_checkpoint,
    run_stage,
)

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    run_dir: Path
    grand_checkpoint: Path
    budget: dict
    final_metrics: Metrics
    sub_model_val_accuracy: dict[str, float]
    stage_reports: list = field(default_factory=list)


def _write_json(payload, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _split_records(cfg: RunConfig):
    records = load_manifest(cfg.data.manifest, cfg.data.num_classes)
    train = [r for r in records if r.split == "train"]
    val = [r for r in records if r.split == "val"]
    if not val:
        train, val = holdout_split(train)
    if not train:
        raise DataError("manifest has no training rows")
    if not val:
        raise DataError("manifest yields an empty validation split")
    return train, val


def _loaders(cfg: RunConfig, stage_name: str, train_records, val_records, policy, cache):
    stage = cfg.stages[stage_name]
    shuffle_seed = derive_seed(cfg.data.seed, SHUFFLE)
    augment_seed = derive_seed(cfg.data.seed, AUGMENT)
    train_loader = make_loader(
        train_records,
        stage.batch_size,
        shuffle_seed,
        augment=policy,
        input_size=cfg.data.input_size,
        augment_seed=augment_seed,
        cache=cache,
    )
    val_loader = make_loader(
        val_records,
        stage.batch_size,
        shuffle_seed,
        augment=None,
        input_size=cfg.data.input_size,
        shuffle=False,
        cache=cache,
    )
    return train_loader, val_loader


def init_adapters(cfg: RunConfig, registry) -> list[BackboneAdapter]:
    """Stage INIT: construct every configured adapter with resolved dims."""
    adapters = []
    for name in cfg.registry.backbones:
        adapter = registry.load_adapter(
            name,
            cfg.registry.weights[name],
            seed=derive_seed(cfg.data.seed, INIT, name),
            input_size=cfg.data.input_size,
        )
        adapters.append(adapter)
    return adapters


def budget_gate(cfg: RunConfig, adapters, fusion_head) -> dict:
    """Run the parameter-budget check; a fail aborts before fusion training."""
    report = check_budget(budget_of(adapters, fusion_head, limit=cfg.registry.param_limit))
    payload = {
        "passed": report.passed,
        "total": report.total,
        "limit": report.limit,
        "headroom": report.headroom,
        "per_model": report.per_model,
        "total_bytes": report.total_bytes,
    }
    if not report.passed:
        raise BudgetError(
            f"parameter budget exceeded: total {report.total:,} > limit {report.limit:,}"
        )
    return payload


def run_pipeline(
    cfg: RunConfig,
    registry=None,
    *,
    resume_checkpoint=None,
    write_artifacts: bool = True,
) -> PipelineResult:
    """Execute the full four-stage protocol and export the grand model."""
    torch.set_num_threads(1)  # keeps reruns bit-identical on any host
    registry = registry if registry is not None else default_registry()
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    if write_artifacts:
        write_resolved_config(cfg, run_dir / "resolved_config.toml")

    train_records, val_records = _split_records(cfg)
    policy = load_policy(cfg.data.policy_file) if cfg.data.policy_file else imagenet_policy()
    cache: dict = {}

    resume = load_checkpoint(resume_checkpoint) if resume_checkpoint is not None else None
    state_path = run_dir / "pipeline_state.json"
    completed: dict[str, list[str]] = {}
    if resume is not None and state_path.exists():
        completed = json.loads(state_path.read_text(encoding="utf-8"))

    adapters = init_adapters(cfg, registry)
    fused_width = layout_of(adapters).width
    fusion_head = FusionHead(
        fused_width,
        cfg.data.num_classes,
        generator=torch_generator(cfg.data.seed, INIT, "fusion_head"),
    )
    budget = budget_gate(cfg, adapters, fusion_head)
    if write_artifacts:
        _write_json(budget, run_dir / "budget.json")

    tracker = StageTracker(cfg.registry.backbones)
    reports = []
    sub_model_acc: dict[str, float] = {}

    def mark_done(name: str, stage: str):
        completed.setdefault(name, []).append(stage)
        if write_artifacts:
            _write_json(completed, state_path)

    for adapter in adapters:
        name = adapter.spec.name
        tracker.complete(name, StageId.INIT)
        done = set(completed.get(name, []))
        backbone_dir = run_dir / "backbones" / name
        if {"selective", "full"} <= done:
            # Both stages finished in the interrupted run; reload the artifact.
            replacement = registry.load_adapter(
                name, str(backbone_dir / "adapter_after_full.pt"),
                input_size=cfg.data.input_size,
            )
            adapter.extractor.load_state_dict(replacement.extractor.state_dict())
            adapter.head = replacement.head
            tracker.complete(name, StageId.SELECTIVE_FT)
            tracker.complete(name, StageId.COMPREHENSIVE_FT)
            sub_acc_path = backbone_dir / "val_accuracy.json"
            if sub_acc_path.exists():
                sub_model_acc[name] = json.loads(sub_acc_path.read_text())["best_val_accuracy"]
            continue

        adapter.attach_head(
            cfg.data.num_classes,
            generator=torch_generator(cfg.data.seed, INIT, name, "head"),
        )
        unit = SubModelUnit(adapter)

        for stage_name, stage_id in (
            ("selective", StageId.SELECTIVE_FT),
            ("full", StageId.COMPREHENSIVE_FT),
        ):
            stage_cfg = cfg.stage_config(stage_name)
            stage_dir = backbone_dir / stage_name if write_artifacts else None
            resume_payload = None
            if (
                resume is not None
                and resume["target"] == name
                and resume["stage"] == stage_id.value
                and stage_name not in done
            ):
                resume_payload = resume
            if stage_name in done:
                adapter_file = backbone_dir / f"adapter_after_{stage_name}.pt"
                replacement = registry.load_adapter(
                    name, str(adapter_file), input_size=cfg.data.input_size
                )
                adapter.extractor.load_state_dict(replacement.extractor.state_dict())
                if replacement.head is not None:
                    adapter.head.load_state_dict(replacement.head.state_dict())
                tracker.complete(name, stage_id)
                continue
            tracker.start(name, stage_id)
            train_loader, val_loader = _loaders(
                cfg, stage_name, train_records, val_records, policy, cache
            )
            log.info("stage %s for %s (%d epochs)", stage_name, name, stage_cfg.epochs)
            report = run_stage(
                stage_cfg,
                unit,
                train_loader,
                val_loader,
                stage_dir=stage_dir,
                resume_from=resume_payload,
            )
            tracker.complete(name, stage_id)
            reports.append(report)
            if write_artifacts:
                _write_json(report.as_dict(), backbone_dir / f"{stage_name}_report.json")
                adapter.save(backbone_dir / f"adapter_after_{stage_name}.pt")
            if stage_id is StageId.COMPREHENSIVE_FT:
                sub_model_acc[name] = report.best_val_accuracy
                if write_artifacts:
                    _write_json(
                        {"best_val_accuracy": report.best_val_accuracy},
                        backbone_dir / "val_accuracy.json",
                    )
            mark_done(name, stage_name)

    # Assemble the grand model: temp heads are scaffolding, features only.
    for adapter in adapters:
        adapter.detach_head()
    grand = GrandModel(adapters, fusion_head)
    tracker.start_fusion()
    fusion_cfg = cfg.stage_config("fusion")
    train_loader, val_loader = _loaders(
        cfg, "fusion", train_records, val_records, policy, cache
    )
    resume_payload = None
    if resume is not None and resume["stage"] == StageId.FUSION_TRAIN.value:
        resume_payload = resume
    log.info("fusion stage (%d epochs)", fusion_cfg.epochs)
    fusion_report = run_stage(
        fusion_cfg,
        GrandModelUnit(grand),
        train_loader,
        val_loader,
        stage_dir=(run_dir / "fusion") if write_artifacts else None,
        resume_from=resume_payload,
    )
    tracker.complete_fusion()
    reports.append(fusion_report)

    grand_path = run_dir / "grand_model.pt"
    if write_artifacts:
        grand.save(grand_path)
        _write_json(fusion_report.as_dict(), run_dir / "fusion_report.json")

    best = fusion_report.best_epoch
    final_metrics = (
        fusion_report.records[best].val
        if best is not None
        else Metrics(float("nan"), float("nan"), float("nan"), 0)
    )
    if write_artifacts:
        _write_json(
            {
                "final": final_metrics.as_dict(),
                "sub_model_val_accuracy": sub_model_acc,
            },
            run_dir / "final_metrics.json",
        )
    return PipelineResult(
        run_dir=run_dir,
        grand_checkpoint=grand_path,
        budget=budget,
        final_metrics=final_metrics,
        sub_model_val_accuracy=sub_model_acc,
        stage_reports=reports,
    )


def run_single_stage(
    cfg: RunConfig,
    stage_name: str,
    backbone: str | None = None,
    registry=None,
    *,
    resume_checkpoint=None,
):
    """Run one stage as an independent job inside the shared run directory.

    Sub-model stages need --backbone and leave an exported adapter behind;
    the fusion stage consumes every backbone's exported post-full adapter.
    Missing predecessor artifacts are a transition error.
    """
    torch.set_num_threads(1)
    registry = registry if registry is not None else default_registry()
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, run_dir / "resolved_config.toml")
    train_records, val_records = _split_records(cfg)
    policy = load_policy(cfg.data.policy_file) if cfg.data.policy_file else imagenet_policy()
    cache: dict = {}
    resume = load_checkpoint(resume_checkpoint) if resume_checkpoint is not None else None

    if stage_name in ("selective", "full"):
        if backbone is None:
            raise StageError(f"stage {stage_name!r} needs --backbone")
        if backbone not in cfg.registry.backbones:
            raise StageError(f"backbone {backbone!r} is not in this run's registry block")
        backbone_dir = run_dir / "backbones" / backbone
        if stage_name == "selective":
            adapter = registry.load_adapter(
                backbone,
                cfg.registry.weights[backbone],
                seed=derive_seed(cfg.data.seed, INIT, backbone),
                input_size=cfg.data.input_size,
            )
            adapter.attach_head(
                cfg.data.num_classes,
                generator=torch_generator(cfg.data.seed, INIT, backbone, "head"),
            )
        else:
            prior = backbone_dir / "adapter_after_selective.pt"
            if not prior.exists():
                raise StageError(
                    f"{backbone}: cannot run 'full' before 'selective' "
                    f"(missing {prior})"
                )
            adapter = registry.load_adapter(
                backbone, str(prior), input_size=cfg.data.input_size
            )
        unit = SubModelUnit(adapter)
        stage_cfg = cfg.stage_config(stage_name)
        train_loader, val_loader = _loaders(
            cfg, stage_name, train_records, val_records, policy, cache
        )
        report = run_stage(
            stage_cfg,
            unit,
            train_loader,
            val_loader,
            stage_dir=backbone_dir / stage_name,
            resume_from=resume,
        )
        _write_json(report.as_dict(), backbone_dir / f"{stage_name}_report.json")
        adapter.save(backbone_dir / f"adapter_after_{stage_name}.pt")
        if stage_name == "full":
            _write_json(
                {"best_val_accuracy": report.best_val_accuracy},
                backbone_dir / "val_accuracy.json",
            )
        return report

    if stage_name != "fusion":
        raise StageError(f"unknown stage {stage_name!r}")
    adapters = []
    for name in cfg.registry.backbones:
        artifact = run_dir / "backbones" / name / "adapter_after_full.pt"
        if not artifact.exists():
            raise StageError(
                f"fusion requires every sub-model's comprehensive fine-tune; "
                f"missing {artifact}"
            )
        adapter = registry.load_adapter(name, str(artifact), input_size=cfg.data.input_size)
        adapter.detach_head()
        adapters.append(adapter)
    fusion_head = FusionHead(
        layout_of(adapters).width,
        cfg.data.num_classes,
        generator=torch_generator(cfg.data.seed, INIT, "fusion_head"),
    )
    budget = budget_gate(cfg, adapters, fusion_head)
    _write_json(budget, run_dir / "budget.json")
    grand = GrandModel(adapters, fusion_head)
    stage_cfg = cfg.stage_config("fusion")
    train_loader, val_loader = _loaders(
        cfg, "fusion", train_records, val_records, policy, cache
    )
    report = run_stage(
        stage_cfg,
        GrandModelUnit(grand),
        train_loader,
        val_loader,
        stage_dir=run_dir / "fusion",
        resume_from=resume,
    )
    grand.save(run_dir / "grand_model.pt")
    _write_json(report.as_dict(), run_dir / "fusion_report.json")
    return report


def write_predictions(grand: GrandModel, records, out_path, *, input_size: int, batch_size: int = 32) -> Path:
    """Predict the forgery probability for every record, 10 decimal places."""
    loader = BatchLoader(
        records,
        input_size=input_size,
        batch_size=batch_size,
        shuffle=False,
        augment=None,
    )
    adapters = list(grand.adapters)
    lines = ["sample_id,probability"]
    for batch in loader.batches(0):
        probs = predict_proba(adapters, grand.head, torch.from_numpy(batch.pixels))
        for sid, prob in zip(batch.sample_ids, probs.tolist()):
            lines.append(f"{sid},{prob:.10f}")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_path
