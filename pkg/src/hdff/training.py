"""Four-stage training state machine with freeze enforcement and resume.

Stages run in a fixed order per sub-model (init, head-only fine-tune,
full fine-tune), then one fusion stage over the assembled grand model.
Every stage snapshots its frozen parameter groups at entry and verifies
them bitwise at exit; any drift is a hard failure.
"""

import enum
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import CheckpointError, FreezeViolationError, StageError, TrainingError
from .evaluation import Metrics, evaluate_logits_fn
from .fusion import FreezeMode, FreezePolicy, GrandModel, apply_freeze
from .registry import BackboneAdapter
from .schedules import OptimizerConfig, Schedule, schedule_from_state

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1


class StageId(enum.Enum):
    INIT = "init"
    SELECTIVE_FT = "selective"
    COMPREHENSIVE_FT = "full"
    FUSION_TRAIN = "fusion"


STAGE_ORDER = [
    StageId.INIT,
    StageId.SELECTIVE_FT,
    StageId.COMPREHENSIVE_FT,
    StageId.FUSION_TRAIN,
]

# The stage <-> freeze binding is part of the protocol, not a tunable.
STAGE_FREEZE = {
    StageId.SELECTIVE_FT: FreezeMode.HEAD_ONLY,
    StageId.COMPREHENSIVE_FT: FreezeMode.FULL,
    StageId.FUSION_TRAIN: FreezeMode.FUSION_ONLY,
}


@dataclass
class StageConfig:
    stage: StageId
    epochs: int
    freeze: FreezePolicy
    optimizer: OptimizerConfig
    scheduler: Schedule
    batch_size: int
    seed: int
    schedule_per_step: bool = False

    def __post_init__(self):
        if self.stage not in STAGE_FREEZE:
            raise StageError(f"stage {self.stage} is not a trainable stage")
        expected = STAGE_FREEZE[self.stage]
        if self.freeze.mode is not expected:
            raise StageError(
                f"stage {self.stage.value!r} must use freeze mode {expected.value!r}, "
                f"got {self.freeze.mode.value!r}"
            )
        if self.epochs < 0:
            raise StageError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise StageError(f"batch_size must be >= 1, got {self.batch_size}")


class SubModelUnit:
    """Trains one backbone adapter with its own temporary classifier head."""

    def __init__(self, adapter: BackboneAdapter):
        if adapter.head is None:
            raise StageError(
                f"sub-model {adapter.spec.name!r} needs a classifier head before training"
            )
        self.adapter = adapter
        self.target = adapter.spec.name

    def parameter_groups(self):
        return self.adapter.parameter_groups()

    def group_modules(self):
        return {
            f"{self.adapter.spec.name}.body": self.adapter.extractor,
            f"{self.adapter.spec.name}.head": self.adapter.head,
        }

    def logits(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.adapter(pixels)

    def state_dict(self):
        return self.adapter.state_dict()

    def load_state_dict(self, state):
        self.adapter.load_state_dict(state)


class GrandModelUnit:
    """Trains the assembled grand model (fusion head over frozen bodies)."""

    def __init__(self, grand: GrandModel):
        self.grand = grand
        self.target = "fusion"

    def parameter_groups(self):
        return self.grand.parameter_groups()

    def group_modules(self):
        modules = {
            f"{a.spec.name}.body": a.extractor for a in self.grand.adapters
        }
        modules["fusion_head"] = self.grand.head
        return modules

    def logits(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.grand(pixels)

    def state_dict(self):
        return self.grand.state_dict()

    def load_state_dict(self, state):
        self.grand.load_state_dict(state)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val: Metrics

    def as_dict(self):
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "train_loss": self.train_loss,
            "val": self.val.as_dict(),
        }


@dataclass
class StageReport:
    stage: StageId
    target: str
    epochs: int
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_accuracy: float | None = None
    trainable_groups: list[str] = field(default_factory=list)
    frozen_groups: list[str] = field(default_factory=list)
    optimizer_steps: int = 0

    def as_dict(self):
        return {
            "stage": self.stage.value,
            "target": self.target,
            "epochs": self.epochs,
            "records": [r.as_dict() for r in self.records],
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "trainable_groups": self.trainable_groups,
            "frozen_groups": self.frozen_groups,
            "optimizer_steps": self.optimizer_steps,
        }


def _clone_state(state: dict) -> dict:
    return {k: v.detach().clone() for k, v in state.items()}


def _tensors_equal_bitwise(a: torch.Tensor, b: torch.Tensor) -> bool:
    if a.shape != b.shape or a.dtype != b.dtype:
        return False
    return a.numpy().tobytes() == b.numpy().tobytes()


def snapshot_groups(groups: dict, names) -> dict:
    return {name: [p.detach().clone() for p in groups[name]] for name in names}


def verify_frozen(groups: dict, snapshot: dict, *, context: str):
    """Bitwise comparison of current frozen parameters against their snapshot."""
    for name, saved in snapshot.items():
        current = groups[name]
        if len(saved) != len(current):
            raise FreezeViolationError(f"{context}: group {name!r} changed arity")
        for i, (old, new) in enumerate(zip(saved, current)):
            if not _tensors_equal_bitwise(old, new.detach()):
                raise FreezeViolationError(
                    f"{context}: frozen parameter {name}[{i}] drifted during the stage"
                )


def save_checkpoint(payload: dict, path) -> Path:
    """Atomic write: serialize to a temp file, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}")
    if not isinstance(payload, dict) or payload.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"{path}: checkpoint schema mismatch "
            f"(got {payload.get('schema') if isinstance(payload, dict) else type(payload)})"
        )
    return payload


def _set_module_modes(unit, trainable: set):
    for name, module in unit.group_modules().items():
        module.train(name in trainable)


def run_stage(
    config: StageConfig,
    unit,
    train_loader,
    val_loader,
    *,
    stage_dir=None,
    resume_from: dict | None = None,
) -> StageReport:
    """Run one training stage over the unit's trainable groups.

    The frozen-group snapshot taken at stage entry must match bitwise at
    stage exit. Per-epoch metrics are recorded and the stage ends with
    the best-validation-accuracy weights (earliest epoch wins ties)
    loaded back into the unit. When stage_dir is given, an atomic
    checkpoint is written after every epoch.
    """
    groups = unit.parameter_groups()
    trainable, frozen = apply_freeze(groups, config.freeze)
    _set_module_modes(unit, trainable)
    snapshot = snapshot_groups(groups, frozen)


    trainable_params = [p for name in sorted(trainable) for p in groups[name]]
    optimizer = config.optimizer.build(trainable_params) if config.epochs > 0 else None

    report = StageReport(
        stage=config.stage,
        target=unit.target,
        epochs=config.epochs,
        trainable_groups=sorted(trainable),
        frozen_groups=sorted(frozen),
    )
    best_state = None
    start_epoch = 0
    step = 0

    if resume_from is not None:
        ck = resume_from
        if ck["stage"] != config.stage.value or ck["target"] != unit.target:
            raise CheckpointError(
                f"checkpoint is for stage {ck['stage']!r} of {ck['target']!r}, "
                f"cannot resume stage {config.stage.value!r} of {unit.target!r}"
            )
        unit.load_state_dict(ck["unit_state"])
        if optimizer is not None and ck["optimizer_state"] is not None:
            optimizer.load_state_dict(ck["optimizer_state"])
        schedule_from_state(ck["scheduler_state"])  # validates stored state
        start_epoch = ck["epoch"] + 1
        step = ck["optimizer_steps"]
        report.records = [
            EpochRecord(r["epoch"], r["lr"], r["train_loss"], Metrics(**r["val"]))
            for r in ck["records"]
        ]
        report.best_epoch = ck["best"]["epoch"]
        report.best_val_accuracy = ck["best"]["accuracy"]
        best_state = ck["best"]["state"]

    for epoch in range(start_epoch, config.epochs):
        lr = config.scheduler.lr_at(step if config.schedule_per_step else epoch)
        for g in optimizer.param_groups:
            g["lr"] = lr
        loss_sum, seen = 0.0, 0
        for batch in train_loader.batches(epoch):
            if (batch.labels < 0).any():
                raise TrainingError("training batch contains unlabeled samples")
            if config.schedule_per_step:
                lr = config.scheduler.lr_at(step)
                for g in optimizer.param_groups:
                    g["lr"] = lr
            x = torch.from_numpy(batch.pixels)
            y = torch.from_numpy(batch.labels)
            logits = unit.logits(x)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at stage={config.stage.value} target={unit.target} "
                    f"epoch={epoch} step={step}: {loss.item()}; check the learning rate"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            loss_sum += float(loss.detach()) * len(batch.sample_ids)
            seen += len(batch.sample_ids)

        _set_module_modes(unit, set())  # eval mode for validation
        val_metrics = evaluate_logits_fn(unit.logits, val_loader)
        _set_module_modes(unit, trainable)

        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            train_loss=loss_sum / max(seen, 1),
            val=val_metrics,
        )
        report.records.append(record)
        if report.best_val_accuracy is None or val_metrics.accuracy > report.best_val_accuracy:
            report.best_epoch = epoch
            report.best_val_accuracy = val_metrics.accuracy
            best_state = _clone_state(unit.state_dict())

        if stage_dir is not None:
            save_checkpoint(
                {
                    "schema": CHECKPOINT_SCHEMA,
                    "stage": config.stage.value,
                    "target": unit.target,
                    "epoch": epoch,
                    "unit_state": _clone_state(unit.state_dict()),
                    "optimizer_state": optimizer.state_dict(),
                    "scheduler_state": config.scheduler.state(),
                    "seed": config.seed,
                    "optimizer_steps": step,
                    "records": [r.as_dict() for r in report.records],
                    "best": {
                        "epoch": report.best_epoch,
                        "accuracy": report.best_val_accuracy,
                        "state": best_state,
                    },
                },
                Path(stage_dir) / f"epoch_{epoch:04d}.ckpt",
            )

    report.optimizer_steps = step
    verify_frozen(
        unit.parameter_groups(),
        snapshot,
        context=f"stage={config.stage.value} target={unit.target}",
    )
    if best_state is not None:
        unit.load_state_dict(best_state)
    _set_module_modes(unit, set())
    return report


class StageTracker:
    """Enforces the legal stage order, per sub-model plus the fusion gate."""

    def __init__(self, backbone_names):
        self.backbone_names = list(backbone_names)
        self._done: dict[str, set] = {name: set() for name in self.backbone_names}
        self._fusion_done = False

    def _require(self, name: str, stage: StageId):
        if name not in self._done:
            raise StageError(f"unknown sub-model {name!r}")
        done = self._done[name]
        idx = STAGE_ORDER.index(stage)
        if stage is StageId.FUSION_TRAIN:
            raise StageError("fusion is not a per-sub-model stage")
        if stage in done:
            raise StageError(f"{name}: stage {stage.value!r} already completed (no reversals)")
        prior = STAGE_ORDER[:idx]
        missing = [s.value for s in prior if s not in done]
        if missing:
            raise StageError(
                f"{name}: cannot run {stage.value!r} before {missing} (no skips)"
            )

    def start(self, name: str, stage: StageId):
        self._require(name, stage)

    def complete(self, name: str, stage: StageId):
        self._require(name, stage)
        self._done[name].add(stage)

    def start_fusion(self):
        if self._fusion_done:
            raise StageError("fusion stage already completed")
        incomplete = [
            n for n in self.backbone_names
            if StageId.COMPREHENSIVE_FT not in self._done[n]
        ]
        if incomplete:
            raise StageError(
                f"fusion requires all sub-models to complete comprehensive fine-tuning; "
                f"missing: {incomplete}"
            )

    def complete_fusion(self):
        self.start_fusion()
        self._fusion_done = True

    def completed(self, name: str) -> set:
        return set(self._done[name])
