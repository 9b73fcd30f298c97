"""Run configuration: TOML parsing, validation, and the frozen resolved copy.

Validation aggregates every problem it finds instead of stopping at the
first, so a bad config is fixable in one pass.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .errors import ConfigError
from .fusion import FreezeMode, FreezePolicy
from .registry import DEFAULT_PARAM_LIMIT, default_registry
from .schedules import (
    DEFAULT_STAGE_LR,
    CosineSchedule,
    OptimizerConfig,
    StepSchedule,
)
from .seeding import derive_seed
from .training import STAGE_FREEZE, StageConfig, StageId

STAGE_NAMES = ("selective", "full", "fusion")
PIPELINE_ORDER = list(STAGE_NAMES)
MIN_INPUT_SIZE = 32

RUN_DIR_ENV = "HDFF_RUN_DIR"


@dataclass
class RegistryBlock:
    backbones: list[str]
    weights: dict[str, str]
    param_limit: int = DEFAULT_PARAM_LIMIT


@dataclass
class DataBlock:
    manifest: str
    input_size: int = 224
    policy_file: str = ""
    seed: int = 0
    num_classes: int = 2


@dataclass
class StageBlock:
    epochs: int = 2
    batch_size: int = 16
    lr: float | None = None
    scheduler: str = "cosine"
    eta_min: float = 0.0
    t_max: int | None = None
    gamma: float = 0.1
    step_size: int = 30
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int | None = None
    freeze: str | None = None
    schedule_per_step: bool = False


@dataclass
class OutputBlock:
    run_dir: str = "runs/default"


@dataclass
class RunConfig:
    registry: RegistryBlock
    data: DataBlock
    stages: dict[str, StageBlock]
    output: OutputBlock
    pipeline_order: list[str] = field(default_factory=lambda: list(PIPELINE_ORDER))

    def run_dir(self) -> Path:
        override = os.environ.get(RUN_DIR_ENV)
        return Path(override) if override else Path(self.output.run_dir)

    def stage_config(self, name: str, *, scheduler_kind: str | None = None) -> StageConfig:
        """Materialize the StageConfig for one stage block."""
        block = self.stages[name]
        stage = {"selective": StageId.SELECTIVE_FT,
                 "full": StageId.COMPREHENSIVE_FT,
                 "fusion": StageId.FUSION_TRAIN}[name]
        lr = block.lr if block.lr is not None else DEFAULT_STAGE_LR[name]
        kind = scheduler_kind or block.scheduler
        if kind == "cosine":
            scheduler = CosineSchedule(
                eta_max=lr,
                eta_min=block.eta_min,
                t_max=block.t_max if block.t_max is not None else max(block.epochs, 1),
            )
        else:
            scheduler = StepSchedule(eta_0=lr, gamma=block.gamma, step_size=block.step_size)
        seed = block.seed if block.seed is not None else derive_seed(
            self.data.seed, "stage", name
        )
        return StageConfig(
            stage=stage,
            epochs=block.epochs,
            freeze=FreezePolicy(STAGE_FREEZE[stage]),
            optimizer=OptimizerConfig(
                base_lr=lr,
                weight_decay=block.weight_decay,
                betas=(block.beta1, block.beta2),
                eps=block.eps,
            ),
            scheduler=scheduler,
            batch_size=block.batch_size,
            seed=seed,
            schedule_per_step=block.schedule_per_step,
        )


_FREEZE_FOR_STAGE = {"selective": "head_only", "full": "full", "fusion": "fusion_only"}


def _take(table: dict, key: str, default, expected_type, problems: list, where: str):
    if key not in table:
        return default
    value = table.pop(key)
    if expected_type is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, expected_type) or isinstance(value, bool) and expected_type is not bool:
        problems.append(f"{where}.{key}: expected {expected_type.__name__}, got {value!r}")
        return default
    return value


def parse_config(path, registry=None) -> RunConfig:
    """Parse and fully validate a run config; raises ConfigError with every problem."""
    p = Path(path)
    if not p.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        with open(p, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: TOML syntax error: {exc}"])

    registry = registry if registry is not None else default_registry()
    problems: list[str] = []

    reg_table = dict(raw.get("registry", {}))
    backbones = reg_table.pop("backbones", [])
    if not isinstance(backbones, list) or not all(isinstance(b, str) for b in backbones):
        problems.append("registry.backbones: expected a list of backbone names")
        backbones = []
    if not backbones:
        problems.append("registry.backbones: at least one backbone is required")
    seen = set()
    for name in backbones:
        if name not in registry:
            problems.append(f"registry.backbones: unknown backbone {name!r}")
        if name in seen:
            problems.append(f"registry.backbones: duplicate backbone {name!r}")
        seen.add(name)
    weights_raw = reg_table.pop("weights", "random")
    if isinstance(weights_raw, str):
        weights = {name: weights_raw for name in backbones}
    elif isinstance(weights_raw, dict):
        weights = {name: weights_raw.get(name, "random") for name in backbones}
        for key in weights_raw:
            if key not in backbones:
                problems.append(f"registry.weights: entry for unlisted backbone {key!r}")
    else:
        problems.append("registry.weights: expected a string or per-backbone table")
        weights = {name: "random" for name in backbones}
    param_limit = _take(reg_table, "param_limit", DEFAULT_PARAM_LIMIT, int, problems, "registry")
    if param_limit < 1:
        problems.append(f"registry.param_limit: must be positive, got {param_limit}")
    for key in reg_table:
        problems.append(f"registry.{key}: unknown key")

    data_table = dict(raw.get("data", {}))
    manifest = _take(data_table, "manifest", "", str, problems, "data")
    if not manifest:
        problems.append("data.manifest: required")
    elif not Path(manifest).exists():
        problems.append(f"data.manifest: file not found: {manifest}")
    input_size = _take(data_table, "input_size", 224, int, problems, "data")
    if input_size < MIN_INPUT_SIZE:
        problems.append(f"data.input_size: must be >= {MIN_INPUT_SIZE}, got {input_size}")
    policy_file = _take(data_table, "policy_file", "", str, problems, "data")
    if policy_file and not Path(policy_file).exists():
        problems.append(f"data.policy_file: file not found: {policy_file}")
    seed = _take(data_table, "seed", 0, int, problems, "data")
    num_classes = _take(data_table, "num_classes", 2, int, problems, "data")
    if num_classes < 2:
        problems.append(f"data.num_classes: must be >= 2, got {num_classes}")
    for key in data_table:
        problems.append(f"data.{key}: unknown key")

    stage_tables = dict(raw.get("stage", {}))
    stages: dict[str, StageBlock] = {}
    for name in STAGE_NAMES:
        table = dict(stage_tables.pop(name, {}))
        where = f"stage.{name}"
        block = StageBlock(
            epochs=_take(table, "epochs", 2, int, problems, where),
            batch_size=_take(table, "batch_size", 16, int, problems, where),
            lr=_take(table, "lr", None, float, problems, where) if "lr" in table else None,
            scheduler=_take(table, "scheduler", "cosine", str, problems, where),
            eta_min=_take(table, "eta_min", 0.0, float, problems, where),
            t_max=_take(table, "t_max", None, int, problems, where) if "t_max" in table else None,
            gamma=_take(table, "gamma", 0.1, float, problems, where),
            step_size=_take(table, "step_size", 30, int, problems, where),
            weight_decay=_take(table, "weight_decay", 1e-2, float, problems, where),
            beta1=_take(table, "beta1", 0.9, float, problems, where),
            beta2=_take(table, "beta2", 0.999, float, problems, where),
            eps=_take(table, "eps", 1e-8, float, problems, where),
            seed=_take(table, "seed", None, int, problems, where) if "seed" in table else None,
            freeze=_take(table, "freeze", None, str, problems, where) if "freeze" in table else None,
            schedule_per_step=_take(table, "schedule_per_step", False, bool, problems, where),
        )
        if block.epochs < 0:
            problems.append(f"{where}.epochs: must be >= 0, got {block.epochs}")
        if block.batch_size < 1:
            problems.append(f"{where}.batch_size: must be >= 1, got {block.batch_size}")
        if block.scheduler not in ("cosine", "step"):
            problems.append(
                f"{where}.scheduler: expected 'cosine' or 'step', got {block.scheduler!r}"
            )
        if block.freeze is not None and block.freeze != _FREEZE_FOR_STAGE[name]:
            problems.append(
                f"{where}.freeze: stage {name!r} is bound to "
                f"{_FREEZE_FOR_STAGE[name]!r}, got {block.freeze!r}"
            )
        for key in table:
            problems.append(f"{where}.{key}: unknown key")
        stages[name] = block
    for key in stage_tables:
        problems.append(f"stage.{key}: unknown stage block (expected {STAGE_NAMES})")

    pipeline_table = dict(raw.get("pipeline", {}))
    order = pipeline_table.pop("order", list(PIPELINE_ORDER))
    if order != PIPELINE_ORDER:
        problems.append(
            f"pipeline.order: stages must run in the fixed order {PIPELINE_ORDER}, got {order}"
        )
    for key in pipeline_table:
        problems.append(f"pipeline.{key}: unknown key")

    output_table = dict(raw.get("output", {}))
    run_dir = _take(output_table, "run_dir", "runs/default", str, problems, "output")
    for key in output_table:
        problems.append(f"output.{key}: unknown key")

    for key in raw:
        if key not in ("registry", "data", "stage", "output", "pipeline"):
            problems.append(f"{key}: unknown top-level section")

    if problems:
        raise ConfigError(problems)

    return RunConfig(
        registry=RegistryBlock(backbones=backbones, weights=weights, param_limit=param_limit),
        data=DataBlock(
            manifest=manifest,
            input_size=input_size,
            policy_file=policy_file,
            seed=seed,
            num_classes=num_classes,
        ),
        stages=stages,
        output=OutputBlock(run_dir=run_dir),
        pipeline_order=list(order),
    )


def resolved_dict(cfg: RunConfig) -> dict:
    """Config with every default materialized, as a nested dict."""
    out = {
        "registry": {
            "backbones": list(cfg.registry.backbones),
            "weights": dict(cfg.registry.weights),
            "param_limit": cfg.registry.param_limit,
        },
        "data": {
            "manifest": cfg.data.manifest,
            "input_size": cfg.data.input_size,
            "policy_file": cfg.data.policy_file,
            "seed": cfg.data.seed,
            "num_classes": cfg.data.num_classes,
        },
        "pipeline": {"order": list(cfg.pipeline_order)},
        "stage": {},
        "output": {"run_dir": cfg.output.run_dir},
    }
    for name in STAGE_NAMES:
        block = cfg.stages[name]
        resolved_lr = block.lr if block.lr is not None else DEFAULT_STAGE_LR[name]
        resolved_seed = block.seed if block.seed is not None else derive_seed(
            cfg.data.seed, "stage", name
        )
        out["stage"][name] = {
            "epochs": block.epochs,
            "batch_size": block.batch_size,
            "lr": float(resolved_lr),
            "scheduler": block.scheduler,
            "eta_min": block.eta_min,
            "t_max": block.t_max if block.t_max is not None else max(block.epochs, 1),
            "gamma": block.gamma,
            "step_size": block.step_size,
            "weight_decay": block.weight_decay,
            "beta1": block.beta1,
            "beta2": block.beta2,
            "eps": block.eps,
            "seed": resolved_seed,
            "freeze": _FREEZE_FOR_STAGE[name],
            "schedule_per_step": block.schedule_per_step,
        }
    return out


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError([f"cannot serialize {type(value).__name__} to TOML"])


def _emit_table(name: str, table: dict, lines: list):
    scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
    subtables = {k: v for k, v in table.items() if isinstance(v, dict)}
    if scalars or not subtables:
        lines.append(f"[{name}]")
        for key, value in scalars.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    for key, sub in subtables.items():
        _emit_table(f"{name}.{key}", sub, lines)


def write_resolved_config(cfg: RunConfig, path) -> Path:
    """Write the fully resolved config; re-parsing it yields an equal RunConfig."""
    lines: list[str] = []
    data = resolved_dict(cfg)
    for section, table in data.items():
        _emit_table(section, table, lines)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines), encoding="utf-8")
    return path
