"""Feature-fusion training and inference for image forgery detection.

Four independently fine-tuned backbones feed their pooled pre-classifier
features into one concatenated vector; a single trained FC fusion layer
classifies it. Training follows a strict four-stage protocol (init,
head-only fine-tune, full fine-tune, fusion-layer training) with
bitwise freeze enforcement, parameter-budget accounting, deterministic
data pipelines, and an ablation harness.
"""

from .ablation import AblationResult, ablate_finetune_depth, ablate_scheduler, write_report
from .augment import (
    AugmentationOp,
    AugmentationPolicy,
    apply_policy,
    imagenet_policy,
    load_policy,
    save_policy,
)
from .config import RunConfig, parse_config, write_resolved_config
from .data import (
    BatchLoader,
    ImageBatch,
    ManifestRecord,
    decode_image,
    holdout_split,
    load_manifest,
    make_loader,
    normalize,
    preprocess,
)
from .errors import HdffError
from .evaluation import Metrics, evaluate
from .fusion import (
    FreezeMode,
    FreezePolicy,
    FusedFeature,
    FusionHead,
    GrandModel,
    apply_freeze,
    extract_fused,
    fusion_forward,
    layout_of,
    load_grand_model,
    predict_proba,
)
from .pipeline import run_pipeline, run_single_stage, write_predictions
from .registry import (
    BackboneAdapter,
    BackboneRegistry,
    BackboneSpec,
    ParamBudget,
    budget_of,
    check_budget,
    count_params,
    default_registry,
)
from .schedules import (
    CosineSchedule,
    OptimizerConfig,
    StepSchedule,
    cosine_lr,
    schedule_from_state,
    step_lr,
)
from .synthetic import make_forgery_dataset, make_xor_dataset
from .training import (
    StageConfig,
    StageId,
    StageReport,
    StageTracker,
    load_checkpoint,
    run_stage,
    save_checkpoint,
)

__version__ = "0.1.0"
