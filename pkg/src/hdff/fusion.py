"""The fused grand model: concatenated backbone features and one FC classifier.

Each backbone's pooled pre-classifier features are concatenated in
registry order into a single vector; a single fully connected layer over
that vector is the grand model's classifier. Freeze policies decide
which parameter groups train during a stage.
"""

import enum
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, FreezeError, RegistryError
from .registry import BackboneAdapter, count_params

GRAND_SCHEMA = 1


@dataclass(frozen=True)
class FeatureLayout:
    """Ordered (name, offset, width) blocks of the fused vector."""

    entries: tuple

    @property
    def width(self) -> int:
        if not self.entries:
            return 0
        name, offset, width = self.entries[-1]
        return offset + width

    def block(self, name: str) -> tuple[int, int]:
        for entry_name, offset, width in self.entries:
            if entry_name == name:
                return offset, width
        raise RegistryError(f"no feature block for backbone {name!r}")


def layout_of(adapters) -> FeatureLayout:
    entries = []
    offset = 0
    for adapter in adapters:
        width = adapter.spec.feature_dim
        entries.append((adapter.spec.name, offset, width))
        offset += width
    return FeatureLayout(tuple(entries))


@dataclass
class FusedFeature:
    values: torch.Tensor  # (B, D)
    layout: FeatureLayout


def extract_fused(adapters, pixels: torch.Tensor) -> FusedFeature:
    """Concatenate per-backbone features in registry order.

    Original per-backbone classifier heads are bypassed entirely.
    """
    layout = layout_of(adapters)
    blocks = [adapter.extract_features(pixels) for adapter in adapters]
    return FusedFeature(values=torch.cat(blocks, dim=1), layout=layout)


class FusionHead(nn.Module):
    """Single FC layer over the fused feature vector."""

    def __init__(self, in_width: int, num_classes: int = 2, generator: torch.Generator | None = None):
        super().__init__()
        if in_width < 1:
            raise RegistryError(f"fusion head input width must be >= 1, got {in_width}")
        self.linear = nn.Linear(in_width, num_classes)
        # Zero bias, small uniform weights scaled by 1/sqrt(D).
        bound = 1.0 / (in_width ** 0.5)
        with torch.no_grad():
            if generator is None:
                self.linear.weight.uniform_(-bound, bound)
            else:
                self.linear.weight.uniform_(-bound, bound, generator=generator)
            self.linear.bias.zero_()

    @property
    def in_width(self) -> int:
        return self.linear.in_features

    @property
    def num_classes(self) -> int:
        return self.linear.out_features

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        return self.linear(values)


def fusion_forward(head: FusionHead, fused: FusedFeature) -> torch.Tensor:
    """logits = fused @ weight.T + bias, with width agreement enforced."""
    width = fused.values.shape[1]
    if width != head.in_width:
        raise RegistryError(
            f"fused width {width} does not match fusion head input width {head.in_width}"
        )
    if fused.layout.width != head.in_width:
        raise RegistryError(
            f"layout width {fused.layout.width} does not match fusion head input width "
            f"{head.in_width}"
        )
    return head(fused.values)


class FreezeMode(enum.Enum):
    HEAD_ONLY = "head_only"
    FULL = "full"
    FUSION_ONLY = "fusion_only"


@dataclass(frozen=True)
class FreezePolicy:
    mode: FreezeMode

    def split_groups(self, group_names) -> tuple[set, set]:
        """Partition group names into (trainable, frozen) per the mode."""
        names = set(group_names)
        if self.mode is FreezeMode.FULL:
            return names, set()
        if self.mode is FreezeMode.HEAD_ONLY:
            trainable = {n for n in names if n.endswith(".head")}
            if not trainable:
                raise FreezeError("HEAD_ONLY freeze found no classifier-head groups")
            return trainable, names - trainable
        if self.mode is FreezeMode.FUSION_ONLY:
            if "fusion_head" not in names:
                raise FreezeError("FUSION_ONLY freeze requires a 'fusion_head' group")
            return {"fusion_head"}, names - {"fusion_head"}
        raise FreezeError(f"unknown freeze mode {self.mode!r}")


def apply_freeze(groups: dict[str, list[nn.Parameter]], policy: FreezePolicy):
    """Mark exactly the policy's groups trainable; return (trainable, frozen) names."""
    trainable, frozen = policy.split_groups(groups.keys())
    for name in trainable:
        for p in groups[name]:
            p.requires_grad_(True)
    for name in frozen:
        for p in groups[name]:
            p.requires_grad_(False)
    return trainable, frozen


def predict_proba(adapters, head: FusionHead, pixels: torch.Tensor) -> torch.Tensor:
    """Per-sample probability of the forgery class (class index 1)."""
    if head.num_classes != 2:
        raise RegistryError(f"predict expects 2 classes, head has {head.num_classes}")
    with torch.no_grad():
        logits = fusion_forward(head, extract_fused(adapters, pixels))
        return F.softmax(logits, dim=1)[:, 1]


class GrandModel(nn.Module):
    """All sub-models plus the fusion head, assembled in registry order."""

    def __init__(self, adapters: list[BackboneAdapter], head: FusionHead):
        super().__init__()
        layout = layout_of(adapters)
        if layout.width != head.in_width:
            raise RegistryError(
                f"fusion head width {head.in_width} does not match summed feature dims "
                f"{layout.width}"
            )
        self.adapters = nn.ModuleList(adapters)
        self.head = head
        self.layout = layout

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        return fusion_forward(self.head, extract_fused(list(self.adapters), pixels))

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {}
        for adapter in self.adapters:
            # Sub-model temp heads are gone by assembly time; only bodies remain.
            groups[f"{adapter.spec.name}.body"] = list(adapter.extractor.parameters())
        groups["fusion_head"] = list(self.head.parameters())
        return groups

    def save(self, path):
        payload = {
            "schema": GRAND_SCHEMA,
            "manifest": {
                "backbones": [a.spec.name for a in self.adapters],
                "feature_dims": {a.spec.name: a.spec.feature_dim for a in self.adapters},
                "input_size": self.adapters[0].spec.input_size if len(self.adapters) else None,
                "num_classes": self.head.num_classes,
                "fused_width": self.layout.width,
                "param_count": count_params(self),
            },
            "backbone_states": {
                a.spec.name: a.extractor.state_dict() for a in self.adapters
            },
            "fusion_head_state": self.head.state_dict(),
        }
        torch.save(payload, path)


def load_grand_model(path, registry, *, map_location="cpu") -> GrandModel:
    """Rebuild a grand model from its exported checkpoint.

    The dimension invariant (fusion input width == sum of feature dims)
    is validated before the model is accepted.
    """
    try:
        payload = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read grand checkpoint {path}: {exc}")
    if not isinstance(payload, dict) or payload.get("schema") != GRAND_SCHEMA:
        raise CheckpointError(f"{path} is not a grand-model checkpoint")
    manifest = payload["manifest"]
    dims = manifest["feature_dims"]
    fused_width = manifest["fused_width"]
    if sum(dims.values()) != fused_width:
        raise CheckpointError(
            f"{path}: manifest fused width {fused_width} != sum of feature dims "
            f"{sum(dims.values())}"
        )
    head_state = payload["fusion_head_state"]
    if head_state["linear.weight"].shape[1] != fused_width:
        raise CheckpointError(
            f"{path}: fusion head weight width {head_state['linear.weight'].shape[1]} "
            f"does not match manifest fused width {fused_width}"
        )
    adapters = []
    for name in manifest["backbones"]:
        adapter = registry.load_adapter(
            name, "random", seed=0, input_size=manifest["input_size"]
        )
        if adapter.spec.feature_dim != dims[name]:
            raise CheckpointError(
                f"{path}: backbone {name!r} resolves feature_dim "
                f"{adapter.spec.feature_dim}, manifest says {dims[name]}"
            )
        adapter.extractor.load_state_dict(payload["backbone_states"][name])
        adapter.spec.param_count = count_params(adapter)
        adapters.append(adapter)
    head = FusionHead(fused_width, manifest["num_classes"])
    head.load_state_dict(head_state)
    model = GrandModel(adapters, head)
    model.eval()
    return model
