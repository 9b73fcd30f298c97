"""Backbone adapter contract, registry, and parameter-budget accounting.

A registry maps names to adapter factories. Registration order is the
canonical order in which backbone features are concatenated by the
fusion layer, so it is insertion-ordered and read-only after startup.
"""

from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import RegistryError, WeightsUnavailableError
from .seeding import INIT, derive_seed, torch_generator

DEFAULT_PARAM_LIMIT = 200_000_000
# Documented reference point for the budget check: a four-backbone fused
# model totalling 180.16M parameters against the 200M ceiling passes with
# 19.84M parameters of headroom.
REFERENCE_TOTAL_PARAMS = 180_160_000

ADAPTER_SCHEMA = 1


@dataclass
class BackboneSpec:
    """Static description of a backbone; feature_dim is None until resolved."""

    name: str
    input_size: int = 224
    feature_dim: int | None = None
    param_count: int | None = None
    weights_source: str = "random"


class BackboneAdapter(nn.Module):
    """Uniform wrapper around a feature extractor plus a detachable head.

    The extractor maps image batches (B, 3, S, S) to pooled pre-classifier
    features (B, feature_dim). The head, when attached, is the backbone's
    own linear classifier used during per-model fine-tuning; it is discarded
    when the grand model is assembled.
    """

    def __init__(self, spec: BackboneSpec, extractor: nn.Module, head: nn.Linear | None = None):
        super().__init__()
        self.spec = spec
        self.extractor = extractor
        self.head = head
        if spec.feature_dim is None:
            self.resolve_feature_dim()
        self.spec.param_count = count_params(self)

    def resolve_feature_dim(self, batch_size: int = 1) -> int:
        """Probe the extractor with a dummy batch to fix feature_dim."""
        s = self.spec.input_size
        with torch.no_grad():
            out = self.extractor(torch.zeros(batch_size, 3, s, s))
        if out.dim() != 2:
            raise RegistryError(
                f"backbone {self.spec.name!r}: extractor output must be rank-2 "
                f"(batch, features), got shape {tuple(out.shape)}"
            )
        width = int(out.shape[1])
        if self.spec.feature_dim is not None and self.spec.feature_dim != width:
            raise RegistryError(
                f"backbone {self.spec.name!r}: probe width {width} disagrees with "
                f"resolved feature_dim {self.spec.feature_dim}"
            )
        self.spec.feature_dim = width
        return width

    def extract_features(self, pixels: torch.Tensor) -> torch.Tensor:
        feats = self.extractor(pixels)
        if feats.dim() != 2 or int(feats.shape[1]) != self.spec.feature_dim:
            raise RegistryError(
                f"backbone {self.spec.name!r}: extractor produced shape "
                f"{tuple(feats.shape)}, expected (B, {self.spec.feature_dim})"
            )
        return feats

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        if self.head is None:
            raise RegistryError(f"backbone {self.spec.name!r} has no classifier head attached")
        return self.head(self.extract_features(pixels))

    def attach_head(self, num_classes: int, generator: torch.Generator | None = None):
        head = nn.Linear(self.spec.feature_dim, num_classes)
        if generator is not None:
            bound = 1.0 / (self.spec.feature_dim ** 0.5)
            with torch.no_grad():
                head.weight.uniform_(-bound, bound, generator=generator)
                head.bias.zero_()
        self.head = head
        self.spec.param_count = count_params(self)
        return head

    def detach_head(self) -> nn.Linear | None:
        head, self.head = self.head, None
        self.spec.param_count = count_params(self)
        return head

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Disjoint, exhaustive partition of parameters into body and head."""
        groups = {f"{self.spec.name}.body": list(self.extractor.parameters())}
        if self.head is not None:
            groups[f"{self.spec.name}.head"] = list(self.head.parameters())
        return groups

    def save(self, path):
        payload = {
            "schema": ADAPTER_SCHEMA,
            "manifest": {
                "name": self.spec.name,
                "input_size": self.spec.input_size,
                "feature_dim": self.spec.feature_dim,
                "param_count": self.spec.param_count,
            },
            "extractor_state": self.extractor.state_dict(),
            "head_state": None if self.head is None else self.head.state_dict(),
        }
        torch.save(payload, path)


def count_params(module: nn.Module) -> int:
    """Exact number of scalar weights in a module (parameters only)."""
    return sum(p.numel() for p in module.parameters())


def serialized_bytes(module: nn.Module) -> int:
    """On-disk weight payload size, before container overhead."""
    return sum(p.numel() * p.element_size() for p in module.parameters())


@dataclass
class ParamBudget:
    per_model: dict[str, int]
    limit: int = DEFAULT_PARAM_LIMIT
    bytes_per_model: dict[str, int] | None = None

    @property
    def total(self) -> int:
        return sum(self.per_model.values())


@dataclass
class BudgetReport:
    passed: bool
    total: int
    limit: int
    headroom: int
    per_model: dict[str, int]
    total_bytes: int | None = None

    def as_table(self) -> str:
        width = max([len(n) for n in self.per_model] + [len("TOTAL")], default=5)
        lines = [f"{'model':<{width}}  {'params':>14}"]
        lines.append("-" * (width + 16))
        for name, count in self.per_model.items():
            lines.append(f"{name:<{width}}  {count:>14,}")
        lines.append("-" * (width + 16))
        lines.append(f"{'TOTAL':<{width}}  {self.total:>14,}")
        lines.append(f"{'limit':<{width}}  {self.limit:>14,}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{'headroom':<{width}}  {self.headroom:>14,}  [{verdict}]")
        if self.total_bytes is not None:
            lines.append(f"{'weight bytes':<{width}}  {self.total_bytes:>14,}")
        return "\n".join(lines)


def check_budget(budget: ParamBudget) -> BudgetReport:
    """Pass iff the summed parameter count fits under the limit.

    A fail is a valid report, not an exception.
    """
    total = budget.total
    total_bytes = None
    if budget.bytes_per_model is not None:
        total_bytes = sum(budget.bytes_per_model.values())
    return BudgetReport(
        passed=total <= budget.limit,
        total=total,
        limit=budget.limit,
        headroom=budget.limit - total,
        per_model=dict(budget.per_model),
        total_bytes=total_bytes,
    )


def budget_of(adapters, fusion_head=None, limit: int = DEFAULT_PARAM_LIMIT) -> ParamBudget:
    per_model = {a.spec.name: count_params(a) for a in adapters}
    per_bytes = {a.spec.name: serialized_bytes(a) for a in adapters}
    if fusion_head is not None:
        per_model["fusion_head"] = count_params(fusion_head)
        per_bytes["fusion_head"] = serialized_bytes(fusion_head)
    return ParamBudget(per_model=per_model, limit=limit, bytes_per_model=per_bytes)


class MockConvExtractor(nn.Module):
    """Tiny convolutional feature extractor for desk-scale runs and tests.

    Two conv stages, then a coarse 2x2 spatial pool (quadrant-level
    structure survives into the feature vector) with parallel average and
    max statistics per cell (mean shifts and local texture bursts both
    register), then a nonlinear projection to feature_dim. Accepts any
    input size >= 8.
    """

    def __init__(self, feature_dim: int, width: int = 8):
        super().__init__()
        self.conv1 = nn.Conv2d(3, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.fc = nn.Linear(width * 8, feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(x))
        x = F.avg_pool2d(x, 2)
        x = F.relu(self.conv2(x))
        cells = torch.cat(
            [F.adaptive_avg_pool2d(x, (2, 2)), F.adaptive_max_pool2d(x, (2, 2))], dim=1
        )
        return F.relu(self.fc(torch.flatten(cells, 1)))


def _seed_module(module: nn.Module, generator: torch.Generator):
    """Re-initialize conv/linear weights deterministically from a generator."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight.shape[1:].numel()
                bound = 1.0 / (fan_in ** 0.5)
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)


class ScriptedExtractor(nn.Module):
    """Wraps a TorchScript module exported elsewhere as a feature extractor.

    This is how full-scale backbones plug in: export the pooled
    pre-classifier trunk (everything before the original classifier) with
    torch.jit and point the registry at the file.
    """

    def __init__(self, scripted):
        super().__init__()
        self.scripted = scripted

    def forward(self, x):
        return self.scripted(x)


class BackboneRegistry:
    """Name -> adapter factory mapping; insertion order is fusion order."""

    def __init__(self):
        self._entries: dict[str, tuple[BackboneSpec, object]] = {}

    def register(self, spec: BackboneSpec, factory):
        """Register an adapter constructor under spec.name.

        factory(spec, weights_source, seed) must return a BackboneAdapter.
        """
        if spec.name in self._entries:
            raise RegistryError(f"backbone {spec.name!r} already registered")
        self._entries[spec.name] = (spec, factory)
        return self._entries[spec.name]

    def names(self) -> list[str]:
        return list(self._entries.keys())

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def spec(self, name: str) -> BackboneSpec:
        if name not in self._entries:
            raise RegistryError(f"unknown backbone {name!r}; registered: {self.names()}")
        return self._entries[name][0]

    def load_adapter(
        self,
        name: str,
        weights_source: str | None = None,
        *,
        seed: int = 0,
        input_size: int | None = None,
    ) -> BackboneAdapter:
        """Construct an adapter by name; never mutates the registry."""
        if name not in self._entries:
            raise RegistryError(f"unknown backbone {name!r}; registered: {self.names()}")
        template, factory = self._entries[name]
        spec = BackboneSpec(
            name=template.name,
            input_size=input_size if input_size is not None else template.input_size,
            weights_source=weights_source if weights_source is not None else template.weights_source,
        )
        return factory(spec, spec.weights_source, seed)


def _mock_factory(feature_dim: int, width: int):
    def build(spec: BackboneSpec, weights_source: str, seed: int) -> BackboneAdapter:
        extractor = MockConvExtractor(feature_dim, width=width)
        if weights_source == "random":
            _seed_module(extractor, torch_generator(seed, INIT, spec.name))
        elif weights_source == "pretrained-imagenet":
            raise WeightsUnavailableError(
                f"mock backbone {spec.name!r} has no pretrained weights; use 'random' or a file path"
            )
        else:
            _load_adapter_file_into(extractor, spec, weights_source)
            adapter = BackboneAdapter(spec, extractor)
            head_state = _head_state_from_file(weights_source)
            if head_state is not None:
                head = nn.Linear(spec.feature_dim, head_state["weight"].shape[0])
                head.load_state_dict(head_state)
                adapter.head = head
                adapter.spec.param_count = count_params(adapter)
            return adapter
        return BackboneAdapter(spec, extractor)

    return build


def _load_adapter_file_into(extractor: nn.Module, spec: BackboneSpec, path: str):
    payload = _read_adapter_file(path)
    try:
        extractor.load_state_dict(payload["extractor_state"])
    except RuntimeError as exc:
        raise WeightsUnavailableError(f"weights file {path} does not fit {spec.name!r}: {exc}")


def _read_adapter_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise WeightsUnavailableError(f"weights file not found: {path}")
    payload = torch.load(p, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("schema") != ADAPTER_SCHEMA:
        raise WeightsUnavailableError(f"{path} is not an adapter weights file")
    return payload


def _head_state_from_file(path: str):
    return _read_adapter_file(path).get("head_state")


def _scripted_factory(spec: BackboneSpec, weights_source: str, seed: int) -> BackboneAdapter:
    if weights_source in ("random", "pretrained-imagenet"):
        raise WeightsUnavailableError(
            f"backbone {spec.name!r} is an external architecture: provide a TorchScript "
            f"export of its pooled pre-classifier trunk as a file path "
            f"(weights_source={weights_source!r} cannot be resolved here)"
        )
    p = Path(weights_source)
    if not p.exists():
        raise WeightsUnavailableError(f"weights file not found: {weights_source}")
    scripted = torch.jit.load(str(p), map_location="cpu")
    return BackboneAdapter(spec, ScriptedExtractor(scripted))


# Mock backbones shipped for the test suite and desk-scale runs: distinct
# feature widths so concatenation layout bugs cannot cancel out.
MOCK_BACKBONES = {
    "mock_tiny": (16, 8),
    "mock_small": (32, 8),
    "mock_narrow": (8, 4),
    "mock_wide": (64, 12),
}

# The four full-scale backbones, registered in canonical fusion order.
FULL_SCALE_BACKBONES = ["swin_mlp", "coatnet", "efficientnetv2", "davit"]


def default_registry() -> BackboneRegistry:
    """Fresh registry with the full-scale backbone entries plus the mocks."""
    reg = BackboneRegistry()
    for name in FULL_SCALE_BACKBONES:
        reg.register(
            BackboneSpec(name=name, input_size=224, weights_source="pretrained-imagenet"),
            _scripted_factory,
        )
    for name, (dim, width) in MOCK_BACKBONES.items():
        reg.register(
            BackboneSpec(name=name, input_size=224, weights_source="random"),
            _mock_factory(dim, width),
        )
    return reg
