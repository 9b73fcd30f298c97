"""Parameter-budget accounting walkthrough.

Loads the shipped mock backbones, attaches a fusion head sized for their
concatenated features, and prints the budget table the `hdff budget`
subcommand produces. Also shows the documented full-scale reference
case: a 180.16M-parameter fused model against the 200M ceiling.
"""

import torch

from hdff import FusionHead, ParamBudget, budget_of, check_budget, default_registry, layout_of
from hdff.registry import REFERENCE_TOTAL_PARAMS

registry = default_registry()
print("registered backbones (fusion order):", registry.names())

# Desk-scale ensemble: the four mock backbones at 48 px.
adapters = [
    registry.load_adapter(name, "random", seed=i, input_size=48)
    for i, name in enumerate(["mock_tiny", "mock_small", "mock_narrow", "mock_wide"])
]
for a in adapters:
    print(f"  {a.spec.name}: feature_dim={a.spec.feature_dim}, params={a.spec.param_count:,}")

head = FusionHead(layout_of(adapters).width, num_classes=2,
                  generator=torch.Generator().manual_seed(0))
report = check_budget(budget_of(adapters, head))
print()
print(report.as_table())

# The full-scale reference: four ImageNet-pretrained backbones plus the
# fusion layer total 180.16M parameters, comfortably inside the 200M cap.
print()
reference = check_budget(ParamBudget(per_model={"fused_model_reference": REFERENCE_TOTAL_PARAMS}))
print(reference.as_table())
