"""End-to-end four-stage training run on generated data.

Generates a forgery-style dataset, writes a run config, executes the
full protocol (init, head-only fine-tune, full fine-tune per backbone,
then fusion-layer training), and writes a prediction file. Everything is
seeded; rerunning this script reproduces the numbers exactly.

Equivalent CLI:
    hdff train --config run.toml
    hdff predict --checkpoint <run>/grand_model.pt --manifest manifest.csv --out predictions.csv
"""

import tempfile
from pathlib import Path

from hdff import load_grand_model, load_manifest, make_forgery_dataset, parse_config
from hdff.pipeline import run_pipeline, write_predictions
from hdff.registry import default_registry

work = Path(tempfile.mkdtemp(prefix="hdff_pipeline_"))
manifest = make_forgery_dataset(work / "data", n_train=240, n_val=96, size=64, seed=7)

policy = work / "mild_policy.txt"
policy.write_text(
    '[("Color", 0.3, 3), ("Brightness", 0.3, 2)]\n'
    '[("Sharpness", 0.4, 4), ("Contrast", 0.3, 2)]\n'
)

config_path = work / "run.toml"
config_path.write_text(f"""
[registry]
backbones = ["mock_tiny", "mock_small", "mock_narrow", "mock_wide"]
weights = "random"

[data]
manifest = "{manifest}"
input_size = 48
seed = 99
policy_file = "{policy}"

[output]
run_dir = "{work}/run"

[stage.selective]
epochs = 3
batch_size = 16
lr = 1e-3

[stage.full]
epochs = 10
batch_size = 16
lr = 1e-3

[stage.fusion]
epochs = 10
batch_size = 16
lr = 1e-2
""")

result = run_pipeline(parse_config(config_path))

print("\nper-backbone validation accuracy after comprehensive fine-tuning:")
for name, acc in result.sub_model_val_accuracy.items():
    print(f"  {name:<12} {acc:.4f}")
print(f"fused grand model: accuracy {result.final_metrics.accuracy:.4f}, "
      f"auc {result.final_metrics.auc:.4f}")
print(f"parameter budget: {result.budget['total']:,} / {result.budget['limit']:,} "
      f"({'pass' if result.budget['passed'] else 'fail'})")

grand = load_grand_model(result.grand_checkpoint, default_registry())
val_records = [r for r in load_manifest(manifest) if r.split == "val"]
predictions = write_predictions(grand, val_records, work / "predictions.csv", input_size=48)
print(f"\nfirst prediction rows from {predictions}:")
for line in predictions.read_text().splitlines()[:4]:
    print(" ", line)
print(f"\nrun artifacts under {result.run_dir}")
