"""Learning-rate schedule comparison: cosine annealing vs step decay.

Prints both traces over one 30-epoch stage and saves a plot next to this
script. The cosine curve glides from eta_max to eta_min along a
half-cosine; the step curve drops by a whole decade every step_size
epochs. The scheduler ablation harness (demo 06) trains the same model
under both.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from hdff import CosineSchedule, StepSchedule, cosine_lr, step_lr

EPOCHS = 30

cosine = CosineSchedule(eta_max=1e-3, eta_min=1e-5, t_max=EPOCHS)
step = StepSchedule(eta_0=1e-3, gamma=0.1, step_size=10)

print(f"{'epoch':>5}  {'cosine':>12}  {'step':>12}")
for t in range(EPOCHS + 1):
    print(f"{t:>5}  {cosine.lr_at(t):>12.3e}  {step_lr(step, t):>12.3e}")

# cosine_lr reads the schedule's own step pointer; handy mid-training
mid = CosineSchedule(eta_max=1e-3, eta_min=1e-5, t_max=EPOCHS, t_cur=EPOCHS // 2)
print(f"\nhalfway cosine lr: {cosine_lr(mid):.3e}")

fig, ax = plt.subplots(figsize=(7, 4))
ts = list(range(EPOCHS + 1))
ax.plot(ts, [cosine.lr_at(t) for t in ts], label="cosine annealing", marker="o", ms=3)
ax.plot(ts, [step.lr_at(t) for t in ts], label="step decay", marker="s", ms=3)
ax.set_xlabel("epoch")
ax.set_ylabel("learning rate")
ax.set_yscale("log")
ax.legend()
ax.grid(alpha=0.3)
out = Path(__file__).with_name("lr_schedules.png")
fig.savefig(out, dpi=120, bbox_inches="tight")
print(f"plot saved to {out}")
