"""Augmentation op gallery.

Builds one synthetic image, applies every op kind at full probability
and a mid/high magnitude, and writes a contact sheet. Also demonstrates
the determinism contract: the same seed always produces the same bytes.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from hdff import apply_policy, imagenet_policy
from hdff.augment import OP_KINDS, AugmentationOp, apply_op

SIZE = 96

# A recognizable test card: smooth gradient plus a bright square.
yy, xx = np.mgrid[0:SIZE, 0:SIZE] / (SIZE - 1)
img = np.stack([0.2 + 0.6 * xx, 0.3 + 0.5 * yy, 0.7 - 0.4 * xx * yy]).astype(np.float32)
img[:, 20:44, 20:44] = np.array([0.9, 0.85, 0.2], dtype=np.float32).reshape(3, 1, 1)
img = (np.rint(img * 255) / 255).astype(np.float32)  # snap to the byte lattice

def to_pil(a):
    return Image.fromarray(np.rint(a * 255).astype(np.uint8).transpose(1, 2, 0), "RGB")

kinds = sorted(OP_KINDS)
cols = 5
rows = (len(kinds) + 1 + cols - 1) // cols
sheet = Image.new("RGB", (cols * SIZE, rows * SIZE), "white")
sheet.paste(to_pil(img), (0, 0))
print("original + one panel per op:")
for i, kind in enumerate(kinds, start=1):
    rng = np.random.default_rng(4)
    out = apply_op(AugmentationOp(kind, 1.0, 7), img, rng)
    sheet.paste(to_pil(out), ((i % cols) * SIZE, (i // cols) * SIZE))
    print(f"  {kind:<14} range [{out.min():.3f}, {out.max():.3f}]")

out_path = Path(__file__).with_name("augmentation_gallery.png")
sheet.save(out_path)
print(f"contact sheet saved to {out_path}")

# Determinism: one policy draw, same seed, identical bytes.
policy = imagenet_policy()
a = apply_policy(policy, img, np.random.default_rng(123))
b = apply_policy(policy, img, np.random.default_rng(123))
print("same-seed application bitwise identical:", a.tobytes() == b.tobytes())

# Invert applied twice is the identity, bitwise.
inv = AugmentationOp("Invert", 1.0, 0)
twice = apply_op(inv, apply_op(inv, img, np.random.default_rng(0)), np.random.default_rng(0))
print("invert twice bitwise identity:", twice.tobytes() == img.tobytes())
