"""Generated desk-scale datasets for integration tests and ablations.

Two tasks are provided:

* a forgery-style task: "real" images are smooth random fields, "fake"
  images are the same fields with a locally blended high-frequency
  patch, so a small conv net can learn the artifact quickly;

* a patch-XOR task: the label is the XOR of two patch attributes, which
  no linear functional of the pixels can predict and which a linear head
  on frozen random features also struggles with, while end-to-end
  fine-tuning solves it.
"""

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .seeding import DATASET, derive_seed


def _save_png(img: np.ndarray, path: Path):
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), "RGB").save(path)


def _write_manifest(rows, manifest_path: Path):
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "image_path", "label", "split"])
        writer.writerows(rows)
    return manifest_path


def _smooth_field(rng: np.random.Generator, size: int, coarse: int = 5) -> np.ndarray:
    grid = rng.uniform(0.15, 0.85, size=(coarse, coarse, 3))
    img = Image.fromarray(np.rint(grid * 255.0).astype(np.uint8), "RGB")
    up = np.asarray(img.resize((size, size), Image.BILINEAR)).astype(np.float64) / 255.0
    return up.transpose(2, 0, 1)


def _blend_patch(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = img.shape[1]
    radius = rng.integers(size // 5, size // 3 + 1)
    cy = rng.integers(radius + 1, size - radius - 1)
    cx = rng.integers(radius + 1, size - radius - 1)
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    alpha = np.clip((radius - dist) / 2.0, 0.0, 1.0)
    texture = rng.uniform(0.0, 1.0, size=img.shape)
    return img * (1.0 - alpha) + texture * alpha


def make_forgery_dataset(
    out_dir,
    *,
    n_train: int = 240,
    n_val: int = 80,
    size: int = 64,
    seed: int = 0,
) -> Path:
    """Generate the patch-blend forgery dataset; returns the manifest path."""
    out = Path(out_dir)
    images = out / "images"
    images.mkdir(parents=True, exist_ok=True)
    rows = []
    for split, count in (("train", n_train), ("val", n_val)):
        for i in range(count):
            sid = f"{split}_{i:05d}"
            rng = np.random.default_rng(derive_seed(seed, DATASET, "forgery", split, i))
            img = _smooth_field(rng, size)
            label = i % 2
            if label == 1:
                img = _blend_patch(img, rng)
            path = images / f"{sid}.png"
            _save_png(img, path)
            rows.append([sid, str(path), label, split])
    return _write_manifest(rows, out / "manifest.csv")


def _xor_image(
    rng: np.random.Generator,
    size: int,
    delta: float,
    noise: float,
    patch: int,
    margin: int,
) -> tuple[np.ndarray, int]:
    img = 0.5 + rng.uniform(-noise, noise, size=(3, size, size))
    bit1 = int(rng.integers(2))
    bit2 = int(rng.integers(2))
    s1 = delta if bit1 else -delta
    s2 = delta if bit2 else -delta
    img[:, margin : margin + patch, margin : margin + patch] += s1
    img[:, size - margin - patch : size - margin, size - margin - patch : size - margin] += s2
    img += rng.uniform(-0.12, 0.12)
    return np.clip(img, 0.0, 1.0), bit1 ^ bit2


def make_xor_dataset(
    out_dir,
    *,
    n_train: int = 480,
    n_val: int = 160,
    size: int = 48,
    seed: int = 0,
    delta: float = 0.10,
    noise: float = 0.22,
) -> Path:
    """Generate the patch-XOR dataset; returns the manifest path."""
    out = Path(out_dir)
    images = out / "images"
    images.mkdir(parents=True, exist_ok=True)
    patch = size // 4
    margin = size // 8
    rows = []
    for split, count in (("train", n_train), ("val", n_val)):
        for i in range(count):
            sid = f"{split}_{i:05d}"
            rng = np.random.default_rng(derive_seed(seed, DATASET, "xor", split, i))
            img, label = _xor_image(rng, size, delta, noise, patch, margin)
            path = images / f"{sid}.png"
            _save_png(img, path)
            rows.append([sid, str(path), label, split])
    return _write_manifest(rows, out / "manifest.csv")
