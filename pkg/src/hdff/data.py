"""Dataset ingestion, deterministic preprocessing, and batch loading.

Preprocessing follows the standard recipe: square bilinear resize,
unit-range scaling, stochastic augmentation (training only), then
per-channel normalization with the usual ImageNet statistics.
"""

import csv
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .augment import AugmentationPolicy, apply_policy, _unit_from_bytes
from .errors import DataError
from .seeding import derive_seed

log = logging.getLogger(__name__)

MANIFEST_HEADER = ["sample_id", "image_path", "label", "split"]
SPLITS = ("train", "val", "test")
UNLABELED = "unlabeled"

NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)


@dataclass
class ManifestRecord:
    sample_id: str
    image_path: str
    label: int | None
    split: str


def load_manifest(path, num_classes: int = 2) -> list[ManifestRecord]:
    """Parse a manifest CSV; every malformed row names its line number."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"manifest not found: {path}")
    records = []
    with open(p, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header {','.join(MANIFEST_HEADER)}")
        if header != MANIFEST_HEADER:
            raise DataError(
                f"{path}:1: bad header {','.join(header)!r}, "
                f"expected {','.join(MANIFEST_HEADER)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            sample_id, image_path, label_token, split = (f.strip() for f in row)
            if not sample_id:
                raise DataError(f"{path}:{lineno}: empty sample_id")
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split token {split!r}")
            if label_token == UNLABELED:
                if split != "test":
                    raise DataError(
                        f"{path}:{lineno}: 'unlabeled' is only allowed on the test split"
                    )
                label = None
            else:
                try:
                    label = int(label_token)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: label {label_token!r} is not an integer")
                if not (0 <= label < num_classes):
                    raise DataError(
                        f"{path}:{lineno}: label {label} outside [0, {num_classes})"
                    )
            records.append(ManifestRecord(sample_id, image_path, label, split))
    if not records:
        log.warning("manifest %s has a header but no rows", path)
    return records


def decode_image(path) -> Image.Image:
    """Decode a PNG/JPEG file; anything unreadable fails fast, by path."""
    try:
        img = Image.open(path)
        img.load()
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise DataError(f"unreadable image file: {path} ({exc})")
    if img.mode != "RGB":
        raise DataError(f"{path}: expected an RGB image, got mode {img.mode!r}")
    return img


def preprocess(image, input_size: int) -> np.ndarray:
    """Square bilinear resize to (3, S, S) with values scaled into [0, 1]."""
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[2] != 3:
            raise DataError(f"expected HxWx3 RGB raster, got shape {image.shape}")
        image = Image.fromarray(image.astype(np.uint8), "RGB")
    elif isinstance(image, Image.Image):
        if image.mode != "RGB":
            raise DataError(f"expected an RGB image, got mode {image.mode!r}")
    else:
        raise DataError(f"unsupported image type {type(image).__name__}")
    if image.width < 1 or image.height < 1:
        raise DataError("image has no pixels")
    resized = image.resize((input_size, input_size), Image.BILINEAR)
    arr = np.asarray(resized).transpose(2, 0, 1)
    return _unit_from_bytes(arr)


def normalize(image: np.ndarray) -> np.ndarray:
    """(in[c] - mean[c]) / std[c] with the fixed per-channel constants."""
    mean = np.array(NORM_MEAN, dtype=np.float32).reshape(3, 1, 1)
    std = np.array(NORM_STD, dtype=np.float32).reshape(3, 1, 1)
    return (image - mean) / std


@dataclass
class ImageBatch:
    pixels: np.ndarray  # float32 (B, 3, S, S), normalized
    sample_ids: list[str]
    labels: np.ndarray  # int64 (B,), -1 marks unlabeled


def _stable_id_hash(sample_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(sample_id.encode("utf-8"), digest_size=8).digest(), "big")


def holdout_split(records, fraction_denominator: int = 10):
    """Deterministic 90/10 train/val split by sample_id hash.

    Used when a manifest has no explicit val rows.
    """
    train, val = [], []
    for rec in records:
        (val if _stable_id_hash(rec.sample_id) % fraction_denominator == 0 else train).append(rec)
    return train, val


class BatchLoader:
    """Deterministic epoch iterator over manifest records.

    Batch order is a pure function of (shuffle_seed, epoch); each sample's
    augmentation stream is derived from (augment_seed, epoch, sample_id),
    so prefetch parallelism could never change emitted bytes.
    """

    def __init__(
        self,
        records,
        *,
        input_size: int,
        batch_size: int,
        shuffle_seed: int = 0,
        shuffle: bool = True,
        augment: AugmentationPolicy | None = None,
        augment_seed: int = 0,
        cache: bool = True,
    ):
        if batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {batch_size}")
        if not records:
            raise DataError("loader constructed over zero records")
        self.records = list(records)
        self.input_size = input_size
        self.batch_size = batch_size
        self.shuffle_seed = shuffle_seed
        self.shuffle = shuffle
        self.augment = augment
        self.augment_seed = augment_seed
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    @property
    def n(self) -> int:
        return len(self.records)

    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.records) / self.batch_size)

    def _order(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.records))
        rng = np.random.default_rng(derive_seed(self.shuffle_seed, "epoch", epoch))
        return rng.permutation(len(self.records))

    def _pixels(self, record: ManifestRecord) -> np.ndarray:
        if self._cache is not None and record.sample_id in self._cache:
            return self._cache[record.sample_id]
        img = decode_image(record.image_path)
        arr = preprocess(img, self.input_size)
        if self._cache is not None:
            self._cache[record.sample_id] = arr
        return arr

    def batches(self, epoch: int = 0):
        order = self._order(epoch)
        for start in range(0, len(order), self.batch_size):
            idx = order[start : start + self.batch_size]
            pixels, ids, labels = [], [], []
            for i in idx:
                rec = self.records[int(i)]
                arr = self._pixels(rec)
                if self.augment is not None:
                    rng = np.random.default_rng(
                        derive_seed(self.augment_seed, "epoch", epoch, rec.sample_id)
                    )
                    arr = apply_policy(self.augment, arr, rng)
                pixels.append(normalize(arr))
                ids.append(rec.sample_id)
                labels.append(-1 if rec.label is None else rec.label)
            yield ImageBatch(
                pixels=np.stack(pixels).astype(np.float32),
                sample_ids=ids,
                labels=np.asarray(labels, dtype=np.int64),
            )


def make_loader(
    records,
    batch_size: int,
    shuffle_seed: int,
    augment: AugmentationPolicy | None = None,
    *,
    input_size: int,
    augment_seed: int = 0,
    shuffle: bool = True,
    cache: bool = True,
) -> BatchLoader:
    """Build a loader; augmentation on means training mode, off means eval."""
    return BatchLoader(
        records,
        input_size=input_size,
        batch_size=batch_size,
        shuffle_seed=shuffle_seed,
        shuffle=shuffle,
        augment=augment,
        augment_seed=augment_seed,
        cache=cache,
    )
