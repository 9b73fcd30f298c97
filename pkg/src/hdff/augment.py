"""Stochastic augmentation policies over unit-range images.

A policy is a list of sub-policies; applying it picks one sub-policy
uniformly at random and runs its two ops in order, each firing
independently with its own probability. Ops reproduce the behaviour of
the classic 8-bit image operations: inputs are float (3, S, S) arrays in
[0, 1], every op computes on the 0..255 byte lattice and lands its
output back on that lattice, clamped to [0, 1]. That keeps Invert an
exact involution and makes same-seed application bit-reproducible.
"""

import ast
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import PolicyError

OP_KINDS = frozenset(
    {
        "Invert",
        "Rotate",
        "Sharpness",
        "ShearY",
        "TranslateX",
        "Color",
        "Brightness",
        "ShearX",
        "TranslateY",
        "Contrast",
        "Posterize",
        "Solarize",
        "Equalize",
        "AutoContrast",
    }
)

# Ops whose magnitude direction is sampled uniformly at apply time.
SIGNED_KINDS = frozenset({"Rotate", "ShearX", "ShearY", "TranslateX", "TranslateY"})

# Ops that ignore magnitude_level entirely.
UNMAGNITUDE_KINDS = frozenset({"Invert", "Equalize", "AutoContrast"})

MAX_LEVEL = 9

# Fill value for pixels revealed by geometric warps: mid-gray.
_FILL = 0.5


@dataclass(frozen=True)
class AugmentationOp:
    kind: str
    probability: float
    magnitude_level: int

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise PolicyError(f"unknown op kind {self.kind!r}")
        if not (0.0 <= self.probability <= 1.0):
            raise PolicyError(f"{self.kind}: probability {self.probability} outside [0, 1]")
        if not (0 <= int(self.magnitude_level) <= MAX_LEVEL):
            raise PolicyError(
                f"{self.kind}: magnitude_level {self.magnitude_level} outside [0, {MAX_LEVEL}]"
            )


@dataclass
class AugmentationPolicy:
    sub_policies: list[tuple[AugmentationOp, AugmentationOp]]

    def __post_init__(self):
        if not self.sub_policies:
            raise PolicyError("policy has no sub-policies")


def _unit_from_bytes(b: np.ndarray) -> np.ndarray:
    return (b.astype(np.float64) / 255.0).astype(np.float32)


def _to_bytes(img: np.ndarray) -> np.ndarray:
    # Clamp first so out-of-range intermediates cannot wrap.
    return np.rint(np.clip(img.astype(np.float64), 0.0, 1.0) * 255.0)


def _quantize(byte_img: np.ndarray) -> np.ndarray:
    return _unit_from_bytes(np.clip(np.rint(byte_img), 0.0, 255.0))


# Magnitude table: levels 0..9 map linearly into each op's range.
def _frac(level: int) -> float:
    return level / MAX_LEVEL


def rotate_angle(level: int) -> float:
    return 30.0 * _frac(level)


def shear_amount(level: int) -> float:
    return 0.3 * _frac(level)


def translate_pixels(level: int, size: int) -> float:
    return 0.45 * size * _frac(level)


def enhance_factor(level: int) -> float:
    return 0.1 + 1.8 * _frac(level)


def posterize_bits(level: int) -> int:
    return int(round(8 - 4 * _frac(level)))


def solarize_threshold(level: int) -> float:
    return 1.0 - _frac(level)


def _affine(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    b = _to_bytes(img)
    out = np.empty_like(b)
    for c in range(b.shape[0]):
        out[c] = ndimage.affine_transform(
            b[c], matrix, offset=offset, order=1, mode="constant", cval=_FILL * 255.0
        )
    return _quantize(out)


def _op_rotate(img, level, sign):
    theta = np.deg2rad(sign * rotate_angle(level))
    cos, sin = np.cos(theta), np.sin(theta)
    m = np.array([[cos, sin], [-sin, cos]])
    center = (np.array(img.shape[1:], dtype=np.float64) - 1.0) / 2.0
    offset = center - m @ center
    return _affine(img, m, offset)


def _op_shear_x(img, level, sign):
    m = np.array([[1.0, 0.0], [sign * shear_amount(level), 1.0]])
    center = (np.array(img.shape[1:], dtype=np.float64) - 1.0) / 2.0
    offset = center - m @ center
    return _affine(img, m, offset)


def _op_shear_y(img, level, sign):
    m = np.array([[1.0, sign * shear_amount(level)], [0.0, 1.0]])
    center = (np.array(img.shape[1:], dtype=np.float64) - 1.0) / 2.0
    offset = center - m @ center
    return _affine(img, m, offset)


def _op_translate_x(img, level, sign):
    dx = sign * translate_pixels(level, img.shape[2])
    return _affine(img, np.eye(2), np.array([0.0, -dx]))


def _op_translate_y(img, level, sign):
    dy = sign * translate_pixels(level, img.shape[1])
    return _affine(img, np.eye(2), np.array([-dy, 0.0]))


def _op_invert(img, level, sign):
    return _quantize(255.0 - _to_bytes(img))


def _op_solarize(img, level, sign):
    b = _to_bytes(img)
    thresh = np.rint(solarize_threshold(level) * 255.0)
    return _quantize(np.where(b < thresh, b, 255.0 - b))


def _op_posterize(img, level, sign):
    bits = posterize_bits(level)
    mask = 255 & ~((1 << (8 - bits)) - 1)
    b = _to_bytes(img).astype(np.int64)
    return _quantize((b & mask).astype(np.float64))


def _op_equalize(img, level, sign):
    b = _to_bytes(img).astype(np.int64)
    out = np.empty_like(b)
    for c in range(b.shape[0]):
        hist = np.bincount(b[c].ravel(), minlength=256)
        nonzero = hist[hist > 0]
        if nonzero.size <= 1:
            out[c] = b[c]
            continue
        step = (int(hist.sum()) - int(nonzero[-1])) // 255
        if step == 0:
            out[c] = b[c]
            continue
        n = step // 2
        lut = np.empty(256, dtype=np.int64)
        for i in range(256):
            lut[i] = min(n // step, 255)
            n += int(hist[i])
        out[c] = lut[b[c]]
    return _quantize(out.astype(np.float64))


def _op_autocontrast(img, level, sign):
    b = _to_bytes(img)
    out = np.empty_like(b)
    for c in range(b.shape[0]):
        lo, hi = b[c].min(), b[c].max()
        if hi <= lo:
            out[c] = b[c]
        else:
            out[c] = (b[c] - lo) * (255.0 / (hi - lo))
    return _quantize(out)


def _luma(b: np.ndarray) -> np.ndarray:
    return (299.0 * b[0] + 587.0 * b[1] + 114.0 * b[2]) / 1000.0


def _blend(degenerate: np.ndarray, b: np.ndarray, factor: float) -> np.ndarray:
    return _quantize(degenerate + factor * (b - degenerate))


def _op_color(img, level, sign):
    b = _to_bytes(img)
    gray = np.broadcast_to(_luma(b), b.shape)
    return _blend(gray, b, enhance_factor(level))


def _op_contrast(img, level, sign):
    b = _to_bytes(img)
    mean = np.floor(_luma(b).mean() + 0.5)
    return _blend(np.full_like(b, mean), b, enhance_factor(level))


def _op_brightness(img, level, sign):
    b = _to_bytes(img)
    return _blend(np.zeros_like(b), b, enhance_factor(level))


_SMOOTH_KERNEL = np.array([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]) / 13.0


def _op_sharpness(img, level, sign):
    b = _to_bytes(img)
    smooth = np.empty_like(b)
    for c in range(b.shape[0]):
        smooth[c] = ndimage.correlate(b[c], _SMOOTH_KERNEL, mode="nearest")
    # Border pixels stay untouched, matching the classic filter behaviour.
    smooth[:, 0, :] = b[:, 0, :]
    smooth[:, -1, :] = b[:, -1, :]
    smooth[:, :, 0] = b[:, :, 0]
    smooth[:, :, -1] = b[:, :, -1]
    return _blend(smooth, b, enhance_factor(level))


_OP_FUNCS = {
    "Invert": _op_invert,
    "Rotate": _op_rotate,
    "Sharpness": _op_sharpness,
    "ShearY": _op_shear_y,
    "TranslateX": _op_translate_x,
    "Color": _op_color,
    "Brightness": _op_brightness,
    "ShearX": _op_shear_x,
    "TranslateY": _op_translate_y,
    "Contrast": _op_contrast,
    "Posterize": _op_posterize,
    "Solarize": _op_solarize,
    "Equalize": _op_equalize,
    "AutoContrast": _op_autocontrast,
}


def apply_op(op: AugmentationOp, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Fire op with its probability; untouched images pass through bitwise."""
    if rng.random() >= op.probability:
        return image
    sign = 1.0
    if op.kind in SIGNED_KINDS:
        sign = 1.0 if rng.integers(2) == 0 else -1.0
    return _OP_FUNCS[op.kind](image, int(op.magnitude_level), sign)


def apply_policy(
    policy: AugmentationPolicy, image: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Apply one uniformly chosen sub-policy to a (3, S, S) unit-range image."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise PolicyError(f"expected (3, S, S) image, got shape {image.shape}")
    lo, hi = float(image.min()), float(image.max())
    if lo < 0.0 or hi > 1.0:
        raise PolicyError(f"image values outside [0, 1]: min={lo}, max={hi}")
    first, second = policy.sub_policies[int(rng.integers(len(policy.sub_policies)))]
    image = apply_op(first, image, rng)
    image = apply_op(second, image, rng)
    return image


# The canonical 25-sub-policy set searched on ImageNet. Levels on
# magnitude-free ops are placeholders kept for table fidelity.
_IMAGENET_TABLE = [
    (("Posterize", 0.4, 8), ("Rotate", 0.6, 9)),
    (("Solarize", 0.6, 5), ("AutoContrast", 0.6, 5)),
    (("Equalize", 0.8, 8), ("Equalize", 0.6, 3)),
    (("Posterize", 0.6, 7), ("Posterize", 0.6, 6)),
    (("Equalize", 0.4, 7), ("Solarize", 0.2, 4)),
    (("Equalize", 0.4, 4), ("Rotate", 0.8, 8)),
    (("Solarize", 0.6, 3), ("Equalize", 0.6, 7)),
    (("Posterize", 0.8, 5), ("Equalize", 1.0, 2)),
    (("Rotate", 0.2, 3), ("Solarize", 0.6, 8)),
    (("Equalize", 0.6, 8), ("Posterize", 0.4, 6)),
    (("Rotate", 0.8, 8), ("Color", 0.4, 0)),
    (("Rotate", 0.4, 9), ("Equalize", 0.6, 2)),
    (("Equalize", 0.0, 7), ("Equalize", 0.8, 8)),
    (("Invert", 0.6, 4), ("Equalize", 1.0, 8)),
    (("Color", 0.6, 4), ("Contrast", 1.0, 8)),
    (("Rotate", 0.8, 8), ("Color", 1.0, 2)),
    (("Color", 0.8, 8), ("Solarize", 0.8, 7)),
    (("Sharpness", 0.4, 7), ("Invert", 0.6, 8)),
    (("ShearX", 0.6, 5), ("Equalize", 1.0, 9)),
    (("Color", 0.4, 0), ("Equalize", 0.6, 3)),
    (("Equalize", 0.4, 7), ("Solarize", 0.2, 4)),
    (("Solarize", 0.6, 5), ("AutoContrast", 0.6, 5)),
    (("Invert", 0.6, 4), ("Equalize", 1.0, 8)),
    (("Color", 0.6, 4), ("Contrast", 1.0, 8)),
    (("Equalize", 0.8, 8), ("Equalize", 0.6, 3)),
]


def imagenet_policy() -> AugmentationPolicy:
    subs = [
        (AugmentationOp(*a), AugmentationOp(*b)) for a, b in _IMAGENET_TABLE
    ]
    return AugmentationPolicy(subs)


def load_policy(path) -> AugmentationPolicy:
    """Read a policy file: one sub-policy per line as
    [("Kind", probability, level), ("Kind", probability, level)].
    """
    subs = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            pair = ast.literal_eval(line)
        except (ValueError, SyntaxError) as exc:
            raise PolicyError(f"{path}:{lineno}: unparseable sub-policy: {exc}")
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            raise PolicyError(f"{path}:{lineno}: sub-policy must be a pair of ops")
        ops = []
        for entry in pair:
            if not (isinstance(entry, (list, tuple)) and len(entry) == 3):
                raise PolicyError(f"{path}:{lineno}: op must be (kind, probability, level)")
            try:
                ops.append(AugmentationOp(str(entry[0]), float(entry[1]), int(entry[2])))
            except PolicyError as exc:
                raise PolicyError(f"{path}:{lineno}: {exc}")
        subs.append((ops[0], ops[1]))
    if not subs:
        raise PolicyError(f"{path}: no sub-policies found")
    return AugmentationPolicy(subs)


def save_policy(policy: AugmentationPolicy, path):
    lines = []
    for a, b in policy.sub_policies:
        lines.append(
            f'[("{a.kind}", {a.probability}, {a.magnitude_level}), '
            f'("{b.kind}", {b.probability}, {b.magnitude_level})]'
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
