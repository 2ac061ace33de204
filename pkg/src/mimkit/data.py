"""Dataset ingestion: a deterministic synthetic generator and a binary PPM loader.

Synthetic images are class-conditional arrangements of colored rectangles and
discs with per-image position jitter and noise, built so that classes are
separable by a small ViT (and, more weakly, by a linear probe on raw pixels).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .errors import CorruptHeader, IndivisibleDims, UnsupportedFormat

AUGMENTATIONS = ("none", "crop_jitter")


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"  # or "folder"
    num_classes: int = 4
    images_per_class: int = 8
    image_size: int = 32
    seed: int = 0
    path: str = ""
    image_format: str = "ppm"
    augmentation: str = "none"
    jitter_pixels: int = 2
    color_jitter: float = 0.4

    def __post_init__(self):
        if self.source not in ("synthetic", "folder"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {self.augmentation!r}")
        if self.source == "synthetic" and (self.num_classes < 1 or self.images_per_class < 1):
            raise ValueError("synthetic dataset needs at least one class and one image")


@dataclass(frozen=True)
class LabeledImages:
    images: np.ndarray  # (count, h, w, c) float32 in [0, 1]
    labels: np.ndarray  # (count,) int64

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()

    def __len__(self) -> int:
        return len(self.labels)


def _render_class_pattern(rng: np.random.Generator, size: int) -> list[dict]:
    blobs = []
    for _ in range(3):
        blobs.append({
            "kind": "rect" if rng.random() < 0.5 else "disc",
            "cy": float(rng.uniform(0.2, 0.8)),
            "cx": float(rng.uniform(0.2, 0.8)),
            "extent": float(rng.uniform(0.15, 0.3)),
            "color": rng.uniform(0.3, 1.0, size=3),
        })
    return blobs


def _draw(img: np.ndarray, blobs: list[dict], jitter: np.ndarray) -> None:
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    for blob, (dy, dx) in zip(blobs, jitter):
        cy = blob["cy"] * size + dy
        cx = blob["cx"] * size + dx
        r = blob["extent"] * size
        if blob["kind"] == "rect":
            inside = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        else:
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[inside] = blob["color"]


def synthetic_dataset(spec: DatasetSpec) -> LabeledImages:
    """Deterministic class-conditional images: same spec, same bytes."""
    size = spec.image_size
    images = np.zeros((spec.num_classes * spec.images_per_class, size, size, 3),
                      dtype=np.float32)
    labels = np.zeros(len(images), dtype=np.int64)
    patterns = [
        _render_class_pattern(np.random.default_rng(np.random.SeedSequence([spec.seed, c])), size)
        for c in range(spec.num_classes)
    ]
    i = 0
    for c in range(spec.num_classes):
        for k in range(spec.images_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, c, k]))
            img = np.full((size, size, 3), 0.1, dtype=np.float64)
            jitter = rng.integers(-1, 2, size=(3, 2))
            _draw(img, patterns[c], jitter)
            img += rng.normal(0.0, 0.05, size=img.shape)
            images[i] = np.clip(img, 0.0, 1.0).astype(np.float32)
            labels[i] = c
            i += 1
    return LabeledImages(images, labels)


# ---------------------------------------------------------------------------
# binary PPM (P6)
# ---------------------------------------------------------------------------


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        if buf[pos:pos + 1].isspace():
            pos += 1
        elif buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise CorruptHeader("unexpected end of PPM header")
    return buf[start:pos], pos


def read_ppm(path: str) -> np.ndarray:
    """Decode one binary PPM file to a float32 (H, W, 3) array in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] == b"P3":
        raise UnsupportedFormat("ASCII PPM (P3) is not supported; use binary P6")
    if buf[:2] != b"P6":
        raise UnsupportedFormat(f"not a PPM file: magic {buf[:2]!r}")
    pos = 2
    try:
        w_tok, pos = _read_token(buf, pos)
        h_tok, pos = _read_token(buf, pos)
        max_tok, pos = _read_token(buf, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError as exc:
        raise CorruptHeader(f"bad PPM header field: {exc}") from exc
    if maxval != 255:
        raise UnsupportedFormat(f"only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 3
    payload = buf[pos:pos + expected]
    if len(payload) != expected:
        raise CorruptHeader(f"PPM payload truncated: {len(payload)} of {expected} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return (pixels.astype(np.float32) / 255.0)


def write_ppm(path: str, image: np.ndarray) -> None:
    """Quantize a float image in [0, 1] to 8-bit binary PPM."""
    pixels = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, c = pixels.shape
    if c != 3:
        raise UnsupportedFormat("PPM requires 3 channels")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def load_image_folder(path: str, image_format: str = "ppm") -> LabeledImages:
    """Load ``<path>/<class-name>/*.ppm`` with lexicographic class and file order."""
    if image_format != "ppm":
        raise UnsupportedFormat(f"unsupported image format {image_format!r}")
    class_dirs = sorted(d for d in os.listdir(path)
                        if os.path.isdir(os.path.join(path, d)))
    if not class_dirs:
        raise CorruptHeader(f"no class subdirectories under {path}")
    images, labels = [], []
    for label, class_dir in enumerate(class_dirs):
        full = os.path.join(path, class_dir)
        for name in sorted(os.listdir(full)):
            if not name.endswith(".ppm"):
                continue
            images.append(read_ppm(os.path.join(full, name)))
            labels.append(label)
    if not images:
        raise CorruptHeader(f"no .ppm files under {path}")
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise CorruptHeader(f"images disagree on shape: {sorted(shapes)}")
    return LabeledImages(np.stack(images), np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def crop_jitter(images: np.ndarray, rng: np.random.Generator,
                jitter_pixels: int = 2, color_jitter: float = 0.4) -> np.ndarray:
    """Translate by up to +-jitter_pixels (edge padding) and scale channels by
    1 +- color_jitter. Dimensions are preserved, so patch divisibility holds."""
    out = np.empty_like(images)
    pad = jitter_pixels
    for i, img in enumerate(images):
        dy, dx = rng.integers(-pad, pad + 1, size=2)
        padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
        h, w = img.shape[:2]
        shifted = padded[pad + dy:pad + dy + h, pad + dx:pad + dx + w]
        gains = rng.uniform(1.0 - color_jitter, 1.0 + color_jitter, size=3)
        out[i] = np.clip(shifted * gains.astype(images.dtype), 0.0, 1.0)
    return out


def make_augment(spec: DatasetSpec):
    """Batch-level augmentation callable for the training loop, or None."""
    if spec.augmentation == "none":
        return None

    def apply(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return crop_jitter(images, rng, spec.jitter_pixels, spec.color_jitter)

    return apply


def build_dataset(spec: DatasetSpec) -> LabeledImages:
    if spec.source == "synthetic":
        return synthetic_dataset(spec)
    return load_image_folder(spec.path, spec.image_format)


def check_patch_divisibility(images: np.ndarray, patch_size: int) -> None:
    h, w = images.shape[1:3]
    if h % patch_size or w % patch_size:
        raise IndivisibleDims(f"{h}x{w} images not divisible by patch size {patch_size}")
