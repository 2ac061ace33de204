"""Image-to-patch decomposition and the block-wise / random masking strategies.

Both mask generators guarantee exact counts: ``|mask| == floor(ratio * n)``.
Block-wise masking over-covers with rectangles and then unmasks random members
until the count is exact, which keeps ratio sweeps comparable across
strategies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import IndivisibleDims, ShapeMismatch

# Block sampling constants: rectangle area in patches and aspect-ratio bounds.
# Exposed through TrainConfig so sweeps can override them.
BLOCK_AREA_MIN = 16
BLOCK_AREA_MAX = 48
BLOCK_ASPECT_MIN = 0.3
BLOCK_ASPECT_MAX = 1.0 / 0.3


@dataclass(frozen=True)
class PatchSequence:
    """Per-image sequence of flattened patches in row-major grid order."""

    patches: np.ndarray  # (n, patch_size**2 * channels)
    grid: tuple[int, int]  # (rows, cols)
    patch_size: int
    source_dims: tuple[int, int, int]  # (height, width, channels)

    def __post_init__(self):
        rows, cols = self.grid
        h, w, c = self.source_dims
        if rows * cols != self.patches.shape[0]:
            raise ShapeMismatch("patch count does not match grid")
        if rows * self.patch_size != h or cols * self.patch_size != w:
            raise ShapeMismatch("grid does not tile the source image")

    @property
    def count(self) -> int:
        return self.patches.shape[0]


@dataclass(frozen=True)
class MaskSet:
    """Set of masked patch indices for one image; always exactly floor(ratio*n)."""

    indices: tuple[int, ...]
    n_total: int
    requested_ratio: float

    def __post_init__(self):
        idx = self.indices
        if len(set(idx)) != len(idx):
            raise ShapeMismatch("mask indices must be unique")
        if idx and (min(idx) < 0 or max(idx) >= self.n_total):
            raise ShapeMismatch("mask index out of range")
        if list(idx) != sorted(idx):
            object.__setattr__(self, "indices", tuple(sorted(idx)))
        if len(idx) != mask_count(self.n_total, self.requested_ratio):
            raise ShapeMismatch(
                f"mask holds {len(idx)} indices but floor(ratio*n) is "
                f"{mask_count(self.n_total, self.requested_ratio)}")

    @classmethod
    def from_indices(cls, indices, n_total: int) -> "MaskSet":
        indices = tuple(sorted(int(i) for i in indices))
        return cls(indices, n_total, len(indices) / n_total if n_total else 0.0)

    def __len__(self) -> int:
        return len(self.indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.intp)

    def indicator(self) -> np.ndarray:
        """0/1 vector of length n_total with ones at masked positions."""
        delta = np.zeros(self.n_total, dtype=np.float64)
        delta[list(self.indices)] = 1.0
        return delta


def mask_count(n: int, ratio: float) -> int:
    """floor(ratio * n), guarded against float representation of the product."""
    return int(math.floor(ratio * n + 1e-9))


def patchify(image: np.ndarray, patch_size: int) -> PatchSequence:
    """Split an (H, W, C) image into non-overlapping flattened patches."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeMismatch(f"expected (H, W, C) image, got shape {image.shape}")
    h, w, c = image.shape
    if h % patch_size or w % patch_size:
        raise IndivisibleDims(f"{h}x{w} not divisible by patch size {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    tiled = image.reshape(rows, patch_size, cols, patch_size, c)
    flat = tiled.transpose(0, 2, 1, 3, 4).reshape(rows * cols, patch_size * patch_size * c)
    return PatchSequence(np.ascontiguousarray(flat), (rows, cols), patch_size, (h, w, c))


def unpatchify(seq: PatchSequence) -> np.ndarray:
    """Exact inverse of patchify."""
    rows, cols = seq.grid
    p = seq.patch_size
    h, w, c = seq.source_dims
    tiled = seq.patches.reshape(rows, cols, p, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(tiled.reshape(h, w, c))


def random_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskSet:
    """Uniform sample without replacement of exactly floor(ratio*n) indices."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio {ratio} outside [0, 1]")
    k = mask_count(n, ratio)
    if k == 0:
        return MaskSet((), n, ratio)
    chosen = rng.choice(n, size=k, replace=False)
    return MaskSet(tuple(sorted(int(i) for i in chosen)), n, ratio)


def blockwise_mask(grid: tuple[int, int], ratio: float, rng: np.random.Generator,
                   area_min: int = BLOCK_AREA_MIN, area_max: int = BLOCK_AREA_MAX,
                   aspect_min: float = BLOCK_ASPECT_MIN,
                   aspect_max: float = BLOCK_ASPECT_MAX) -> MaskSet:
    """Union rectangular blocks until coverage, then trim to the exact count.

    Blocks have area uniform in [area_min, area_max] patches and aspect ratio
    log-uniform in [aspect_min, aspect_max], clipped to the grid.
    """
    rows, cols = grid
    n = rows * cols
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio {ratio} outside [0, 1]")
    if ratio > 0.0 and n < 16:
        raise ValueError("block-wise masking needs a grid of at least 16 patches")
    target = mask_count(n, ratio)
    if target == 0:
        return MaskSet((), n, ratio)

    covered = np.zeros((rows, cols), dtype=bool)
    covered_count = 0
    attempts = 0
    while covered_count < target:
        attempts += 1
        if attempts > 10_000:
            # unreachable in practice; guarantees termination on any input
            free = np.flatnonzero(~covered.reshape(-1))
            extra = rng.choice(free, size=target - covered_count, replace=False)
            covered.reshape(-1)[extra] = True
            covered_count = target
            break
        area = rng.uniform(area_min, area_max)
        aspect = math.exp(rng.uniform(math.log(aspect_min), math.log(aspect_max)))
        bh = min(rows, max(1, int(round(math.sqrt(area * aspect)))))
        bw = min(cols, max(1, int(round(math.sqrt(area / aspect)))))
        top = int(rng.integers(0, rows - bh + 1))
        left = int(rng.integers(0, cols - bw + 1))
        block = covered[top:top + bh, left:left + bw]
        if block.all():
            continue
        covered_count += int(bh * bw - block.sum())
        block[:] = True

    masked = np.flatnonzero(covered.reshape(-1))
    while masked.size > target:
        drop = int(rng.integers(0, masked.size))
        masked = np.delete(masked, drop)
    return MaskSet(tuple(int(i) for i in masked), n, ratio)


@dataclass(frozen=True)
class MaskStatistics:
    realized_ratio: float
    component_count: int
    mean_component_size: float


def mask_statistics(mask: MaskSet, grid: tuple[int, int]) -> MaskStatistics:
    """Realized ratio plus 4-connected component summary of a mask on its grid."""
    rows, cols = grid
    if rows * cols != mask.n_total:
        raise ShapeMismatch("grid does not match mask.n_total")
    on = np.zeros((rows, cols), dtype=bool)
    for i in mask.indices:
        on[i // cols, i % cols] = True

    sizes = []
    seen = np.zeros_like(on)
    for r in range(rows):
        for c in range(cols):
            if not on[r, c] or seen[r, c]:
                continue
            stack = [(r, c)]
            seen[r, c] = True
            size = 0
            while stack:
                cr, cc = stack.pop()
                size += 1
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    nr, nc = cr + dr, cc + dc
                    if 0 <= nr < rows and 0 <= nc < cols and on[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        stack.append((nr, nc))
            sizes.append(size)

    return MaskStatistics(
        realized_ratio=len(mask) / mask.n_total if mask.n_total else 0.0,
        component_count=len(sizes),
        mean_component_size=float(np.mean(sizes)) if sizes else 0.0,
    )
