"""Small vision transformer student with mask-token substitution and an FC head.

Blocks are pre-norm with per-branch layer scale and stochastic depth:
``x += drop_path(ls * attn(ln(x)))`` then the same for the MLP. The forward
output is the raw residual stream (no final norm), so a zero-layer model is
the identity on its embedded input.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .patches import MaskSet, PatchSequence
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    layers: int
    hidden: int
    ffn_hidden: int
    heads: int
    patch_size: int
    image_size: int
    target_dim: int
    channels: int = 3
    layer_scale_init: float = 0.1
    drop_path_rate: float = 0.1

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ShapeMismatch(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError(f"drop_path_rate {self.drop_path_rate} outside [0, 1)")
        if self.image_size % self.patch_size:
            raise ShapeMismatch(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.layers < 0:
            raise ValueError("layers must be non-negative")
        for name in ("hidden", "ffn_hidden", "heads", "patch_size",
                     "image_size", "target_dim", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return (side, side)

    @property
    def num_patches(self) -> int:
        r, c = self.grid
        return r * c

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


class ViTParams:
    """Named parameter table; tensors are replaced, never mutated, on update.

    ``config`` describes the architecture the tensors belong to; generic
    parameter sets (optimizer tests, probes) may omit it.
    """

    def __init__(self, tensors: dict[str, Tensor], config: ViTConfig | None = None):
        self._tensors = dict(tensors)
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def with_updates(self, updates: dict[str, Tensor]) -> "ViTParams":
        merged = dict(self._tensors)
        for name, t in updates.items():
            if name not in merged:
                raise ShapeMismatch(f"unknown parameter {name!r}")
            merged[name] = t
        return ViTParams(merged, self.config)

    def with_entries(self, extra: dict[str, Tensor]) -> "ViTParams":
        merged = dict(self._tensors)
        merged.update(extra)
        return ViTParams(merged, self.config)

    def copy(self, requires_grad: bool | None = None) -> "ViTParams":
        out = {}
        for name, t in self._tensors.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out[name] = Tensor(t.data.copy(), requires_grad=rg)
        return ViTParams(out, self.config)

    def frozen(self) -> "ViTParams":
        return self.copy(requires_grad=False)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._tensors):
            t = self._tensors[name]
            h.update(name.encode())
            h.update(str(t.data.dtype).encode())
            h.update(str(t.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    @property
    def dtype(self):
        return next(iter(self._tensors.values())).data.dtype


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) with resampling outside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def init_params(config: ViTConfig, rng: np.random.Generator, dtype=np.float32) -> ViTParams:
    """Truncated-normal(0.02) projections/embeddings, zero biases, layer scales at their init."""
    h = config.hidden
    tensors: dict[str, Tensor] = {}

    def w(name, shape):
        tensors[name] = Tensor(trunc_normal(rng, shape, 0.02, dtype), requires_grad=True)

    def zeros(name, shape):
        tensors[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def const(name, shape, value):
        tensors[name] = Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)

    w("patch_proj.w", (config.patch_dim, h))
    zeros("patch_proj.b", (1, h))
    w("mask_token", (1, h))
    w("cls_token", (1, h))
    w("pos_embed", (config.num_patches + 1, h))
    for i in range(config.layers):
        p = f"blocks.{i}"
        const(f"{p}.ln1.g", (h,), 1.0)
        zeros(f"{p}.ln1.b", (h,))
        for proj in ("q", "k", "v", "o"):
            w(f"{p}.attn.{proj}.w", (h, h))
            zeros(f"{p}.attn.{proj}.b", (1, h))
        const(f"{p}.ls1", (1, h), config.layer_scale_init)
        const(f"{p}.ln2.g", (h,), 1.0)
        zeros(f"{p}.ln2.b", (h,))
        w(f"{p}.mlp.fc1.w", (h, config.ffn_hidden))
        zeros(f"{p}.mlp.fc1.b", (1, config.ffn_hidden))
        w(f"{p}.mlp.fc2.w", (config.ffn_hidden, h))
        zeros(f"{p}.mlp.fc2.b", (1, h))
        const(f"{p}.ls2", (1, h), config.layer_scale_init)
    w("head.w", (h, config.target_dim))
    zeros("head.b", (1, config.target_dim))
    return ViTParams(tensors, config)


def embed_and_mask(patches: PatchSequence, mask: MaskSet, params: ViTParams) -> Tensor:
    """Project patches, substitute the mask token at masked indices, prepend cls, add positions.

    Row i of the patch part is ``delta_i * mask_token + (1 - delta_i) * proj(x_i)``,
    so pixels inside masked patches cannot influence the output.
    """
    config = params.config
    n = patches.count
    if n != config.num_patches:
        raise ShapeMismatch(f"model expects {config.num_patches} patches, got {n}")
    if mask.n_total != n:
        raise ShapeMismatch(f"mask covers {mask.n_total} patches, image has {n}")
    if patches.patches.shape[1] != config.patch_dim:
        raise ShapeMismatch(
            f"patch vectors of length {patches.patches.shape[1]}, expected {config.patch_dim}")

    dtype = params.dtype
    x = Tensor(patches.patches.astype(dtype, copy=False))
    proj = T.add(T.matmul(x, params["patch_proj.w"]), params["patch_proj.b"])

    delta = mask.indicator().astype(dtype)
    keep = Tensor(np.ascontiguousarray(
        np.broadcast_to((1.0 - delta)[:, None], (n, config.hidden))))
    delta_col = Tensor(delta[:, None])
    seq = T.add(T.mul(proj, keep), T.matmul(delta_col, params["mask_token"]))

    full = T.concat([params["cls_token"], seq], axis=0)
    return T.add(full, params["pos_embed"])


def drop_path(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth on a residual branch: zero it with probability ``rate``
    in train mode (scaling survivors by 1/(1-rate)); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop_path rate {rate} outside [0, 1)")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rate == 0.0 or mode == "eval":
        return x
    if rng is None:
        raise ValueError("train-mode drop_path needs a generator")
    if rng.random() < rate:
        return T.scale(x, 0.0)
    return T.scale(x, 1.0 / (1.0 - rate))


def drop_path_rates(config: ViTConfig) -> list[float]:
    """Per-block rates, ramped linearly from 0 to the configured peak."""
    if config.layers == 0:
        return []
    return [float(r) for r in np.linspace(0.0, config.drop_path_rate, config.layers)]


def _attention(h: Tensor, params: ViTParams, block: int, config: ViTConfig) -> Tensor:
    p = f"blocks.{block}.attn"
    q = T.add(T.matmul(h, params[f"{p}.q.w"]), params[f"{p}.q.b"])
    k = T.add(T.matmul(h, params[f"{p}.k.w"]), params[f"{p}.k.b"])
    v = T.add(T.matmul(h, params[f"{p}.v.w"]), params[f"{p}.v.b"])
    dh = config.hidden // config.heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    outs = []
    for j in range(config.heads):
        lo, hi = j * dh, (j + 1) * dh
        qj = T.slice_axis(q, 1, lo, hi)
        kj = T.slice_axis(k, 1, lo, hi)
        vj = T.slice_axis(v, 1, lo, hi)
        att = T.softmax(T.scale(T.matmul(qj, T.transpose(kj)), inv_sqrt), axis=-1)
        outs.append(T.matmul(att, vj))
    cat = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
    return T.add(T.matmul(cat, params[f"{p}.o.w"]), params[f"{p}.o.b"])


def vit_forward(embedded: Tensor, params: ViTParams, config: ViTConfig,
                mode: str = "eval", rng: np.random.Generator | None = None,
                collect_layers: bool = False):
    """Run the block stack. With ``collect_layers`` also returns the residual
    stream after the embedding and after every block (so index -1 is the output)."""
    x = embedded
    captured = [x]
    rates = drop_path_rates(config)
    for i in range(config.layers):
        p = f"blocks.{i}"
        h1 = T.layer_norm(x, axis=-1, eps=1e-6,
                          gamma=params[f"{p}.ln1.g"], beta=params[f"{p}.ln1.b"])
        branch = T.mul(_attention(h1, params, i, config), params[f"{p}.ls1"])
        x = T.add(x, drop_path(branch, rates[i], mode, rng))

        h2 = T.layer_norm(x, axis=-1, eps=1e-6,
                          gamma=params[f"{p}.ln2.g"], beta=params[f"{p}.ln2.b"])
        m = T.matmul(T.gelu(T.add(T.matmul(h2, params[f"{p}.mlp.fc1.w"]),
                                  params[f"{p}.mlp.fc1.b"])),
                     params[f"{p}.mlp.fc2.w"])
        m = T.add(m, params[f"{p}.mlp.fc2.b"])
        branch = T.mul(m, params[f"{p}.ls2"])
        x = T.add(x, drop_path(branch, rates[i], mode, rng))
        if collect_layers:
            captured.append(x)
    if collect_layers:
        return x, captured
    return x


def mim_head(features: Tensor, params: ViTParams) -> Tensor:
    """Single affine map from student features to target space."""
    return T.add(T.matmul(features, params["head.w"]), params["head.b"])
