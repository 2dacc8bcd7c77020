"""Frame-wise ViT with class-token temporal shift and per-dataset heads.

Images (B, 3, H, W) and clips (B, T, 3, H, W) go through the same stack: a
clip batch is folded to (B*T, 3, H, W), encoded frame by frame, and the final
class tokens are regrouped to (B, T, D) and mean-pooled over T before the
dataset head.

Parameter names (all stored as ``Tensor``):

    embed.E           (3*P*P, D)
    embed.pos         (N+1, D)
    embed.cls         (D,)
    block{l}.ln1.gamma / .beta, block{l}.ln2.gamma / .beta     (D,)
    block{l}.msa.wq / wk / wv / wo (D, D),  .bq / bv / bo (D,)
    block{l}.mlp.w1 (D, M), .b1 (M,), .w2 (M, D), .b2 (D,)
    head{i}.w (D, C_i), head{i}.b (C_i,)

There is no key bias: it adds the same constant to every score of a query
row, which softmax cancels, so it would be a parameter without effect.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tensor_file import TensorFormatError, read_tensor, write_tensor

LN_EPS = 1e-5


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ViTConfig:
    image_size: tuple[int, int] = (32, 32)
    patch: int = 16
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_hidden: int = 128
    dataset_heads: list[int] = field(default_factory=lambda: [10])
    shift: str = "tokenshift"  # or "none"
    shift_back: int | None = None  # D_b; None -> dim // 8
    shift_fwd: int | None = None  # D_f; None -> dim // 8
    dtype: str = "f32"

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.dataset_heads = [int(c) for c in self.dataset_heads]
        if self.shift_back is None:
            self.shift_back = self.dim // 8
        if self.shift_fwd is None:
            self.shift_fwd = self.dim // 8
        self.validate()

    def validate(self) -> None:
        h, w = self.image_size
        if h % self.patch or w % self.patch:
            raise ConfigError(f"image size {h}x{w} is not divisible by patch size {self.patch}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.shift_back < 0 or self.shift_fwd < 0:
            raise ConfigError("shift amounts must be non-negative")
        if self.shift_back + self.shift_fwd > self.dim:
            raise ConfigError(
                f"shift_back + shift_fwd = {self.shift_back + self.shift_fwd} exceeds dim {self.dim}")
        if self.shift not in ("tokenshift", "none"):
            raise ConfigError(f"unknown shift variant {self.shift!r}")
        if self.dtype not in T.DTYPES:
            raise ConfigError(f"unknown dtype {self.dtype!r}")
        if not self.dataset_heads or min(self.dataset_heads) < 1:
            raise ConfigError("need at least one head with >= 1 class")

    @property
    def num_patches(self) -> int:
        h, w = self.image_size
        return (h * w) // (self.patch * self.patch)

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def shift_enabled(self) -> bool:
        return self.shift == "tokenshift"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> ViTConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ActivationSet:
    """Token activations of shape (B*T, N+1, D); token 0 of each row is the class token."""

    z: Tensor
    frames: int = 1

    def __post_init__(self):
        if self.z.shape[0] % self.frames:
            raise ConfigError(f"{self.z.shape[0]} rows are not a multiple of T={self.frames}")

    @property
    def batch(self) -> int:
        return self.z.shape[0] // self.frames


def parameter_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    D, M = cfg.dim, cfg.mlp_hidden
    shapes = {
        "embed.E": (cfg.patch_dim, D),
        "embed.pos": (cfg.num_patches + 1, D),
        "embed.cls": (D,),
    }
    for l in range(cfg.depth):
        p = f"block{l}"
        shapes.update({
            f"{p}.ln1.gamma": (D,), f"{p}.ln1.beta": (D,),
            f"{p}.msa.wq": (D, D), f"{p}.msa.bq": (D,),
            f"{p}.msa.wk": (D, D),
            f"{p}.msa.wv": (D, D), f"{p}.msa.bv": (D,),
            f"{p}.msa.wo": (D, D), f"{p}.msa.bo": (D,),
            f"{p}.ln2.gamma": (D,), f"{p}.ln2.beta": (D,),
            f"{p}.mlp.w1": (D, M), f"{p}.mlp.b1": (M,),
            f"{p}.mlp.w2": (M, D), f"{p}.mlp.b2": (D,),
        })
    for i, c in enumerate(cfg.dataset_heads):
        shapes[f"head{i}.w"] = (D, c)
        shapes[f"head{i}.b"] = (c,)
    return shapes


def _is_weight(name: str) -> bool:
    leaf = name.rsplit(".", 1)[1]
    return leaf in ("E", "wq", "wk", "wv", "wo", "w1", "w2", "w")


@dataclass
class ViTModel:
    config: ViTConfig
    params: dict[str, Tensor]

    def __post_init__(self):
        expected = parameter_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.params:
                raise ConfigError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise ConfigError(
                    f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        extra = set(self.params) - set(expected)
        if extra:
            raise ConfigError(f"unexpected parameters: {sorted(extra)}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(T.DTYPES[self.config.dtype])

    def copy(self) -> ViTModel:
        return ViTModel(self.config, {k: Tensor(v.data.copy()) for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def init_model(cfg: ViTConfig, seed: int = 0, std: float = 0.02) -> ViTModel:
    """Truncated-normal (2 sigma) weights, unit LN gains, zeros elsewhere."""
    rng = np.random.default_rng(seed)
    dt = T.DTYPES[cfg.dtype]
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if _is_weight(name):
            v = rng.standard_normal(shape)
            bad = np.abs(v) > 2.0
            while bad.any():
                v[bad] = rng.standard_normal(int(bad.sum()))
                bad = np.abs(v) > 2.0
            v = v * std
        elif name.endswith(".gamma"):
            v = np.ones(shape)
        else:
            v = np.zeros(shape)
        params[name] = Tensor(v, dt)
    return ViTModel(cfg, params)


# ---------------------------------------------------------------------------
# layers


def patchify(x, patch: int) -> Tensor:
    """(B', 3, H, W) -> (B', N, 3*P*P).

    Patches are taken in raster order over the patch grid (row by row); each
    patch vector is laid out channel-major, then pixel row, then pixel column,
    i.e. element (c, i, j) of a patch lands at c*P*P + i*P + j.
    """
    x = T.tensor(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ConfigError(f"expected (B, 3, H, W) pixels, got {x.shape}")
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ConfigError(f"image size {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = T.reshape(x, (b, c, gh, patch, gw, patch))
    x = T.permute(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, gh * gw, c * patch * patch))


def embed(patches: Tensor, p: Mapping[str, Tensor], frames: int = 1) -> ActivationSet:
    """Prepend the class token and add position embeddings."""
    E, pos, cls = p["embed.E"], p["embed.pos"], p["embed.cls"]
    if patches.shape[-1] != E.shape[0]:
        raise ConfigError(f"patch dim {patches.shape[-1]} does not match embedding rows {E.shape[0]}")
    if patches.shape[1] + 1 != pos.shape[0]:
        raise ConfigError(f"{patches.shape[1]} patches do not match {pos.shape[0]} position rows")
    rows, dim = patches.shape[0], E.shape[1]
    tokens = T.matmul(patches, E)
    cls_rows = T.add(Tensor(np.zeros((rows, 1, dim), dtype=tokens.dtype)), cls)
    z = T.add(T.concat([cls_rows, tokens], axis=1), pos)
    return ActivationSet(z, frames)


def token_shift(acts: ActivationSet, shift_back: int, shift_fwd: int) -> ActivationSet:
    """Shift class-token channels between neighbouring frames of each clip.

    Channels [0, D_b) of frame t take frame t-1's values and channels
    [D_b, D_b+D_f) take frame t+1's; missing neighbours contribute zeros.
    Patch tokens are untouched.
    """
    z, t = acts.z, acts.frames
    rows, n1, dim = z.shape
    if shift_back < 0 or shift_fwd < 0 or shift_back + shift_fwd > dim:
        raise ConfigError(f"invalid shift amounts ({shift_back}, {shift_fwd}) for dim {dim}")
    if shift_back == 0 and shift_fwd == 0:
        return acts
    b = rows // t
    cls = T.reshape(z[:, 0, :], (b, t, dim))
    lo, hi = shift_back, shift_back + shift_fwd
    parts = []
    if lo:
        parts.append(T.zero_pad_assign(cls[:, : t - 1, :lo], (b, t, lo), (slice(None), slice(1, t))))
    if hi > lo:
        parts.append(T.zero_pad_assign(cls[:, 1:, lo:hi], (b, t, hi - lo), (slice(None), slice(0, t - 1))))
    if hi < dim:
        parts.append(cls[:, :, hi:])
    shifted = T.reshape(T.concat(parts, axis=-1), (rows, 1, dim))
    return ActivationSet(T.concat([shifted, z[:, 1:, :]], axis=1), t)


def attention(x: Tensor, p: Mapping[str, Tensor], prefix: str, heads: int,
              faulty: bool = False) -> Tensor:
    """Multi-head scaled dot-product self-attention within each row."""
    rows, n, dim = x.shape
    dh = dim // heads

    def split(w, b=None):
        y = T.matmul(x, p[f"{prefix}.{w}"])
        if b is not None:
            y = T.add(y, p[f"{prefix}.{b}"])
        return T.permute(T.reshape(y, (rows, n, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("wq", "bq"), split("wk"), split("wv", "bv")
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(dh))
    attn = (T._softmax_faulty if faulty else T.softmax)(scores, axis=-1)
    ctx = T.reshape(T.permute(T.matmul(attn, v), (0, 2, 1, 3)), (rows, n, dim))
    return T.add(T.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def mlp(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    return T.add(T.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])


def encoder_block(acts: ActivationSet, p: Mapping[str, Tensor], index: int, cfg: ViTConfig,
                  shift_enabled: bool | None = None, faulty: bool = False) -> ActivationSet:
    """Pre-LN block: z' = MSA(LN(z)) + z; out = MLP(LN(z')) + z'.

    With shift enabled the class-token shift is applied to the block output,
    i.e. on the residual stream between consecutive blocks.
    """
    if shift_enabled is None:
        shift_enabled = cfg.shift_enabled
    pre = f"block{index}"
    z = acts.z
    h = T.layer_norm(z, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"], LN_EPS)
    z = T.add(attention(h, p, f"{pre}.msa", cfg.heads, faulty), z)
    h = T.layer_norm(z, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"], LN_EPS)
    z = T.add(mlp(h, p, f"{pre}.mlp"), z)
    out = ActivationSet(z, acts.frames)
    if shift_enabled:
        out = token_shift(out, cfg.shift_back, cfg.shift_fwd)
    return out


def temporal_mean_pool(class_tokens: Tensor) -> Tensor:
    """(B, T, D) -> (B, D)."""
    if class_tokens.ndim != 3 or class_tokens.shape[1] < 1:
        raise ConfigError(f"expected (B, T, D) class tokens, got {class_tokens.shape}")
    return T.mean_axis(class_tokens, 1)


def _pixels_and_frames(batch) -> tuple[np.ndarray, int]:
    pixels = getattr(batch, "pixels", batch)
    pixels = pixels.data if isinstance(pixels, Tensor) else np.asarray(pixels)
    if pixels.ndim == 4:
        return pixels, 1
    if pixels.ndim == 5:
        b, t = pixels.shape[:2]
        return pixels.reshape((b * t,) + pixels.shape[2:]), t
    raise ConfigError(f"expected (B,3,H,W) or (B,T,3,H,W) pixels, got shape {pixels.shape}")


def encode(model: ViTModel, batch, params: Mapping[str, Tensor] | None = None,
           depth: int | None = None, faulty: bool = False) -> Tensor:
    """Per-frame class tokens after ``depth`` blocks (default: all), shape (B, T, D)."""
    cfg = model.config
    p = model.params if params is None else params
    pixels, frames = _pixels_and_frames(batch)
    if cfg.shift_enabled and frames > cfg.depth:
        warnings.warn(f"depth {cfg.depth} < clip length {frames}: the shift cannot connect "
                      "every pair of frames", stacklevel=2)
    x = Tensor(pixels, model.dtype)
    acts = embed(patchify(x, cfg.patch), p, frames)
    for l in range(cfg.depth if depth is None else depth):
        acts = encoder_block(acts, p, l, cfg, faulty=faulty)
    return T.reshape(acts.z[:, 0, :], (acts.batch, frames, cfg.dim))


def forward(model: ViTModel, batch, head_id: int, params: Mapping[str, Tensor] | None = None,
            faulty: bool = False) -> Tensor:
    """Raw logits (B, C_head) for an image batch or a clip batch."""
    if not 0 <= head_id < len(model.config.dataset_heads):
        raise ConfigError(f"unknown head id {head_id}")
    p = model.params if params is None else params
    pooled = temporal_mean_pool(encode(model, batch, p, faulty=faulty))
    return T.add(T.matmul(pooled, p[f"head{head_id}.w"]), p[f"head{head_id}.b"])


def predict_proba(model: ViTModel, batch, head_id: int) -> np.ndarray:
    return T.softmax(forward(model, batch, head_id), axis=-1).data


# ---------------------------------------------------------------------------
# checkpoints
#
# b"IVCK" | u32 header length | JSON header {"config", "params": [{name, shape}]}
# followed by one tensor record per parameter in header order.

_CKPT_MAGIC = b"IVCK"


def checkpoint_save(model: ViTModel, path) -> None:
    header = {
        "config": model.config.to_dict(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in model.params.values():
            write_tensor(f, v.data, v.dtype)
    tmp.replace(path)


def checkpoint_load(path, config: ViTConfig | None = None) -> ViTModel:
    """Load a checkpoint; if ``config`` is given, shapes must match it."""
    try:
        with open(path, "rb") as f:
            if f.read(4) != _CKPT_MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
            raw = f.read(4)
            if len(raw) != 4:
                raise CheckpointError(f"{path}: truncated header")
            (n,) = struct.unpack("<I", raw)
            blob = f.read(n)
            if len(blob) != n:
                raise CheckpointError(f"{path}: truncated header")
            try:
                header = json.loads(blob)
            except json.JSONDecodeError as e:
                raise CheckpointError(f"{path}: corrupt header ({e})") from None
            stored = ViTConfig.from_dict(header["config"])
            cfg = stored if config is None else config
            expected = parameter_shapes(cfg)
            for entry in header["params"]:
                name = entry["name"]
                if name not in expected:
                    raise CheckpointError(f"parameter {name} is not part of the requested config")
                if tuple(entry["shape"]) != expected[name]:
                    raise CheckpointError(
                        f"parameter {name}: stored shape {tuple(entry['shape'])} "
                        f"!= expected {expected[name]}")
            missing = [k for k in expected if k not in {e["name"] for e in header["params"]}]
            if missing:
                raise CheckpointError(f"parameter {missing[0]} missing from checkpoint")
            params = {}
            for entry in header["params"]:
                name = entry["name"]
                try:
                    arr = read_tensor(f)
                except TensorFormatError as e:
                    raise CheckpointError(f"parameter {name}: {e}") from None
                if arr.shape != tuple(entry["shape"]):
                    raise CheckpointError(f"parameter {name}: record shape {arr.shape} disagrees "
                                          f"with header {tuple(entry['shape'])}")
                params[name] = Tensor(arr, cfg.dtype)
            if f.read(1):
                raise CheckpointError(f"{path}: trailing bytes")
    except ConfigError as e:
        raise CheckpointError(f"{path}: {e}") from None
    return ViTModel(cfg, {k: params[k] for k in expected})
