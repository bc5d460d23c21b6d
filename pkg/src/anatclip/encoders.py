"""Small vision and text transformers that map into a shared unit-norm space."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor
from .tokenizer import CONTEXT_LENGTH, PAD

INIT_STD = 0.02
INIT_LOGIT_SCALE = math.log(1 / 0.07)
MIN_SCALE, MAX_SCALE = 1.0, 100.0


@dataclass(frozen=True)
class VisionConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 3
    width: int = 64
    heads: int = 4
    embed_dim: int = 64

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int
    context: int = CONTEXT_LENGTH
    depth: int = 3
    width: int = 64
    heads: int = 4
    embed_dim: int = 64

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")


def _block_param_count(w: int) -> int:
    # two layer norms, q/k/v/out projections, 4x MLP
    return 2 * 2 * w + 4 * (w * w + w) + (w * 4 * w + 4 * w) + (4 * w * w + w)


def param_count(vision: VisionConfig, text: TextConfig) -> int:
    w, p = vision.width, vision.patch_size
    n_vis = (p * p * w + w) + vision.n_patches * w + vision.depth * _block_param_count(w) \
        + 2 * w + w * vision.embed_dim
    tw = text.width
    n_txt = text.vocab_size * tw + text.context * tw + text.depth * _block_param_count(tw) \
        + 2 * tw + tw * text.embed_dim
    return n_vis + n_txt + 1


def _block_shapes(prefix: str, w: int) -> dict[str, tuple]:
    shapes = {}
    for ln in ("ln1", "ln2"):
        shapes[f"{prefix}.{ln}.g"] = (w,)
        shapes[f"{prefix}.{ln}.b"] = (w,)
    for name in ("q", "k", "v", "o"):
        shapes[f"{prefix}.attn.{name}.w"] = (w, w)
        shapes[f"{prefix}.attn.{name}.b"] = (w,)
    shapes[f"{prefix}.mlp.fc.w"] = (w, 4 * w)
    shapes[f"{prefix}.mlp.fc.b"] = (4 * w,)
    shapes[f"{prefix}.mlp.proj.w"] = (4 * w, w)
    shapes[f"{prefix}.mlp.proj.b"] = (w,)
    return shapes


def param_shapes(vision: VisionConfig, text: TextConfig) -> dict[str, tuple]:
    if vision.embed_dim != text.embed_dim:
        raise ValueError("vision and text embed_dim must match")
    w, p = vision.width, vision.patch_size
    shapes = {"visual.patch.w": (p * p, w), "visual.patch.b": (w,), "visual.pos": (vision.n_patches, w)}
    for i in range(vision.depth):
        shapes.update(_block_shapes(f"visual.blocks.{i}", w))
    shapes.update({"visual.ln_post.g": (w,), "visual.ln_post.b": (w,), "visual.proj": (w, vision.embed_dim)})
    tw = text.width
    shapes.update({"text.token": (text.vocab_size, tw), "text.pos": (text.context, tw)})
    for i in range(text.depth):
        shapes.update(_block_shapes(f"text.blocks.{i}", tw))
    shapes.update({"text.ln_final.g": (tw,), "text.ln_final.b": (tw,), "text.proj": (tw, text.embed_dim)})
    shapes["logit_scale"] = ()
    return shapes


def init_params(vision: VisionConfig, text: TextConfig, seed: int) -> dict[str, Tensor]:
    """fan_in**-0.5 for weight matrices, Normal(0, 0.02) for embeddings; zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(vision, text).items():
        if name == "logit_scale":
            data = np.array(INIT_LOGIT_SCALE)
        elif name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        elif name in ("visual.proj", "text.proj") or name.endswith(".w"):
            data = rng.normal(0.0, shape[0] ** -0.5, size=shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------- layers

def linear(x: Tensor, params, prefix: str) -> Tensor:
    return T.matmul(x, params[f"{prefix}.w"]) + params[f"{prefix}.b"]


def attention(x: Tensor, params, prefix: str, heads: int, key_mask: np.ndarray | None) -> Tensor:
    b, t, w = x.shape
    dh = w // heads

    def split(z):
        return T.transpose(T.reshape(z, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, params, f"{prefix}.q"))
    k = split(linear(x, params, f"{prefix}.k"))
    v = split(linear(x, params, f"{prefix}.v"))
    scores = T.mul_scalar(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    mask = None if key_mask is None else key_mask[:, None, None, :]
    att = T.softmax_rows(scores, mask)
    out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, t, w))
    return linear(out, params, f"{prefix}.o")


def block(x: Tensor, params, prefix: str, heads: int, key_mask: np.ndarray | None = None) -> Tensor:
    h = T.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = x + attention(h, params, f"{prefix}.attn", heads, key_mask)
    h = T.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = linear(T.gelu(linear(h, params, f"{prefix}.mlp.fc")), params, f"{prefix}.mlp.proj")
    return x + h


# ---------------------------------------------------------------- encoders

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    b, h, w = images.shape
    g = h // patch
    return (images.reshape(b, g, patch, g, patch).transpose(0, 1, 3, 2, 4)
            .reshape(b, g * g, patch * patch))


def encode_images(images: np.ndarray, params, cfg: VisionConfig) -> Tensor:
    """(B, H, W) intensities in [0, 1] -> (B, embed_dim) unit rows."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    if images.shape[1:] != (cfg.image_size, cfg.image_size):
        raise DimensionError(f"expected {cfg.image_size}x{cfg.image_size} images, got {images.shape[1:]}")
    dtype = params["visual.patch.w"].dtype
    # centre intensities on zero so the patch embedding starts unbiased
    x = Tensor(patchify((2 * images - 1).astype(dtype, copy=False), cfg.patch_size))
    x = linear(x, params, "visual.patch") + params["visual.pos"]
    for i in range(cfg.depth):
        x = block(x, params, f"visual.blocks.{i}", cfg.heads)
    x = T.layer_norm(x, params["visual.ln_post.g"], params["visual.ln_post.b"])
    pooled = T.mean(x, axis=1)
    return T.l2_normalize_rows(T.matmul(pooled, params["visual.proj"]))


def encode_texts(ids: np.ndarray, params, cfg: TextConfig, trim_padding: bool = True) -> Tensor:
    """(B, context) token ids -> (B, embed_dim) unit rows.

    PAD keys are masked in attention and excluded from pooling, so trailing
    PAD columns can be trimmed without changing the result.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.shape[1] != cfg.context:
        raise DimensionError(f"expected sequences of length {cfg.context}, got {ids.shape[1]}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError(f"token id outside vocabulary of size {cfg.vocab_size}")
    valid = ids != PAD
    if trim_padding:
        length = max(int(valid.sum(axis=1).max()), 1)
        ids, valid = ids[:, :length], valid[:, :length]
    length = ids.shape[1]
    x = T.embedding_lookup(params["text.token"], ids)
    x = x + T.getitem(params["text.pos"], slice(0, length)) if length < cfg.context else x + params["text.pos"]
    for i in range(cfg.depth):
        x = block(x, params, f"text.blocks.{i}", cfg.heads, key_mask=valid)
    x = T.layer_norm(x, params["text.ln_final.g"], params["text.ln_final.b"])
    dtype = x.dtype
    weights = valid.astype(dtype) / np.maximum(valid.sum(axis=1, keepdims=True), 1).astype(dtype)
    pooled = T.sum_(T.mul(x, Tensor(weights[:, :, None])), axis=1)
    return T.l2_normalize_rows(T.matmul(pooled, params["text.proj"]))


def logit_scale(params) -> float:
    return float(np.exp(params["logit_scale"].data))


def clamp_logit_scale(params) -> None:
    p = params["logit_scale"]
    p.data = np.clip(p.data, math.log(MIN_SCALE), math.log(MAX_SCALE)).astype(p.data.dtype)


def config_dict(vision: VisionConfig, text: TextConfig) -> dict:
    return {**{f"vision.{k}": v for k, v in asdict(vision).items()},
            **{f"text.{k}": v for k, v in asdict(text).items()}}
