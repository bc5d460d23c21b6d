"""Symmetric image-text contrastive loss, AdamW and a single training step."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import TextConfig, VisionConfig, clamp_logit_scale, encode_images, encode_texts
from .tensor import DimensionError, Tape, Tensor

DUPLICATE_POLICIES = ("mask", "allow")


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.5
    batch_size: int = 32
    epochs: int = 10
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    seed: int = 0
    grad_clip_norm: float = 1.0
    duplicate_policy: str = "mask"
    fixed_scale: bool = False
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.duplicate_policy not in DUPLICATE_POLICIES:
            raise ValueError(f"duplicate_policy must be one of {DUPLICATE_POLICIES}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    vision: float
    text: float


def pairwise_logits(img_emb: Tensor, txt_emb: Tensor, log_scale: Tensor) -> Tensor:
    """Entry (i, j) is exp(log_scale) * <image_i, text_j>."""
    if img_emb.ndim != 2 or txt_emb.ndim != 2 or img_emb.shape[1] != txt_emb.shape[1]:
        raise DimensionError(f"embedding shapes {img_emb.shape} and {txt_emb.shape} do not pair")
    sims = T.matmul(img_emb, T.transpose(txt_emb))
    return T.mul(sims, T.exp(log_scale))


def make_targets(caption_keys, policy: str = "mask") -> tuple[np.ndarray, np.ndarray | None]:
    """Diagonal targets plus, under ``mask``, a keep-mask hiding duplicate-caption negatives."""
    keys = list(caption_keys)
    n = len(keys)
    targets = np.arange(n)
    if policy == "allow":
        return targets, None
    if policy != "mask":
        raise ValueError(f"unknown duplicate policy {policy!r}")
    arr = np.array(keys, dtype=object)
    same = arr[:, None] == arr[None, :]
    keep = ~same | np.eye(n, dtype=bool)
    return targets, (None if keep.all() else keep)


def symmetric_loss(logits: Tensor, lam: float = 0.5, keep: np.ndarray | None = None):
    """lam * CE(image->text rows) + (1 - lam) * CE(text->image rows), diagonal targets.

    Returns (total tensor, vision term tensor, text term tensor).
    """
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise DimensionError(f"symmetric_loss needs a square matrix, got {logits.shape}")
    n = logits.shape[0]
    targets = np.arange(n)
    vision = T.cross_entropy_rows(logits, targets, keep)
    text = T.cross_entropy_rows(T.transpose(logits), targets, None if keep is None else keep.T)
    total = T.mul_scalar(vision, lam) + T.mul_scalar(text, 1.0 - lam)
    return total, vision, text


def loss_breakdown(total: Tensor, vision: Tensor, text: Tensor) -> LossBreakdown:
    return LossBreakdown(float(total.data), float(vision.data), float(text.data))


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def decays(name: str, p: Tensor) -> bool:
    """Weight decay applies to matrices only, not biases, gains, positions or the scale."""
    return p.ndim >= 2 and not name.endswith(".pos")


def global_norm(params) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return total ** 0.5


def clip_grad_norm(params, max_norm: float) -> float:
    norm = global_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


def adamw_update(params, state: OptimizerState, cfg: TrainConfig, lr: float | None = None) -> None:
    lr = cfg.learning_rate if lr is None else lr
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        if p.grad is None or (cfg.fixed_scale and name == "logit_scale"):
            continue
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and decays(name, p):
            p.data = p.data * np.float32(1 - lr * cfg.weight_decay)
        p.data = (p.data - lr * update).astype(p.data.dtype)


def zero_grads(params) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------- step

def forward_loss(images: np.ndarray, token_ids: np.ndarray, caption_keys, params,
                 vision: VisionConfig, text: TextConfig, cfg: TrainConfig):
    img = encode_images(images, params, vision)
    txt = encode_texts(token_ids, params, text)
    logits = pairwise_logits(img, txt, params["logit_scale"])
    _, keep = make_targets(caption_keys, cfg.duplicate_policy)
    return symmetric_loss(logits, cfg.lam, keep)


def train_step(images: np.ndarray, token_ids: np.ndarray, caption_keys, params, state: OptimizerState,
               vision: VisionConfig, text: TextConfig, cfg: TrainConfig, step_label: str = "") -> LossBreakdown:
    """Forward, backward, clip, AdamW, clamp the logit scale. Mutates ``params`` and ``state``."""
    if len(images) < 2:
        raise ValueError("a training step needs at least two pairs")
    zero_grads(params)
    with Tape() as tape:
        total, vis, txt = forward_loss(images, token_ids, caption_keys, params, vision, text, cfg)
    out = loss_breakdown(total, vis, txt)
    if not np.isfinite(out.total):
        raise NumericalError(f"non-finite loss {out.total} at step {step_label or state.step + 1}")
    tape.backward(total)
    clip_grad_norm(params, cfg.grad_clip_norm)
    adamw_update(params, state, cfg)
    clamp_logit_scale(params)
    return out
