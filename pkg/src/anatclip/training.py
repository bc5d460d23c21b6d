"""Epoch loop: seeded batching, on-the-fly augmentation, checkpoints and a metrics CSV."""
from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .augment import AugmentPolicy, AugmentSpec, default_max_shift, sample_policy
from .checkpoint import Checkpoint, save_checkpoint
from .config import dump_config, mode_flags, resolve_config
from .contrastive import OptimizerState, TrainConfig, train_step
from .dataset import DatasetManifest, ManifestRecord, read_png
from .encoders import VisionConfig
from .model import ClipModel
from .prompts import PROMPTS_PER_IMAGE, generate_prompt_set, mode_caption, prompt_rng
from .tokenizer import encode, normalize
from .zeroshot import evaluate_images

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "step", "total_loss", "vision_loss", "text_loss", "logit_scale",
                  "val_organ_acc", "val_station_acc")
AUGMENT_LOG_HEADER = ("epoch", "image_id", "variant", "augment_spec", "prompt_index")


def _id_hash(image_id: str) -> int:
    return zlib.crc32(image_id.encode("utf-8"))


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(lam=cfg["train.lam"], batch_size=cfg["train.batch_size"], epochs=cfg["train.epochs"],
                       learning_rate=cfg["train.learning_rate"], weight_decay=cfg["train.weight_decay"],
                       seed=cfg["train.seed"], grad_clip_norm=cfg["train.grad_clip_norm"],
                       duplicate_policy=cfg["train.duplicate_policy"], fixed_scale=cfg["train.fixed_scale"])


def vision_config(cfg: dict) -> VisionConfig:
    return VisionConfig(**{k: cfg[f"vision.{k}"] for k in
                           ("image_size", "patch_size", "depth", "width", "heads", "embed_dim")})


def build_model(cfg: dict) -> ClipModel:
    return ClipModel.create(seed=cfg["train.seed"], vision=vision_config(cfg), text_depth=cfg["text.depth"],
                            text_width=cfg["text.width"], text_heads=cfg["text.heads"])


def augment_policy(cfg: dict) -> AugmentPolicy:
    width = cfg["vision.image_size"]
    shift = int(cfg["augment.translate_frac"] * width)
    rot = cfg["augment.rotate_max"]
    return AugmentPolicy(translate=(-shift, shift), rotate=(-rot, rot))


def load_images(manifest: DatasetManifest, records) -> np.ndarray:
    return np.stack([read_png(manifest.resolve(r)) for r in records]).astype(np.float32) if records else \
        np.zeros((0, 0, 0), np.float32)


@dataclass
class SampleSource:
    """Per-sample captions and (when augmenting) the ten augmentation specs."""
    record: ManifestRecord
    captions: tuple[str, ...]
    specs: tuple[AugmentSpec, ...] = ()


def sample_sources(records, cfg: dict) -> list[SampleSource]:
    flags = mode_flags(cfg["mode"])
    seed = cfg["train.seed"]
    policy = augment_policy(cfg)
    out = []
    for rec in records:
        if not flags["augment"]:
            out.append(SampleSource(rec, (mode_caption(rec.label, cfg["mode"]),)))
            continue
        captions = rec.captions if len(rec.captions) == PROMPTS_PER_IMAGE else tuple(
            generate_prompt_set(rec.label, prompt_rng(seed, rec.image_id), rec.image_id).captions)
        specs = sample_policy(np.random.default_rng([seed, _id_hash(rec.image_id)]), policy)
        out.append(SampleSource(rec, tuple(captions), tuple(specs)))
    return out


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle split into batches; a lone trailing sample joins the previous batch."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


@dataclass
class TrainResult:
    model: ClipModel
    rows: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def train_loop(manifest: DatasetManifest, cfg: dict | None = None, out_dir: str | Path | None = None,
               callbacks: list[Callable] = (), model: ClipModel | None = None) -> TrainResult:
    """Train per ``cfg`` (a resolved flat config) and write checkpoints/metrics into ``out_dir``."""
    cfg = resolve_config(cfg)
    tcfg = train_config(cfg)
    model = model or build_model(cfg)
    flags = mode_flags(cfg["mode"])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")

    train_recs = manifest.split("train")
    val_recs = manifest.split("val")
    if len(train_recs) < 2 and tcfg.epochs > 0:
        raise ValueError("training needs at least two training records")
    images = load_images(manifest, train_recs)
    val_images = load_images(manifest, val_recs)
    sources = sample_sources(train_recs, cfg)
    token_cache: dict[str, np.ndarray] = {}
    state = OptimizerState.for_params(model.params)
    ckpt_cfg = {**cfg}
    result = TrainResult(model)
    metrics_rows: list[list[str]] = []
    aug_rows: list[list[str]] = []
    max_shift = default_max_shift(cfg["vision.image_size"])
    step = 0

    def tokens(caption: str) -> np.ndarray:
        if caption not in token_cache:
            token_cache[caption] = encode(caption, model.vocab, model.text.context).ids
        return token_cache[caption]

    for epoch in range(1, tcfg.epochs + 1):
        sums = np.zeros(3)
        n_steps = 0
        for batch in epoch_batches(len(sources), tcfg.batch_size, tcfg.seed, epoch):
            imgs, caps = [], []
            for i in batch:
                src = sources[i]
                if flags["augment"]:
                    rng = np.random.default_rng([tcfg.seed, epoch, _id_hash(src.record.image_id)])
                    v = int(rng.integers(len(src.specs)))
                    p = int(rng.integers(len(src.captions)))
                    imgs.append(src.specs[v].apply(images[i], max_shift=max_shift).astype(np.float32))
                    caps.append(src.captions[p])
                    aug_rows.append([str(epoch), src.record.image_id, str(v), str(src.specs[v]), str(p)])
                else:
                    imgs.append(images[i])
                    caps.append(src.captions[0])
            step += 1
            loss = train_step(np.stack(imgs), np.stack([tokens(c) for c in caps]), [normalize(c) for c in caps],
                              model.params, state, model.vision, model.text, tcfg,
                              step_label=f"{step} (epoch {epoch})")
            sums += (loss.total, loss.vision, loss.text)
            n_steps += 1
        means = sums / max(n_steps, 1)
        if val_recs:
            rep = evaluate_images(model, val_images, val_recs)
            val_organ, val_station = rep.organ.accuracy, rep.station.accuracy
        else:
            val_organ = val_station = float("nan")
        row = dict(zip(METRICS_HEADER, [str(epoch), str(step), *(_fmt(m) for m in means), _fmt(model.scale),
                                        _fmt(val_organ), _fmt(val_station)]))
        metrics_rows.append([row[k] for k in METRICS_HEADER])
        result.rows.append(row)
        log.info("epoch %d step %d loss %.4f val organ %.3f station %.3f", epoch, step, means[0],
                 val_organ, val_station)
        if out is not None:
            path = out / f"epoch_{epoch:03d}.aclp"
            save_checkpoint(Checkpoint.from_model(model, {**ckpt_cfg, "epoch": epoch}), path)
            result.checkpoints.append(path)
        for cb in callbacks:
            cb(epoch, row, model)

    if out is not None:
        final = out / "model.aclp"
        save_checkpoint(Checkpoint.from_model(model, {**ckpt_cfg, "epoch": tcfg.epochs}), final)
        result.checkpoints.append(final)
        _write_csv(out / "metrics.csv", METRICS_HEADER, metrics_rows)
        if flags["augment"]:
            _write_csv(out / "augment_log.csv", AUGMENT_LOG_HEADER, aug_rows)
        if result.rows:
            from .plotting import plot_training_curves
            plot_training_curves(result.rows, out / "training_curves.svg")
    return result


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
