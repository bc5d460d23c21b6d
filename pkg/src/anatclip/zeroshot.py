"""Zero-shot organ and station classification, accuracy and one-vs-rest AUC."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .labels import DEFAULT_MAP, OrganStationMap
from .prompts import bank_labels, label_prompt_bank
from .tensor import DimensionError

REPORT_HEADER = ("label", "n_pos", "hits", "accuracy_contrib", "auc")
MACRO_ROW = "__macro__"


class DataError(ValueError):
    pass


class UndefinedAUCError(ValueError):
    pass


@dataclass(frozen=True)
class LabelEmbeddingBank:
    kind: str
    labels: tuple[str, ...]
    matrix: np.ndarray  # K x D, unit rows

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.labels):
            raise DimensionError(f"{self.matrix.shape[0]} embeddings for {len(self.labels)} labels")


def build_bank(model, kind: str, omap: OrganStationMap = DEFAULT_MAP) -> LabelEmbeddingBank:
    return LabelEmbeddingBank(kind, bank_labels(kind, omap), model.text_embeddings(label_prompt_bank(kind, omap)))


@dataclass(frozen=True)
class PredictionResult:
    image_id: str
    top_label: str
    top_index: int
    scores: np.ndarray
    logits: np.ndarray
    labels: tuple[str, ...] = ()


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def classify(image_emb: np.ndarray, bank: LabelEmbeddingBank, scale: float = 1.0,
             image_id: str = "") -> PredictionResult:
    """Dot products against every bank row; softmax of the scaled logits; argmax with lowest-index ties."""
    image_emb = np.asarray(image_emb)
    if image_emb.ndim != 1 or image_emb.shape[0] != bank.matrix.shape[1]:
        raise DimensionError(f"image embedding {image_emb.shape} vs bank width {bank.matrix.shape[1]}")
    logits = bank.matrix.astype(np.float64) @ image_emb.astype(np.float64)
    top = int(np.argmax(logits))
    return PredictionResult(image_id, bank.labels[top], top, softmax(scale * logits), logits, bank.labels)


def classify_batch(image_embs: np.ndarray, bank: LabelEmbeddingBank, scale: float = 1.0,
                   image_ids=None) -> list[PredictionResult]:
    ids = image_ids if image_ids is not None else [str(i) for i in range(len(image_embs))]
    return [classify(e, bank, scale, i) for e, i in zip(image_embs, ids)]


def accuracy(predictions, targets, fractional: bool = False) -> float:
    """Share of images whose top label lies in their target set.

    With ``fractional`` an image scores |top-k ∩ targets| / k for k = |targets|
    instead; this variant is for study only.
    """
    predictions, targets = list(predictions), [set(t) for t in targets]
    if len(predictions) != len(targets):
        raise DataError(f"{len(predictions)} predictions for {len(targets)} target sets")
    if not predictions:
        raise DataError("accuracy over zero images")
    total = 0.0
    for pred, tgt in zip(predictions, targets):
        if not tgt:
            raise DataError(f"image {pred.image_id!r} has an empty target set")
        if fractional:
            # rank by raw logits with lowest-index tie-break
            order = np.lexsort((np.arange(len(pred.logits)), -pred.logits))
            top_k = {pred.labels[i] for i in order[: len(tgt)]}
            total += len(top_k & tgt) / len(tgt)
        else:
            total += pred.top_label in tgt
    return total / len(predictions)


def roc_points(scores, truth) -> np.ndarray:
    """(fpr, tpr) pairs from a descending-threshold sweep; tied scores move together."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    n_pos, n_neg = int(truth.sum()), int((~truth).sum())
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truth[order]
    cut = np.flatnonzero(np.diff(s)) if len(s) > 1 else np.array([], dtype=int)
    ends = np.concatenate([cut, [len(s) - 1]]) if len(s) else np.array([], dtype=int)
    tp = np.cumsum(t)[ends]
    fp = np.cumsum(~t)[ends]
    fpr = np.concatenate([[0.0], fp / max(n_neg, 1)])
    tpr = np.concatenate([[0.0], tp / max(n_pos, 1)])
    return np.column_stack([fpr, tpr])


def ovr_auc(scores, truth) -> tuple[float, np.ndarray]:
    """Mann-Whitney AUC (ties count one half) and the ROC polyline for one class."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    if scores.shape != truth.shape:
        raise DimensionError(f"{scores.shape} scores vs {truth.shape} truth flags")
    n_pos, n_neg = int(truth.sum()), int((~truth).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC is undefined when only one class is present")
    ranks = rankdata(scores)
    auc = (ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return float(auc), roc_points(scores, truth)


@dataclass
class BankReport:
    kind: str
    labels: tuple[str, ...]
    n_images: int
    accuracy: float
    n_pos: np.ndarray
    hits: np.ndarray
    confusion: np.ndarray  # rows: target label, columns: predicted label
    auc: np.ndarray  # NaN where a class has no positives or no negatives
    roc: list
    fractional_accuracy: float = float("nan")

    @property
    def macro_auc(self) -> float:
        finite = self.auc[np.isfinite(self.auc)]
        return float(finite.mean()) if finite.size else float("nan")


def score_bank(predictions: list[PredictionResult], targets, labels, kind: str) -> BankReport:
    k = len(labels)
    index = {l: i for i, l in enumerate(labels)}
    targets = [set(t) for t in targets]
    n = len(predictions)
    truth = np.zeros((n, k), dtype=bool)
    for r, tgt in enumerate(targets):
        for lab in tgt:
            truth[r, index[lab]] = True
    scores = np.stack([p.scores for p in predictions]) if predictions else np.zeros((0, k))
    hits = np.zeros(k, dtype=np.int64)
    confusion = np.zeros((k, k), dtype=np.int64)
    for r, p in enumerate(predictions):
        if truth[r, p.top_index]:
            hits[p.top_index] += 1
        for lab in targets[r]:
            confusion[index[lab], p.top_index] += 1
    aucs, rocs = np.full(k, np.nan), []
    for c in range(k):
        try:
            a, pts = ovr_auc(scores[:, c], truth[:, c])
        except UndefinedAUCError:
            a, pts = float("nan"), np.array([[0.0, 0.0], [1.0, 1.0]])
        aucs[c] = a
        rocs.append(pts)
    return BankReport(kind, tuple(labels), n, accuracy(predictions, targets), truth.sum(axis=0), hits,
                      confusion, aucs, rocs, accuracy(predictions, targets, fractional=True))


@dataclass
class EvalReport:
    organ: BankReport
    station: BankReport
    identifiers: dict = field(default_factory=dict)


def evaluate_embeddings(image_embs: np.ndarray, records, organ_bank: LabelEmbeddingBank,
                        station_bank: LabelEmbeddingBank, scale: float = 1.0, image_ids=None,
                        identifiers: dict | None = None) -> EvalReport:
    """Organ and station banks are scored independently from the same image embeddings."""
    records = list(records)
    if not records:
        raise DataError("evaluation split is empty")
    organ_preds = classify_batch(image_embs, organ_bank, scale, image_ids)
    station_preds = classify_batch(image_embs, station_bank, scale, image_ids)
    organ = score_bank(organ_preds, [r.organs for r in records], organ_bank.labels, "organ")
    station = score_bank(station_preds, [(r.station,) for r in records], station_bank.labels, "station")
    return EvalReport(organ, station, dict(identifiers or {}))


def evaluate_images(model, images: np.ndarray, records, image_ids=None, identifiers=None,
                    omap: OrganStationMap = DEFAULT_MAP) -> EvalReport:
    embs = model.image_embeddings(images)
    return evaluate_embeddings(embs, records, build_bank(model, "organ", omap), build_bank(model, "station", omap),
                               model.scale, image_ids, identifiers)


# ---------------------------------------------------------------- report files

def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.6f}"


def report_csv(bank: BankReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for i, lab in enumerate(bank.labels):
        w.writerow([lab, int(bank.n_pos[i]), int(bank.hits[i]), _fmt(bank.hits[i] / bank.n_images),
                    _fmt(bank.auc[i])])
    w.writerow([MACRO_ROW, bank.n_images, int(bank.hits.sum()), _fmt(bank.accuracy), _fmt(bank.macro_auc)])
    return buf.getvalue()


def confusion_csv(bank: BankReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target\\predicted", *bank.labels])
    for lab, row in zip(bank.labels, bank.confusion):
        w.writerow([lab, *(int(v) for v in row)])
    return buf.getvalue()


def emit_report(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """Per-bank metrics CSV, confusion CSV and ROC SVG, plus a summary text file."""
    from .plotting import plot_roc_curves

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for bank in (report.organ, report.station):
        for name, text in ((f"{bank.kind}_metrics.csv", report_csv(bank)),
                           (f"{bank.kind}_confusion.csv", confusion_csv(bank))):
            path = out_dir / name
            path.write_text(text, encoding="utf-8")
            written.append(path)
        svg = out_dir / f"{bank.kind}_roc.svg"
        plot_roc_curves(bank, svg)
        written.append(svg)
    lines = [f"{k} = {v}" for k, v in sorted(report.identifiers.items())]
    lines += [f"organ.accuracy = {_fmt(report.organ.accuracy)}",
              f"organ.fractional_accuracy = {_fmt(report.organ.fractional_accuracy)}",
              f"organ.macro_auc = {_fmt(report.organ.macro_auc)}",
              f"station.accuracy = {_fmt(report.station.accuracy)}",
              f"station.macro_auc = {_fmt(report.station.macro_auc)}"]
    summary = out_dir / "summary.txt"
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(summary)
    return written
