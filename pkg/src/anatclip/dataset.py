"""Synthetic multi-modal anatomy slices and the JSON Lines manifest."""
from __future__ import annotations

import itertools
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import stats
from scipy.ndimage import gaussian_filter

from .glyphs import CELL, GLYPH_SIZE, glyph_fill, glyph_mask
from .labels import (DEFAULT_MAP, MODALITIES, ORIENTATIONS, PROTOCOLS, STATIONS, LabelError, LabelRecord,
                     OrganStationMap)
from .prompts import DEFAULT_BANK, TemplateBank, generate_prompt_set, prompt_rng

IMAGE_SIZE = 64
SPLITS = ("train", "val", "test")
MANIFEST_FIELDS = ("image_path", "captions", "organs", "station", "modality", "protocol",
                   "orientation", "augment_spec", "split")
MAX_GLYPH_OVERLAP = 0.1


class GenerationError(RuntimeError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------- scenes

@dataclass(frozen=True)
class SceneSpec:
    station: str
    organs: tuple[str, ...]
    modality: str
    orientation: str
    noise_seed: int
    protocol: str | None = None

    def __post_init__(self):
        if not 1 <= len(self.organs) <= 3:
            raise LabelError(f"scenes hold 1-3 organs, got {len(self.organs)}")
        self.label_record().validate()

    def label_record(self, omap: OrganStationMap = DEFAULT_MAP) -> LabelRecord:
        return LabelRecord(self.modality, self.orientation, self.station, tuple(self.organs), self.protocol)


def station_texture(station: str, size: int = IMAGE_SIZE) -> np.ndarray:
    """Background pattern in [0, 1], one per station."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    r = np.hypot(y - c, x - c)
    if station == "head":
        t = 0.5 + 0.5 * np.cos(2 * np.pi * r / 6.0)
    elif station == "chest":
        t = 0.5 + 0.5 * np.cos(2 * np.pi * y / 8.0)
    elif station == "abdomen":
        t = ((np.hypot((y % 8) - 3.5, (x % 8) - 3.5)) < 2.0).astype(np.float64)
    elif station == "pelvis":
        t = ((y // 4 + x // 4) % 2).astype(np.float64)
    elif station == "lower body":
        t = np.clip(r / c, 0, 1)
    else:
        raise LabelError(f"unknown station {station!r}")
    return t


def body_mask(size: int = IMAGE_SIZE) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    return np.hypot(y - c, x - c) <= size * 0.49


def organ_level(organ: str, omap: OrganStationMap = DEFAULT_MAP) -> float:
    """Tissue intensity band of an organ, spread within its station."""
    peers = omap.organs_in(omap.station_of[organ])
    return float(np.linspace(0.62, 0.95, len(peers))[peers.index(organ)]) if len(peers) > 1 else 0.8


# (background gain, background offset, glyph gain, glyph offset, noise sigma, smoothing sigma)
STYLE_TABLE = {
    "CT": (0.7, 0.0, 1.0, 0.0, 0.03, 0.0),
    "T1": (-0.6, 0.95, -1.0, 0.95, 0.03, 1.0),
    "T2": (0.6, 0.0, 1.0, 0.0, 0.03, 1.0),
    "FLAIR": (0.45, 0.0, 1.0, 0.0, 0.03, 1.0),
    "DWI": (0.3, 0.0, 0.9, 0.0, 0.05, 1.0),
    "ADC": (-0.5, 0.9, -0.8, 0.9, 0.03, 1.0),
    "STIR": (-0.6, 0.75, 1.0, 0.0, 0.03, 1.0),
}


def style_key(modality: str, protocol: str | None) -> str:
    return "CT" if modality == "CT" else protocol


def place_glyphs(organs, rng: np.random.Generator, size: int = IMAGE_SIZE) -> list[tuple[int, int]]:
    """Top-left corners on the patch grid, searched in a seeded order with backtracking.

    Two glyphs may share at most MAX_GLYPH_OVERLAP of the smaller mask.
    """
    slots = (size - GLYPH_SIZE) // CELL + 1
    masks = [glyph_mask(o) for o in organs]
    orders = [rng.permutation(slots * slots) for _ in organs]

    def stamp(k, pos):
        cand = np.zeros((size, size), dtype=bool)
        y, x = CELL * (pos // slots), CELL * (pos % slots)
        cand[y:y + GLYPH_SIZE, x:x + GLYPH_SIZE] = masks[k]
        return cand

    def search(k, canvas):
        if k == len(organs):
            return []
        for pos in orders[k]:
            cand = stamp(k, int(pos))
            if all((cand & c).sum() <= MAX_GLYPH_OVERLAP * min(cand.sum(), c.sum()) for c in canvas):
                rest = search(k + 1, canvas + [cand])
                if rest is not None:
                    return [int(pos)] + rest
        return None

    found = search(0, [])
    if found is None:
        raise GenerationError(f"no placement of {list(organs)} without overlap on a {size}px image")
    return [(CELL * (p // slots), CELL * (p % slots)) for p in found]


def orient(img: np.ndarray, orientation: str) -> np.ndarray:
    if orientation == "axial":
        return img
    if orientation == "coronal":
        return np.rot90(img)
    if orientation == "sagittal":
        return img.T[::-1, ::-1]
    raise LabelError(f"unknown orientation {orientation!r}")


def render_layers(spec: SceneSpec, size: int = IMAGE_SIZE):
    """Tissue image plus per-organ masks (in final orientation), before modality styling."""
    rng = np.random.default_rng(spec.noise_seed)
    positions = place_glyphs(spec.organs, rng, size)
    body = body_mask(size)
    glyph_any = np.zeros((size, size), dtype=bool)
    glyph_val = np.zeros((size, size))
    masks = {}
    for organ, (y, x) in zip(spec.organs, positions):
        m = np.zeros((size, size), dtype=bool)
        m[y:y + GLYPH_SIZE, x:x + GLYPH_SIZE] = glyph_mask(organ)
        box = (slice(y, y + GLYPH_SIZE), slice(x, x + GLYPH_SIZE))
        glyph_val[box] = np.where(glyph_mask(organ), organ_level(organ) * glyph_fill(organ), glyph_val[box])
        glyph_any |= m
        masks[organ] = m
    texture = station_texture(spec.station, size)
    return rng, body, glyph_any, glyph_val, texture, masks


def render_scene(spec: SceneSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    rng, body, glyph_any, glyph_val, texture, _ = render_layers(spec, size)
    bg_gain, bg_off, g_gain, g_off, sigma, smooth = STYLE_TABLE[style_key(spec.modality, spec.protocol)]
    background = bg_off + bg_gain * (0.25 + 0.4 * texture)
    glyph = g_off + g_gain * glyph_val
    img = np.where(glyph_any, glyph, background)
    noise = rng.normal(0.0, sigma, size=(size, size))
    if smooth > 0:
        noise = gaussian_filter(noise, smooth) * 2.0
    img = np.where(body | glyph_any, img + noise, 0.0)
    return np.clip(orient(img, spec.orientation), 0.0, 1.0)


def scene_masks(spec: SceneSpec, size: int = IMAGE_SIZE) -> dict[str, np.ndarray]:
    _, _, _, _, _, masks = render_layers(spec, size)
    return {o: orient(m, spec.orientation) for o, m in masks.items()}


def organ_subsets(station: str, omap: OrganStationMap = DEFAULT_MAP) -> list[tuple[str, ...]]:
    organs = omap.organs_in(station)
    return [c for k in (1, 2, 3) for c in itertools.combinations(organs, k)]


def sample_scene(rng: np.random.Generator, omap: OrganStationMap = DEFAULT_MAP) -> SceneSpec:
    station = STATIONS[int(rng.integers(len(STATIONS)))]
    subsets = organ_subsets(station, omap)
    organs = subsets[int(rng.integers(len(subsets)))]
    organs = tuple(organs[i] for i in rng.permutation(len(organs)))
    modality = MODALITIES[int(rng.integers(len(MODALITIES)))]
    protocol = PROTOCOLS[int(rng.integers(len(PROTOCOLS)))] if modality == "MR" else None
    orientation = ORIENTATIONS[int(rng.integers(len(ORIENTATIONS)))]
    return SceneSpec(station, organs, modality, orientation, int(rng.integers(2 ** 31)), protocol)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def sample_scene_specs(n: int, seed: int, offset: int = 0) -> list[SceneSpec]:
    return [sample_scene(scene_rng(seed, offset + i)) for i in range(n)]


def balanced_single_organ_specs(n: int, seed: int, omap: OrganStationMap = DEFAULT_MAP) -> list[SceneSpec]:
    """Single-organ scenes cycling through the organ list, so every organ is equally frequent."""
    specs = []
    for i in range(n):
        rng = scene_rng(seed, i)
        organ = omap.organs[i % len(omap.organs)]
        modality = MODALITIES[int(rng.integers(len(MODALITIES)))]
        protocol = PROTOCOLS[int(rng.integers(len(PROTOCOLS)))] if modality == "MR" else None
        orientation = ORIENTATIONS[int(rng.integers(len(ORIENTATIONS)))]
        specs.append(SceneSpec(omap.station_of[organ], (organ,), modality, orientation,
                               int(rng.integers(2 ** 31)), protocol))
    return specs


# ---------------------------------------------------------------- PNG I/O

def write_png(path: str | Path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return np.clip(arr / 65535.0, 0.0, 1.0)
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    captions: tuple[str, ...]
    organs: tuple[str, ...]
    station: str
    modality: str
    orientation: str
    split: str
    protocol: str | None = None
    augment_spec: str | None = None

    @property
    def image_id(self) -> str:
        return Path(self.image_path).stem

    @property
    def label(self) -> LabelRecord:
        return LabelRecord(self.modality, self.orientation, self.station, self.organs, self.protocol)

    def to_json(self) -> str:
        row = {
            "image_path": self.image_path, "captions": list(self.captions), "organs": list(self.organs),
            "station": self.station, "modality": self.modality, "protocol": self.protocol,
            "orientation": self.orientation, "augment_spec": self.augment_spec, "split": self.split,
        }
        return json.dumps(row, ensure_ascii=False)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path = Path(".")
    seed: int | None = None
    template_hash: str = DEFAULT_BANK.digest
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, rec: ManifestRecord) -> Path:
        return self.root / rec.image_path

    def counts(self) -> dict:
        out = {}
        for s in SPLITS:
            recs = self.split(s)
            out[s] = {
                "n": len(recs),
                "stations": dict(sorted(Counter(r.station for r in recs).items())),
                "organs": dict(sorted(Counter(o for r in recs for o in r.organs).items())),
            }
        return out

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text("".join(r.to_json() + "\n" for r in self.records), encoding="utf-8")
        meta = {"seed": self.seed, "template_hash": self.template_hash, "counts": self.counts(), **self.meta}
        meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def meta_path(manifest_path: Path) -> Path:
    return manifest_path.with_name(manifest_path.stem + ".meta.json")


def _record_from_row(row: dict, index: int) -> ManifestRecord:
    missing = [f for f in MANIFEST_FIELDS if f not in row]
    if missing:
        raise ManifestError(f"record {index}: missing fields {missing}")
    return ManifestRecord(
        image_path=row["image_path"], captions=tuple(row["captions"] or ()), organs=tuple(row["organs"]),
        station=row["station"], modality=row["modality"], orientation=row["orientation"],
        split=row["split"], protocol=row["protocol"], augment_spec=row["augment_spec"])


def validate_manifest(manifest: DatasetManifest, omap: OrganStationMap = DEFAULT_MAP,
                      check_paths: bool = True) -> DatasetManifest:
    seen = set()
    for i, rec in enumerate(manifest.records):
        if rec.split not in SPLITS:
            raise ManifestError(f"record {i}: split {rec.split!r} not in {SPLITS}")
        if rec.image_path in seen:
            raise ManifestError(f"record {i}: duplicate image_path {rec.image_path!r}")
        seen.add(rec.image_path)
        try:
            rec.label.validate(omap)
        except LabelError as exc:
            raise ManifestError(f"record {i}: {exc}") from None
        if check_paths and not manifest.resolve(rec).is_file():
            raise ManifestError(f"record {i}: image {manifest.resolve(rec)} does not exist")
    return manifest


def load_manifest(path: str | Path, omap: OrganStationMap = DEFAULT_MAP,
                  check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"record {i}: invalid JSON ({exc})") from None
            records.append(_record_from_row(row, i))
    meta = {}
    if meta_path(path).is_file():
        meta = json.loads(meta_path(path).read_text(encoding="utf-8"))
    manifest = DatasetManifest(records, root=path.parent, seed=meta.get("seed"),
                               template_hash=meta.get("template_hash", DEFAULT_BANK.digest))
    return validate_manifest(manifest, omap, check_paths)


def stratified_split(manifest: DatasetManifest, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetManifest:
    """Reassign splits so every (station, modality) stratum honors ``ratios``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or (ratios < 0).any() or ratios.sum() <= 0:
        raise ValueError("ratios must be three nonnegative numbers")
    ratios = ratios / ratios.sum()
    rng = np.random.default_rng(seed)
    strata: dict[tuple, list[int]] = {}
    for i, r in enumerate(manifest.records):
        strata.setdefault((r.station, r.modality), []).append(i)
    new = list(manifest.records)
    for key in sorted(strata):
        idx = strata[key]
        order = [idx[j] for j in rng.permutation(len(idx))]
        raw = ratios * len(order)
        n = np.floor(raw).astype(int)
        for k in np.argsort(-(raw - n), kind="stable")[: len(order) - n.sum()]:
            n[k] += 1
        bounds = np.concatenate([[0], np.cumsum(n)])
        for s, name in enumerate(SPLITS):
            for i in order[bounds[s]:bounds[s + 1]]:
                new[i] = replace(new[i], split=name)
    return DatasetManifest(new, manifest.root, manifest.seed, manifest.template_hash, dict(manifest.meta))


def station_chi_square(records) -> tuple[float, float]:
    counts = Counter(r.station for r in records)
    observed = [counts.get(s, 0) for s in STATIONS]
    res = stats.chisquare(observed)
    return float(res.statistic), float(res.pvalue)


def generate_dataset(out_dir: str | Path, n_train: int = 2000, n_val: int = 500, n_test: int = 500,
                     seed: int = 0, bank: TemplateBank = DEFAULT_BANK,
                     manifest_name: str = "manifest.jsonl") -> DatasetManifest:
    """Render scenes to ``out_dir/images`` and write the manifest next to them."""
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError("split sizes must be positive")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    specs = sample_scene_specs(n_train + n_val + n_test, seed)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    records = [_write_scene(img_dir, f"{split}_{i:05d}", spec, split, seed, bank)
               for i, (spec, split) in enumerate(zip(specs, splits))]
    chi2, p = station_chi_square(records)
    manifest = DatasetManifest(records, out_dir, seed, bank.digest,
                               {"station_chi2": round(chi2, 6), "station_chi2_p": round(p, 6)})
    manifest.save(out_dir / manifest_name)
    return manifest


def generate_from_specs(out_dir: str | Path, specs, split: str = "test", seed: int = 0,
                        prefix: str = "img", bank: TemplateBank = DEFAULT_BANK,
                        manifest_name: str = "manifest.jsonl") -> DatasetManifest:
    """Render an explicit scene list into a one-split dataset."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    records = [_write_scene(img_dir, f"{prefix}_{i:05d}", spec, split, seed, bank) for i, spec in enumerate(specs)]
    manifest = DatasetManifest(records, out_dir, seed, bank.digest)
    manifest.save(out_dir / manifest_name)
    return manifest


def _write_scene(img_dir: Path, image_id: str, spec: SceneSpec, split: str, seed: int,
                 bank: TemplateBank) -> ManifestRecord:
    path = img_dir / f"{image_id}.png"
    write_png(path, render_scene(spec))
    label = spec.label_record()
    prompts = generate_prompt_set(label, prompt_rng(seed, image_id), image_id, bank)
    return ManifestRecord(
        image_path=f"images/{image_id}.png", captions=tuple(prompts.captions), organs=label.organs,
        station=label.station, modality=label.modality, orientation=label.orientation,
        split=split, protocol=label.protocol, augment_spec=None)
