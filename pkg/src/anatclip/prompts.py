"""Caption templates and language augmentation.

A template is a pattern with ``{orientation}``, ``{modality}``, ``{organ}`` and
``{station}`` slots. Language augmentation varies the template, shuffles the
organ list and drops one slot at a time, giving 10 captions per image.
"""
from __future__ import annotations

import hashlib
import re
import zlib
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .labels import DEFAULT_MAP, MODALITIES, ORIENTATIONS, PROTOCOLS, STATIONS, LabelRecord, OrganStationMap

SLOTS = ("orientation", "modality", "organ", "station")
DROPPABLE = ("station", "organ", "orientation")
PROMPTS_PER_IMAGE = 10
N_COMPLETE, N_DROPPED, N_SHUFFLED = 4, 3, 3

ORGAN_BANK_PATTERN = "An image consisting of {organ} organs"
STATION_BANK_PATTERN = "An image of {station} region"

# fixed single-caption templates for the non-augmented ablation modes
MODE_TEMPLATE = {"M": "p1", "MS": "c1"}

_SLOT_RE = re.compile(r"\{(\w+)\}")


class RenderError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    pattern: str

    @property
    def slots(self) -> frozenset[str]:
        return frozenset(_SLOT_RE.findall(self.pattern))

    @property
    def complete(self) -> bool:
        return self.slots == frozenset(SLOTS)

    def validate(self) -> "PromptTemplate":
        found = _SLOT_RE.findall(self.pattern)
        unknown = set(found) - set(SLOTS)
        if unknown:
            raise ConfigurationError(f"template {self.id}: unknown slots {sorted(unknown)}")
        if len(found) != len(set(found)):
            raise ConfigurationError(f"template {self.id}: a slot appears more than once")
        if not {"organ", "station"} & set(found):
            raise ConfigurationError(f"template {self.id}: needs an organ or station slot")
        return self


@dataclass(frozen=True)
class TemplateBank:
    templates: tuple[PromptTemplate, ...]
    text: str

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:16]

    def __getitem__(self, tid: str) -> PromptTemplate:
        for t in self.templates:
            if t.id == tid:
                return t
        raise KeyError(tid)

    @property
    def complete(self) -> tuple[PromptTemplate, ...]:
        return tuple(t for t in self.templates if t.complete)

    def candidates(self, available: frozenset[str], without: frozenset[str]) -> tuple[PromptTemplate, ...]:
        return tuple(t for t in self.templates if t.slots <= available and not t.slots & without)


def parse_template_bank(text: str) -> TemplateBank:
    templates = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        tid, sep, pattern = line.partition("\t")
        if not sep:
            raise ConfigurationError(f"template line {n}: expected 'id<TAB>pattern'")
        templates.append(PromptTemplate(tid.strip(), pattern.strip()).validate())
    ids = [t.id for t in templates]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate template ids")
    return TemplateBank(tuple(templates), text)


@lru_cache(maxsize=None)
def _default_bank_text() -> str:
    return resources.files("anatclip.data").joinpath("templates.tsv").read_text(encoding="utf-8")


def load_template_bank(path: str | Path | None = None) -> TemplateBank:
    if path is None:
        return parse_template_bank(_default_bank_text())
    return parse_template_bank(Path(path).read_text(encoding="utf-8"))


DEFAULT_BANK = load_template_bank()


@dataclass(frozen=True)
class PartialRecord:
    """A label record with some slots withheld from the caption."""
    record: LabelRecord
    dropped: frozenset[str] = frozenset()

    @property
    def available(self) -> frozenset[str]:
        return frozenset(SLOTS) - self.dropped


def _as_partial(rec: LabelRecord | PartialRecord) -> PartialRecord:
    return rec if isinstance(rec, PartialRecord) else PartialRecord(rec)


def slot_values(rec: LabelRecord | PartialRecord) -> dict[str, str]:
    p = _as_partial(rec)
    r = p.record
    values = {
        "orientation": r.orientation,
        "modality": r.modality_text,
        "organ": ", ".join(r.organs),
        "station": r.station,
    }
    return {k: v for k, v in values.items() if k not in p.dropped}


def render(template: PromptTemplate, rec: LabelRecord | PartialRecord) -> str:
    values = slot_values(rec)
    for slot in sorted(template.slots):
        if slot not in values:
            raise RenderError(f"template {template.id} needs slot {slot!r}, which is absent")
    return template.pattern.format(**values)


def shuffle_entities(record: LabelRecord, rng: np.random.Generator) -> LabelRecord:
    order = rng.permutation(len(record.organs))
    return LabelRecord(record.modality, record.orientation, record.station,
                       tuple(record.organs[i] for i in order), record.protocol)


def drop_entity(rec: LabelRecord | PartialRecord, which: str) -> PartialRecord:
    if which not in DROPPABLE:
        raise ValueError(f"can only drop one of {DROPPABLE}, not {which!r}")
    p = _as_partial(rec)
    dropped = p.dropped | {which}
    if {"station", "organ"} <= dropped:
        raise RenderError("cannot drop both station and organ: no semantic anchor left")
    return PartialRecord(p.record, dropped)


def render_partial(rec: PartialRecord, bank: TemplateBank, rng: np.random.Generator) -> tuple[str, str]:
    cands = bank.candidates(rec.available, rec.dropped)
    if not cands:
        raise ConfigurationError(f"no template renders without {sorted(rec.dropped)}")
    tpl = cands[int(rng.integers(len(cands)))]
    return render(tpl, rec), tpl.id


@dataclass(frozen=True)
class PromptEntry:
    caption: str
    template_id: str
    kind: str  # complete | shuffled | drop:<slot>


@dataclass(frozen=True)
class PromptSet:
    image_id: str
    entries: tuple[PromptEntry, ...]

    @property
    def captions(self) -> list[str]:
        return [e.caption for e in self.entries]


def prompt_rng(seed: int, image_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(image_id.encode("utf-8"))])


def generate_prompt_set(record: LabelRecord, rng: np.random.Generator, image_id: str = "",
                        bank: TemplateBank = DEFAULT_BANK) -> PromptSet:
    """Four complete captions, three with one slot dropped, three with shuffled organs."""
    complete = bank.complete
    if len(complete) < N_COMPLETE:
        raise ConfigurationError(f"bank has {len(complete)} complete templates, need {N_COMPLETE}")
    entries = []
    for i in rng.choice(len(complete), N_COMPLETE, replace=False):
        entries.append(PromptEntry(render(complete[i], record), complete[i].id, "complete"))
    for which in rng.permutation(DROPPABLE):
        caption, tid = render_partial(drop_entity(record, str(which)), bank, rng)
        entries.append(PromptEntry(caption, tid, f"drop:{which}"))
    for _ in range(N_SHUFFLED):
        tpl = complete[int(rng.integers(len(complete)))]
        entries.append(PromptEntry(render(tpl, shuffle_entities(record, rng)), tpl.id, "shuffled"))
    return PromptSet(image_id, tuple(entries))


def mode_caption(record: LabelRecord, mode: str, bank: TemplateBank = DEFAULT_BANK) -> str:
    """The single caption used by the non-augmented ablation modes."""
    if mode not in MODE_TEMPLATE:
        raise ValueError(f"mode {mode!r} has no fixed caption template")
    return render(bank[MODE_TEMPLATE[mode]], record)


def label_prompt_bank(kind: str, omap: OrganStationMap = DEFAULT_MAP) -> list[str]:
    if kind == "organ":
        return [ORGAN_BANK_PATTERN.format(organ=o) for o in omap.organs]
    if kind == "station":
        return [STATION_BANK_PATTERN.format(station=s) for s in STATIONS]
    raise ValueError(f"kind must be 'organ' or 'station', not {kind!r}")


def bank_labels(kind: str, omap: OrganStationMap = DEFAULT_MAP) -> tuple[str, ...]:
    return omap.organs if kind == "organ" else STATIONS


# ---------------------------------------------------------------- slot extraction

def _slot_regex(omap: OrganStationMap) -> dict[str, str]:
    organ = "|".join(re.escape(o) for o in sorted(omap.organs, key=len, reverse=True))
    mr = "|".join(f"MR {p}" for p in PROTOCOLS)
    return {
        "orientation": "|".join(ORIENTATIONS),
        "modality": f"{mr}|{'|'.join(MODALITIES)}",
        "organ": f"(?:{organ})(?:, (?:{organ}))*",
        "station": "|".join(re.escape(s) for s in STATIONS),
    }


def extract_slots(caption: str, bank: TemplateBank = DEFAULT_BANK,
                  omap: OrganStationMap = DEFAULT_MAP) -> dict | None:
    """Recover slot values from a rendered caption; absent slots map to None."""
    alts = _slot_regex(omap)
    for tpl in bank.templates:
        pieces = _SLOT_RE.split(tpl.pattern)
        rx = "".join(re.escape(p) if i % 2 == 0 else f"(?P<{p}>{alts[p]})"
                     for i, p in enumerate(pieces))
        m = re.fullmatch(rx, caption)
        if m:
            out = {s: m.groupdict().get(s) for s in SLOTS}
            if out["organ"] is not None:
                out["organ"] = tuple(out["organ"].split(", "))
            out["template_id"] = tpl.id
            return out
    return None


def caption_corpus(bank: TemplateBank = DEFAULT_BANK, omap: OrganStationMap = DEFAULT_MAP) -> list[str]:
    """Every word the caption language can produce, for a mode-independent vocabulary."""
    texts = [t.pattern for t in bank.templates]
    texts += label_prompt_bank("organ", omap) + label_prompt_bank("station", omap)
    texts += list(ORIENTATIONS) + list(MODALITIES) + list(PROTOCOLS) + list(STATIONS) + list(omap.organs)
    return [_SLOT_RE.sub(" ", t) for t in texts]
