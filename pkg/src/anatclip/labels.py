"""Label taxonomy: stations, organs, modalities and the organ-to-station map.

The organ-to-station map lives in ``data/organ_stations.txt`` and is the single
source of truth for every module that needs it.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

STATIONS = ("head", "chest", "abdomen", "pelvis", "lower body")
MODALITIES = ("MR", "CT")
PROTOCOLS = ("T1", "T2", "FLAIR", "DWI", "ADC", "STIR")
ORIENTATIONS = ("axial", "coronal", "sagittal")


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class OrganStationMap:
    organs: tuple[str, ...]
    station_of: dict[str, str] = field(hash=False)
    text: str = field(repr=False, hash=False)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:16]

    def organs_in(self, station: str) -> tuple[str, ...]:
        return tuple(o for o in self.organs if self.station_of[o] == station)


def parse_organ_station_map(text: str) -> OrganStationMap:
    organs, station_of = [], {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        organ, sep, station = (s.strip() for s in line.partition("="))
        if not sep or not organ or station not in STATIONS:
            raise LabelError(f"line {n}: expected '<organ> = <station>', got {raw!r}")
        if organ in station_of:
            raise LabelError(f"line {n}: organ {organ!r} mapped twice")
        organs.append(organ)
        station_of[organ] = station
    missing = [s for s in STATIONS if s not in station_of.values()]
    if missing:
        raise LabelError(f"stations without organs: {missing}")
    return OrganStationMap(tuple(organs), station_of, text)


@lru_cache(maxsize=None)
def _default_text() -> str:
    return resources.files("anatclip.data").joinpath("organ_stations.txt").read_text(encoding="utf-8")


def load_organ_station_map(path: str | Path | None = None) -> OrganStationMap:
    if path is None:
        return parse_organ_station_map(_default_text())
    return parse_organ_station_map(Path(path).read_text(encoding="utf-8"))


DEFAULT_MAP = load_organ_station_map()
ORGANS = DEFAULT_MAP.organs


@dataclass(frozen=True)
class LabelRecord:
    modality: str
    orientation: str
    station: str
    organs: tuple[str, ...]
    protocol: str | None = None

    def validate(self, omap: OrganStationMap = DEFAULT_MAP) -> "LabelRecord":
        if self.modality not in MODALITIES:
            raise LabelError(f"unknown modality {self.modality!r}")
        if self.modality == "MR":
            if self.protocol not in PROTOCOLS:
                raise LabelError(f"MR record needs a protocol from {PROTOCOLS}, got {self.protocol!r}")
        elif self.protocol is not None:
            raise LabelError(f"protocol {self.protocol!r} given for non-MR modality")
        if self.orientation not in ORIENTATIONS:
            raise LabelError(f"unknown orientation {self.orientation!r}")
        if self.station not in STATIONS:
            raise LabelError(f"unknown station {self.station!r}")
        if not self.organs:
            raise LabelError("record has no organs")
        for organ in self.organs:
            if organ not in omap.station_of:
                raise LabelError(f"unknown organ {organ!r}")
            if omap.station_of[organ] != self.station:
                raise LabelError(
                    f"organ {organ!r} belongs to {omap.station_of[organ]!r}, not {self.station!r}")
        if len(set(self.organs)) != len(self.organs):
            raise LabelError(f"duplicate organs in {self.organs}")
        return self

    @property
    def modality_text(self) -> str:
        return f"{self.modality} {self.protocol}" if self.protocol else self.modality
