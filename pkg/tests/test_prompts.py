import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anatclip.labels import (DEFAULT_MAP, MODALITIES, ORGANS, ORIENTATIONS, PROTOCOLS, STATIONS, LabelError,
                             LabelRecord, parse_organ_station_map)
from anatclip.prompts import (DEFAULT_BANK, PROMPTS_PER_IMAGE, ConfigurationError, PartialRecord, RenderError,
                              drop_entity, extract_slots, generate_prompt_set, label_prompt_bank, mode_caption,
                              parse_template_bank, prompt_rng, render, render_partial, shuffle_entities)
from anatclip.tokenizer import CONTEXT_LENGTH, tokenize

KNEE = LabelRecord("MR", "sagittal", "lower body", ("knee",), "T2")
LIVER = LabelRecord("CT", "axial", "abdomen", ("liver", "intestine"))


@st.composite
def records(draw):
    station = draw(st.sampled_from(STATIONS))
    pool = DEFAULT_MAP.organs_in(station)
    organs = draw(st.lists(st.sampled_from(pool), min_size=1, max_size=min(3, len(pool)), unique=True))
    modality = draw(st.sampled_from(MODALITIES))
    protocol = draw(st.sampled_from(PROTOCOLS)) if modality == "MR" else None
    return LabelRecord(modality, draw(st.sampled_from(ORIENTATIONS)), station, tuple(organs), protocol)


# ---------------------------------------------------------------- labels

def test_organ_station_map_is_total():
    assert len(ORGANS) == 20 and set(DEFAULT_MAP.station_of.values()) == set(STATIONS)
    assert DEFAULT_MAP.station_of["brain"] == "head" and DEFAULT_MAP.station_of["knee"] == "lower body"


def test_map_parser_rejects_duplicates_and_unknown_stations():
    with pytest.raises(LabelError):
        parse_organ_station_map("brain = head\nbrain = chest\n")
    with pytest.raises(LabelError):
        parse_organ_station_map("brain = torso\n")
    with pytest.raises(LabelError, match="stations without organs"):
        parse_organ_station_map("brain = head\n")


@pytest.mark.parametrize("rec", [
    LabelRecord("CT", "axial", "head", ("brain", "knee")),
    LabelRecord("MR", "axial", "head", ("brain",)),
    LabelRecord("CT", "axial", "head", ("brain",), "T1"),
    LabelRecord("CT", "oblique", "head", ("brain",)),
    LabelRecord("CT", "axial", "head", ()),
    LabelRecord("CT", "axial", "head", ("brain", "brain")),
])
def test_invalid_records_are_rejected(rec):
    with pytest.raises(LabelError):
        rec.validate()


# ---------------------------------------------------------------- templates

def test_table_examples_render_verbatim():
    assert render(DEFAULT_BANK["c1"], KNEE) == "A sagittal oriented MR T2 image of knee organs belong to lower body region"
    assert render(DEFAULT_BANK["p1"], LIVER) == "An image of axial CT scan consisting of liver, intestine organs"


def test_single_organ_has_no_trailing_comma():
    assert "," not in render(DEFAULT_BANK["p2"], KNEE)


def test_render_names_missing_slot():
    with pytest.raises(RenderError, match="station"):
        render(DEFAULT_BANK["c1"], PartialRecord(KNEE, frozenset({"station"})))


@pytest.mark.parametrize("line", ["x\tAn image of {colour}", "x\t{organ} and {organ}", "x\tA {modality} image",
                                  "no tab here {organ}"])
def test_bad_template_lines_are_rejected(line):
    with pytest.raises(ConfigurationError):
        parse_template_bank(line)


def test_bank_digest_tracks_content():
    a = parse_template_bank("t1\tAn image of {organ}\n")
    b = parse_template_bank("t1\tA picture of {organ}\n")
    assert a.digest != b.digest and a.digest == parse_template_bank("t1\tAn image of {organ}\n").digest


def test_mode_captions():
    assert mode_caption(KNEE, "M") == "An image of sagittal MR T2 scan consisting of knee organs"
    assert "lower body" in mode_caption(KNEE, "MS") and "lower body" not in mode_caption(KNEE, "M")
    with pytest.raises(ValueError):
        mode_caption(KNEE, "MSA")


# ---------------------------------------------------------------- augmentation

def test_shuffle_keeps_label_set():
    rng = np.random.default_rng(0)
    rec = LabelRecord("CT", "axial", "abdomen", ("liver", "intestine", "kidneys"))
    orders = {shuffle_entities(rec, rng).organs for _ in range(30)}
    assert len(orders) > 1 and all(sorted(o) == sorted(rec.organs) for o in orders)
    assert shuffle_entities(KNEE, rng) == KNEE


def test_drop_station_uses_station_free_template():
    caption, tid = render_partial(drop_entity(KNEE, "station"), DEFAULT_BANK, np.random.default_rng(0))
    assert "lower body" not in caption and "knee" in caption
    assert "station" not in DEFAULT_BANK[tid].slots


def test_drop_organ_keeps_station_and_drop_orientation_removes_it():
    rng = np.random.default_rng(1)
    caption, _ = render_partial(drop_entity(KNEE, "organ"), DEFAULT_BANK, rng)
    assert "lower body" in caption and "knee" not in caption
    caption, _ = render_partial(drop_entity(KNEE, "orientation"), DEFAULT_BANK, rng)
    assert not set(tokenize(caption)) & set(ORIENTATIONS)


def test_cannot_drop_both_anchors():
    with pytest.raises(RenderError):
        drop_entity(drop_entity(KNEE, "station"), "organ")
    with pytest.raises(ValueError):
        drop_entity(KNEE, "modality")


def test_prompt_set_has_ten_captions_of_each_kind():
    ps = generate_prompt_set(LIVER, prompt_rng(0, "img"), "img")
    kinds = [e.kind for e in ps.entries]
    assert len(ps.captions) == PROMPTS_PER_IMAGE == 10
    assert kinds.count("complete") == 4 and kinds.count("shuffled") == 3
    assert sorted(k for k in kinds if k.startswith("drop")) == ["drop:organ", "drop:orientation", "drop:station"]


def test_prompt_set_is_seeded():
    a = generate_prompt_set(LIVER, prompt_rng(3, "img"), "img")
    assert a == generate_prompt_set(LIVER, prompt_rng(3, "img"), "img")
    assert a != generate_prompt_set(LIVER, prompt_rng(4, "img"), "img")


def test_small_bank_is_a_configuration_error():
    bank = parse_template_bank("c1\tA {orientation} {modality} image of {organ} organs in {station} region\n")
    with pytest.raises(ConfigurationError):
        generate_prompt_set(LIVER, np.random.default_rng(0), bank=bank)


@settings(max_examples=60, deadline=None)
@given(records(), st.integers(0, 2 ** 31))
def test_every_caption_round_trips_through_slot_extraction(rec, seed):
    ps = generate_prompt_set(rec, np.random.default_rng(seed))
    complete_organs = set()
    for entry in ps.entries:
        slots = extract_slots(entry.caption)
        assert slots is not None, entry.caption
        assert len(tokenize(entry.caption)) <= CONTEXT_LENGTH - 2
        dropped = entry.kind.split(":")[1] if entry.kind.startswith("drop") else None
        expect = {"orientation": rec.orientation, "modality": rec.modality_text, "station": rec.station}
        for slot, value in expect.items():
            if slot == dropped:
                assert slots[slot] is None
            elif slot in DEFAULT_BANK[entry.template_id].slots:
                assert slots[slot] == value
        if slots["organ"] is not None:
            assert sorted(slots["organ"]) == sorted(rec.organs)
        if entry.kind == "complete":
            complete_organs |= set(slots["organ"])
    assert complete_organs == set(rec.organs)


def test_label_banks():
    organ, station = label_prompt_bank("organ"), label_prompt_bank("station")
    assert len(organ) == 20 and len(set(organ)) == 20
    assert len(station) == 5 and len(set(station)) == 5
    assert organ[0] == "An image consisting of brain organs" and station[-1] == "An image of lower body region"
    with pytest.raises(ValueError):
        label_prompt_bank("modality")
