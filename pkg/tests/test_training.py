import csv

import numpy as np
import pytest

from anatclip.checkpoint import load_checkpoint
from anatclip.config import resolve_config
from anatclip.dataset import generate_dataset
from anatclip.labels import STATIONS
from anatclip.training import (AUGMENT_LOG_HEADER, METRICS_HEADER, augment_policy, build_model, epoch_batches, sample_sources,
                               train_loop)

TINY = {"vision.width": 16, "vision.heads": 2, "vision.depth": 1, "vision.embed_dim": 16, "text.width": 16,
        "text.heads": 2, "text.depth": 1, "train.batch_size": 8, "train.epochs": 2}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    return generate_dataset(tmp_path_factory.mktemp("train_data"), 20, 6, 4, seed=1)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_epoch_batches_cover_every_sample_once():
    for n, bs in [(20, 8), (17, 8), (33, 32), (5, 32)]:
        batches = epoch_batches(n, bs, 0, 1)
        assert sorted(np.concatenate(batches).tolist()) == list(range(n))
        assert all(len(b) >= 2 for b in batches)
    assert [len(b) for b in epoch_batches(17, 8, 0, 1)] == [8, 9]


def test_epoch_batches_are_seeded_per_epoch():
    a = np.concatenate(epoch_batches(30, 8, 4, 1))
    assert np.array_equal(a, np.concatenate(epoch_batches(30, 8, 4, 1)))
    assert not np.array_equal(a, np.concatenate(epoch_batches(30, 8, 4, 2)))


def test_mode_caption_contracts(data):
    recs = data.split("train")
    m, ms, msa = (sample_sources(recs, resolve_config({**TINY, "mode": mode})) for mode in ("M", "MS", "MSA"))
    assert all(len(s.captions) == 1 and not any(st in s.captions[0] for st in STATIONS) for s in m)
    assert all(s.record.station in s.captions[0] for s in ms)
    assert all(len(s.captions) == 10 and len(s.specs) == 10 for s in msa)
    corpora = [{c for s in src for c in s.captions} for src in (m, ms, msa)]
    assert corpora[0] != corpora[1] and corpora[1] != corpora[2] and corpora[0] != corpora[2]


def test_augment_policy_follows_config():
    policy = augment_policy({"vision.image_size": 64, "augment.translate_frac": 0.125, "augment.rotate_max": 45.0})
    assert policy.translate == (-8, 8) and policy.rotate == (-45.0, 45.0)


def test_zero_epochs_writes_header_and_untouched_model(data, tmp_path):
    result = train_loop(data, {**TINY, "train.epochs": 0}, tmp_path)
    assert read_rows(tmp_path / "metrics.csv") == [list(METRICS_HEADER)]
    assert result.rows == []
    fresh = build_model(resolve_config({**TINY, "train.epochs": 0}))
    saved = load_checkpoint(tmp_path / "model.aclp").params
    for k, p in fresh.params.items():
        np.testing.assert_array_equal(saved[k], p.data)


def test_training_writes_checkpoints_metrics_and_provenance(data, tmp_path):
    seen = []
    result = train_loop(data, TINY, tmp_path, callbacks=[lambda epoch, row, model: seen.append(epoch)])
    assert seen == [1, 2]
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["augment_log.csv", "config.txt", "epoch_001.aclp", "epoch_002.aclp", "metrics.csv",
                     "model.aclp", "training_curves.svg"]
    rows = read_rows(tmp_path / "metrics.csv")
    assert rows[0] == list(METRICS_HEADER) and len(rows) == 3
    assert [r[1] for r in rows[1:]] == ["3", "6"]
    log = read_rows(tmp_path / "augment_log.csv")
    assert log[0] == list(AUGMENT_LOG_HEADER) and len(log) == 1 + 2 * 20
    assert all(0 <= int(r[2]) < 10 and 0 <= int(r[4]) < 10 for r in log[1:])
    assert "mode = MSA" in (tmp_path / "config.txt").read_text()
    assert load_checkpoint(tmp_path / "model.aclp").config["epoch"] == "2"
    assert result.model.scale > 0


def test_seeded_training_is_reproducible(data, tmp_path):
    for name in ("a", "b"):
        train_loop(data, {**TINY, "mode": "MS"}, tmp_path / name)
    for f in ("metrics.csv", "model.aclp", "config.txt", "training_curves.svg"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_non_augmented_modes_skip_the_augment_log(data, tmp_path):
    train_loop(data, {**TINY, "mode": "M", "train.epochs": 1}, tmp_path)
    assert not (tmp_path / "augment_log.csv").exists()


def test_training_reduces_loss(data):
    result = train_loop(data, {**TINY, "mode": "MS", "train.epochs": 6, "train.learning_rate": 3e-3})
    losses = [float(r["total_loss"]) for r in result.rows]
    assert losses[-1] < losses[0]
