import math

import numpy as np
import pytest

from ctseg import segnet, trainer
from ctseg.errors import ConfigError, DataError, NumericsError
from ctseg.segnet import NetConfig
from ctseg.trainer import Subject, TrainConfig

NET = NetConfig(group_channels=(2, 2, 2), blocks_per_group=1, seed=4)


def make_subjects(n, z=4, shape=(12, 10), seed=0):
    """Bright disc on a dark background: the disc is the 'lung'."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    out = []
    for i in range(n):
        cy, cx = rng.uniform(3, shape[0] - 3), rng.uniform(3, shape[1] - 3)
        mask = np.broadcast_to(((yy - cy) ** 2 + (xx - cx) ** 2) < 9, (z,) + shape).copy()
        images = np.where(mask, 0.2, 0.8) + rng.normal(scale=0.05, size=mask.shape)
        out.append(Subject(f"s{i:02d}", images, mask))
    return out


def test_config_defaults_and_file(tmp_path):
    c = TrainConfig()
    assert (c.lr, c.batch_size, c.weight_decay, c.val_fraction) == (0.02, 17, 1e-4, 0.05)
    path = tmp_path / "train.cfg"
    path.write_text("# comment\nlr = 0.01\nmax_epochs = 3\nseed = 9\n")
    c = TrainConfig.from_file(path)
    assert (c.lr, c.max_epochs, c.seed, c.batch_size) == (0.01, 3, 9, 17)
    assert TrainConfig.from_text(c.to_text()) == c
    with pytest.raises(ConfigError):
        TrainConfig.from_text("learning_rate = 1\n")
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()


def test_split_examples():
    subjects = list(range(1080))
    train, val = trainer.split_subjects(subjects, 0.05, 0)
    assert len(val) == 54 and len(train) == 1026
    assert not set(train) & set(val)
    assert trainer.split_subjects(subjects, 0.05, 0) == (train, val)
    assert len(trainer.split_subjects([1, 2], 0.05, 0)[1]) == 1
    with pytest.raises(DataError):
        trainer.split_subjects([1], 0.05, 0)


def test_batches_arithmetic_and_coverage():
    subjects = make_subjects(3, z=10)
    batches = list(trainer.sample_batches(subjects, 17, seed=1, epoch=0))
    assert [len(b.slice_ids) for b in batches] == [17, 13]
    ids = [s for b in batches for s in b.slice_ids]
    assert sorted(ids) == sorted((s.subject_id, z) for s in subjects for z in range(10))
    again = list(trainer.sample_batches(subjects, 17, seed=1, epoch=0))
    assert [b.slice_ids for b in again] == [b.slice_ids for b in batches]
    other = list(trainer.sample_batches(subjects, 17, seed=1, epoch=1))
    assert [b.slice_ids for b in other] != [b.slice_ids for b in batches]


def test_batch_contents_one_hot():
    subjects = make_subjects(2, z=3)
    b = next(trainer.sample_batches(subjects, 4, seed=0, epoch=0))
    assert b.images.shape == (4, 1, 12, 10) and b.target.shape == (4, 2, 12, 10)
    np.testing.assert_array_equal(b.target.sum(axis=1), 1)
    sid, z = b.slice_ids[0]
    subj = next(s for s in subjects if s.subject_id == sid)
    np.testing.assert_array_equal(b.target[0, 1].astype(bool), subj.mask[z])
    np.testing.assert_array_equal(b.images[0, 0], subj.images[z])


def test_inconsistent_shapes():
    subjects = make_subjects(1) + make_subjects(1, shape=(12, 11))
    with pytest.raises(DataError):
        list(trainer.sample_batches(subjects, 4, 0, 0))


def test_zero_epochs_is_noop():
    params, rep = trainer.train(TrainConfig(max_epochs=0), make_subjects(3), NET)
    assert params.equal(segnet.build(NET))
    assert rep.history == []


def test_loss_decreases():
    cfg = TrainConfig(max_epochs=20, batch_size=8, seed=2)
    _, rep = trainer.train(cfg, make_subjects(10), NET)
    assert len(rep.history) == 20
    assert all(math.isfinite(v) for v in rep.train_losses + rep.val_losses)
    assert [r.epoch for r in rep.history] == list(range(1, 21))
    assert rep.train_losses[-1] < rep.train_losses[0]


def test_validation_never_trained_on():
    subjects = make_subjects(6)
    train_list, val_list = trainer.split_subjects(subjects, 0.3, 5)
    seen = set()
    trainer.train(TrainConfig(max_epochs=2, batch_size=5), (train_list, val_list), NET,
                  on_batch=lambda e, i, b: seen.update(sid for sid, _ in b.slice_ids))
    assert seen == {s.subject_id for s in train_list}
    assert not seen & {s.subject_id for s in val_list}


def test_bitwise_determinism(tmp_path):
    cfg = TrainConfig(max_epochs=3, batch_size=6, seed=3)
    data = make_subjects(5)
    trainer.train(cfg, data, NET, out_dir=tmp_path / "a")
    trainer.train(cfg, data, NET, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    data = make_subjects(5)
    cfg = TrainConfig(max_epochs=4, batch_size=6, seed=3)
    full, rep_full = trainer.train(cfg, data, NET, out_dir=tmp_path / "full")
    trainer.train(TrainConfig(max_epochs=2, batch_size=6, seed=3), data, NET, out_dir=tmp_path / "part")
    resumed, rep = trainer.train(cfg, data, NET, out_dir=tmp_path / "part", resume=str(tmp_path / "part" / "state.npz"))
    assert resumed.equal(full)
    assert rep.train_losses == rep_full.train_losses
    a = trainer.load_state(str(tmp_path / "full" / "state.npz"))
    b = trainer.load_state(str(tmp_path / "part" / "state.npz"))
    assert a.params.equal(b.params) and a.adam.step == b.adam.step
    for k in a.adam.m:
        assert a.adam.m[k].tobytes() == b.adam.m[k].tobytes()


def test_nan_aborts_with_batch_index(tmp_path):
    data = make_subjects(4)
    for s in data:
        s.images[1, 0, 0] = np.nan
    with pytest.raises(NumericsError) as err:
        trainer.train(TrainConfig(max_epochs=1, batch_size=100), data, NET, out_dir=tmp_path)
    assert err.value.batch_index == 0
    assert "batch 0" in str(err.value)
    assert err.value.last_good.equal(segnet.build(NET))
    assert (tmp_path / "best.ckpt").exists()


def test_early_stopping(monkeypatch):
    monkeypatch.setattr(trainer, "evaluate_loss", lambda *a, **k: 0.5)
    _, rep = trainer.train(TrainConfig(max_epochs=10, early_stop_patience=2, batch_size=8), make_subjects(4), NET)
    assert len(rep.history) == 3 and rep.stopped_early and rep.best_epoch == 1


def test_report_csv(tmp_path):
    _, rep = trainer.train(TrainConfig(max_epochs=2, batch_size=8), make_subjects(4), NET)
    rep.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,seconds"
    assert len(lines) == 3


def test_float32_training_runs():
    params, rep = trainer.train(TrainConfig(max_epochs=1, batch_size=8), make_subjects(4), NET, dtype=np.float32)
    assert params["stem.conv.w"].dtype == np.float32
    assert math.isfinite(rep.train_losses[0])
