"""Slice-based training loop: subject split, batch sampling, Adam on Dice_NS."""

import csv
import dataclasses
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine, segnet
from .errors import ConfigError, DataError, NumericsError

STATE_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.02
    batch_size: int = 17
    weight_decay: float = 1e-4
    max_epochs: int = 20
    val_fraction: float = 0.05
    seed: int = 0
    checkpoint_every: int = 1
    early_stop_patience: int = 0  # 0 disables early stopping

    def validate(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie strictly between 0 and 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.checkpoint_every < 0 or self.early_stop_patience < 0:
            raise ConfigError("checkpoint_every and early_stop_patience must be >= 0")
        return self

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text, **overrides):
        from .volumes import parse_key_values

        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in parse_key_values(text).items():
            if key not in types:
                raise ConfigError(f"unknown training config key {key!r}")
            conv = float if types[key] in (float, "float") else int
            try:
                values[key] = conv(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        values.update(overrides)
        return cls(**values).validate()

    @classmethod
    def from_file(cls, path, **overrides):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainReport:
    history: list = field(default_factory=list)  # EpochRecord per finished epoch
    checkpoint_path: str | None = None
    best_epoch: int | None = None
    stopped_early: bool = False

    @property
    def train_losses(self):
        return [r.train_loss for r in self.history]

    @property
    def val_losses(self):
        return [r.val_loss for r in self.history]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            for r in self.history:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), f"{r.seconds:.3f}"])


@dataclass
class Subject:
    """Preprocessed slices of one subject: images (z, rows, cols) in [0, 1], mask bool."""

    subject_id: str
    images: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.images.ndim != 3 or self.images.shape != self.mask.shape:
            raise DataError(f"{self.subject_id}: images {self.images.shape} and mask {self.mask.shape} must match (z, rows, cols)")

    @property
    def num_slices(self):
        return self.images.shape[0]


@dataclass
class Batch:
    images: np.ndarray  # N x 1 x H x W
    target: np.ndarray  # N x 2 x H x W one-hot (background, lung)
    slice_ids: list  # (subject_id, z) per row


def split_subjects(subjects, val_fraction, seed):
    """Subject-level split; both lists keep the input order."""
    subjects = list(subjects)
    n = len(subjects)
    if n < 2:
        raise DataError("need at least two subjects to split off a validation set")
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must lie strictly between 0 and 1")
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    rng = np.random.default_rng(seed)
    val_idx = set(rng.permutation(n)[:n_val].tolist())
    train = [s for i, s in enumerate(subjects) if i not in val_idx]
    val = [s for i, s in enumerate(subjects) if i in val_idx]
    return train, val


def _one_hot(mask, dtype):
    m = mask.astype(dtype)
    return np.stack([1 - m, m], axis=1)


def _slice_index(subjects):
    shapes = {s.images.shape[1:] for s in subjects}
    if len(shapes) > 1:
        raise DataError(f"inconsistent slice shapes across subjects: {sorted(shapes)}")
    return [(i, z) for i, s in enumerate(subjects) for z in range(s.num_slices)]


def _assemble(subjects, picks, dtype):
    imgs = np.stack([subjects[i].images[z] for i, z in picks]).astype(dtype)[:, None]
    masks = np.stack([subjects[i].mask[z] for i, z in picks])
    ids = [(subjects[i].subject_id, z) for i, z in picks]
    return Batch(np.ascontiguousarray(imgs), _one_hot(masks, dtype), ids)


def sample_batches(train_list, batch_size, seed, epoch, dtype=np.float64):
    """Yield the batches of one epoch: a seeded permutation of every slice."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    index = _slice_index(train_list)
    order = np.random.default_rng([int(seed) & (2**63 - 1), int(epoch)]).permutation(len(index))
    for start in range(0, len(order), batch_size):
        yield _assemble(train_list, [index[k] for k in order[start : start + batch_size]], dtype)


def num_batches(train_list, batch_size):
    return math.ceil(sum(s.num_slices for s in train_list) / batch_size)


def evaluate_loss(params, subjects, batch_size, dtype=None):
    """Slice-weighted mean Dice_NS loss in inference mode, fixed slice order."""
    dtype = dtype or params["stem.conv.w"].dtype
    index = _slice_index(subjects)
    total, count = 0.0, 0
    for start in range(0, len(index), batch_size):
        b = _assemble(subjects, index[start : start + batch_size], dtype)
        probs = segnet.forward(params, b.images, mode="infer")
        total += engine.dice_ns_loss(probs, b.target) * len(b.slice_ids)
        count += len(b.slice_ids)
    return total / count


# ----------------------------------------------------------------------------
# resumable state
# ----------------------------------------------------------------------------


@dataclass
class TrainState:
    params: segnet.ModelParams
    adam: engine.AdamState
    epoch: int = 0  # epochs completed
    history: list = field(default_factory=list)
    best_params: segnet.ModelParams | None = None
    best_val: float = math.inf
    best_epoch: int | None = None
    bad_epochs: int = 0


def _config_ints(c):
    return np.array([c.in_channels, c.num_classes, *c.group_channels, c.blocks_per_group, c.kernel, c.seed],
                    dtype=np.int64)


def _config_from_ints(v):
    v = [int(x) for x in v]
    return segnet.NetConfig(v[0], v[1], tuple(v[2:5]), v[5], v[6], v[7])


def save_state(state, path):
    """Everything needed to continue training bit-for-bit (arrays stored exactly)."""
    arrays = {"version": np.array(STATE_VERSION), "net_config": _config_ints(state.params.config)}
    for k, v in state.params:
        arrays["p/" + k] = v
    if state.best_params is not None:
        for k, v in state.best_params:
            arrays["b/" + k] = v
    for k in state.adam.m:
        arrays["m/" + k] = state.adam.m[k]
        arrays["v/" + k] = state.adam.v[k]
    a = state.adam
    arrays["adam"] = np.array([a.lr, a.beta1, a.beta2, a.epsilon, a.weight_decay], dtype=np.float64)
    arrays["counters"] = np.array([a.step, state.epoch, state.bad_epochs,
                                   -1 if state.best_epoch is None else state.best_epoch], dtype=np.int64)
    arrays["best_val"] = np.array(state.best_val, dtype=np.float64)
    arrays["history"] = np.array([[r.epoch, r.train_loss, r.val_loss, r.seconds] for r in state.history],
                                 dtype=np.float64).reshape(-1, 4)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_state(path):
    with np.load(path) as z:
        if int(z["version"]) != STATE_VERSION:
            raise DataError(f"{path}: unsupported training-state version")
        config = _config_from_ints(z["net_config"])
        groups = {"p": {}, "b": {}, "m": {}, "v": {}}
        for key in z.files:
            head, _, name = key.partition("/")
            if name and head in groups:
                groups[head][name] = z[key]
        lr, b1, b2, eps, wd = (float(x) for x in z["adam"])
        step, epoch, bad, best_epoch = (int(x) for x in z["counters"])
        history = [EpochRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in z["history"]]
        best_val = float(z["best_val"])
    order = list(segnet.build(config, np.float64).names())
    params = segnet.ModelParams(config, {k: groups["p"][k] for k in order})
    best = segnet.ModelParams(config, {k: groups["b"][k] for k in order}) if groups["b"] else None
    adam = engine.AdamState(lr, b1, b2, eps, wd, step, groups["m"], groups["v"])
    return TrainState(params, adam, epoch, history, best, best_val,
                      None if best_epoch < 0 else best_epoch, bad)


# ----------------------------------------------------------------------------
# the loop
# ----------------------------------------------------------------------------


def train_step(params, adam, batch):
    """One optimisation step; returns (params, adam, loss)."""
    probs, cache = segnet.forward(params, batch.images, mode="train", return_cache=True)
    loss = engine.dice_ns_loss(probs, batch.target)
    if not math.isfinite(loss):
        raise NumericsError(f"non-finite training loss {loss}")
    grads = segnet.backward(params, cache, engine.dice_ns_grad(probs, batch.target))
    new, adam = engine.adam_step(adam, params.trainable(), grads)
    new.update(cache.running)
    return params.replace(new), adam, loss


def train(config, data, net_config=None, dtype=np.float64, out_dir=None, resume=None, on_batch=None,
          on_epoch=None, log=None):
    """Train a network; returns ``(best-validation params, TrainReport)``.

    ``data`` is either a ``(train_subjects, val_subjects)`` pair or a flat
    list of subjects split with ``config.val_fraction``.  When ``out_dir`` is
    given the best parameters go to ``best.ckpt`` and the resumable state to
    ``state.npz`` every ``checkpoint_every`` epochs.  ``resume`` is a path to
    such a state file.  ``on_batch(epoch, index, batch)`` observes every batch
    before it is used for an update.
    """
    config = config.validate()
    if isinstance(data, tuple):
        train_list, val_list = data
    else:
        train_list, val_list = split_subjects(data, config.val_fraction, config.seed)
    train_list, val_list = list(train_list), list(val_list)
    if not train_list or not val_list:
        raise DataError("training needs non-empty train and validation subject lists")
    _slice_index(train_list + val_list)

    if resume is not None:
        state = load_state(resume)
        state.params = state.params.astype(dtype)
        if state.best_params is not None:
            state.best_params = state.best_params.astype(dtype)
    else:
        params = segnet.build(net_config or segnet.NetConfig(), dtype)
        state = TrainState(params, engine.AdamState(lr=config.lr, weight_decay=config.weight_decay))
    report = TrainReport(history=list(state.history), best_epoch=state.best_epoch)
    ckpt_path = state_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "best.ckpt")
        state_path = os.path.join(out_dir, "state.npz")

    while state.epoch < config.max_epochs:
        if config.early_stop_patience and state.bad_epochs >= config.early_stop_patience:
            report.stopped_early = True
            break
        epoch = state.epoch
        t0 = time.perf_counter()
        params, adam = state.params, state.adam
        total, count = 0.0, 0
        for i, batch in enumerate(sample_batches(train_list, config.batch_size, config.seed, epoch, dtype)):
            if on_batch is not None:
                on_batch(epoch, i, batch)
            try:
                params, adam, loss = train_step(params, adam, batch)
            except NumericsError as exc:
                last_good = state.best_params or state.params
                if ckpt_path is not None:
                    segnet.save_checkpoint(last_good, ckpt_path)
                raise NumericsError(f"epoch {epoch}, batch {i}: {exc}", param=exc.param, batch_index=i,
                                    last_good=last_good) from exc
            total += loss * len(batch.slice_ids)
            count += len(batch.slice_ids)
        val_loss = evaluate_loss(params, val_list, config.batch_size, dtype)
        if not math.isfinite(val_loss):
            raise NumericsError(f"epoch {epoch}: non-finite validation loss",
                                last_good=state.best_params or state.params)
        rec = EpochRecord(epoch + 1, total / count, val_loss, time.perf_counter() - t0)
        state.params, state.adam, state.epoch = params, adam, epoch + 1
        state.history.append(rec)
        report.history.append(rec)
        if val_loss < state.best_val:
            state.best_val, state.best_epoch, state.bad_epochs = val_loss, epoch + 1, 0
            state.best_params = params
            report.best_epoch = epoch + 1
            if ckpt_path is not None:
                segnet.save_checkpoint(params, ckpt_path)
        else:
            state.bad_epochs += 1
        if state_path is not None and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
            save_state(state, state_path)
        if log is not None:
            log(f"epoch {rec.epoch}: train {rec.train_loss:.5f} val {rec.val_loss:.5f} ({rec.seconds:.1f} s)")
        if on_epoch is not None:
            on_epoch(state)

    if state_path is not None and state.history:
        save_state(state, state_path)
    report.checkpoint_path = ckpt_path if state.best_params is not None else None
    final = state.best_params if state.best_params is not None else state.params
    return final, report
