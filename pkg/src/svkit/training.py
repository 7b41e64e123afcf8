"""Noam-scheduled Adam training for the speaker classifiers (and TESA).

Everything that decides the order of computation is derived from the
seed and the global step, so a run interrupted at any step and resumed
from its checkpoint produces the same parameters as an uninterrupted one.
"""

import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .exceptions import (
    ConfigError,
    CountError,
    FormatError,
    NonFiniteError,
    TrainingDivergedError,
)
from .frontend import prepare_features, training_chunks
from .io import read_container, write_container

log = logging.getLogger(__name__)


def noam_lr(step, factor, model_dim, warmup):
    if step < 1:
        raise ConfigError(f"Noam schedule is defined for step >= 1, got {step}")
    if warmup < 1 or model_dim < 1 or factor <= 0:
        raise ConfigError("Noam schedule needs factor > 0, model_dim >= 1, warmup >= 1")
    return factor * model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass(frozen=True)
class NoamSchedule:
    factor: float = 10.0
    model_dim: int = 512
    warmup_steps: int = 25000

    def __call__(self, step):
        return noam_lr(step, self.factor, self.model_dim, self.warmup_steps)


def global_grad_norm(grads):
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_gradients(params, max_norm=5.0):
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    ``params`` is a ParameterSet, an iterable of tensors or of (name, tensor)
    pairs.  Returns the scale that was applied (1.0 when nothing changed).
    """
    if hasattr(params, "trainable"):
        tensors = [t for _, t in params.trainable()]
    else:
        tensors = [p[1] if isinstance(p, tuple) else p for p in params]
    grads = [t.grad for t in tensors if t.grad is not None]
    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        bad = [name for name, t in _named(params) if t.grad is not None and not np.all(np.isfinite(t.grad))]
        raise NonFiniteError(f"non-finite gradient in {bad[:5] or 'parameters'}")
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= scale
    return scale


def _named(params):
    if hasattr(params, "trainable"):
        return params.trainable()
    return [p if isinstance(p, tuple) else (str(i), p) for i, p in enumerate(params)]


class Adam:
    """Adam whose step size is supplied per update (the Noam multiplier)."""

    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.trainable()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.trainable()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.trainable():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        out = {}
        for name in self.m:
            out["adam.m." + name] = self.m[name]
            out["adam.v." + name] = self.v[name]
        return out

    def load_state_arrays(self, arrays, t):
        for name in self.m:
            try:
                self.m[name][...] = arrays["adam.m." + name]
                self.v[name][...] = arrays["adam.v." + name]
            except KeyError as exc:
                raise FormatError(f"checkpoint lacks optimizer moments for {name}") from exc
        self.t = int(t)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    min_chunk: int = 100
    max_chunk: int = 200
    chunks_per_utterance: int = 4  # 0 tiles each utterance once on average
    holdout_fraction: float = 0.1
    warmup: int = 300
    lr_factor: float = 0.3
    max_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints
    max_steps: int = 0  # 0 means no step limit

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 1 <= self.min_chunk <= self.max_chunk:
            raise ConfigError(f"bad chunk range [{self.min_chunk}, {self.max_chunk}]")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        if self.max_norm <= 0 or self.warmup < 1 or self.lr_factor <= 0:
            raise ConfigError("max_norm, warmup and lr_factor must be positive")
        return self


@dataclass
class TrainState:
    """Position in the run plus the optimizer moments needed to resume it."""

    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    seed: int = 0
    best_acc: float = -1.0
    history: list = field(default_factory=list)

    def header(self):
        values = {k: v for k, v in asdict(self).items() if k != "history"}
        values["history"] = ";".join(",".join(repr(x) for x in row) for row in self.history)
        return values

    @classmethod
    def from_header(cls, header):
        rows = [tuple(_number(x) for x in row.split(",")) for row in header.get("history", "").split(";") if row]
        return cls(
            step=int(header["step"]),
            epoch=int(header["epoch"]),
            batch_in_epoch=int(header["batch_in_epoch"]),
            seed=int(header["seed"]),
            best_acc=float(header["best_acc"]),
            history=rows,
        )


def _number(text):
    try:
        return int(text)
    except ValueError:
        return float(text)


def save_checkpoint(path, model, optimizer, state, extra_header=None):
    header = {}
    if hasattr(model, "config") and hasattr(model, "arch"):
        from .models.extract import config_to_header

        header.update(config_to_header(model.config, model.arch))
    header.update(extra_header or {})
    header.update({"train." + k: v for k, v in state.header().items()})
    header["adam.t"] = optimizer.t
    arrays = model.parameters().arrays()
    arrays.update(optimizer.state_arrays())
    write_container(path, arrays, header)


def load_checkpoint(path, model, optimizer=None):
    """Restore parameters (and optimizer moments) in place; returns the TrainState."""
    header, arrays = read_container(path)
    own = model.parameters()
    missing = [k for k in own if k not in arrays]
    if missing:
        raise FormatError(f"{path} lacks parameters {missing[:5]}")
    model.load_parameters({k: arrays[k] for k in own})
    if optimizer is not None:
        optimizer.load_state_arrays(arrays, header.get("adam.t", 0))
    state_header = {k[len("train."):]: v for k, v in header.items() if k.startswith("train.")}
    if not state_header:
        raise FormatError(f"{path} is not a training checkpoint")
    return TrainState.from_header(state_header)


# ----------------------------------------------------------------- examples


@dataclass
class ChunkSet:
    """Pre-generated training chunks: (T, n_feats) arrays with integer labels."""

    chunks: list
    labels: np.ndarray

    def __len__(self):
        return len(self.chunks)

    @property
    def lengths(self):
        return np.array([c.shape[0] for c in self.chunks])


def make_chunk_sets(corpus, config, speakers=None, **frontend):
    """Chunk the training split into (train, held-out) ChunkSets.

    The held-out set uses whole utterances (``holdout_fraction`` of each
    speaker's utterances, at least one when the speaker has two or more),
    so no held-out frame is ever seen in training.
    """
    entries = list(corpus.entries("train"))
    speakers = speakers or sorted({e.speaker_id for e in entries})
    label_of = {s: i for i, s in enumerate(speakers)}
    by_spk = {}
    for e in entries:
        if e.speaker_id in label_of:
            by_spk.setdefault(e.speaker_id, []).append(e)
    if len(by_spk) < 2:
        raise CountError("classifier training needs at least two speakers")
    split_rng = np.random.default_rng([config.seed, 10])
    train, held = ([], []), ([], [])
    for spk in speakers:
        utts = by_spk.get(spk, [])
        n_hold = 0
        if config.holdout_fraction > 0 and len(utts) >= 2:
            n_hold = max(1, int(round(config.holdout_fraction * len(utts))))
        order = split_rng.permutation(len(utts))
        for rank, k in enumerate(order):
            e = utts[k]
            fs = corpus.features(e.utterance_id)
            if not getattr(corpus, "prepared", False):
                fs = prepare_features(fs, **frontend)
            rng = np.random.default_rng([config.seed, 11, e.index])
            n = config.chunks_per_utterance or None
            pieces = training_chunks(fs, config.min_chunk, config.max_chunk, rng, n_chunks=n)
            if not pieces:
                # shorter than min_chunk: use the whole utterance once
                pieces = [fs] if fs.features.shape[1] > 0 else []
            dest = held if rank < n_hold else train
            for p in pieces:
                dest[0].append(np.ascontiguousarray(p.features.T))
                dest[1].append(label_of[spk])
    as_set = lambda pair: ChunkSet(pair[0], np.asarray(pair[1], dtype=np.int64))
    return as_set(train), as_set(held), speakers


def epoch_batches(lengths, batch_size, seed, epoch):
    """Length-bucketed batches for one epoch, deterministic in (seed, epoch).

    Chunks are sorted by length with a random jitter so batches contain
    similar lengths (each batch is cropped to its shortest member) while
    their composition still changes between epochs.
    """
    rng = np.random.default_rng([seed, 12, epoch])
    lengths = np.asarray(lengths, dtype=float)
    jitter = rng.uniform(0.0, 0.1 * (lengths.max() - lengths.min() + 1.0), len(lengths))
    order = np.argsort(lengths + jitter, kind="stable")
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [batches[k] for k in rng.permutation(len(batches))]


def collate(chunks, index, dtype):
    crop = min(chunks[i].shape[0] for i in index)
    return np.stack([chunks[i][:crop] for i in index]).astype(dtype, copy=False)


def evaluate_accuracy(model, chunk_set, batch_size=64):
    """Fraction of chunks whose arg-max logit is the true speaker (eval mode)."""
    if len(chunk_set) == 0:
        return float("nan")
    dtype = ag.get_default_dtype()
    by_len = {}
    for i, c in enumerate(chunk_set.chunks):
        by_len.setdefault(c.shape[0], []).append(i)
    correct = 0
    for idx in by_len.values():
        for start in range(0, len(idx), batch_size):
            part = idx[start:start + batch_size]
            logits = model(collate(chunk_set.chunks, part, dtype), training=False).data
            correct += int(np.sum(np.argmax(logits, axis=1) == chunk_set.labels[part]))
    return correct / len(chunk_set)


# ---------------------------------------------------------------- main loop


class Trainer:
    """Owns the optimizer and the resumable position of one training run."""

    def __init__(self, model, config, model_dim=None, state=None):
        self.model = model
        self.config = config.validate()
        self.params = model.parameters()
        self.optimizer = Adam(self.params, config.beta1, config.beta2, config.adam_eps)
        self.model_dim = model_dim or getattr(model.config, "adim", None) or getattr(model.config, "emb_dim")
        self.state = state or TrainState(seed=config.seed)

    @property
    def schedule(self):
        return NoamSchedule(self.config.lr_factor, self.model_dim, self.config.warmup)

    def resume(self, path):
        self.state = load_checkpoint(path, self.model, self.optimizer)
        return self

    def checkpoint(self, path, extra_header=None):
        save_checkpoint(path, self.model, self.optimizer, self.state, extra_header)

    def _snapshot(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def train_step(self, loss_fn):
        """One update.  ``loss_fn(rng)`` returns (scalar loss Tensor, extra)."""
        state = self.state
        rng = np.random.default_rng([state.seed, 13, state.step])
        before = self._snapshot()
        try:
            self.params.zero_grad()
            loss, extra = loss_fn(rng)
            if not math.isfinite(float(loss.data)):
                raise NonFiniteError(f"loss is {float(loss.data)}")
            loss.backward()
            clip_gradients(self.params, self.config.max_norm)
            lr = self.schedule(state.step + 1)
            self.optimizer.step(lr)
            for name, t in self.params.trainable():
                if not np.all(np.isfinite(t.data)):
                    raise NonFiniteError(f"parameter {name} became non-finite")
        except NonFiniteError as exc:
            self.model.load_parameters(before)
            raise TrainingDivergedError(
                f"training diverged at step {state.step + 1}: {exc}", last_good=before
            ) from exc
        state.step += 1
        return float(loss.data), lr, extra


def _classifier_loss(model, x, y):
    def loss_fn(rng):
        logits = model(x, training=True, rng=rng)
        loss = ag.cross_entropy_logits(logits, y)
        correct = int(np.sum(np.argmax(logits.data, axis=1) == y))
        return loss, correct
    return loss_fn


def train_classifier(model, train_set, held_set, config, log_path=None, checkpoint_dir=None,
                     trainer=None):
    """Train ``model`` on ``train_set`` with cross-entropy; returns the Trainer.

    One metrics line ``epoch step loss acc lr`` is appended to ``log_path``
    per finished epoch, ``acc`` being held-out chunk accuracy.  Pass an
    existing ``trainer`` (e.g. after :meth:`Trainer.resume`) to continue.
    """
    trainer = trainer or Trainer(model, config)
    cfg, state = trainer.config, trainer.state
    if len(train_set) == 0:
        raise CountError("no training chunks")
    dtype = ag.get_default_dtype()
    lengths = train_set.lengths
    done = False
    while state.epoch < cfg.epochs and not done:
        batches = epoch_batches(lengths, cfg.batch_size, cfg.seed, state.epoch)
        loss_sum, n_seen = 0.0, 0
        while state.batch_in_epoch < len(batches):
            if cfg.max_steps and state.step >= cfg.max_steps:
                done = True
                break
            index = batches[state.batch_in_epoch]
            x = collate(train_set.chunks, index, dtype)
            y = train_set.labels[index]
            loss, lr, _ = trainer.train_step(_classifier_loss(model, x, y))
            state.batch_in_epoch += 1
            loss_sum += loss * len(index)
            n_seen += len(index)
        if done:
            break
        acc = evaluate_accuracy(model, held_set)
        row = (state.epoch + 1, state.step, loss_sum / max(n_seen, 1), acc, trainer.schedule(state.step))
        state.history.append(row)
        state.best_acc = max(state.best_acc, acc) if math.isfinite(acc) else state.best_acc
        log.info("epoch %d step %d loss %.4f acc %.4f lr %.3g", *row)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write("%d %d %.6f %.6f %.6g\n" % row)
        state.epoch += 1
        state.batch_in_epoch = 0
        if checkpoint_dir and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            os.makedirs(checkpoint_dir, exist_ok=True)
            trainer.checkpoint(os.path.join(checkpoint_dir, f"epoch{state.epoch:03d}.ckpt"))
    return trainer


def read_metrics_log(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            e, s, loss, acc, lr = line.split()
            rows.append((int(e), int(s), float(loss), float(acc), float(lr)))
    return rows
