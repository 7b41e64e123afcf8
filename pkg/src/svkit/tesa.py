"""Transformer encoder speaker authenticator: scores a pair of utterances
from their per-chunk s-vectors.

Input layout for one pair is ``[CLS, s_1..s_L, SEP, t_1..t_M, SEP]`` (so
``K = L + M + 3`` tokens).  Utterance embedding U1 is added to the first
utterance's s-vectors and to the SEP that closes it, U2 likewise for the
second utterance; CLS receives neither.  There is no positional encoding,
so in eval mode the score does not depend on chunk order.
"""

import logging
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autograd as ag
from .autograd import Tensor
from .exceptions import ConfigError, CountError, DimensionError, EmptyUtteranceError, StateError
from .models.transformer import Encoder
from .nn import BatchNorm, Linear, Module
from .training import TrainConfig, Trainer

log = logging.getLogger(__name__)

CLS, SVEC, SEP = 0, 1, 2
DIFFERENT, SAME = 0, 1  # logit order


@dataclass(frozen=True)
class TesaConfig:
    emb_dim: int = 512
    adim: int = 250
    n_layers: int = 9
    n_heads: int = 5
    encoder_units: int = 1024
    hidden: int = 1000
    dropout: float = 0.1

    def validate(self):
        if self.adim % self.n_heads:
            raise ConfigError(f"adim {self.adim} not divisible by {self.n_heads} heads")
        if min(self.emb_dim, self.adim, self.n_layers, self.encoder_units, self.hidden) < 1:
            raise ConfigError("TESA sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        return self


@dataclass
class PairInput:
    """Token layout of one pair; ``tokens`` already includes the learnable parts."""

    tokens: Tensor  # (K, emb_dim)
    kinds: np.ndarray  # CLS / SVEC / SEP per position
    segments: np.ndarray  # 0 for CLS, 1 or 2 for the utterance a token belongs to or closes

    @property
    def K(self):
        return len(self.kinds)


def pair_layout(L, M):
    """Token kinds and segment ids for utterances with L and M chunks."""
    if L < 1 or M < 1:
        raise EmptyUtteranceError(f"each utterance needs at least one chunk (got L={L}, M={M})")
    kinds = np.array([CLS] + [SVEC] * L + [SEP] + [SVEC] * M + [SEP])
    segments = np.array([0] + [1] * (L + 1) + [2] * (M + 1))
    assert len(kinds) == L + M + 3
    return kinds, segments


class TesaNet(Module):
    arch = "tesa"

    def __init__(self, config=None, seed=0):
        self.config = (config or TesaConfig()).validate()
        c = self.config
        rng = np.random.default_rng(seed)
        dtype = ag.get_default_dtype()
        self.cls_token = Tensor(rng.normal(0.0, 0.02, c.emb_dim).astype(dtype), requires_grad=True)
        self.sep_token = Tensor(rng.normal(0.0, 0.02, c.emb_dim).astype(dtype), requires_grad=True)
        self.utterance_embedding = Tensor(rng.normal(0.0, 0.02, (2, c.emb_dim)).astype(dtype), requires_grad=True)
        self.ffnn1 = Linear(c.emb_dim, c.adim, rng)
        self.encoder = Encoder(c.n_layers, c.adim, c.n_heads, c.encoder_units, rng, "post", c.dropout)
        self.ffnn2 = Linear(c.adim, c.hidden, rng)
        self.norm2 = BatchNorm(c.hidden)
        self.ffnn3 = Linear(c.hidden, c.hidden, rng)
        self.norm3 = BatchNorm(c.hidden)
        self.output = Linear(c.hidden, 2, rng, init_scale=0.1)

    def embed(self, pairs):
        """Batch token tensor (B, K_max, emb_dim) and key mask for a list of (s1, s2) pairs."""
        c = self.config
        layouts = []
        for s1, s2 in pairs:
            s1, s2 = np.atleast_2d(s1), np.atleast_2d(s2)
            if s1.shape[1] != c.emb_dim or s2.shape[1] != c.emb_dim:
                raise DimensionError(f"s-vectors must have {c.emb_dim} columns, got {s1.shape[1]} and {s2.shape[1]}")
            layouts.append((s1, s2) + pair_layout(len(s1), len(s2)))
        B = len(layouts)
        K = max(len(k) for _, _, k, _ in layouts)
        dtype = ag.get_default_dtype()
        base = np.zeros((B, K, c.emb_dim), dtype=dtype)
        ind = np.zeros((4, B, K, 1), dtype=dtype)  # CLS, SEP, U1, U2 indicators
        mask = np.zeros((B, K), dtype=bool)
        for b, (s1, s2, kinds, segments) in enumerate(layouts):
            L, n = len(s1), len(kinds)
            base[b, 1:1 + L] = s1
            base[b, L + 2:n - 1] = s2
            ind[0, b, :n, 0] = kinds == CLS
            ind[1, b, :n, 0] = kinds == SEP
            ind[2, b, :n, 0] = segments == 1
            ind[3, b, :n, 0] = segments == 2
            mask[b, :n] = True
        u = self.utterance_embedding
        tokens = (ag.as_tensor(base) + ag.as_tensor(ind[0]) * self.cls_token + ag.as_tensor(ind[1]) * self.sep_token
                  + ag.as_tensor(ind[2]) * u[0] + ag.as_tensor(ind[3]) * u[1])
        return tokens, mask

    def __call__(self, pairs, training=False, rng=None):
        """Logits (B, 2) ordered [different, same] for a list of (s1, s2) chunk matrices."""
        tokens, mask = self.embed(pairs)
        h = ag.relu(self.ffnn1(tokens))
        h = self.encoder(h, training, rng, mask)
        e1 = h[:, 0, :]
        h = self.norm2(ag.relu(self.ffnn2(e1)), training)
        h = self.norm3(ag.relu(self.ffnn3(h)), training)
        return self.output(h)


def assemble_pair_input(svecs_1, svecs_2, model):
    """Tokens for one pair (rows are s-vectors), before the FFNN-1 projection."""
    tokens, _ = model.embed([(svecs_1, svecs_2)])
    kinds, segments = pair_layout(len(np.atleast_2d(svecs_1)), len(np.atleast_2d(svecs_2)))
    return PairInput(ag.reshape(tokens, tokens.shape[1:]), kinds, segments)


def tesa_forward(svecs_1, svecs_2, model, training=False, rng=None):
    return model([(svecs_1, svecs_2)], training, rng).data[0]


def scores_from_logits(logits):
    logits = np.asarray(logits)
    return logits[..., SAME] - logits[..., DIFFERENT]


def tesa_score(model, pair, batch_size=64):
    """``logit_same - logit_different`` for one (s1, s2) pair or a list of pairs."""
    if isinstance(pair, tuple) and len(pair) == 2 and np.ndim(pair[0]) in (1, 2) and not isinstance(pair[0], tuple):
        return float(scores_from_logits(tesa_forward(pair[0], pair[1], model)))
    pair = list(pair)
    out = np.empty(len(pair))
    for start in range(0, len(pair), batch_size):
        chunk = pair[start:start + batch_size]
        out[start:start + len(chunk)] = scores_from_logits(model(chunk).data)
    return out


# ----------------------------------------------------------------- pair data


@dataclass
class PairDataset:
    pairs: list  # (utt_a, utt_b, label) with label 1 for same speaker
    embeddings: dict  # utterance id -> (n_chunks, emb_dim)

    def __len__(self):
        return len(self.pairs)

    @property
    def labels(self):
        return np.array([p[2] for p in self.pairs], dtype=np.int64)

    def inputs(self, index=None):
        rows = self.pairs if index is None else [self.pairs[i] for i in index]
        return [(self.embeddings[a], self.embeddings[b]) for a, b, _ in rows]

    def counts(self):
        y = self.labels
        return int(np.sum(y == SAME)), int(np.sum(y == DIFFERENT))


def build_pair_dataset(embeddings, labels, cap_per_speaker=2000, seed=0):
    """Balanced same/different-speaker pairs.

    Same-speaker pairs are all unordered pairs of a speaker's utterances.
    Each unordered pair is attributed to its earlier member, and every
    utterance is paired with as many random other-speaker utterances as
    the same-speaker pairs attributed to it, so the two sets have equal
    size per speaker.  Both are then capped at ``cap_per_speaker``.
    """
    by_spk = {}
    for utt in sorted(labels):
        if utt not in embeddings:
            raise CountError(f"no embeddings for utterance {utt}")
        by_spk.setdefault(labels[utt], []).append(utt)
    if len(by_spk) < 2:
        raise CountError("pair building needs at least two speakers")
    rng = np.random.default_rng([seed, 20])
    all_utts = sorted(labels)
    pairs = []
    for spk in sorted(by_spk):
        utts = by_spk[spk]
        if len(utts) < 2:
            log.warning("speaker %s has a single utterance and gives no same-speaker pairs", spk)
        same = list(combinations(utts, 2))
        others = [u for u in all_utts if labels[u] != spk]
        diff = []
        for k, u in enumerate(utts):
            x = len(utts) - 1 - k
            if x:
                picks = rng.choice(len(others), size=x, replace=x > len(others))
                diff.extend((u, others[i]) for i in picks)
        for group, label in ((same, SAME), (diff, DIFFERENT)):
            if len(group) > cap_per_speaker:
                keep = np.sort(rng.choice(len(group), cap_per_speaker, replace=False))
                group = [group[i] for i in keep]
            pairs.extend((a, b, label) for a, b in group)
    order = rng.permutation(len(pairs))
    return PairDataset([pairs[i] for i in order], embeddings)


def write_pairs(path, pairs):
    with open(path, "w") as fh:
        for a, b, label in pairs:
            fh.write(f"{a} {b} {'same' if label == SAME else 'different'}\n")


def read_pairs(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                a, b, label = line.split()
                out.append((a, b, SAME if label == "same" else DIFFERENT))
    return out


# ------------------------------------------------------------------ training


def _pair_loss(model, inputs, y):
    def loss_fn(rng):
        logits = model(inputs, training=True, rng=rng)
        return ag.cross_entropy_logits(logits, y), logits.data
    return loss_fn


def train_tesa(model, dataset, config, log_path=None, trainer=None):
    """Cross-entropy training over shuffled pair batches; one log line per epoch."""
    trainer = trainer or Trainer(model, config)
    cfg, state = trainer.config, trainer.state
    if len(dataset) == 0:
        raise CountError("empty pair dataset")
    y_all = dataset.labels
    done = False
    while state.epoch < cfg.epochs and not done:
        order = np.random.default_rng([cfg.seed, 21, state.epoch]).permutation(len(dataset))
        batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        loss_sum, correct, seen = 0.0, 0, 0
        while state.batch_in_epoch < len(batches):
            if cfg.max_steps and state.step >= cfg.max_steps:
                done = True
                break
            index = batches[state.batch_in_epoch]
            y = y_all[index]
            loss, lr, logits = trainer.train_step(_pair_loss(model, dataset.inputs(index), y))
            state.batch_in_epoch += 1
            loss_sum += loss * len(index)
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
            seen += len(index)
        if seen:
            row = (state.epoch + 1, state.step, loss_sum / seen, correct / seen, trainer.schedule(max(state.step, 1)))
            state.history.append(row)
            log.info("tesa epoch %d step %d loss %.4f acc %.4f lr %.3g", *row)
            if log_path:
                with open(log_path, "a") as fh:
                    fh.write("%d %d %.6f %.6f %.6g\n" % row)
        if done:
            break
        state.epoch += 1
        state.batch_in_epoch = 0
    return trainer


class TesaVerifier(ClassifierMixin, BaseEstimator):
    """Pair classifier: ``X`` is a sequence of (s1, s2) chunk-embedding matrices, ``y`` 1 for same speaker.

    ``decision_function`` returns the logit difference (higher means same speaker).
    """

    def __init__(self, n_layers=9, adim=250, n_heads=5, encoder_units=1024, hidden=1000, dropout=0.1,
                 epochs=10, batch_size=64, warmup=500, lr_factor=1.0, seed=0):
        self.n_layers = n_layers
        self.adim = adim
        self.n_heads = n_heads
        self.encoder_units = encoder_units
        self.hidden = hidden
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.warmup = warmup
        self.lr_factor = lr_factor
        self.seed = seed

    def fit(self, X, y):
        X = list(X)
        y = np.asarray(y, dtype=np.int64)
        if len(X) != len(y):
            raise DimensionError(f"{len(X)} pairs but {len(y)} labels")
        emb_dim = np.atleast_2d(X[0][0]).shape[1]
        config = TesaConfig(emb_dim, self.adim, self.n_layers, self.n_heads, self.encoder_units,
                            self.hidden, self.dropout)
        self.model_ = TesaNet(config, seed=self.seed)
        embeddings, pairs = {}, []
        for i, (s1, s2) in enumerate(X):
            embeddings[f"a{i}"], embeddings[f"b{i}"] = np.atleast_2d(s1), np.atleast_2d(s2)
            pairs.append((f"a{i}", f"b{i}", int(y[i])))
        train_cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, warmup=self.warmup,
                                lr_factor=self.lr_factor, seed=self.seed)
        self.trainer_ = train_tesa(self.model_, PairDataset(pairs, embeddings), train_cfg)
        self.classes_ = np.array([DIFFERENT, SAME])
        return self

    def decision_function(self, X):
        if not hasattr(self, "model_"):
            raise StateError("TesaVerifier is not fitted")
        return tesa_score(self.model_, list(X))

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int64)

    def predict_proba(self, X):
        s = self.decision_function(X)
        p_same = 1.0 / (1.0 + np.exp(-s))
        return np.stack([1.0 - p_same, p_same], axis=1)
