"""TDNN x-vector baseline: five spliced layers, stats pooling, two FFNNs."""

from dataclasses import dataclass

import numpy as np

from .. import autograd as ag
from ..exceptions import ConfigError, LengthError
from ..nn import BatchNorm, Linear, Module

DEFAULT_CONTEXTS = ((-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (0,), (0,))


@dataclass(frozen=True)
class TdnnConfig:
    n_speakers: int
    contexts: tuple = DEFAULT_CONTEXTS
    hidden_dims: tuple = (512, 512, 512, 512, 1500)
    emb_dim: int = 512
    n_feats: int = 30

    @property
    def context_left(self):
        return -sum(min(c) for c in self.contexts)

    @property
    def context_right(self):
        return sum(max(c) for c in self.contexts)

    @property
    def receptive_field(self):
        return self.context_left + self.context_right + 1

    def validate(self):
        if len(self.contexts) != len(self.hidden_dims):
            raise ConfigError("one hidden dimension per TDNN layer is required")
        for ctx in self.contexts:
            if sorted(ctx) != list(ctx) or sorted(-o for o in ctx) != list(ctx):
                raise ConfigError(f"TDNN context {ctx} must be sorted and symmetric")
        if min(self.hidden_dims + (self.emb_dim, self.n_speakers, self.n_feats)) < 1:
            raise ConfigError("all TDNN dimensions must be >= 1")
        return self


def splice(x, offsets):
    """(B, T, C) -> (B, T - span, C * len(offsets)); valid (unpadded) splicing."""
    left, right = -min(offsets), max(offsets)
    T = x.shape[1]
    n = T - left - right
    if n < 1:
        raise LengthError(f"splicing {offsets} needs at least {left + right + 1} frames, got {T}")
    if len(offsets) == 1:
        return x
    return ag.concat([x[:, left + o:left + o + n] for o in offsets], axis=-1)


class TdnnNet(Module):
    arch = "tdnn"
    taps = ("XVEC",)

    def __init__(self, config, seed=0):
        self.config = config.validate()
        rng = np.random.default_rng(seed)
        c = config
        dims_in = (c.n_feats,) + tuple(c.hidden_dims[:-1])
        self.tdnn = [Linear(d * len(ctx), h, rng) for d, ctx, h in zip(dims_in, c.contexts, c.hidden_dims)]
        self.tdnn_norm = [BatchNorm(h) for h in c.hidden_dims]
        self.ffnn1 = Linear(2 * c.hidden_dims[-1], c.emb_dim, rng)
        self.norm1 = BatchNorm(c.emb_dim)
        self.ffnn2 = Linear(c.emb_dim, c.emb_dim, rng)
        self.norm2 = BatchNorm(c.emb_dim)
        self.output = Linear(c.emb_dim, c.n_speakers, rng, init_scale=0.1)

    def __call__(self, x, training=False, rng=None, return_taps=False):
        x = ag.as_tensor(x)
        need = self.config.receptive_field
        if x.shape[1] < need:
            raise LengthError(f"TDNN needs at least {need} frames, got {x.shape[1]}")
        h = x
        for ctx, layer, norm in zip(self.config.contexts, self.tdnn, self.tdnn_norm):
            h = norm(ag.relu(layer(splice(h, ctx))), training)
        frames = h
        pooled = ag.stats_pool(frames, eps=1e-10, axis=1)
        xvec = self.ffnn1(pooled)
        h = self.norm1(ag.relu(xvec), training)
        h = self.norm2(ag.relu(self.ffnn2(h)), training)
        logits = self.output(h)
        if return_taps:
            return logits, {"prepool": frames, "pooled": pooled, "XVEC": xvec}
        return logits


def pad_to_receptive_field(feats, config):
    """Edge-replicate frames of a (n_feats, T) matrix up to the receptive field."""
    T = feats.shape[1]
    need = config.receptive_field
    if T >= need:
        return feats
    left = (need - T) // 2
    return np.pad(feats, ((0, 0), (left, need - T - left)), mode="edge")


def tdnn_forward(chunk, model, training=False, rng=None):
    feats = chunk.features if hasattr(chunk, "features") else np.asarray(chunk)
    return model(feats.T[None], training, rng).data[0]
