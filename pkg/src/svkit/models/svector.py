"""Transformer-encoder speaker classifier whose FFNN-3 affine output is the s-vector."""

from dataclasses import dataclass

import numpy as np

from .. import autograd as ag
from ..exceptions import ConfigError, EmptyUtteranceError
from ..nn import BatchNorm, Linear, Module
from .transformer import Encoder, sinusoidal_pe


@dataclass(frozen=True)
class SvectorConfig:
    n_speakers: int
    n_layers: int = 6
    adim: int = 512
    n_heads: int = 8
    encoder_units: int = 2048
    stats_dim: int = 1500
    emb_dim: int = 512
    n_feats: int = 30
    norm_position: str = "post"
    dropout: float = 0.1
    leaky_slope: float = 0.01
    use_pe: bool = True

    @property
    def d_k(self):
        return self.adim // self.n_heads

    @property
    def d_v(self):
        return self.adim // self.n_heads

    def validate(self):
        dims = (self.n_speakers, self.n_layers, self.adim, self.n_heads, self.encoder_units,
                self.stats_dim, self.emb_dim, self.n_feats)
        if min(dims) < 1:
            raise ConfigError("all s-vector dimensions must be >= 1")
        if self.adim % self.n_heads:
            raise ConfigError(f"Adim {self.adim} must be divisible by the head count {self.n_heads}")
        if self.use_pe and self.adim % 2:
            raise ConfigError("sinusoidal position encoding needs an even Adim")
        if self.norm_position not in ("pre", "post"):
            raise ConfigError(f"bad norm_position {self.norm_position!r}")
        return self


class SvectorNet(Module):
    """FFNN-1 -> +PE -> encoder -> FFNN-2 (leaky) -> stats pool -> FFNN-3 -> FFNN-4 -> output."""

    arch = "svector"
    taps = ("F3", "F4")

    def __init__(self, config, seed=0):
        self.config = config.validate()
        rng = np.random.default_rng(seed)
        c = config
        self.ffnn1 = Linear(c.n_feats, c.adim, rng)
        self.encoder = Encoder(c.n_layers, c.adim, c.n_heads, c.encoder_units, rng,
                               c.norm_position, c.dropout)
        self.ffnn2 = Linear(c.adim, c.stats_dim, rng)
        self.norm2 = BatchNorm(c.stats_dim)
        self.ffnn3 = Linear(2 * c.stats_dim, c.emb_dim, rng)
        self.norm3 = BatchNorm(c.emb_dim)
        self.ffnn4 = Linear(c.emb_dim, c.emb_dim, rng)
        self.norm4 = BatchNorm(c.emb_dim)
        self.output = Linear(c.emb_dim, c.n_speakers, rng, init_scale=0.1)

    def __call__(self, x, training=False, rng=None, return_taps=False):
        """``x``: (B, T, n_feats) frames.  Returns logits (B, n_speakers)."""
        c = self.config
        x = ag.as_tensor(x)
        if x.shape[1] == 0:
            raise EmptyUtteranceError("s-vector forward on an empty chunk")
        p = c.dropout if training else 0.0
        h = ag.relu(self.ffnn1(x))
        if c.use_pe:
            h = ag.dropout(h + sinusoidal_pe(x.shape[1], c.adim), p, rng, training)
        h = self.encoder(h, training, rng)
        frames = self.norm2(ag.leaky_relu(self.ffnn2(h), c.leaky_slope), training)
        pooled = ag.stats_pool(frames, eps=1e-10, axis=1)
        f3 = self.ffnn3(pooled)
        h = self.norm3(ag.relu(f3), training)
        f4 = self.ffnn4(h)
        h = self.norm4(ag.relu(f4), training)
        logits = self.output(h)
        if return_taps:
            return logits, {"prepool": frames, "pooled": pooled, "F3": f3, "F4": f4}
        return logits


def svector_forward(chunk, model, training=False, rng=None):
    """Logits for one chunk given as a FeatureSequence or a (n_feats, T) array."""
    feats = chunk.features if hasattr(chunk, "features") else np.asarray(chunk)
    if feats.shape[1] == 0:
        raise EmptyUtteranceError("empty chunk")
    return model(feats.T[None], training, rng).data[0]
