"""Multi-head self-attention and the batch-normalized encoder layer."""

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from ..exceptions import ConfigError, DimensionError
from ..nn import BatchNorm, Linear, Module


def sinusoidal_pe(T, d):
    """``PE[pos, 2i] = sin(pos / 10000^(2i/d))``, ``PE[pos, 2i+1] = cos(...)``."""
    if d % 2:
        raise ConfigError(f"sinusoidal position encoding needs an even dimension, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    rates = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((T, d))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)
    return Tensor(pe.astype(ag.get_default_dtype()))


class AttentionHead(Module):
    def __init__(self, adim, d_k, rng):
        limit = np.sqrt(6.0 / (adim + d_k))
        dtype = ag.get_default_dtype()
        self.w_q = Tensor(rng.uniform(-limit, limit, (adim, d_k)).astype(dtype), requires_grad=True)
        self.w_k = Tensor(rng.uniform(-limit, limit, (adim, d_k)).astype(dtype), requires_grad=True)
        self.w_v = Tensor(rng.uniform(-limit, limit, (adim, d_k)).astype(dtype), requires_grad=True)


class MultiHeadSelfAttention(Module):
    """Per-head query/key/value projections, scaled dot-product attention,
    head concatenation and a square output projection.

    The per-head matrices are kept separate in the parameter set and fused
    into one product per forward pass.
    """

    def __init__(self, adim, n_heads, rng):
        if adim % n_heads:
            raise ConfigError(f"Adim {adim} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_k = adim // n_heads
        self.heads = [AttentionHead(adim, self.d_k, rng) for _ in range(n_heads)]
        self.output = Linear(adim, adim, rng)
        self._last_weights = None

    def __call__(self, x, mask=None, keep_weights=False):
        """``x``: (B, T, Adim); ``mask``: (B, T) booleans, True for real frames."""
        B, T, D = x.shape
        if D != self.d_k * self.n_heads:
            raise DimensionError(f"attention expects {self.d_k * self.n_heads} features, got {D}")
        P, dk = self.n_heads, self.d_k

        def project(name):
            w = ag.concat([getattr(h, name) for h in self.heads], axis=1)
            return ag.transpose(ag.reshape(ag.matmul(x, w), (B, T, P, dk)), (0, 2, 1, 3))

        q, k, v = project("w_q"), project("w_k"), project("w_v")
        logits = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
        key_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, None, :]
        weights = ag.softmax_rows(logits, mask=key_mask)
        if keep_weights:
            self._last_weights = weights.data
        heads = ag.matmul(weights, v)
        concat = ag.reshape(ag.transpose(heads, (0, 2, 1, 3)), (B, T, P * dk))
        return self.output(concat)


def multihead_self_attention(u, attention, mask=None):
    """Functional form accepting a (T, Adim) or (B, T, Adim) input."""
    u = ag.as_tensor(u)
    if u.ndim == 2:
        return ag.reshape(attention(ag.reshape(u, (1,) + u.shape), mask), u.shape)
    return attention(u, mask)


class EncoderLayer(Module):
    """Self-attention and position-wise feed-forward sublayers with residuals.

    ``norm_position="post"`` normalizes after each residual addition;
    ``"pre"`` normalizes each sublayer input instead.
    """

    def __init__(self, adim, n_heads, units, rng, norm_position="post", dropout=0.1):
        if norm_position not in ("pre", "post"):
            raise ConfigError(f"norm_position must be 'pre' or 'post', got {norm_position!r}")
        self.attention = MultiHeadSelfAttention(adim, n_heads, rng)
        self.norm1 = BatchNorm(adim)
        self.ffn_in = Linear(adim, units, rng)
        self.ffn_out = Linear(units, adim, rng)
        self.norm2 = BatchNorm(adim)
        self._norm_position = norm_position
        self._dropout = dropout

    def __call__(self, x, training=False, rng=None, mask=None):
        p = self._dropout if training else 0.0
        if self._norm_position == "post":
            h = self.norm1(x + ag.dropout(self.attention(x, mask), p, rng, training), training, mask)
            inner = ag.dropout(ag.relu(self.ffn_in(h)), p, rng, training)
            return self.norm2(h + self.ffn_out(inner), training, mask)
        h = x + ag.dropout(self.attention(self.norm1(x, training, mask), mask), p, rng, training)
        inner = ag.dropout(ag.relu(self.ffn_in(self.norm2(h, training, mask))), p, rng, training)
        return h + self.ffn_out(inner)


def encoder_layer_forward(x, layer, training=False, rng=None, mask=None):
    x = ag.as_tensor(x)
    if x.ndim == 2:
        return ag.reshape(layer(ag.reshape(x, (1,) + x.shape), training, rng, mask), x.shape)
    return layer(x, training, rng, mask)


class Encoder(Module):
    """A stack of encoder layers; pre-norm stacks end with one more batch norm."""

    def __init__(self, n_layers, adim, n_heads, units, rng, norm_position="post", dropout=0.1):
        self.layers = [
            EncoderLayer(adim, n_heads, units, rng, norm_position, dropout) for _ in range(n_layers)
        ]
        self.final_norm = BatchNorm(adim) if norm_position == "pre" else None

    def __call__(self, x, training=False, rng=None, mask=None):
        for layer in self.layers:
            x = layer(x, training, rng, mask)
        if self.final_norm is not None:
            x = self.final_norm(x, training, mask)
        return x

    def attention_weights(self):
        return [layer.attention._last_weights for layer in self.layers]
