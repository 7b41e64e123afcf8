"""scikit-learn style wrappers around the speaker classifiers.

Samples are utterances: ``X`` is a sequence of prepared feature matrices
shaped (frames, n_feats), already passed through VAD and mean
normalization.  ``transform`` returns one embedding per utterance (the
mean of its chunk embeddings); ``predict`` returns training-speaker labels.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .exceptions import CountError, DimensionError, StateError
from .frontend import FeatureSequence, training_chunks
from .models import SvectorConfig, SvectorNet, TdnnConfig, TdnnNet, extract_chunk_embeddings
from .models.extract import DEFAULT_TAP
from .models.tdnn import pad_to_receptive_field
from .training import ChunkSet, TrainConfig, train_classifier


class _Embedder(TransformerMixin, ClassifierMixin, BaseEstimator):
    def _train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, min_chunk=self.min_chunk,
                           max_chunk=self.max_chunk, chunks_per_utterance=self.chunks_per_utterance,
                           warmup=self.warmup, lr_factor=self.lr_factor, seed=self.seed)

    def _sequences(self, X):
        seqs = [np.asarray(x, dtype=np.float64) for x in X]
        n_feats = getattr(self, "n_features_in_", None) or (seqs[0].shape[1] if seqs else 0)
        for s in seqs:
            if s.ndim != 2 or s.shape[1] != n_feats:
                raise DimensionError(f"expected (frames, {n_feats}) feature matrices, got {s.shape}")
        return seqs

    def fit(self, X, y):
        seqs = self._sequences(X)
        y = np.asarray(y)
        if len(seqs) != len(y):
            raise DimensionError(f"{len(seqs)} utterances but {len(y)} labels")
        self.classes_, labels = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise CountError("need at least two speakers")
        self.n_features_in_ = seqs[0].shape[1]
        config = self._train_config().validate()
        chunks, chunk_labels = [], []
        for k, (s, label) in enumerate(zip(seqs, labels)):
            rng = np.random.default_rng([self.seed, 11, k])
            pieces = training_chunks(FeatureSequence(s.T), config.min_chunk, config.max_chunk, rng,
                                     n_chunks=config.chunks_per_utterance or None)
            for p in pieces or [FeatureSequence(s.T)]:
                chunks.append(np.ascontiguousarray(p.features.T))
                chunk_labels.append(label)
        self.model_ = self._build(len(self.classes_))
        empty = ChunkSet([], np.zeros(0, dtype=np.int64))
        self.trainer_ = train_classifier(self.model_, ChunkSet(chunks, np.array(chunk_labels)), empty, config)
        return self

    def _check(self):
        if not hasattr(self, "model_"):
            raise StateError(f"{type(self).__name__} is not fitted")
        return self.model_

    def chunk_embeddings(self, X):
        """Per-chunk embeddings, one (n_chunks, emb_dim) array per utterance."""
        model = self._check()
        return [extract_chunk_embeddings(FeatureSequence(s.T), model, self.tap, self.chunk_len, prepare=False)
                for s in self._sequences(X)]

    def transform(self, X):
        return np.stack([c.mean(axis=0) for c in self.chunk_embeddings(X)])

    def predict_log_proba(self, X):
        """Chunk-averaged log-posteriors over the training speakers."""
        model = self._check()
        out = []
        for s in self._sequences(X):
            feats = pad_to_receptive_field(s.T, model.config) if model.arch == "tdnn" else s.T
            logits = model(np.ascontiguousarray(feats.T)[None], training=False).data[0].astype(np.float64)
            out.append(logits - np.logaddexp.reduce(logits))
        return np.stack(out)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_log_proba(X), axis=1)]


class SvectorEmbedder(_Embedder):
    """Transformer-encoder speaker classifier; embeddings from the FFNN-3 affine tap by default."""

    def __init__(self, n_layers=2, adim=64, n_heads=4, encoder_units=256, stats_dim=1500, emb_dim=512,
                 dropout=0.1, epochs=10, batch_size=32, min_chunk=100, max_chunk=200, chunks_per_utterance=4,
                 warmup=300, lr_factor=0.3, chunk_len=300, tap=DEFAULT_TAP["svector"], seed=0):
        self.n_layers = n_layers
        self.adim = adim
        self.n_heads = n_heads
        self.encoder_units = encoder_units
        self.stats_dim = stats_dim
        self.emb_dim = emb_dim
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.min_chunk = min_chunk
        self.max_chunk = max_chunk
        self.chunks_per_utterance = chunks_per_utterance
        self.warmup = warmup
        self.lr_factor = lr_factor
        self.chunk_len = chunk_len
        self.tap = tap
        self.seed = seed

    def _build(self, n_speakers):
        config = SvectorConfig(n_speakers=n_speakers, n_feats=self.n_features_in_, n_layers=self.n_layers,
                               adim=self.adim, n_heads=self.n_heads, encoder_units=self.encoder_units,
                               stats_dim=self.stats_dim, emb_dim=self.emb_dim, dropout=self.dropout)
        return SvectorNet(config, seed=self.seed)


class XvectorEmbedder(_Embedder):
    """TDNN speaker classifier; embeddings from the first post-pooling affine layer."""

    def __init__(self, hidden_dims=(512, 512, 512, 512, 1500), emb_dim=512, epochs=10, batch_size=32,
                 min_chunk=100, max_chunk=200, chunks_per_utterance=4, warmup=300, lr_factor=0.3, chunk_len=300,
                 tap=DEFAULT_TAP["tdnn"], seed=0):
        self.hidden_dims = hidden_dims
        self.emb_dim = emb_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.min_chunk = min_chunk
        self.max_chunk = max_chunk
        self.chunks_per_utterance = chunks_per_utterance
        self.warmup = warmup
        self.lr_factor = lr_factor
        self.chunk_len = chunk_len
        self.tap = tap
        self.seed = seed

    def _build(self, n_speakers):
        config = TdnnConfig(n_speakers=n_speakers, n_feats=self.n_features_in_, hidden_dims=tuple(self.hidden_dims),
                            emb_dim=self.emb_dim)
        return TdnnNet(config, seed=self.seed)
