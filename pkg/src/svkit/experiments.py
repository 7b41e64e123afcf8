"""Pipeline steps shared by the command line and the end-to-end tests."""

import logging
import time
from dataclasses import asdict

import numpy as np

from . import autograd as ag
from .backend import PldaBackend, ensemble_concat
from .exceptions import CountError, MissingInputError
from .metrics import summarize
from .models import SvectorConfig, SvectorNet, TdnnConfig, TdnnNet
from .models.extract import extract_chunk_embeddings
from .synth import build_trials
from .tesa import TesaConfig, TesaNet, build_pair_dataset, tesa_score, train_tesa
from .training import TrainConfig, evaluate_accuracy, make_chunk_sets, train_classifier

log = logging.getLogger(__name__)


def frontend_kwargs(config):
    return asdict(config.frontend)


def set_dtype(config):
    ag.set_default_dtype(np.float32 if config.run.dtype == "float32" else np.float64)


def new_model(arch, config, n_speakers):
    seed = config.run.seed
    if arch == "svector":
        return SvectorNet(SvectorConfig(n_speakers=n_speakers, **asdict(config.svector)), seed=seed)
    if arch == "tdnn":
        t = config.tdnn
        return TdnnNet(TdnnConfig(n_speakers=n_speakers, hidden_dims=t.hidden_dims, emb_dim=t.emb_dim), seed=seed)
    raise CountError(f"unknown architecture {arch!r}")


def train_embedding_model(store, config, arch="svector", log_path=None, checkpoint_dir=None):
    """Train a speaker classifier on the store's training split.

    Returns (model, trainer, held-out accuracy).
    """
    set_dtype(config)
    train_cfg = config.train
    train_set, held_set, speakers = make_chunk_sets(store, train_cfg, **frontend_kwargs(config))
    log.info("%d training chunks, %d held-out chunks, %d speakers", len(train_set), len(held_set), len(speakers))
    model = new_model(arch, config, len(speakers))
    trainer = train_classifier(model, train_set, held_set, train_cfg, log_path=log_path,
                               checkpoint_dir=checkpoint_dir)
    acc = evaluate_accuracy(model, held_set)
    return model, trainer, acc


def extract_store(store, model, chunk_len=300, taps=None, splits=None, frontend=None):
    """Per-chunk embeddings for every utterance: ``{tap: {utt: (n_chunks, dim)}}``."""
    taps = list(taps or [None])
    out = {tap: {} for tap in taps}
    prepare = not getattr(store, "prepared", False)
    for e in store.entries():
        if splits and e.split not in splits:
            continue
        fs = store.features(e.utterance_id)
        for tap in taps:
            out[tap][e.utterance_id] = extract_chunk_embeddings(
                fs, model, tap=tap, chunk_len=chunk_len, prepare=prepare, **(frontend or {}))
    return out


def utterance_means(chunk_embeddings):
    return {u: c.mean(axis=0) for u, c in chunk_embeddings.items()}


def training_labels(store, embeddings):
    rows = [(e.utterance_id, e.speaker_id) for e in store.entries("train") if e.utterance_id in embeddings]
    if not rows:
        raise MissingInputError("no training-split embeddings to fit the back-end on")
    X = np.stack([embeddings[u] for u, _ in rows])
    y = np.array([s for _, s in rows])
    return X, y


def fit_backend(store, embeddings, lda_dim, length_norm=True):
    X, y = training_labels(store, embeddings)
    return PldaBackend(lda_dim=lda_dim or None, length_norm=length_norm).fit(X, y)


def make_trials(store, config):
    """Trial columns ``(enroll_ids, test_ids, is_target)``."""
    t = config.trials
    rows = build_trials(store.entries(), t.n_target, t.n_nontarget, seed=config.run.seed)
    enroll, test, is_target = zip(*rows)
    return list(enroll), list(test), np.array(is_target, dtype=bool)


def score_records(trials, scores):
    enroll, test, is_target = trials
    return [(a, b, float(s), bool(t)) for a, b, s, t in zip(enroll, test, scores, is_target)]


def plda_scores(backend, embeddings, trials):
    enroll, test, _ = trials
    return backend.score_trials(embeddings, enroll, test)


def evaluate(trials, scores):
    return summarize(np.asarray(scores), np.asarray(trials[2]))


def run_plda(store, means, trials, lda_dim, length_norm=True):
    backend = fit_backend(store, means, lda_dim, length_norm)
    scores = plda_scores(backend, means, trials)
    return backend, scores, evaluate(trials, scores)


def run_ensemble(store, svec_means, xvec_means, trials, lda_dim=300, length_norm=True):
    joint = {u: ensemble_concat(svec_means[u], xvec_means[u]) for u in svec_means if u in xvec_means}
    return run_plda(store, joint, trials, lda_dim, length_norm)


def train_tesa_backend(store, chunk_embeddings, config):
    """Fit TESA on pairs from the training split's per-chunk embeddings."""
    set_dtype(config)
    t = config.tesa
    train_utts = {e.utterance_id: e.speaker_id for e in store.entries("train") if e.utterance_id in chunk_embeddings}
    dataset = build_pair_dataset(chunk_embeddings, train_utts, t.cap_per_speaker, seed=config.run.seed)
    emb_dim = next(iter(chunk_embeddings.values())).shape[1]
    model = TesaNet(TesaConfig(emb_dim, t.adim, t.n_layers, t.n_heads, t.encoder_units, t.hidden, t.dropout),
                    seed=config.run.seed)
    train_cfg = TrainConfig(epochs=t.epochs, batch_size=t.batch_size, warmup=t.warmup, lr_factor=t.lr_factor,
                            seed=config.run.seed)
    trainer = train_tesa(model, dataset, train_cfg)
    return model, trainer, dataset


def tesa_trial_scores(model, chunk_embeddings, trials):
    enroll, test, _ = trials
    return tesa_score(model, [(chunk_embeddings[a], chunk_embeddings[b]) for a, b in zip(enroll, test)])


def chunk_length_ablation(store, model, config, trials, lengths=(100, 300, 500)):
    """One row per extraction chunk length: (label, EER%, minDCF 0.01, minDCF 0.001)."""
    rows = []
    for length in lengths:
        emb = extract_store(store, model, chunk_len=length, frontend=frontend_kwargs(config))[None]
        _, _, summary = run_plda(store, utterance_means(emb), trials, config.backend.lda_dim,
                                 config.backend.length_norm)
        rows.append((f"chunk {length}", summary))
    return rows


def tap_ablation(store, model, config, trials, taps=None):
    taps = taps or list(model.taps)
    emb = extract_store(store, model, chunk_len=config.extract.chunk_len, taps=taps,
                        frontend=frontend_kwargs(config))
    rows = []
    for tap in taps:
        _, _, summary = run_plda(store, utterance_means(emb[tap]), trials, config.backend.lda_dim,
                                 config.backend.length_norm)
        rows.append((f"tap {tap}", summary))
    return rows


def format_table(rows, title="Model"):
    width = max([len(title)] + [len(label) for label, _ in rows])
    lines = [f"{title:<{width}} | %EER | DCF(0.01) | DCF(0.001)"]
    for label, s in rows:
        lines.append(f"{label:<{width}} | {100 * s['eer']:.2f} | {s['min_dcf_0.01']:.4f} | {s['min_dcf_0.001']:.4f}")
    return "\n".join(lines) + "\n"


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    def __call__(self):
        return time.perf_counter() - self.start
