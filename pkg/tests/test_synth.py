import filecmp
import math

import numpy as np
import pytest

from svkit.exceptions import ConfigError, CountError
from svkit.io import read_manifest, read_trials, write_trials
from svkit.synth import build_corpus, build_trials, load_corpus

SMALL = dict(n_speakers=6, utts_per_speaker=4, n_eval_speakers=3, eval_utts_per_speaker=6,
             len_min_s=1.0, len_max_s=2.0)


def nearest_mean_accuracy(corpus):
    """Oracle: class means from half of each speaker's utterances, classify the rest."""
    by_spk = {}
    for e in corpus.entries("train"):
        by_spk.setdefault(e.speaker_id, []).append(corpus.utterance_mean(e.utterance_id))
    spks = sorted(by_spk)
    centers = np.array([np.mean(by_spk[s][: len(by_spk[s]) // 2], axis=0) for s in spks])
    correct = total = 0
    for k, s in enumerate(spks):
        for m in by_spk[s][len(by_spk[s]) // 2:]:
            correct += int(np.argmin(((centers - m) ** 2).sum(axis=1)) == k)
            total += 1
    return correct / total, total


@pytest.mark.parametrize("mode", ["features", "waveform"])
def test_same_seed_byte_identical(tmp_path, mode):
    a = build_corpus(mode=mode, seed=3, **SMALL).write(tmp_path / "a")
    b = build_corpus(mode=mode, seed=3, **SMALL).write(tmp_path / "b")
    names = ["manifest.txt", "corpus.conf"] + (["feats.ark", "feats.idx"] if mode == "features" else [])
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors
    if mode == "waveform":
        wavs = sorted(p.name for p in (a / "wav").iterdir())
        _, mismatch, errors = filecmp.cmpfiles(a / "wav", b / "wav", wavs, shallow=False)
        assert not mismatch and not errors


def test_generation_order_independent():
    corpus = build_corpus(mode="features", seed=1, **SMALL)
    ids = [e.utterance_id for e in corpus.manifest]
    forward = {u: corpus.features(u).features for u in ids}
    for u in reversed(ids):
        assert np.array_equal(corpus.features(u).features, forward[u])


def test_variance_ratio_high_is_separable():
    corpus = build_corpus(mode="features", n_speakers=20, utts_per_speaker=10, n_eval_speakers=0,
                          variance_ratio=10.0, len_min_s=1.0, len_max_s=2.0, seed=5)
    acc, _ = nearest_mean_accuracy(corpus)
    assert acc > 0.95


def test_variance_ratio_tiny_is_chance():
    n_spk = 20
    corpus = build_corpus(mode="features", n_speakers=n_spk, utts_per_speaker=40, n_eval_speakers=0,
                          variance_ratio=1e-8, len_min_s=1.0, len_max_s=1.0, seed=5)
    acc, n = nearest_mean_accuracy(corpus)
    p = 1 / n_spk
    assert abs(acc - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_invalid_variance_ratio():
    with pytest.raises(ConfigError):
        build_corpus(variance_ratio=0.0)
    with pytest.raises(ConfigError):
        build_corpus(n_speakers=1)


def test_unseen_eval_speakers_disjoint():
    corpus = build_corpus(mode="features", **SMALL)
    train = {e.speaker_id for e in corpus.entries("train")}
    held = {e.speaker_id for e in corpus.manifest if e.split != "train"}
    assert held and not train & held


def test_seen_eval_mode_reuses_train_speakers():
    corpus = build_corpus(mode="features", unseen_eval=False, **SMALL)
    held = {e.speaker_id for e in corpus.manifest if e.split != "train"}
    assert held <= {e.speaker_id for e in corpus.entries("train")}


def test_vad_drops_pauses_in_both_modes():
    for mode in ("features", "waveform"):
        corpus = build_corpus(mode=mode, **SMALL)
        fs = corpus.features(corpus.manifest[0].utterance_id)
        assert 0.6 < fs.vad_mask.mean() < 0.97


def test_plda_consistent_mode_frame_means():
    corpus = build_corpus(mode="features", ar_coef=0.0, silence_fraction=0.0, frame_noise_std=0.0,
                          **SMALL)
    e = corpus.manifest[0]
    x = corpus.features(e.utterance_id).features
    # without frame noise every frame equals speaker mean + session offset
    np.testing.assert_allclose(x, np.repeat(x[:, :1], x.shape[1], axis=1), atol=1e-12)


def test_trials_counts_and_labels():
    corpus = build_corpus(mode="features", n_speakers=4, utts_per_speaker=2, n_eval_speakers=10,
                          eval_utts_per_speaker=10, len_min_s=1.0, len_max_s=1.0)
    trials = build_trials(corpus, 100, 100, seed=1)
    assert len(trials) == 200
    assert len(set((e, t) for e, t, _ in trials)) == 200
    assert sum(lab for *_, lab in trials) == 100
    assert all(e != t for e, t, _ in trials)
    for e, t, target in trials:
        assert (corpus.speaker_of(e) == corpus.speaker_of(t)) == target
    assert trials == build_trials(corpus, 100, 100, seed=1)


def test_trials_count_error():
    corpus = build_corpus(mode="features", **SMALL)
    with pytest.raises(CountError):
        build_trials(corpus, 10_000, 1, seed=0)


def test_manifest_and_trial_files(tmp_path):
    corpus = build_corpus(mode="features", **SMALL)
    out = corpus.write(tmp_path / "c")
    rows = read_manifest(out / "manifest.txt")
    assert len(rows) == len(corpus.manifest)
    assert {r[2] for r in rows} == {"train", "enroll", "test"}
    trials = build_trials(rows, 5, 5)
    write_trials(tmp_path / "trials.txt", trials)
    assert read_trials(tmp_path / "trials.txt") == trials
    assert load_corpus(out).config == corpus.config
