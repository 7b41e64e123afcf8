from dataclasses import replace
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svkit.exceptions import CountError, DimensionError, EmptyUtteranceError, StateError
from svkit.tesa import (
    CLS,
    DIFFERENT,
    SAME,
    SEP,
    SVEC,
    PairDataset,
    TesaConfig,
    TesaNet,
    TesaVerifier,
    assemble_pair_input,
    build_pair_dataset,
    pair_layout,
    read_pairs,
    scores_from_logits,
    tesa_forward,
    tesa_score,
    train_tesa,
    write_pairs,
)
from svkit.training import TrainConfig

SMALL = TesaConfig(emb_dim=6, adim=8, n_layers=1, n_heads=2, encoder_units=16, hidden=12, dropout=0.0)


def warmed_model(rng, config=SMALL, seed=0):
    """A model whose batch-norm layers have seen one training batch."""
    model = TesaNet(config, seed=seed)
    pairs = [(rng.normal(size=(2, config.emb_dim)), rng.normal(size=(3, config.emb_dim))) for _ in range(4)]
    model(pairs, training=True, rng=rng)
    return model


def speaker_data(rng, n_speakers, utts, dim=6, spread=3.0):
    means = rng.normal(0, spread, (n_speakers, dim))
    embeddings, labels = {}, {}
    for s in range(n_speakers):
        for u in range(utts[s] if isinstance(utts, (list, tuple)) else utts):
            name = f"s{s}u{u}"
            embeddings[name] = means[s] + rng.normal(size=(int(rng.integers(1, 4)), dim))
            labels[name] = f"spk{s}"
    return embeddings, labels


# ---------------------------------------------------------------- layout

@given(st.integers(1, 30), st.integers(1, 30))
def test_layout_length_and_segments(L, M):
    kinds, segments = pair_layout(L, M)
    assert len(kinds) == len(segments) == L + M + 3
    assert kinds[0] == CLS and segments[0] == 0
    assert kinds[L + 1] == SEP and kinds[-1] == SEP
    assert np.sum(kinds == SVEC) == L + M
    assert segments.tolist() == [0] + [1] * (L + 1) + [2] * (M + 1)


def test_layout_rejects_empty_side():
    with pytest.raises(EmptyUtteranceError):
        pair_layout(0, 3)


def test_assembled_tokens(rng):
    model = TesaNet(SMALL)
    s1, s2 = rng.normal(size=(2, 6)), rng.normal(size=(3, 6))
    p = assemble_pair_input(s1, s2, model)
    assert p.K == 8 and p.tokens.shape == (8, 6)
    t = p.tokens.data
    u = model.utterance_embedding.data
    np.testing.assert_allclose(t[0], model.cls_token.data)
    np.testing.assert_allclose(t[1:3], s1 + u[0])
    np.testing.assert_allclose(t[3], model.sep_token.data + u[0])
    np.testing.assert_allclose(t[4:7], s2 + u[1])
    np.testing.assert_allclose(t[7], model.sep_token.data + u[1])
    with pytest.raises(DimensionError):
        assemble_pair_input(rng.normal(size=(2, 5)), s2, model)


# --------------------------------------------------------------- forward

def test_eval_before_training_is_refused(rng):
    with pytest.raises(StateError):
        tesa_forward(rng.normal(size=(2, 6)), rng.normal(size=(2, 6)), TesaNet(SMALL))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_chunk_order_within_an_utterance_is_irrelevant(seed):
    rng = np.random.default_rng(seed)
    model = warmed_model(rng)
    s1, s2 = rng.normal(size=(5, 6)), rng.normal(size=(4, 6))
    base = tesa_forward(s1, s2, model)
    perm1, perm2 = rng.permutation(5), rng.permutation(4)
    np.testing.assert_allclose(tesa_forward(s1[perm1], s2[perm2], model), base, atol=1e-6)


def test_padding_does_not_leak(rng):
    model = warmed_model(rng)
    pairs = [(rng.normal(size=(int(rng.integers(1, 6)), 6)), rng.normal(size=(int(rng.integers(1, 6)), 6)))
             for _ in range(7)]
    batched = tesa_score(model, pairs, batch_size=7)
    singles = [tesa_score(model, p) for p in pairs]
    np.testing.assert_allclose(batched, singles, atol=1e-10)


def test_score_is_logit_difference(rng):
    model = warmed_model(rng)
    s1, s2 = rng.normal(size=(2, 6)), rng.normal(size=(1, 6))
    logits = tesa_forward(s1, s2, model)
    assert tesa_score(model, (s1, s2)) == pytest.approx(logits[SAME] - logits[DIFFERENT], abs=0)
    assert scores_from_logits(np.array([[1.0, 3.0], [2.0, -1.0]])).tolist() == [2.0, -3.0]


def test_single_vector_utterances_are_accepted(rng):
    model = warmed_model(rng)
    v1, v2 = rng.normal(size=6), rng.normal(size=6)
    assert tesa_score(model, (v1, v2)) == pytest.approx(tesa_score(model, (v1[None], v2[None])))


# ----------------------------------------------------------------- pairs

def test_pair_builder_counts_and_balance(rng):
    embeddings, labels = speaker_data(rng, 3, [5, 3, 2])
    data = build_pair_dataset(embeddings, labels, cap_per_speaker=2000, seed=4)
    for s, n in zip(("spk0", "spk1", "spk2"), (5, 3, 2)):
        same = [p for p in data.pairs if p[2] == SAME and labels[p[0]] == s]
        diff = [p for p in data.pairs if p[2] == DIFFERENT and labels[p[0]] == s]
        assert len(same) == comb(n, 2) == len(diff)
        assert all(labels[b] == s for _, b, _ in same)
        assert all(labels[b] != s for _, b, _ in diff)
    assert sorted({(a, b) for a, b, l in data.pairs if l == SAME}) == sorted(
        (a, b) for a, b, l in data.pairs if l == SAME)
    assert np.sum(data.labels == SAME) == np.sum(data.labels == DIFFERENT)
    again = build_pair_dataset(embeddings, labels, cap_per_speaker=2000, seed=4)
    assert again.pairs == data.pairs


def test_pair_builder_cap(rng):
    embeddings, labels = speaker_data(rng, 3, 6)
    data = build_pair_dataset(embeddings, labels, cap_per_speaker=4, seed=0)
    assert len(data) == 3 * 2 * 4
    for s in ("spk0", "spk1", "spk2"):
        assert sum(1 for a, _, l in data.pairs if labels[a] == s and l == SAME) == 4


def test_pair_builder_errors(rng):
    embeddings, labels = speaker_data(rng, 1, 3)
    with pytest.raises(CountError):
        build_pair_dataset(embeddings, labels)
    embeddings, labels = speaker_data(rng, 2, 2)
    labels["ghost"] = "spk0"
    with pytest.raises(CountError):
        build_pair_dataset(embeddings, labels)


def test_pairs_file_round_trip(tmp_path):
    pairs = [("a", "b", SAME), ("c", "d", DIFFERENT)]
    write_pairs(tmp_path / "p.txt", pairs)
    assert (tmp_path / "p.txt").read_text() == "a b same\nc d different\n"
    assert read_pairs(tmp_path / "p.txt") == pairs


# -------------------------------------------------------------- training

def test_overfits_five_hundred_pairs(rng):
    embeddings, labels = speaker_data(rng, 10, 12, spread=2.0)
    data = build_pair_dataset(embeddings, labels, cap_per_speaker=25, seed=1)
    assert len(data) == 500
    model = TesaNet(replace(SMALL, adim=16, encoder_units=32, hidden=32))
    config = TrainConfig(epochs=200, batch_size=50, warmup=100, lr_factor=1.0, max_steps=2000)
    trainer = train_tesa(model, data, config)
    losses = [row[2] for row in trainer.state.history]
    assert trainer.state.step <= 2000
    assert min(losses) < 0.1, losses[-5:]
    scores = tesa_score(model, data.inputs())
    assert np.mean((scores > 0) == (data.labels == SAME)) > 0.97


def test_verifier_estimator(rng, tmp_path):
    embeddings, labels = speaker_data(rng, 4, 4)
    data = build_pair_dataset(embeddings, labels, seed=2)
    X, y = data.inputs(), data.labels
    est = TesaVerifier(n_layers=1, adim=8, n_heads=2, encoder_units=16, hidden=12, epochs=3, batch_size=8,
                       warmup=5)
    with pytest.raises(StateError):
        est.decision_function(X)
    est.fit(X, y)
    proba = est.predict_proba(X)
    assert proba.shape == (len(X), 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    np.testing.assert_array_equal(est.predict(X), (est.decision_function(X) > 0).astype(int))
    assert 0.0 <= est.score(X, y) <= 1.0
    with pytest.raises(DimensionError):
        TesaVerifier().fit(X, y[:-1])


def test_dataset_inputs_follow_pairs(rng):
    embeddings, labels = speaker_data(rng, 2, 3)
    data = PairDataset([("s0u0", "s1u2", DIFFERENT)], embeddings)
    (a, b), = data.inputs()
    assert a is embeddings["s0u0"] and b is embeddings["s1u2"]
