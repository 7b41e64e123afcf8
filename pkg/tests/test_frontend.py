import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svkit.exceptions import EmptyUtteranceError, LengthError
from svkit.frontend import (
    FeatureSequence,
    MfccConfig,
    MfccFeaturizer,
    Waveform,
    apply_cmn,
    chunk_indices,
    energy_vad,
    log_mel_spectrogram,
    mfcc,
    prepare_features,
    read_wav,
    training_chunks,
    write_wav,
)


def noise(n=16000, seed=0, scale=0.1):
    return Waveform(np.random.default_rng(seed).normal(0, scale, n), 16000)


def test_mfcc_shape_and_frame_count():
    for n in (400, 401, 560, 16000, 12345):
        fs = mfcc(noise(n))
        assert fs.features.shape == (30, 1 + (n - 400) // 160)


def test_mfcc_too_short():
    with pytest.raises(LengthError):
        mfcc(noise(399))


def test_mfcc_deterministic():
    a = mfcc(noise()).features
    b = mfcc(noise()).features
    assert a.tobytes() == b.tobytes()


def test_pure_tone_peaks_at_nearest_mel_center():
    sr = 16000
    t = np.arange(sr) / sr
    log_mel, _ = log_mel_spectrogram(Waveform(0.5 * np.sin(2 * math.pi * 440 * t), sr))
    # independent mel centers: 30 filters between 20 Hz and 7600 Hz on 1127*ln(1+f/700)
    mel = lambda f: 1127 * math.log(1 + f / 700)
    inv = lambda m: 700 * (math.exp(m / 1127) - 1)
    lo, hi = mel(20), mel(7600)
    centers = [inv(lo + (hi - lo) * (k + 1) / 31) for k in range(30)]
    nearest = min(range(30), key=lambda k: abs(centers[k] - 440))
    assert int(np.argmax(log_mel.mean(axis=1))) == nearest


def test_amplitude_doubling_shifts_only_c0():
    w = noise()
    a = mfcc(w).features
    b = mfcc(Waveform(2 * w.samples, w.sample_rate)).features
    shift = b[0] - a[0]
    assert np.all(shift > 0)
    np.testing.assert_allclose(shift, shift[0], atol=1e-8)
    np.testing.assert_allclose(b[1:], a[1:], atol=1e-8)


def _energy_seq(energy):
    energy = np.asarray(energy, dtype=float)
    return FeatureSequence(np.zeros((30, len(energy))), log_energy=energy)


def test_vad_uniform_energy_all_kept():
    assert energy_vad(_energy_seq(np.full(20, 3.0)), threshold_offset=-1.0).all()


def test_vad_keeps_exactly_loud_frames():
    energy = np.concatenate([np.full(50, -20.0), np.full(50, 5.0)])
    energy[:50] += np.linspace(0, 0.5, 50)
    mask = energy_vad(_energy_seq(energy), threshold_offset=0.0)
    np.testing.assert_array_equal(mask, np.arange(100) >= 50)


def test_vad_infinite_offset_empties_utterance():
    fs = _energy_seq(np.arange(10.0))
    assert not energy_vad(fs, threshold_offset=math.inf).any()
    with pytest.raises(EmptyUtteranceError):
        prepare_features(fs)


def test_vad_falls_back_to_c0():
    feats = np.zeros((30, 4))
    feats[0] = [0.0, 10.0, 0.0, 10.0]
    assert energy_vad(FeatureSequence(feats), threshold_offset=0.0).tolist() == [False, True, False, True]


def test_cmn_utterance_mode(rng):
    out = apply_cmn(FeatureSequence(rng.normal(5, 1, (30, 40))), "utterance").features
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-10)


def test_cmn_constant_sequence():
    out = apply_cmn(FeatureSequence(np.full((3, 500), 7.0)), 300).features
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_cmn_sliding_window_hand_case():
    out = apply_cmn(FeatureSequence(np.array([[1.0, 2.0, 3.0, 4.0]])), 3).features
    np.testing.assert_allclose(out[0], [-0.5, 0.0, 0.0, 0.5], atol=1e-12)


def test_prepare_features_order_flag(rng):
    energy = np.concatenate([np.full(10, -10.0), np.full(30, 0.0)])
    feats = rng.normal(size=(30, 40))
    fs = FeatureSequence(feats, log_energy=energy)
    vad_first = prepare_features(fs, cmn_window="utterance")
    assert vad_first.n_frames == 30
    np.testing.assert_allclose(vad_first.features.mean(axis=1), 0.0, atol=1e-10)
    cmn_first = prepare_features(FeatureSequence(feats, log_energy=energy),
                                 cmn_window="utterance", order="cmn_first")
    assert cmn_first.n_frames == 30
    assert not np.allclose(cmn_first.features, vad_first.features)


def test_chunk_indices_examples():
    assert chunk_indices(750, 300) == [(0, 300), (300, 300), (600, 150)]
    assert chunk_indices(300, 300) == [(0, 300)]
    assert chunk_indices(299, 300) == [(0, 299)]
    with pytest.raises(EmptyUtteranceError):
        chunk_indices(0, 300)


@given(st.integers(1, 5000), st.integers(1, 700))
def test_chunk_indices_cover_exactly(T, n):
    chunks = chunk_indices(T, n)
    assert sum(length for _, length in chunks) == T
    pos = 0
    for start, length in chunks:
        assert start == pos
        pos += length
    assert all(length == n for _, length in chunks[:-1])
    assert 1 <= chunks[-1][1] <= n


def test_training_chunks_deterministic_and_in_range():
    fs = FeatureSequence(np.random.default_rng(0).normal(size=(30, 900)), utterance_id="u")
    a = training_chunks(fs, 100, 300, np.random.default_rng(7))
    b = training_chunks(fs, 100, 300, np.random.default_rng(7))
    assert [c.utterance_id for c in a] == [c.utterance_id for c in b]
    assert all(100 <= c.n_frames <= 300 for c in a)
    assert training_chunks(FeatureSequence(np.zeros((30, 50))), 100, 300, np.random.default_rng(0)) == []


def test_training_chunk_mean_length():
    fs = FeatureSequence(np.zeros((1, 1000)))
    lengths = np.array([c.n_frames for c in training_chunks(fs, 100, 300, np.random.default_rng(3), n_chunks=100_000)])
    sigma = math.sqrt(((201 ** 2 - 1) / 12) / lengths.size)
    assert abs(lengths.mean() - 200) <= 3 * sigma


def test_wav_round_trip(tmp_path):
    w = noise(4000)
    write_wav(tmp_path / "a.wav", w)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    np.testing.assert_allclose(back.samples, w.samples, atol=1 / 32768)


def test_featurizer_estimator():
    feats = MfccFeaturizer().fit([noise()]).transform([noise(), noise(8000, seed=2)])
    assert [f.features.shape[0] for f in feats] == [30, 30]
    assert all(f.vad_mask is not None for f in feats)
    assert MfccFeaturizer(n_ceps=20).get_params()["n_ceps"] == 20


def test_mfcc_config_defaults():
    c = MfccConfig()
    assert (c.window_length, c.hop_length, c.n_ceps) == (400, 160, 30)
