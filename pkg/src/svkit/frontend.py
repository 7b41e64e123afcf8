"""Waveform to MFCC conversion, energy VAD, cepstral mean normalization and
chunking.

Feature matrices are coefficient-major, ``(n_ceps, T)``.  The default order
of post-processing is: compute the VAD mask on raw frame log-energies, drop
non-speech frames, then apply CMN over the retained frames.  Passing
``order="cmn_first"`` to :func:`prepare_features` normalizes over all frames
before dropping.
"""

import logging
import wave
from dataclasses import dataclass, replace

import numpy as np
from scipy.fft import dct
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigError, EmptyUtteranceError, FormatError, LengthError

logger = logging.getLogger(__name__)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")


@dataclass
class FeatureSequence:
    features: np.ndarray
    vad_mask: np.ndarray = None
    utterance_id: str = ""
    speaker_id: str = ""
    log_energy: np.ndarray = None

    @property
    def n_frames(self):
        return self.features.shape[1]

    def __post_init__(self):
        if self.vad_mask is not None and len(self.vad_mask) != self.features.shape[1]:
            raise LengthError(
                f"VAD mask of length {len(self.vad_mask)} for {self.features.shape[1]} frames"
            )


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    n_mels: int = 30
    n_ceps: int = 30
    preemphasis: float = 0.97
    low_freq: float = 20.0
    high_freq: float = 7600.0
    remove_dc: bool = True

    @property
    def window_length(self):
        return int(round(self.sample_rate * self.frame_length_ms / 1000))

    @property
    def hop_length(self):
        return int(round(self.sample_rate * self.frame_shift_ms / 1000))

    @property
    def n_fft(self):
        return 1 << (self.window_length - 1).bit_length()


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=float) / 1127.0)


def mel_center_frequencies(config):
    high = min(config.high_freq, config.sample_rate / 2)
    points = np.linspace(hz_to_mel(config.low_freq), hz_to_mel(high), config.n_mels + 2)
    return mel_to_hz(points[1:-1])


def mel_filterbank(config):
    """Triangular filters, linear in mel, as an ``(n_fft//2+1, n_mels)`` matrix."""
    high = min(config.high_freq, config.sample_rate / 2)
    edges = np.linspace(hz_to_mel(config.low_freq), hz_to_mel(high), config.n_mels + 2)
    bins = hz_to_mel(np.fft.rfftfreq(config.n_fft, 1.0 / config.sample_rate))
    left, center, right = edges[:-2], edges[1:-1], edges[2:]
    up = (bins[:, None] - left) / (center - left)
    down = (right - bins[:, None]) / (right - center)
    return np.clip(np.minimum(up, down), 0.0, None)


def frame_signal(samples, config):
    n = len(samples)
    win, hop = config.window_length, config.hop_length
    if n < win:
        raise LengthError(f"waveform of {n} samples is shorter than one {win}-sample frame")
    n_frames = 1 + (n - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return samples[idx]


def log_mel_spectrogram(waveform, config=MfccConfig()):
    """Return ``(log_mel (n_mels, T), log_energy (T,))``."""
    if waveform.sample_rate != config.sample_rate:
        raise ConfigError(f"sample rate {waveform.sample_rate} != configured {config.sample_rate}")
    frames = frame_signal(np.asarray(waveform.samples, dtype=np.float64), config)
    if config.remove_dc:
        frames = frames - frames.mean(axis=1, keepdims=True)
    floor = np.finfo(np.float64).eps
    log_energy = np.log(np.maximum((frames * frames).sum(axis=1), floor))
    if config.preemphasis:
        shifted = np.concatenate([frames[:, :1], frames[:, :-1]], axis=1)
        frames = frames - config.preemphasis * shifted
    frames = frames * np.hamming(config.window_length)
    power = np.abs(np.fft.rfft(frames, n=config.n_fft, axis=1)) ** 2
    mel = power @ mel_filterbank(config)
    return np.log(np.maximum(mel, floor)).T, log_energy


def mfcc(waveform, config=MfccConfig(), utterance_id="", speaker_id=""):
    """Pre-emphasis, windowed power spectrum, mel filterbank, log, DCT-II.

    Returns a FeatureSequence with ``n_ceps`` rows and
    ``1 + (N - window) // hop`` frames.
    """
    log_mel, log_energy = log_mel_spectrogram(waveform, config)
    ceps = dct(log_mel, type=2, axis=0, norm="ortho")[: config.n_ceps]
    return FeatureSequence(ceps, None, utterance_id, speaker_id, log_energy)


def energy_vad(fs, threshold_offset=-2.0, proportion=0.5, context=0):
    """Energy-based speech/non-speech decision per frame.

    A frame is voiced when its log-energy exceeds the utterance mean plus
    ``threshold_offset``.  With ``context > 0`` a frame is kept when at least
    ``proportion`` of the frames in the surrounding ``2*context+1`` window
    are voiced.  The mask is stored on ``fs`` and returned.
    """
    energy = fs.log_energy if fs.log_energy is not None else fs.features[0]
    if len(energy) == 0:
        raise EmptyUtteranceError(f"{fs.utterance_id}: no frames")
    voiced = energy > energy.mean() + threshold_offset
    if context > 0:
        counts = np.convolve(voiced.astype(float), np.ones(2 * context + 1), mode="same")
        sizes = np.convolve(np.ones(len(voiced)), np.ones(2 * context + 1), mode="same")
        voiced = counts / sizes >= proportion
    fs.vad_mask = voiced
    return voiced


def sliding_mean(x, window):
    """Centered running mean over the last axis, window truncated at the edges."""
    T = x.shape[-1]
    half_left = window // 2
    half_right = window - 1 - half_left
    csum = np.concatenate([np.zeros(x.shape[:-1] + (1,)), np.cumsum(x, axis=-1)], axis=-1)
    start = np.clip(np.arange(T) - half_left, 0, T)
    stop = np.clip(np.arange(T) + half_right + 1, 0, T)
    return (csum[..., stop] - csum[..., start]) / (stop - start)


def apply_cmn(fs, window=300):
    """Subtract a sliding (``window`` frames) or utterance-level (``"utterance"``) mean."""
    x = fs.features
    if x.shape[1] == 0:
        raise EmptyUtteranceError(f"{fs.utterance_id}: no frames")
    if window == "utterance":
        out = x - x.mean(axis=1, keepdims=True)
    else:
        out = x - sliding_mean(x, int(window))
    return replace(fs, features=out)


def select_frames(fs, mask):
    keep = np.asarray(mask, dtype=bool)
    return FeatureSequence(
        fs.features[:, keep],
        None,
        fs.utterance_id,
        fs.speaker_id,
        None if fs.log_energy is None else fs.log_energy[keep],
    )


def prepare_features(fs, cmn_window=300, vad_offset=-2.0, vad_proportion=0.5, use_vad=True,
                     order="vad_first"):
    """CMN plus non-speech removal, as applied before training and extraction."""
    if order not in ("vad_first", "cmn_first"):
        raise ConfigError(f"unknown order {order!r}")
    if use_vad:
        mask = fs.vad_mask if fs.vad_mask is not None else energy_vad(fs, vad_offset, vad_proportion)
    else:
        mask = np.ones(fs.n_frames, dtype=bool)
    if order == "cmn_first":
        out = select_frames(apply_cmn(fs, cmn_window), mask)
    else:
        out = select_frames(fs, mask)
        if out.n_frames == 0:
            raise EmptyUtteranceError(f"{fs.utterance_id}: no frames left after VAD")
        out = apply_cmn(out, cmn_window)
    if out.n_frames == 0:
        raise EmptyUtteranceError(f"{fs.utterance_id}: no frames left after VAD")
    return out


def chunk_indices(T, chunk_len=300):
    """Non-overlapping ``(start, length)`` chunks covering ``[0, T)``.

    All chunks are ``chunk_len`` long except a trailing remainder.
    """
    if T <= 0:
        raise EmptyUtteranceError("cannot chunk an empty utterance")
    if chunk_len < 1:
        raise ConfigError("chunk_len must be >= 1")
    chunks = [(start, chunk_len) for start in range(0, T - T % chunk_len, chunk_len)]
    if T % chunk_len:
        chunks.append((T - T % chunk_len, T % chunk_len))
    return chunks


def training_chunks(fs, min_len, max_len, rng, n_chunks=None):
    """Random-length, random-start training examples cut from one utterance.

    Lengths are uniform integers in ``[min_len, min(max_len, T)]``.  By
    default ``T // mean_length`` chunks (at least one) are drawn.  Utterances
    shorter than ``min_len`` yield an empty list.
    """
    T = fs.n_frames
    if T < min_len:
        logger.debug("skipping %s: %d frames < min_len %d", fs.utterance_id, T, min_len)
        return []
    hi = min(max_len, T)
    if n_chunks is None:
        n_chunks = max(1, T // ((min_len + max_len) // 2))
    lengths = rng.integers(min_len, hi + 1, size=n_chunks)
    starts = [int(rng.integers(0, T - length + 1)) for length in lengths]
    return [
        FeatureSequence(
            fs.features[:, s:s + n],
            None,
            f"{fs.utterance_id}-{s:06d}-{n:04d}",
            fs.speaker_id,
        )
        for s, n in zip(starts, map(int, lengths))
    ]


# ---------------------------------------------------------------- WAV I/O

def read_wav(path):
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit PCM mono")
        raw = wf.readframes(wf.getnframes())
        rate = wf.getframerate()
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate)


def write_wav(path, waveform):
    pcm = np.clip(np.round(np.asarray(waveform.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(waveform.sample_rate)
        wf.writeframes(pcm.tobytes())


class MfccFeaturizer(BaseEstimator, TransformerMixin):
    """Stateless transformer: waveforms to MFCC FeatureSequences with a VAD mask."""

    def __init__(self, sample_rate=16000, n_ceps=30, n_mels=30, frame_length_ms=25.0,
                 frame_shift_ms=10.0, preemphasis=0.97, vad_offset=-2.0, vad_proportion=0.5):
        self.sample_rate = sample_rate
        self.n_ceps = n_ceps
        self.n_mels = n_mels
        self.frame_length_ms = frame_length_ms
        self.frame_shift_ms = frame_shift_ms
        self.preemphasis = preemphasis
        self.vad_offset = vad_offset
        self.vad_proportion = vad_proportion

    def _config(self):
        return MfccConfig(
            sample_rate=self.sample_rate,
            frame_length_ms=self.frame_length_ms,
            frame_shift_ms=self.frame_shift_ms,
            n_mels=self.n_mels,
            n_ceps=self.n_ceps,
            preemphasis=self.preemphasis,
        )

    def fit(self, X, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X):
        config = getattr(self, "config_", None) or self._config()
        out = []
        for w in X:
            fs = mfcc(w, config)
            energy_vad(fs, self.vad_offset, self.vad_proportion)
            out.append(fs)
        return out
