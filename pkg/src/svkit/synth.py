"""Synthetic labelled speaker corpus and trial lists.

Two generators share one manifest layout:

* ``mode="features"`` emits 30-dim frame sequences directly,
  ``x_t = mu(speaker) + session_offset + e_t`` with AR(1) frame noise
  ``e_t``.  Row 0 doubles as the energy track for VAD: speech frames sit
  ``speech_level`` above silence frames.  With ``ar_coef=0``,
  ``silence_fraction=0`` and equal utterance lengths the per-utterance means
  follow a two-covariance Gaussian (PLDA) model exactly.
* ``mode="waveform"`` renders 16 kHz audio: a pulse train plus aspiration
  noise through three speaker-dependent resonators, with slowly drifting
  resonances and pauses, to exercise the MFCC front end.

Every speaker and utterance draws from its own RNG stream keyed by
``(seed, kind, index)``, so output does not depend on generation order.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .exceptions import ConfigError, CountError
from .frontend import FeatureSequence, MfccConfig, Waveform, energy_vad, mfcc, write_wav
from .io import format_header, parse_header, read_manifest, write_archive, write_manifest

logger = logging.getLogger(__name__)

SPLITS = ("train", "enroll", "test")
# vowel-like resonance targets (F1, F2, F3) shared by all speakers
_VOWELS = np.array([
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
])
_BANDWIDTHS = np.array([90.0, 120.0, 160.0])
_FORMANT_SPREAD = 0.2


@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 50
    utts_per_speaker: int = 20
    n_eval_speakers: int = 10
    eval_utts_per_speaker: int = 20
    len_min_s: float = 3.0
    len_max_s: float = 8.0
    variance_ratio: float = 8.0
    seed: int = 0
    mode: str = "waveform"
    unseen_eval: bool = True
    n_dims: int = 30
    within_var: float = 1.0
    frame_noise_std: float = 1.0
    ar_coef: float = 0.5
    silence_fraction: float = 0.15
    speech_level: float = 8.0
    sample_rate: int = 16000

    def validate(self):
        if self.n_speakers < 2:
            raise ConfigError("need at least 2 training speakers")
        if not self.variance_ratio > 0:
            raise ConfigError(f"variance_ratio must be positive, got {self.variance_ratio}")
        if self.mode not in ("features", "waveform"):
            raise ConfigError(f"unknown corpus mode {self.mode!r}")
        if not 0 < self.len_min_s <= self.len_max_s:
            raise ConfigError("need 0 < len_min_s <= len_max_s")
        if not -1 < self.ar_coef < 1:
            raise ConfigError("ar_coef must lie in (-1, 1)")
        if self.utts_per_speaker < 1 or self.n_eval_speakers < 0:
            raise ConfigError("utterance and speaker counts must be positive")


@dataclass
class SpeakerProfile:
    """``formants`` is a (n_vowels, 3) table of the speaker's resonance targets."""

    speaker_id: str
    latent: np.ndarray
    mean: np.ndarray
    formants: np.ndarray
    f0: float


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    split: str
    path: str
    index: int


def _profile(config, k):
    rng = np.random.default_rng([config.seed, 0, k])
    latent = rng.normal(size=2 + _VOWELS.size)
    between_std = np.sqrt(config.variance_ratio * config.within_var)
    mean = rng.normal(0.0, between_std, config.n_dims)
    # vocal-tract length scales every resonance; per-vowel idiosyncrasies on top
    tract = np.exp(_FORMANT_SPREAD * latent[0])
    formants = _VOWELS * tract * np.exp(_FORMANT_SPREAD * latent[2:].reshape(_VOWELS.shape))
    f0 = float(130.0 * np.exp(0.25 * latent[1]))
    return SpeakerProfile(f"spk{k:04d}", latent, mean, formants, f0)


class SyntheticCorpus:
    """Manifest plus lazily regenerated utterances."""

    def __init__(self, config, speakers, manifest):
        self.config = config
        self.speakers = speakers
        self.manifest = manifest
        self._by_id = {e.utterance_id: e for e in manifest}

    def entries(self, split=None):
        return [e for e in self.manifest if split is None or e.split == split]

    def speaker_of(self, utterance_id):
        return self._by_id[utterance_id].speaker_id

    def _duration(self, rng):
        c = self.config
        return rng.uniform(c.len_min_s, c.len_max_s)

    def waveform(self, utterance_id):
        c = self.config
        if c.mode != "waveform":
            raise ConfigError("waveforms exist only in waveform mode")
        entry = self._by_id[utterance_id]
        rng = np.random.default_rng([c.seed, 1, entry.index])
        samples = render_waveform(self.speakers[entry.speaker_id], self._duration(rng), c, rng)
        return Waveform(samples, c.sample_rate)

    def features(self, utterance_id, mfcc_config=None):
        """FeatureSequence with a VAD mask (MFCC-derived in waveform mode)."""
        c = self.config
        entry = self._by_id[utterance_id]
        if c.mode == "waveform":
            fs = mfcc(self.waveform(utterance_id), mfcc_config or MfccConfig(sample_rate=c.sample_rate),
                      utterance_id, entry.speaker_id)
        else:
            rng = np.random.default_rng([c.seed, 1, entry.index])
            n_frames = int(round(self._duration(rng) * 100))
            feats = render_features(self.speakers[entry.speaker_id], n_frames, c, rng)
            fs = FeatureSequence(feats, None, utterance_id, entry.speaker_id)
        energy_vad(fs, threshold_offset=default_vad_offset(c.mode))
        return fs

    def utterance_mean(self, utterance_id):
        return self.features(utterance_id).features.mean(axis=1)

    def write(self, out_dir):
        """Write ``manifest.txt``, ``corpus.conf`` and the audio or feature archive."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        records = []
        if self.config.mode == "waveform":
            (out / "wav").mkdir(exist_ok=True)
            for e in self.manifest:
                rel = f"wav/{e.utterance_id}.wav"
                write_wav(out / rel, self.waveform(e.utterance_id))
                records.append((e.utterance_id, e.speaker_id, e.split, rel))
        else:
            arrays = {}
            for e in self.manifest:
                fs = self.features(e.utterance_id)
                arrays[e.utterance_id] = fs.features
                arrays[e.utterance_id + ".vad"] = fs.vad_mask.astype(np.uint8)
                records.append((e.utterance_id, e.speaker_id, e.split, "feats.ark"))
            write_archive(out / "feats", arrays)
        write_manifest(out / "manifest.txt", records)
        (out / "corpus.conf").write_text(format_header(asdict(self.config)))
        return out


def default_vad_offset(mode):
    return -2.0 if mode == "waveform" else 0.0


def build_corpus(config=None, **overrides):
    """Generate a corpus; keyword arguments override CorpusConfig fields."""
    config = CorpusConfig(**{**asdict(config or CorpusConfig()), **overrides})
    config.validate()
    speakers = {}
    manifest = []
    index = 0

    def add(spk, split, n):
        nonlocal index
        for _ in range(n):
            uid = f"{spk.speaker_id}-u{index:05d}"
            manifest.append(ManifestEntry(uid, spk.speaker_id, split, "-", index))
            index += 1

    for k in range(config.n_speakers):
        spk = _profile(config, k)
        speakers[spk.speaker_id] = spk
        add(spk, "train", config.utts_per_speaker)
    if config.unseen_eval:
        eval_speakers = [_profile(config, config.n_speakers + k) for k in range(config.n_eval_speakers)]
    else:
        eval_speakers = [speakers[f"spk{k:04d}"] for k in range(min(config.n_eval_speakers, config.n_speakers))]
    for spk in eval_speakers:
        speakers[spk.speaker_id] = spk
        n_enroll = config.eval_utts_per_speaker // 2
        add(spk, "enroll", n_enroll)
        add(spk, "test", config.eval_utts_per_speaker - n_enroll)
    return SyntheticCorpus(config, speakers, manifest)


def load_corpus(corpus_dir):
    """Rebuild a corpus object from ``corpus.conf`` (files are regenerated lazily)."""
    corpus_dir = Path(corpus_dir)
    fields = parse_header((corpus_dir / "corpus.conf").read_text())
    typed = {}
    for name, default in asdict(CorpusConfig()).items():
        raw = fields[name]
        typed[name] = raw == "True" if isinstance(default, bool) else type(default)(raw)
    corpus = build_corpus(CorpusConfig(**typed))
    if [e.utterance_id for e in corpus.manifest] != [r[0] for r in read_manifest(corpus_dir / "manifest.txt")]:
        raise ConfigError(f"{corpus_dir}: manifest does not match corpus.conf")
    return corpus


def render_features(spk, n_frames, config, rng):
    d = config.n_dims
    session = rng.normal(0.0, np.sqrt(config.within_var), d)
    a = config.ar_coef
    # stationary AR(1): unit-variance start, innovations scaled by sqrt(1 - a^2)
    innovations = rng.normal(0.0, config.frame_noise_std * np.sqrt(1 - a * a), (n_frames, d))
    innovations[0] = rng.normal(0.0, config.frame_noise_std, d)
    noise = lfilter([1.0], [1.0, -a], innovations, axis=0) if a else innovations
    x = spk.mean + session + noise
    if config.silence_fraction > 0:
        x[:, 0] += config.speech_level
        silent = _pause_mask(n_frames, config.silence_fraction, rng)
        x[silent] = rng.normal(0.0, config.frame_noise_std, (int(silent.sum()), d))
        x[silent, 0] -= config.speech_level
    return x.T.copy()


def _pause_mask(n_frames, fraction, rng, mean_block=30):
    """Boolean mask with roughly ``fraction`` of frames in contiguous pauses."""
    mask = np.zeros(n_frames, dtype=bool)
    n_blocks = max(1, int(round(fraction * n_frames / mean_block)))
    for _ in range(n_blocks):
        length = int(rng.integers(mean_block // 2, mean_block * 3 // 2 + 1))
        start = int(rng.integers(0, max(1, n_frames - length)))
        mask[start:start + length] = True
    return mask


def _resonator(freq, bandwidth, sr):
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return [1.0 - r], a


def render_waveform(spk, duration_s, config, rng, segment_s=(0.06, 0.16)):
    """Source-filter rendering that steps through the speaker's vowel states.

    Each segment picks a vowel at random, perturbed by a per-session shift
    (scaled so that between/within log-resonance variance equals
    ``variance_ratio``) and a small per-segment jitter.
    """
    sr = config.sample_rate
    n = int(duration_s * sr)
    within_std = _FORMANT_SPREAD / np.sqrt(config.variance_ratio)
    session = spk.formants * np.exp(rng.normal(0.0, within_std, spk.formants.shape))
    f0 = spk.f0 * np.exp(rng.normal(0.0, 0.3 * within_std))

    # glottal source: pulse train with slight f0 drift plus aspiration noise
    inst_f0 = f0 * np.exp(0.03 * np.cumsum(rng.normal(0, 1, n)) / np.sqrt(sr))
    phase = np.cumsum(inst_f0 / sr)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    source = pulses + 0.05 * rng.normal(size=n)

    out = np.empty(n)
    states = [np.zeros(2) for _ in range(3)]
    start = 0
    while start < n:
        stop = min(n, start + int(rng.uniform(*segment_s) * sr))
        target = session[rng.integers(len(session))] * np.exp(rng.normal(0.0, 0.02, 3))
        seg = source[start:stop]
        for k in range(3):
            b, a = _resonator(min(target[k], 0.45 * sr), _BANDWIDTHS[k], sr)
            seg, states[k] = lfilter(b, a, seg, zi=states[k])
        out[start:stop] = seg
        start = stop

    envelope = np.ones(n)
    if config.silence_fraction > 0:
        pauses = np.repeat(_pause_mask(n // 160 + 1, config.silence_fraction, rng), 160)[:n]
        taper = np.hanning(321)
        envelope = np.convolve(np.where(pauses, 0.01, 1.0), taper / taper.sum(), mode="same")
    out = out * envelope
    out = 0.5 * out / np.max(np.abs(out))
    return out + 1e-4 * rng.normal(size=n)


def build_trials(manifest, n_target, n_nontarget, seed=0):
    """Sample distinct (enroll, test, is_target) pairs from the enroll/test splits."""
    entries = manifest.manifest if isinstance(manifest, SyntheticCorpus) else manifest
    rows = [(e.utterance_id, e.speaker_id, e.split) if isinstance(e, ManifestEntry) else tuple(e[:3])
            for e in entries]
    enroll = [(u, s) for u, s, split in rows if split == "enroll"]
    test = [(u, s) for u, s, split in rows if split == "test"]
    if not enroll or not test:
        raise CountError("trial construction needs non-empty enroll and test splits")
    targets, nontargets = [], []
    for eu, es in enroll:
        for tu, ts in test:
            if eu == tu:
                continue
            (targets if es == ts else nontargets).append((eu, tu))
    if n_target > len(targets) or n_nontarget > len(nontargets):
        raise CountError(
            f"requested {n_target}/{n_nontarget} target/nontarget trials, "
            f"only {len(targets)}/{len(nontargets)} available"
        )
    rng = np.random.default_rng([seed, 2])
    chosen = [(*targets[i], True) for i in sorted(rng.choice(len(targets), n_target, replace=False))]
    chosen += [(*nontargets[i], False) for i in sorted(rng.choice(len(nontargets), n_nontarget, replace=False))]
    order = rng.permutation(len(chosen))
    return [chosen[i] for i in order]

