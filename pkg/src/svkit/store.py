"""Featurized corpora on disk: prepared features plus the utterance manifest."""

from pathlib import Path

import numpy as np

from .exceptions import MissingInputError
from .frontend import FeatureSequence, MfccConfig, energy_vad, mfcc, prepare_features, read_wav
from .io import read_archive, read_container, read_manifest, write_archive, write_manifest
from .synth import ManifestEntry, default_vad_offset


def _require(path):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"missing input: {path}")
    return path


def raw_features(corpus_dir, mode=None):
    """Yield (ManifestEntry, FeatureSequence with VAD mask) from a written corpus directory.

    Waveform corpora are read from their WAV files and featurized here;
    feature-mode corpora carry their frames and VAD masks in ``feats.ark``.
    """
    corpus_dir = Path(corpus_dir)
    rows = read_manifest(_require(corpus_dir / "manifest.txt"))
    archive = None
    for index, (utt, spk, split, rel) in enumerate(rows):
        entry = ManifestEntry(utt, spk, split, rel, index)
        if rel.endswith(".wav"):
            wav = read_wav(_require(corpus_dir / rel))
            fs = mfcc(wav, MfccConfig(sample_rate=wav.sample_rate), utt, spk)
            energy_vad(fs, threshold_offset=default_vad_offset("waveform"))
        else:
            if archive is None:
                archive = read_container(_require(corpus_dir / rel))[1]
            mask = archive.get(utt + ".vad")
            fs = FeatureSequence(archive[utt], None if mask is None else mask.astype(bool), utt, spk)
            if fs.vad_mask is None:
                energy_vad(fs, threshold_offset=default_vad_offset("features"))
        yield entry, fs


def featurize_corpus(corpus_dir, out_dir, **frontend):
    """VAD + CMN every utterance and write ``feats.ark/.idx`` plus ``manifest.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays, records = {}, []
    for entry, fs in raw_features(corpus_dir):
        prepared = prepare_features(fs, **frontend)
        arrays[entry.utterance_id] = prepared.features
        records.append((entry.utterance_id, entry.speaker_id, entry.split, "feats.ark"))
    write_archive(out / "feats", arrays)
    write_manifest(out / "manifest.txt", records)
    return FeatureStore(out)


class FeatureStore:
    """Read access to a featurized directory with the corpus-like interface
    (``entries``/``features``) used by training and extraction."""

    prepared = True

    def __init__(self, feats_dir):
        self.root = Path(feats_dir)
        rows = read_manifest(_require(self.root / "manifest.txt"))
        self.manifest = [ManifestEntry(u, s, sp, p, i) for i, (u, s, sp, p) in enumerate(rows)]
        self._by_id = {e.utterance_id: e for e in self.manifest}
        self._arrays = None

    def entries(self, split=None):
        return [e for e in self.manifest if split is None or e.split == split]

    def speaker_of(self, utterance_id):
        return self._by_id[utterance_id].speaker_id

    def features(self, utterance_id):
        if self._arrays is None:
            _require(self.root / "feats.ark")
            self._arrays = read_archive(self.root / "feats")
        if utterance_id not in self._by_id:
            raise MissingInputError(f"{utterance_id} is not in {self.root}")
        feats = self._arrays[utterance_id]
        spk = self._by_id[utterance_id].speaker_id
        return FeatureSequence(feats, np.ones(feats.shape[1], dtype=bool), utterance_id, spk)
