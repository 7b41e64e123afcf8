"""Chunked embedding extraction and model checkpoints."""

import ast
from dataclasses import asdict, fields

import numpy as np

from ..exceptions import ConfigError, EmptyUtteranceError, FormatError
from ..frontend import chunk_indices, prepare_features
from ..io import format_header, parse_header
from ..nn import ParameterSet
from .svector import SvectorConfig, SvectorNet
from .tdnn import TdnnConfig, TdnnNet, pad_to_receptive_field

DEFAULT_TAP = {"svector": "F3", "tdnn": "XVEC"}


def _check_tap(model, tap):
    tap = tap or DEFAULT_TAP[model.arch]
    if tap not in model.taps:
        raise ConfigError(f"tap {tap!r} not available for {model.arch}; choose from {model.taps}")
    return tap


def extract_chunk_embeddings(fs, model, tap=None, chunk_len=300, prepare=True, **frontend):
    """Per-chunk affine tap outputs, shape (n_chunks, emb_dim).

    ``prepare`` applies VAD and CMN first; pass False for features that
    already went through :func:`prepare_features`.
    """
    tap = _check_tap(model, tap)
    if prepare:
        fs = prepare_features(fs, **frontend)
    feats = fs.features
    if feats.shape[1] == 0:
        raise EmptyUtteranceError(f"{fs.utterance_id}: empty utterance")
    chunks = chunk_indices(feats.shape[1], chunk_len)
    groups = {}
    for k, (start, length) in enumerate(chunks):
        groups.setdefault(length, []).append((k, start))
    out = np.empty((len(chunks), model.config.emb_dim))
    for length, members in groups.items():
        batch = [feats[:, s:s + length] for _, s in members]
        if model.arch == "tdnn":
            batch = [pad_to_receptive_field(b, model.config) for b in batch]
        x = np.stack([b.T for b in batch])
        _, taps = model(x, training=False, return_taps=True)
        out[[k for k, _ in members]] = taps[tap].data
    return out


def extract_embedding(fs, model, tap=None, chunk_len=300, prepare=True, **frontend):
    """Average of the per-chunk tap outputs (one vector per utterance)."""
    return extract_chunk_embeddings(fs, model, tap, chunk_len, prepare, **frontend).mean(axis=0)


_ARCHS = {"svector": (SvectorConfig, SvectorNet), "tdnn": (TdnnConfig, TdnnNet)}


def config_to_header(config, arch):
    values = {"arch": arch}
    for f in fields(config):
        v = getattr(config, f.name)
        values[f.name] = repr(v) if isinstance(v, tuple) else v
    return values


def config_from_header(header):
    arch = header.get("arch")
    if arch not in _ARCHS:
        raise FormatError(f"unknown architecture {arch!r} in checkpoint header")
    cls = _ARCHS[arch][0]
    kwargs = {}
    defaults = {f.name: f for f in fields(cls)}
    for name, f in defaults.items():
        if name not in header:
            continue
        raw = header[name]
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        if kind == "bool":
            kwargs[name] = raw == "True"
        elif kind == "int":
            kwargs[name] = int(raw)
        elif kind == "float":
            kwargs[name] = float(raw)
        elif kind == "tuple":
            kwargs[name] = ast.literal_eval(raw)
        else:
            kwargs[name] = raw
    return arch, cls(**kwargs)


def build_model(arch, config, seed=0):
    return _ARCHS[arch][1](config, seed)


def save_model(path, model, extra_header=None, extra_arrays=None):
    header = config_to_header(model.config, model.arch)
    header.update(extra_header or {})
    model.parameters().save(path, format_header(header), extra_arrays)


def load_model(path, with_extras=False):
    params, header = ParameterSet.load(path)
    arch, config = config_from_header(header)
    model = build_model(arch, config)
    own = model.parameters()
    extras = {k: v.data for k, v in params.items() if k not in own}
    model.load_parameters({k: v for k, v in params.items() if k in own})
    if with_extras:
        return model, header, extras
    return model
