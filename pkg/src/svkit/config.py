"""Experiment configuration: INI-style sections mapped onto typed dataclasses.

Every section and key must be known; values are parsed by the field type
of the matching dataclass.  :func:`write_config` emits the fully resolved
configuration (defaults included) so each run directory records exactly
what produced it.
"""

import ast
import configparser
import hashlib
import os
from dataclasses import dataclass, field, fields, replace

from .exceptions import ConfigError, MissingInputError
from .synth import CorpusConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    threads: int = 1
    dtype: str = "float32"
    out_dir: str = "runs"


@dataclass(frozen=True)
class FrontendSection:
    cmn_window: int = 300
    vad_offset: float = -2.0
    vad_proportion: float = 0.5
    use_vad: bool = True


@dataclass(frozen=True)
class SvectorSection:
    """Desk-scale defaults (2 layers, Adim 64, 4 heads); the large model is 6/512/8/2048."""

    n_layers: int = 2
    adim: int = 64
    n_heads: int = 4
    encoder_units: int = 256
    stats_dim: int = 1500
    emb_dim: int = 512
    norm_position: str = "post"
    dropout: float = 0.1
    leaky_slope: float = 0.01
    use_pe: bool = True


@dataclass(frozen=True)
class TdnnSection:
    hidden_dims: tuple = (512, 512, 512, 512, 1500)
    emb_dim: int = 512


@dataclass(frozen=True)
class ExtractSection:
    chunk_len: int = 300
    tap: str = ""  # empty picks the architecture default (F3 / XVEC)


@dataclass(frozen=True)
class BackendSection:
    lda_dim: int = 200
    ensemble_lda_dim: int = 300
    length_norm: bool = True


@dataclass(frozen=True)
class TesaSection:
    n_layers: int = 9
    adim: int = 250
    n_heads: int = 5
    encoder_units: int = 1024
    hidden: int = 1000
    dropout: float = 0.1
    epochs: int = 10
    batch_size: int = 64
    warmup: int = 500
    lr_factor: float = 1.0
    cap_per_speaker: int = 2000


@dataclass(frozen=True)
class TrialsSection:
    n_target: int = 1000
    n_nontarget: int = 4000


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    frontend: FrontendSection = field(default_factory=FrontendSection)
    svector: SvectorSection = field(default_factory=SvectorSection)
    tdnn: TdnnSection = field(default_factory=TdnnSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    extract: ExtractSection = field(default_factory=ExtractSection)
    backend: BackendSection = field(default_factory=BackendSection)
    tesa: TesaSection = field(default_factory=TesaSection)
    trials: TrialsSection = field(default_factory=TrialsSection)

    def with_seed(self, seed):
        """Copy with ``seed`` propagated to every seeded section."""
        return replace(
            self,
            run=replace(self.run, seed=seed),
            corpus=replace(self.corpus, seed=seed),
            train=replace(self.train, seed=seed),
        )

    def digest(self):
        return hashlib.sha256(format_config(self).encode("utf-8")).hexdigest()[:16]


def _parse_value(raw, kind, where):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            value = ast.literal_eval(raw)
            return tuple(value) if isinstance(value, (list, tuple)) else (value,)
        return raw.strip()
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from exc


def _format_value(value):
    if isinstance(value, tuple):
        return repr(value)
    return str(value)


def parse_config(text, base=None, source="<config>"):
    """Overlay INI ``text`` on ``base`` (defaults when None)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive field names
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    config = base or ExperimentConfig()
    sections = {f.name: f for f in fields(ExperimentConfig)}
    updates = {}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"{source}: unknown section [{name}]")
        current = getattr(config, name)
        known = {f.name: f for f in fields(current)}
        values = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            values[key] = _parse_value(raw, known[key].type, f"{source} [{name}] {key}")
        updates[name] = replace(current, **values)
    config = replace(config, **updates)
    config.corpus.validate()
    config.train.validate()
    if config.run.dtype not in ("float32", "float64"):
        raise ConfigError(f"run.dtype must be float32 or float64, got {config.run.dtype!r}")
    return config


def load_config(path=None, seed_env="SVKIT_SEED"):
    """Defaults, overlaid by ``path`` when given, then by the ``SVKIT_SEED`` variable."""
    config = ExperimentConfig()
    if path:
        if not os.path.exists(path):
            raise MissingInputError(f"config file not found: {path}")
        with open(path) as fh:
            config = parse_config(fh.read(), config, source=path)
    env = os.environ.get(seed_env)
    if env:
        try:
            config = config.with_seed(int(env))
        except ValueError as exc:
            raise ConfigError(f"{seed_env} must be an integer, got {env!r}") from exc
    return config


def format_config(config):
    lines = []
    for section in fields(config):
        lines.append(f"[{section.name}]")
        obj = getattr(config, section.name)
        lines.extend(f"{f.name} = {_format_value(getattr(obj, f.name))}" for f in fields(obj))
        lines.append("")
    return "\n".join(lines)


def write_config(config, path):
    with open(path, "w") as fh:
        fh.write(format_config(config))
