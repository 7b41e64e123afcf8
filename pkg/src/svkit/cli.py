"""``svkit`` command line: synthesis, featurization, training, extraction, scoring, evaluation.

Every subcommand writes its artifact and a ``<artifact>.manifest`` file
recording inputs, config digest, seed and runtime.  Failures exit with
the category code carried by the raised :mod:`svkit.exceptions` class.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import experiments as ex
from .backend import PldaBackend
from .config import load_config, write_config
from .exceptions import MissingInputError, SvkitError
from .io import (
    read_archive,
    read_container,
    read_scores,
    read_trials,
    write_archive,
    write_container,
    write_scores,
    write_trials,
)
from .metrics import det_points, format_summary, summarize
from .models import load_model, save_model
from .store import FeatureStore, featurize_corpus
from .synth import build_corpus
from .tesa import TesaConfig, TesaNet

log = logging.getLogger("svkit")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_run_manifest(target, args, config, inputs, outputs, seconds):
    """``<target>.manifest``: JSON with inputs, outputs (with hashes), config digest, seed, runtime."""
    record = {
        "command": args.command,
        "config_digest": config.digest(),
        "seed": config.run.seed,
        "inputs": [str(p) for p in inputs],
        "outputs": {str(p): _sha256(p) for p in outputs if Path(p).is_file()},
        "runtime_s": round(seconds, 3),
    }
    path = Path(str(target) + ".manifest")
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return path


def _resolved_config(args, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(args.cfg, out_dir / "config.resolved")


def _need(path):
    if not Path(path).exists():
        raise MissingInputError(f"missing input: {path}")
    return path


def _load_chunk_embeddings(stem):
    _need(str(stem) + ".ark")
    return read_archive(stem)


def _means(chunks):
    return ex.utterance_means(chunks)


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    corpus = build_corpus(args.cfg.corpus)
    out = corpus.write(args.out)
    write_trials(out / "trials.txt", zip(*ex.make_trials(corpus, args.cfg)))
    _resolved_config(args, out)
    return out / "manifest.txt", [], [out / "manifest.txt", out / "trials.txt"]


def cmd_featurize(args):
    store = featurize_corpus(_need(args.corpus), args.out, **ex.frontend_kwargs(args.cfg))
    _resolved_config(args, args.out)
    return store.root / "feats", [args.corpus], [store.root / "feats.ark", store.root / "manifest.txt"]


def cmd_train_classifier(args):
    store = FeatureStore(_need(args.feats))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = str(out) + ".log"
    if os.path.exists(log_path):
        os.remove(log_path)
    model, trainer, acc = ex.train_embedding_model(store, args.cfg, args.arch, log_path=log_path,
                                                   checkpoint_dir=args.checkpoint_dir)
    save_model(out, model, extra_header={"heldout_acc": repr(acc), "train_steps": trainer.state.step})
    print(f"held-out chunk accuracy {100 * acc:.2f}%")
    return out, [args.feats], [out, log_path]


def cmd_extract(args):
    store = FeatureStore(_need(args.feats))
    ex.set_dtype(args.cfg)
    model = load_model(_need(args.model))
    chunk_len = args.chunk_len or args.cfg.extract.chunk_len
    tap = args.tap or args.cfg.extract.tap or None
    chunks = ex.extract_store(store, model, chunk_len=chunk_len, taps=[tap])[tap]
    stem = Path(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    write_archive(stem, chunks)
    return stem, [args.feats, args.model], [str(stem) + ".ark", str(stem) + ".idx"]


def cmd_fit_backend(args):
    store = FeatureStore(_need(args.feats))
    means = _means(_load_chunk_embeddings(args.embeddings))
    lda_dim = args.lda_dim if args.lda_dim is not None else args.cfg.backend.lda_dim
    backend = ex.fit_backend(store, means, lda_dim, args.cfg.backend.length_norm)
    backend.save(args.out)
    return args.out, [args.feats, args.embeddings], [args.out]


def _trials(path):
    rows = read_trials(_need(path))
    return tuple(list(col) for col in zip(*rows))


def cmd_score_plda(args):
    backend = PldaBackend.load(_need(args.backend))
    means = _means(_load_chunk_embeddings(args.embeddings))
    trials = _trials(args.trials)
    scores = ex.plda_scores(backend, means, trials)
    write_scores(args.out, ex.score_records(trials, scores))
    return args.out, [args.backend, args.embeddings, args.trials], [args.out]


def cmd_train_tesa(args):
    store = FeatureStore(_need(args.feats))
    chunks = _load_chunk_embeddings(args.embeddings)
    model, trainer, dataset = ex.train_tesa_backend(store, chunks, args.cfg)
    arrays = model.parameters().arrays()
    header = {"arch": "tesa", **{k: v for k, v in vars(model.config).items()}, "pairs": len(dataset)}
    write_container(args.out, arrays, header)
    return args.out, [args.feats, args.embeddings], [args.out]


def _load_tesa(path):
    header, arrays = read_container(_need(path))
    config = TesaConfig(**{k: type(getattr(TesaConfig(), k))(header[k]) for k in vars(TesaConfig())})
    model = TesaNet(config)
    model.load_parameters(arrays)
    return model


def cmd_score_tesa(args):
    ex.set_dtype(args.cfg)
    model = _load_tesa(args.model)
    chunks = _load_chunk_embeddings(args.embeddings)
    trials = _trials(args.trials)
    scores = ex.tesa_trial_scores(model, chunks, trials)
    write_scores(args.out, ex.score_records(trials, scores))
    return args.out, [args.model, args.embeddings, args.trials], [args.out]


def cmd_eval(args):
    rows = read_scores(_need(args.scores))
    summary = summarize(rows)
    print(format_summary(summary))
    return None, [args.scores], []


def cmd_det(args):
    curve = det_points(read_scores(_need(args.scores)))
    Path(args.out).write_text(curve.to_text())
    return args.out, [args.scores], [args.out]


def cmd_ensemble(args):
    store = FeatureStore(_need(args.feats))
    svec = _means(_load_chunk_embeddings(args.svectors))
    xvec = _means(_load_chunk_embeddings(args.xvectors))
    trials = _trials(args.trials)
    rows = []
    for label, means in (("s-vector", svec), ("x-vector", xvec)):
        rows.append((label, ex.run_plda(store, means, trials, args.cfg.backend.lda_dim,
                                        args.cfg.backend.length_norm)[2]))
    _, scores, summary = ex.run_ensemble(store, svec, xvec, trials, args.cfg.backend.ensemble_lda_dim,
                                         args.cfg.backend.length_norm)
    rows.append(("ensemble", summary))
    write_scores(args.out, ex.score_records(trials, scores))
    print(ex.format_table(rows), end="")
    return args.out, [args.feats, args.svectors, args.xvectors, args.trials], [args.out]


def cmd_ablate(args):
    store = FeatureStore(_need(args.feats))
    ex.set_dtype(args.cfg)
    model = load_model(_need(args.model))
    trials = _trials(args.trials)
    if args.kind == "chunk":
        rows = ex.chunk_length_ablation(store, model, args.cfg, trials, tuple(args.lengths))
    else:
        rows = ex.tap_ablation(store, model, args.cfg, trials)
    table = ex.format_table(rows)
    print(table, end="")
    if args.out:
        Path(args.out).write_text(table)
    return args.out, [args.feats, args.model, args.trials], [args.out] if args.out else []


COMMANDS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "train-classifier": cmd_train_classifier,
    "extract": cmd_extract,
    "fit-backend": cmd_fit_backend,
    "score-plda": cmd_score_plda,
    "train-tesa": cmd_train_tesa,
    "score-tesa": cmd_score_tesa,
    "eval": cmd_eval,
    "det": cmd_det,
    "ensemble": cmd_ensemble,
    "ablate": cmd_ablate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="svkit", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI experiment config (unknown keys are rejected)")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic corpus and trial list")
    s.add_argument("--out", required=True)

    s = sub.add_parser("featurize", help="MFCC + VAD + CMN for every utterance")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train-classifier", help="train an s-vector or x-vector speaker classifier")
    s.add_argument("--feats", required=True)
    s.add_argument("--arch", choices=("svector", "tdnn"), default="svector")
    s.add_argument("--out", required=True, help="model checkpoint path")
    s.add_argument("--checkpoint-dir", default=None)

    s = sub.add_parser("extract", help="chunked embedding extraction (per-chunk archive)")
    s.add_argument("--feats", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True, help="archive stem")
    s.add_argument("--chunk-len", type=int, default=None)
    s.add_argument("--tap", default=None, help="F3 or F4 for s-vectors, XVEC for x-vectors")

    s = sub.add_parser("fit-backend", help="fit center/length-norm/LDA/PLDA on training embeddings")
    s.add_argument("--feats", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lda-dim", type=int, default=None)

    s = sub.add_parser("score-plda", help="PLDA log-likelihood ratios for a trial list")
    s.add_argument("--backend", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train-tesa", help="train TESA on same/different pairs of training utterances")
    s.add_argument("--feats", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("score-tesa", help="TESA scores for a trial list")
    s.add_argument("--model", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="print EER%% minDCF(0.01) minDCF(0.001) for a score file")
    s.add_argument("scores")

    s = sub.add_parser("det", help="write DET operating points (fa miss fa_probit miss_probit)")
    s.add_argument("scores")
    s.add_argument("--out", required=True)

    s = sub.add_parser("ensemble", help="s-vector + x-vector concatenation with LDA and PLDA")
    s.add_argument("--feats", required=True)
    s.add_argument("--svectors", required=True)
    s.add_argument("--xvectors", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("ablate", help="chunk-length or tap-position ablation table")
    s.add_argument("kind", choices=("chunk", "tap"))
    s.add_argument("--feats", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--lengths", type=int, nargs="+", default=[100, 300, 500])
    s.add_argument("--out", default=None)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.cfg = load_config(args.config)
        threads = args.threads or args.cfg.run.threads
        with threadpool_limits(limits=threads):
            clock = ex.Stopwatch()
            target, inputs, outputs = COMMANDS[args.command](args)
        if target is not None:
            write_run_manifest(target, args, args.cfg, inputs, outputs, clock())
    except SvkitError as exc:
        print(f"svkit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
