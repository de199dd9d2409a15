"""``prag`` command line: one subcommand per pipeline stage.

Configuration is a JSON file.  Any key can be overridden from the
environment as ``PRAG_<SECTION>__<KEY>`` (values parsed as JSON when
possible), and ``--seed``/``--out`` override both.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__

_logger = logging.getLogger("prag")

COMMANDS = ("ingest", "embed", "train", "retrieve", "explain", "evaluate", "agreement", "synth")

DEFAULTS: dict = {
    "seed": 0,
    "out": "prag-out",
    "paths": {},
    "corpus": {"rating_range": [1.0, 5.0], "split": [0.8, 0.1, 0.1]},
    "encoder": {"backend": "toy-hash", "dim": 64, "url": None},
    "train": {},
    "retrieval": {"k": 5, "scope": "item", "marginalize": True, "axis": None, "size": 32,
                  "pairs": None},
    "explain": {},
    "export": {"n_samples": 0},
    "evaluate": {"scorer": "overlap", "url": None, "threshold": 0.5,
                 "premise": "explanation"},
    "agreement": {"k": 5, "scope": "item", "pairs": None},
    "synth": {"n_users": 40, "n_items": 20, "n_topics": 4, "noise": 0.1, "dim": 32},
}


class MissingArtifact(Exception):
    def __init__(self, path, what: str):
        super().__init__(f"missing {what}: {path}")
        self.path, self.what = str(path), what


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(environ=None) -> dict:
    """``PRAG_TRAIN__EPOCHS=10`` -> ``{"train": {"epochs": 10}}``."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key in sorted(environ):
        if not key.startswith("PRAG_") or key in ("PRAG_NUMBA",) or key.endswith("_URL"):
            continue
        parts = [p.lower() for p in key[5:].split("__") if p]
        if not parts:
            continue
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_env_value(environ[key])
    return out


def load_config(path, seed: int | None = None, out: str | None = None, environ=None) -> dict:
    """Resolve the run config with precedence flags > environment > file > defaults."""
    p = Path(path)
    if not p.is_file():
        raise MissingArtifact(p, "config file")
    try:
        data = json.loads(p.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = _merge(DEFAULTS, data)
    cfg = _merge(cfg, env_overrides(environ))
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    base = p.resolve().parent
    cfg["paths"] = {k: str((base / v) if not Path(v).is_absolute() else Path(v))
                    for k, v in cfg["paths"].items() if v is not None}
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


# ------------------------------------------------------------------ artifacts

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _artifact_digests(paths: list[Path]) -> dict:
    out = {}
    for p in paths:
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            out[str(f.relative_to(p.parent))] = _sha256(f)
    return dict(sorted(out.items()))


def write_manifest(command: str, cfg: dict, out_dir: Path, artifacts: list[Path]) -> Path:
    import numba
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "seed": cfg["seed"],
        "versions": {"prag": __version__, "numpy": np.__version__, "numba": numba.__version__,
                     "python": platform.python_version()},
        "artifacts": _artifact_digests(artifacts),
    }
    path = out_dir / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", "utf-8")
    return path


def _locate(cfg: dict, key: str, default_name: str, what: str) -> Path:
    """Path from ``paths.<key>`` or else ``<out>/<default_name>``; must exist."""
    p = Path(cfg["paths"][key]) if key in cfg["paths"] else Path(cfg["out"]) / default_name
    if not p.exists():
        raise MissingArtifact(p, what)
    return p


def _load_corpus(cfg):
    from .corpus import load_corpus
    return load_corpus(_locate(cfg, "corpus", "corpus", "corpus directory"))


def _load_store(cfg):
    from .encoder import EmbeddingStore
    return EmbeddingStore.load(_locate(cfg, "store", "store.bin", "embedding store"))


def _load_model(cfg, store, key="checkpoint", default="model.ckpt"):
    from .retriever.checkpoint import read_checkpoint
    return read_checkpoint(_locate(cfg, key, default, "checkpoint"), store)


def _train_config(cfg, **extra):
    from .retriever.config import TrainConfig
    data = {**cfg["train"], **extra}
    data.setdefault("seed", cfg["seed"])
    return TrainConfig.from_dict(data)


def _pairs(cfg, section, corpus):
    pairs = cfg[section].get("pairs")
    if pairs:
        return [tuple(p) for p in pairs]
    return sorted({(r.user_id, r.item_id) for r in corpus.split_records("test")})


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", "utf-8")
    return path


# ------------------------------------------------------------------ commands

def cmd_synth(cfg, out):
    from .synth import generate_synthetic_fixture
    s = dict(cfg["synth"])
    fx = generate_synthetic_fixture(seed=cfg["seed"], **s)
    fx.save(out)
    return [out / "corpus", out / "store.bin", out / "labels.json"]


def cmd_ingest(cfg, out):
    from .corpus import ingest_jsonl, save_corpus, split_corpus
    src = _locate(cfg, "input", "reviews.jsonl", "input reviews")
    with open(src, encoding="utf-8") as fh:
        corpus = ingest_jsonl(fh, tuple(cfg["corpus"]["rating_range"]))
    ratios = cfg["corpus"].get("split")
    # only corpora without any split labels are split here
    if ratios and all(r.split == "train" for r in corpus.records):
        corpus = split_corpus(corpus, tuple(ratios), cfg["seed"])
    save_corpus(corpus, out / "corpus")
    return [out / "corpus"]


def cmd_embed(cfg, out):
    from .encoder import HTTPEncoder, ToyHashEncoder, embed_corpus
    corpus = _load_corpus(cfg)
    enc = cfg["encoder"]
    if enc["backend"] == "toy-hash":
        backend = ToyHashEncoder(int(enc["dim"]), cfg["seed"])
    elif enc["backend"] == "http":
        backend = HTTPEncoder(int(enc["dim"]), enc.get("name", "http"), enc.get("url"))
    else:
        raise ConfigError(f"unknown encoder backend {enc['backend']!r}")
    store = embed_corpus(corpus, backend)
    store.save(out / "store.bin")
    return [out / "store.bin"]


def cmd_train(cfg, out):
    from .retriever.checkpoint import write_checkpoint
    from .retriever.train import train
    corpus, store = _load_corpus(cfg), _load_store(cfg)
    result = train(corpus, store, _train_config(cfg))
    write_checkpoint(result.model, out / "model.ckpt")
    result.write_history_csv(out / "history.csv")
    return [out / "model.ckpt", out / "history.csv"]


def _marginalize_cfg(section: dict, seed: int):
    from .retrieval import MarginalizeConfig
    return MarginalizeConfig(bool(section.get("marginalize", True)), section.get("axis"),
                             int(section.get("size", 32)), seed)


def cmd_retrieve(cfg, out):
    from .retrieval import retrieve
    from .retriever.model import NoEvidenceError
    corpus, store = _load_corpus(cfg), _load_store(cfg)
    model = _load_model(cfg, store)
    r = cfg["retrieval"]
    results, skipped = [], []
    for u, i in _pairs(cfg, "retrieval", corpus):
        try:
            res = retrieve(model, corpus, store, u, i, int(r["k"]), r["scope"],
                           _marginalize_cfg(r, cfg["seed"]))
        except NoEvidenceError as exc:
            skipped.append({"user": u, "item": i, "reason": str(exc)})
            continue
        results.append(res.to_dict())
    path = _write_json(out / "retrieval.json", {"results": results, "skipped": skipped})
    return [path]


def cmd_explain(cfg, out):
    from .corpus import compute_tfidf_stats
    from .evalkit import write_predictions
    from .explain import ExplainConfig, Explainer, export_finetune_set
    from .retriever.model import NoEvidenceError
    corpus, store = _load_corpus(cfg), _load_store(cfg)
    model = _load_model(cfg, store)
    ecfg = ExplainConfig.from_dict({"seed": cfg["seed"], **cfg["explain"]})
    stats = compute_tfidf_stats(corpus)
    explainer = Explainer(model, corpus, store, stats, ecfg)
    rows, preds = [], []
    for u, i in _pairs(cfg, "retrieval", corpus):
        try:
            ex = explainer(u, i)
        except NoEvidenceError as exc:
            _logger.warning("%s", exc)
            continue
        rows.append({"user": u, "item": i, **ex.to_dict()})
        preds.append((u, i, ex.predicted_rating))
    with open(out / "explanations.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    write_predictions(out / "predictions.csv", preds)
    artifacts = [out / "explanations.jsonl", out / "predictions.csv"]
    n = int(cfg["export"].get("n_samples") or 0)
    if n:
        with open(out / "finetune.jsonl", "w", encoding="utf-8") as fh:
            export_finetune_set(model, corpus, store, stats, n, cfg["seed"], fh, ecfg)
        artifacts.append(out / "finetune.jsonl")
    return artifacts


def cmd_evaluate(cfg, out):
    from .evalkit import (EvalConfig, HTTPNLIScorer, OverlapNLIScorer, evaluate_run,
                          load_explanations, load_predictions)
    corpus = _load_corpus(cfg)
    e = cfg["evaluate"]
    expl = load_explanations(_locate(cfg, "explanations", "explanations.jsonl",
                                     "explanations file"))
    pred_path = Path(cfg["paths"].get("predictions", Path(cfg["out"]) / "predictions.csv"))
    preds = load_predictions(pred_path) if pred_path.exists() else []
    if e["scorer"] == "overlap":
        scorer = OverlapNLIScorer(float(e["threshold"]))
    elif e["scorer"] == "http":
        scorer = HTTPNLIScorer(e.get("url"), float(e["threshold"]))
    elif e["scorer"] is None:
        scorer = None
    else:
        raise ConfigError(f"unknown scorer {e['scorer']!r}")
    report = evaluate_run(expl, preds, corpus, scorer,
                          EvalConfig(float(e["threshold"]), e["premise"]))
    path = out / "eval_report.json"
    path.write_text(report.to_json(), "utf-8")
    return [path]


def cmd_agreement(cfg, out):
    from .retrieval import MarginalizeConfig, agreement_at_k
    from .retriever.checkpoint import write_checkpoint
    from .retriever.train import train
    corpus, store = _load_corpus(cfg), _load_store(cfg)
    a = cfg["agreement"]
    artifacts = []
    if "checkpoint_a" in cfg["paths"] or "checkpoint_b" in cfg["paths"]:
        model_a = _load_model(cfg, store, "checkpoint_a", "model_item.ckpt")
        model_b = _load_model(cfg, store, "checkpoint_b", "model_user.ckpt")
    else:
        model_a = train(corpus, store, _train_config(cfg, tie_axis="item")).model
        model_b = train(corpus, store, _train_config(cfg, tie_axis="user")).model
        write_checkpoint(model_a, out / "model_item.ckpt")
        write_checkpoint(model_b, out / "model_user.ckpt")
        artifacts += [out / "model_item.ckpt", out / "model_user.ckpt"]
    size = int(a.get("size", 32))
    report = agreement_at_k(model_a, model_b, corpus, store, _pairs(cfg, "agreement", corpus),
                            int(a["k"]), cfg["seed"], a["scope"],
                            MarginalizeConfig(True, a.get("axis_a"), size, cfg["seed"]),
                            MarginalizeConfig(True, a.get("axis_b"), size, cfg["seed"]))
    artifacts.append(_write_json(out / "agreement.json", report.to_dict()))
    return artifacts


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prag", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"prag {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra},
                                sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .corpus import CorpusError
    from .retriever.checkpoint import CheckpointError
    try:
        cfg = load_config(args.config, args.seed, args.out)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        artifacts = HANDLERS[args.command](cfg, out)
        manifest = write_manifest(args.command, cfg, out, artifacts)
    except MissingArtifact as exc:
        return _fail(2, "missing_artifact", str(exc), path=exc.path)
    except (ConfigError, CorpusError, CheckpointError, ValueError, TypeError, KeyError) as exc:
        return _fail(3, "validation", f"{type(exc).__name__}: {exc}")
    except Exception as exc:   # noqa: BLE001 - surfaced as a machine-readable error
        _logger.debug("runtime failure", exc_info=True)
        return _fail(1, "runtime", f"{type(exc).__name__}: {exc}")
    print(json.dumps({"command": args.command, "manifest": str(manifest)}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
