"""Declarative experiment configuration and run manifests.

A config is a single JSON document with an explicit schema version. It is
validated before any work happens and unknown keys are rejected outright:
a typo should fail the run, not silently fall back to a default. Manifests
record everything needed to reproduce a run (config hash, seed, package
version, input digests) and hash deterministically -- identical config and
seed give an identical manifest hash.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from . import __version__
from .errors import ConfigError
from .merging import MergeSpec
from .pipeline import FusionConfig
from .toylab import Corpus, ModelShapes, gen_corpus, get_tokenizer, mixed_corpus

SCHEMA_VERSION = 1

DEFAULT_CONFIG: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "output_dir": "runs",
    "corpus": {
        "tasks": ["kv-lookup", "math-mod", "copy-reverse"],
        "n_samples": 300,
        "seed": 1,
    },
    "model": {"context": 8, "embed_dim": 16, "hidden": 64},
    "pivot": {"tokenizer": "char32", "task": "kv-lookup", "init_seed": 11},
    "sources": [
        {"id": "math", "tokenizer": "shufchar24", "task": "math-mod", "init_seed": 12},
        {"id": "reverse", "tokenizer": "bigram40", "task": "copy-reverse", "init_seed": 13},
    ],
    "training": {
        "epochs": 5,
        "early_stop_epoch": 4,
        "batch_size": 32,
        "lr": 3e-3,
        "lr_min": 0.0,
        "weight_decay": 0.0,
        "seed": 0,
        "per_token_average": False,
    },
    "fusion": {"lambda": 0.5, "topk": 10, "use_topk": True, "standardize": True},
    "merge": {
        "method": "average",
        "weights": None,
        "scaling": 1.0,
        "trim_keep_fraction": 0.2,
        "select_fraction": 0.1,
        "drop_rate": 0.9,
        "seed": 0,
    },
    "cache": {"mode": "full", "topk": 0},
}

_BOOL = (bool,)
_INT = (int,)
_NUM = (int, float)
_STR = (str,)

# Schema mirrors DEFAULT_CONFIG: dicts recurse, single-element lists type
# their items, tuples are the allowed leaf types.
_SCHEMA: dict[str, Any] = {
    "schema_version": _INT,
    "seed": _INT,
    "output_dir": _STR,
    "corpus": {"tasks": [_STR], "n_samples": _INT, "seed": _INT},
    "model": {"context": _INT, "embed_dim": _INT, "hidden": _INT},
    "pivot": {"tokenizer": _STR, "task": _STR, "init_seed": _INT},
    "sources": [{"id": _STR, "tokenizer": _STR, "task": _STR, "init_seed": _INT}],
    "training": {
        "epochs": _INT,
        "early_stop_epoch": _INT,
        "batch_size": _INT,
        "lr": _NUM,
        "lr_min": _NUM,
        "weight_decay": _NUM,
        "seed": _INT,
        "per_token_average": _BOOL,
    },
    "fusion": {"lambda": _NUM, "topk": _INT, "use_topk": _BOOL, "standardize": _BOOL},
    "merge": {
        "method": _STR,
        "weights": ([_NUM], type(None)),
        "scaling": _NUM,
        "trim_keep_fraction": _NUM,
        "select_fraction": _NUM,
        "drop_rate": _NUM,
        "seed": _INT,
    },
    "cache": {"mode": _STR, "topk": _INT},
}


def _validate_node(value: Any, schema: Any, path: str) -> None:
    if isinstance(schema, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        unknown = set(value) - set(schema)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        for key, sub in value.items():
            _validate_node(sub, schema[key], f"{path}.{key}")
    elif isinstance(schema, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        for i, item in enumerate(value):
            _validate_node(item, schema[0], f"{path}[{i}]")
    elif isinstance(schema, tuple) and any(isinstance(s, list) for s in schema):
        # union of list-schema and plain types (e.g. weights: list | null)
        if isinstance(value, list):
            inner = next(s for s in schema if isinstance(s, list))
            _validate_node(value, inner, path)
        elif not isinstance(value, tuple(s for s in schema if not isinstance(s, list))):
            raise ConfigError(f"{path}: wrong type {type(value).__name__}")
    else:
        # bool is an int subclass; keep them distinct
        if isinstance(value, bool) and bool not in schema:
            raise ConfigError(f"{path}: wrong type bool")
        if not isinstance(value, schema):
            raise ConfigError(f"{path}: wrong type {type(value).__name__}")


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(doc: dict) -> dict:
    """Validate a raw document and fill in defaults; returns the full doc."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"config schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}"
        )
    _validate_node(doc, _SCHEMA, "config")
    merged = _deep_merge(DEFAULT_CONFIG, doc)
    ids = [s["id"] for s in merged["sources"]]
    if len(set(ids)) != len(ids):
        raise ConfigError("source ids must be unique")
    return merged


def load_config(path: str | Path | None) -> dict:
    """Load and validate a JSON config; None gives the built-in defaults."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return validate_config(doc)


@dataclass(frozen=True)
class Experiment:
    """Validated config plus the object constructors derived from it."""

    doc: dict

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def tasks(self) -> list[str]:
        return list(self.doc["corpus"]["tasks"])

    def corpus_for(self, task: str) -> Corpus:
        c = self.doc["corpus"]
        return gen_corpus(task, int(c["n_samples"]), int(c["seed"]))

    def mixed(self) -> Corpus:
        return mixed_corpus([self.corpus_for(t) for t in self.tasks])

    def shapes_for(self, tokenizer_name: str) -> ModelShapes:
        m = self.doc["model"]
        return ModelShapes(
            vocab=get_tokenizer(tokenizer_name).vocab_size,
            embed_dim=int(m["embed_dim"]),
            context=int(m["context"]),
            hidden=int(m["hidden"]),
        )

    def source_entries(self, ids: list[str] | None = None) -> list[dict]:
        entries = list(self.doc["sources"])
        if ids is None:
            return entries
        by_id = {e["id"]: e for e in entries}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise ConfigError(f"unknown source ids {missing}")
        return [by_id[i] for i in ids]

    def merge_spec(self, method: str | None = None) -> MergeSpec:
        m = self.doc["merge"]
        return MergeSpec(
            method=method or m["method"],
            weights=tuple(m["weights"]) if m["weights"] is not None else None,
            scaling=float(m["scaling"]),
            trim_keep_fraction=float(m["trim_keep_fraction"]),
            select_fraction=float(m["select_fraction"]),
            drop_rate=float(m["drop_rate"]),
            seed=int(m["seed"]),
        )

    def fusion_config(
        self,
        lam: float | None = None,
        topk: int | None = None,
        merge: MergeSpec | None = None,
        use_topk: bool | None = None,
        standardize: bool | None = None,
        source_ids: tuple[str, ...] = (),
    ) -> FusionConfig:
        t = self.doc["training"]
        f = self.doc["fusion"]
        return FusionConfig(
            lam=float(f["lambda"] if lam is None else lam),
            topk=int(f["topk"] if topk is None else topk),
            epochs=int(t["epochs"]),
            early_stop_epoch=int(t["early_stop_epoch"]),
            batch_size=int(t["batch_size"]),
            lr=float(t["lr"]),
            lr_min=float(t["lr_min"]),
            weight_decay=float(t["weight_decay"]),
            seed=int(t["seed"]),
            merge=merge,
            use_topk=bool(f["use_topk"] if use_topk is None else use_topk),
            standardize=bool(f["standardize"] if standardize is None else standardize),
            per_token_average=bool(t["per_token_average"]),
            source_ids=source_ids,
        )


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(
    command: str, doc: dict, seed: int, inputs: dict[str, str | Path]
) -> dict:
    """Deterministic run manifest; the hash covers everything but itself."""
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "seed": seed,
        "package_version": __version__,
        "config_sha256": sha256_hex(canonical_json(doc).encode("utf-8")),
        "inputs": {
            name: {"path": str(path), "sha256": file_sha256(path)}
            for name, path in sorted(inputs.items())
        },
    }
    manifest["manifest_sha256"] = sha256_hex(canonical_json(manifest).encode("utf-8"))
    return manifest


def write_manifest(manifest: dict, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
