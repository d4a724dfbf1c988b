"""Experiment configuration: JSON on disk, dotted-path overrides, validation."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from typing import Any

from .ensemble import KINDS


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/default",
    "corpus": {
        "languages": ["la", "lb", "lc"],
        "overlap": [[1.0, 0.8, 0.3], [0.8, 1.0, 0.3], [0.3, 0.3, 1.0]],
        "inventory": 12,
        "feat_dim": 8,
        "noise_std": 0.3,
        "layout": "dense",
        "duration_range": [2, 4],
        "length_range": [4, 10],
        "train": 800,
        "dev": 100,
        "eval": 100,
        "targets": ["la"],
        "low_resource_fraction": 0.25,
    },
    "model": {"hidden": 32, "embed": 16, "mapping_hidden": 32},
    "training": {
        "alpha": 0.3,
        "gamma": 0.4,
        "beam": 4,
        "lambda": 0.5,
        "lambda_per_language": {},
        "tau": 10.0,
        "epochs": 20,
        "low_resource_epochs": 60,
        "mapping_epochs": 60,
        "lr": 0.5,
        "batch_size": 16,
        "clip": 5.0,
        "rank_weighting": True,
        "cache_soft_labels": False,
    },
    "strategies": ["ta", "fwm", "es", "saw", "ftw", "st"],
    "ftw_weights": {"la": [0.7, 0.3], "lb": [0.7, 0.3], "lc": [0.5, 0.5]},
}


# sections keyed by language, where new keys are allowed
OPEN_SECTIONS = {("training", "lambda_per_language"), ("ftw_weights",)}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("lambda_per_language", "ftw_weights"):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a section")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def parse_value(text: str) -> Any:
    """JSON literal if it parses as one, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override in place."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} is not key=value")
    parts = key.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {'.'.join(parts[: i + 1])!r}")
        node = node[part]
    if not isinstance(node, dict) or (parts[-1] not in node and tuple(parts[:-1]) not in OPEN_SECTIONS):
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = parse_value(raw)


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | tuple[str, ...] = ()) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from e
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(cfg, user)
    for o in overrides:
        apply_override(cfg, o)
    validate(cfg)
    return cfg


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def config_hash(cfg: dict) -> str:
    """Hash of everything except the output location."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _unit(name: str, x, lo: float = 0.0, hi: float = 1.0) -> None:
    if not isinstance(x, (int, float)) or isinstance(x, bool) or not lo <= x <= hi:
        raise ConfigError(f"{name}={x!r} must be a number in [{lo}, {hi}]")


def _count(name: str, x, lo: int = 1) -> None:
    if not isinstance(x, int) or isinstance(x, bool) or x < lo:
        raise ConfigError(f"{name}={x!r} must be an integer >= {lo}")


def validate(cfg: dict) -> None:
    c, m, t = cfg["corpus"], cfg["model"], cfg["training"]
    _count("seed", cfg["seed"], 0)
    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        raise ConfigError("output_dir must be a non-empty string")
    langs = c["languages"]
    if not isinstance(langs, list) or len(langs) < 2 or len(set(langs)) != len(langs):
        raise ConfigError("corpus.languages needs at least two distinct tags")
    for lang in langs:
        if not isinstance(lang, str) or not lang.isascii() or not lang.isalnum():
            raise ConfigError(f"language tag {lang!r} must be short ASCII alphanumerics")
    ov = c["overlap"]
    if not (isinstance(ov, list) and len(ov) == len(langs) and all(isinstance(r, list) and len(r) == len(langs) for r in ov)):
        raise ConfigError("corpus.overlap must be a square matrix over the languages")
    for i in range(len(langs)):
        for j in range(len(langs)):
            _unit(f"corpus.overlap[{i}][{j}]", ov[i][j])
            if ov[i][j] != ov[j][i]:
                raise ConfigError(f"corpus.overlap is not symmetric at ({i}, {j})")
    _count("corpus.inventory", c["inventory"], 2)
    _count("corpus.feat_dim", c["feat_dim"])
    _unit("corpus.noise_std", c["noise_std"], 0.0, float("inf"))
    if c["layout"] not in ("dense", "blocks"):
        raise ConfigError(f"corpus.layout={c['layout']!r} must be dense or blocks")
    for key in ("duration_range", "length_range"):
        r = c[key]
        if not (isinstance(r, list) and len(r) == 2 and all(isinstance(v, int) for v in r) and 1 <= r[0] <= r[1]):
            raise ConfigError(f"corpus.{key}={r!r} must be [lo, hi] with 1 <= lo <= hi")
    for key in ("train", "dev", "eval"):
        _count(f"corpus.{key}", c[key], 2)
    targets = c["targets"]
    if not isinstance(targets, list) or not targets or any(x not in langs for x in targets):
        raise ConfigError(f"corpus.targets={targets!r} must be a non-empty subset of the languages")
    frac = c["low_resource_fraction"]
    _unit("corpus.low_resource_fraction", frac)
    if frac * c["train"] < 2:
        raise ConfigError("corpus.low_resource_fraction leaves fewer than two training utterances")
    for key in ("hidden", "embed", "mapping_hidden"):
        _count(f"model.{key}", m[key])
    for key in ("alpha", "gamma", "lambda"):
        _unit(f"training.{key}", t[key])
    if not isinstance(t["lambda_per_language"], dict):
        raise ConfigError("training.lambda_per_language must be an object")
    for lang, lam in t["lambda_per_language"].items():
        if lang not in langs:
            raise ConfigError(f"training.lambda_per_language names unknown language {lang!r}")
        _unit(f"training.lambda_per_language.{lang}", lam)
    _unit("training.tau", t["tau"], 1e-300, float("inf"))
    for key in ("beam", "epochs", "low_resource_epochs", "mapping_epochs", "batch_size"):
        _count(f"training.{key}", t[key])
    _unit("training.lr", t["lr"], 1e-300, float("inf"))
    _unit("training.clip", t["clip"], 1e-300, float("inf"))
    for key in ("rank_weighting", "cache_soft_labels"):
        if not isinstance(t[key], bool):
            raise ConfigError(f"training.{key} must be true or false")
    strategies = cfg["strategies"]
    if not isinstance(strategies, list) or any(s not in KINDS for s in strategies) or len(set(strategies)) != len(strategies):
        raise ConfigError(f"strategies={strategies!r} must be distinct entries of {list(KINDS)}")
    if "ftw" in strategies:
        for target in targets:
            w = cfg["ftw_weights"].get(target)
            k = len(langs) - 1
            if not (isinstance(w, list) and len(w) == k and all(isinstance(v, (int, float)) and v >= 0 for v in w)):
                raise ConfigError(f"ftw_weights.{target} must list {k} non-negative weights")
            if abs(sum(w) - 1.0) > 1e-9:
                raise ConfigError(f"ftw_weights.{target} sums to {sum(w)}, not 1")


def lambda_for(cfg: dict, language: str) -> float:
    return cfg["training"]["lambda_per_language"].get(language, cfg["training"]["lambda"])


def derive_seed(master: int, stage: str, language: str = "") -> int:
    """Stable per-(stage, language) seed, so adding a language leaves other runs untouched."""
    digest = hashlib.sha256(f"{master}:{stage}:{language}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF
