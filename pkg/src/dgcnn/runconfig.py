"""Layered run configuration: preset or JSON file, then dotted-key overrides.

A resolved configuration is a plain JSON-serializable dict::

    {"task": "classification" | "segmentation",
     "seed": 0, "dtype": "float32", "strict_deterministic": false,
     "data": {"source": "synthetic", "synthetic": {...}}
           | {"source": "manifest", "manifest": "path.json", "points": 1024}
           | {"source": "synthetic-parts", "per_category": 40, "test_per_category": 10, "points": 256},
     "model": {...},   # ClassifierConfig or SegmenterConfig fields
     "train": {...}}   # TrainConfig fields
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

import numpy as np

from .data import Dataset, SynthSpec, load_manifest, synth_part_dataset, synth_splits
from .errors import ParameterError
from .models import ClassifierConfig, DGCNNClassifier, DGCNNSegmenter, SegmenterConfig
from .train import TrainConfig

DESK_MODEL = {
    "k": 10,
    "edgeconv_widths": [32, 32, 64, 64],
    "embed_width": 256,
    "head_widths": [128, 64],
}

PRESETS: dict[str, dict[str, Any]] = {
    # 4-class synthetic benchmark: 400 train / 100 test clouds of 256 points.
    "desk": {
        "task": "classification",
        "seed": 0,
        "dtype": "float32",
        "strict_deterministic": False,
        "data": {"source": "synthetic", "synthetic": SynthSpec().to_dict()},
        "model": {**DESK_MODEL, "num_classes": 4},
        "train": {"epochs": 50, "batch_size": 16, "checkpoint_every": 10},
    },
    # Smooth vs bumpy spheres: separable only through local structure.
    "desk-texture": {
        "task": "classification",
        "seed": 0,
        "dtype": "float32",
        "strict_deterministic": False,
        "data": {"source": "synthetic",
                 "synthetic": {**SynthSpec().to_dict(), "classes": ["smooth_sphere", "bumpy_sphere"],
                               "train_per_class": 200, "test_per_class": 50}},
        "model": {**DESK_MODEL, "num_classes": 2},
        "train": {"epochs": 50, "batch_size": 16, "checkpoint_every": 10},
    },
    "desk-parts": {
        "task": "segmentation",
        "seed": 0,
        "dtype": "float32",
        "strict_deterministic": False,
        "data": {"source": "synthetic-parts", "per_category": 40, "test_per_category": 10, "points": 256},
        "model": {"k": 10, "edgeconv_widths": [32, 32, 32], "embed_width": 128, "head_widths": [64, 64],
                  "num_part_labels": 4, "category_vector_width": 2, "use_spatial_transformer": False},
        "train": {"epochs": 20, "batch_size": 8, "checkpoint_every": 10},
    },
    # Full-size network and recipe; needs a manifest (data.manifest=...).
    "modelnet40": {
        "task": "classification",
        "seed": 0,
        "dtype": "float32",
        "strict_deterministic": False,
        "data": {"source": "manifest", "manifest": None, "points": 1024},
        "model": ClassifierConfig().to_dict(),
        "train": {"epochs": 250, "batch_size": 32, "checkpoint_every": 10},
    },
}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ParameterError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ParameterError(f"override {key!r}: {p!r} is not a section")
        node = node[p]
    node[parts[-1]] = _parse_value(raw)


def load_config(source: str | None, overrides: list[str] = (), seed: int | None = None,
                strict: bool | None = None) -> dict:
    """Resolve a preset name or JSON path plus overrides into a validated config."""
    source = source or "desk"
    if source in PRESETS:
        cfg = copy.deepcopy(PRESETS[source])
    else:
        path = Path(source)
        if not path.is_file():
            raise FileNotFoundError(f"config {source!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(cfg, dict):
            raise ParameterError(f"{path}: top level must be an object")
        base = PRESETS.get(cfg.pop("preset", None) or "", None)
        if base is not None:
            cfg = _merge(copy.deepcopy(base), cfg)
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = seed
    if strict is not None and strict:
        cfg["strict_deterministic"] = True
    validate(cfg)
    # Record every default (self_loop, slopes, epsilons) so snapshots are complete.
    cfg["model"] = model_config(cfg).to_dict()
    cfg["train"] = TrainConfig.from_dict(cfg["train"]).to_dict()
    return json.loads(json.dumps(cfg))


def _merge(base: dict, top: dict) -> dict:
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def validate(cfg: dict) -> None:
    for key in ("task", "seed", "data", "model", "train"):
        if key not in cfg:
            raise ParameterError(f"config lacks {key!r}")
    if cfg["task"] not in ("classification", "segmentation"):
        raise ParameterError(f"unknown task {cfg['task']!r}")
    if cfg.get("dtype", "float32") not in ("float32", "float64"):
        raise ParameterError(f"dtype must be float32 or float64, got {cfg.get('dtype')!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ParameterError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    try:
        model_config(cfg)
        TrainConfig.from_dict(cfg["train"])
    except TypeError as exc:
        raise ParameterError(str(exc)) from None
    src = cfg["data"].get("source")
    if src == "synthetic":
        spec = SynthSpec.from_dict(cfg["data"]["synthetic"])
        if cfg["task"] == "classification" and model_config(cfg).num_classes != len(spec.classes):
            raise ParameterError(f"model.num_classes={model_config(cfg).num_classes} but the data has "
                                 f"{len(spec.classes)} classes")
    elif src == "manifest":
        if not cfg["data"].get("manifest"):
            raise ParameterError("data.manifest must name a manifest file")
    elif src != "synthetic-parts":
        raise ParameterError(f"unknown data source {src!r}")


def model_config(cfg: dict) -> ClassifierConfig | SegmenterConfig:
    if cfg["task"] == "classification":
        return ClassifierConfig.from_dict(cfg["model"])
    return SegmenterConfig.from_dict(cfg["model"])


def stream_seeds(seed: int) -> dict[str, int]:
    """Independent integer seeds for data generation, initialization and training."""
    children = np.random.SeedSequence(seed).spawn(3)
    return {name: int(ss.generate_state(1)[0]) for name, ss in zip(("data", "model", "train"), children)}


def build_datasets(cfg: dict) -> dict[str, Dataset]:
    data = cfg["data"]
    seeds = stream_seeds(cfg["seed"])
    if data["source"] == "synthetic":
        return synth_splits(SynthSpec.from_dict(data["synthetic"]), seeds["data"])
    if data["source"] == "synthetic-parts":
        train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seeds["data"]).spawn(2))
        n = int(data.get("points", 256))
        return {
            "train": synth_part_dataset(int(data["per_category"]), n, train_rng, "train"),
            "test": synth_part_dataset(int(data.get("test_per_category", 10)), n, test_rng, "test"),
        }
    splits = load_manifest(data["manifest"], data.get("points"))
    if "train" not in splits:
        raise ParameterError("manifest has no train split")
    return splits


def build_model(cfg: dict):
    mc = model_config(cfg)
    rng = np.random.default_rng(stream_seeds(cfg["seed"])["model"])
    return DGCNNClassifier(mc, rng) if cfg["task"] == "classification" else DGCNNSegmenter(mc, rng)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])
