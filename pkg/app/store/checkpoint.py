# app/store/checkpoint.py
"""
Checkpoint format (JSON, UTF-8):

    {
      "format": "mmtoc-checkpoint",
      "version": "1.0",
      "seed": <train seed>,
      "dims": {"image": d_i, "text": d_t, "audio": d_a},
      "model": <ModelConfig>,
      "config": <resolved run config echo>,
      "parameters": {"<name>": {"shape": [...], "values": [row-major floats]}}
    }

Floats are written by json's repr, which round-trips float64 exactly.
Readers accept any 1.x version.
"""
import json
import os
from typing import Dict, Optional, Tuple

import numpy as np

from app.pipeline.model import ModelState, init_model
from app.schemas.config import ModelConfig
from app.tools.rng import Rng

FORMAT = "mmtoc-checkpoint"
VERSION = "1.0"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, model: ModelState, seed: int, config: Optional[dict] = None) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "seed": int(seed),
        "dims": dict(model.dims),
        "model": model.config.model_dump(mode="json"),
        "config": config or {},
        "parameters": {
            name: {"shape": list(p.shape), "values": p.value.reshape(-1).tolist()}
            for name, p in model.named_parameters().items()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_checkpoint(path: str) -> Tuple[ModelState, dict]:
    """Rebuild the model from a checkpoint. Returns (model, metadata without parameters)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: not a checkpoint ({e})") from None
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {doc.get('format')!r}")
    major = str(doc.get("version", "")).split(".")[0]
    if major != VERSION.split(".")[0]:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')!r}")

    model_cfg = ModelConfig.model_validate(doc["model"])
    model = init_model(model_cfg, doc["dims"], Rng(int(doc.get("seed", 0))))
    params = model.named_parameters()
    stored: Dict[str, dict] = doc["parameters"]
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointError(f"{path}: parameter names differ (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        shape = tuple(stored[name]["shape"])
        if shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {shape}, model expects {p.shape}")
        p.value = np.asarray(stored[name]["values"], dtype=np.float64).reshape(shape)
        p.zero_grad()
    meta = {k: v for k, v in doc.items() if k != "parameters"}
    return model, meta


def check_dims(model: ModelState, dims: Dict[str, int], source: str = "dataset") -> None:
    if dict(model.dims) != dict(dims):
        raise CheckpointError(f"checkpoint dims {dict(model.dims)} do not match {source} dims {dict(dims)}")
