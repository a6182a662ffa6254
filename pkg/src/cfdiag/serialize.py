"""Canonical structured-text serialization and content hashing.

Documents are JSON with fixed (insertion) key order, shortest round-trip
decimal floats, and a trailing newline, so identical state always produces
identical bytes. Every document carries a format tag and version.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .world import TargetModel, World, WorldConfig

FORMAT_VERSION = 1


def to_jsonable(obj):
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        if np.isfinite(f):
            return f
        # sentinel strings keep documents strict JSON ("inf" for +infinity)
        return "nan" if np.isnan(f) else ("inf" if f > 0 else "-inf")
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [to_jsonable(x) for x in obj.tolist()]
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if obj is None or isinstance(obj, (str, bool)):
        return obj
    raise ConfigError(f"cannot serialize value of type {type(obj).__name__}")


def canonical_bytes(obj) -> bytes:
    return (json.dumps(to_jsonable(obj), ensure_ascii=False, separators=(",", ":")) + "\n").encode(
        "utf-8"
    )


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def document_hash(obj) -> str:
    return sha256_hex(canonical_bytes(obj))


def save_document(path, kind: str, body: dict) -> dict:
    doc = {"format": f"cfdiag/{kind}", "version": FORMAT_VERSION}
    doc.update(body)
    Path(path).write_bytes(canonical_bytes(doc))
    return doc


def load_document(path, kind: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"missing input file: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed document {path}: {e}") from None
    if not isinstance(doc, dict) or doc.get("format") != f"cfdiag/{kind}":
        raise ConfigError(f"{path} is not a cfdiag/{kind} document")
    if doc.get("version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported version {doc.get('version')!r}")
    return doc


# --- world -------------------------------------------------------------------


def world_config_to_dict(config: WorldConfig) -> dict:
    return {
        "style_dim": config.style_dim,
        "embed_dim": config.embed_dim,
        "height": config.height,
        "width": config.width,
        "n_features": config.n_features,
        "text_noise": config.text_noise,
        "seed": config.seed,
        "attributes": list(config.attributes),
    }


def world_config_from_dict(d: dict) -> WorldConfig:
    try:
        return WorldConfig(
            style_dim=int(d["style_dim"]),
            embed_dim=int(d["embed_dim"]),
            height=int(d["height"]),
            width=int(d["width"]),
            n_features=int(d["n_features"]),
            text_noise=float(d["text_noise"]),
            seed=int(d["seed"]),
            attributes=tuple(d["attributes"]),
        )
    except KeyError as e:
        raise ConfigError(f"world config missing field {e}") from None


def world_hash(world: World) -> str:
    # a world is fully determined by its config
    return document_hash(world_config_to_dict(world.config))


def save_world(path, world: World) -> None:
    save_document(path, "world", {"config": world_config_to_dict(world.config)})


def load_world(path) -> World:
    doc = load_document(path, "world")
    return World(world_config_from_dict(doc.get("config", {})))


# --- target models -----------------------------------------------------------


def model_to_dict(model: TargetModel) -> dict:
    return {
        "kind": model.kind,
        "attribute": model.attribute,
        "keypoint_features": (
            list(model.keypoint_features) if model.keypoint_features else None
        ),
        "train_metric": model.train_metric,
        "heldout_metric": model.heldout_metric,
        "w1": model.w1,
        "b1": model.b1,
        "w2": model.w2,
        "b2": model.b2,
    }


def from_sentinel(x) -> float:
    """Inverse of the non-finite float sentinels used by to_jsonable."""
    if isinstance(x, str):
        return float(x)
    return float(x)


def model_from_dict(d: dict) -> TargetModel:
    try:
        return TargetModel(
            kind=str(d["kind"]),
            w1=np.asarray(d["w1"], dtype=np.float64),
            b1=np.asarray(d["b1"], dtype=np.float64),
            w2=np.asarray(d["w2"], dtype=np.float64),
            b2=np.asarray(d["b2"], dtype=np.float64),
            attribute=d.get("attribute"),
            keypoint_features=(
                tuple(d["keypoint_features"]) if d.get("keypoint_features") else None
            ),
            train_metric=from_sentinel(d.get("train_metric", "nan")),
            heldout_metric=from_sentinel(d.get("heldout_metric", "nan")),
        )
    except KeyError as e:
        raise ConfigError(f"model document missing field {e}") from None


def model_hash(model: TargetModel) -> str:
    return document_hash(model_to_dict(model))


def save_model(path, model: TargetModel) -> None:
    save_document(path, "model", {"model": model_to_dict(model)})


def load_model(path) -> TargetModel:
    doc = load_document(path, "model")
    return model_from_dict(doc.get("model", {}))


def prompt_table_hash(world: World) -> str:
    table = world.prompts
    return document_hash(
        {
            "prefix": table.prefix,
            "phrases": {k: table.embeddings[k] for k in sorted(table.embeddings)},
        }
    )
