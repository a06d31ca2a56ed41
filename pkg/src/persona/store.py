"""Bit-exact model persistence.

Layout, little-endian throughout: magic "PERSMODL", format_version u32,
header_len u32, a canonical JSON header (config, vocabularies, tensor
manifest, provenance), then every tensor as f64 in the header-declared
order. The header fully describes the payload; shapes are never inferred
from byte counts.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import (
    ModelParams,
    config_from_dict,
    config_hash,
    config_to_dict,
    param_order,
)

MODEL_MAGIC = b"PERSMODL"
MODEL_VERSION = 1


class ModelStoreError(ValueError):
    """Malformed model file. `code` names the failed check."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _tensor_list(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    tensors = [(name, params.weights[name]) for name, _ in param_order(params.config)]
    tensors.append(("feature_mean", np.asarray(params.feature_mean, dtype=np.float64)))
    tensors.append(("feature_std", np.asarray(params.feature_std, dtype=np.float64)))
    tensors.append(("age_norm", np.array([params.age_mean, params.age_std])))
    return tensors


def model_to_bytes(params: ModelParams) -> bytes:
    for name, tensor in _tensor_list(params):
        if not np.all(np.isfinite(tensor)):
            raise ModelStoreError("non_finite", f"tensor {name} contains non-finite values")
    tensors = _tensor_list(params)
    header = {
        "config": config_to_dict(params.config),
        "emotion_vocab": list(params.emotion_vocab),
        "gender_vocab": list(params.gender_vocab),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
        "provenance": params.provenance,
        "model_id": params.provenance.get("config_hash", config_hash(params.config)),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for _, t in tensors)
    return MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(header_bytes)) + header_bytes + payload


def model_from_bytes(data: bytes) -> ModelParams:
    if len(data) < len(MODEL_MAGIC) or data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelStoreError(
            "bad_magic", f"bad magic {data[:8]!r}, expected {MODEL_MAGIC!r}"
        )
    if len(data) < len(MODEL_MAGIC) + 8:
        raise ModelStoreError("truncated", "file ends inside the fixed header")
    version, header_len = struct.unpack_from("<II", data, len(MODEL_MAGIC))
    if version != MODEL_VERSION:
        raise ModelStoreError(
            "bad_version",
            f"format version {version} is not supported (this build reads version "
            f"{MODEL_VERSION}); upgrade to a release that understands it",
        )
    header_start = len(MODEL_MAGIC) + 8
    header_bytes = data[header_start : header_start + header_len]
    if len(header_bytes) < header_len:
        raise ModelStoreError("truncated", "file ends inside the JSON header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ModelStoreError("bad_header", f"header is not valid JSON: {err}")

    config = config_from_dict(header["config"])
    manifest = header["tensors"]
    sizes = [int(np.prod(entry["shape"])) if entry["shape"] else 1 for entry in manifest]
    expected = 8 * sum(sizes)
    payload = data[header_start + header_len :]
    if len(payload) < expected:
        raise ModelStoreError(
            "truncated", f"payload holds {len(payload)} bytes, header declares {expected}"
        )
    if len(payload) > expected:
        raise ModelStoreError(
            "size_mismatch", f"payload holds {len(payload)} bytes, header declares {expected}"
        )

    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry, size in zip(manifest, sizes):
        raw = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
        tensors[entry["name"]] = raw.reshape(entry["shape"]).astype(np.float64)
        offset += 8 * size

    expected_names = {name for name, _ in param_order(config)}
    expected_names |= {"feature_mean", "feature_std", "age_norm"}
    if set(tensors) != expected_names:
        raise ModelStoreError(
            "size_mismatch",
            f"tensor manifest does not match the declared architecture: "
            f"missing {sorted(expected_names - set(tensors))}, "
            f"unexpected {sorted(set(tensors) - expected_names)}",
        )

    age_norm = tensors.pop("age_norm")
    return ModelParams(
        config=config,
        weights={name: tensors[name] for name, _ in param_order(config)},
        feature_mean=tensors["feature_mean"],
        feature_std=tensors["feature_std"],
        age_mean=float(age_norm[0]),
        age_std=float(age_norm[1]),
        emotion_vocab=tuple(header["emotion_vocab"]),
        gender_vocab=tuple(header["gender_vocab"]),
        provenance=dict(header["provenance"]),
    )


def save_model(params: ModelParams, path) -> None:
    Path(path).write_bytes(model_to_bytes(params))


def load_model(path) -> ModelParams:
    return model_from_bytes(Path(path).read_bytes())
