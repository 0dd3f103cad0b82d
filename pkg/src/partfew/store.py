"""Persistence: checkpoints, base-pool feature cache, reports, logs.

Checkpoint format (byte-identical round trips at float32):

    magic   8 bytes  b"PFCKPT01"
    hlen    8 bytes  little-endian uint64, header byte length
    header  JSON     {"meta": {...}, "step": int, "config_hash": str,
                      "tensors": [{"name", "shape", "dtype"}, ...]}
    data    raw      tensors in listed order, little-endian, C-contiguous

Feature cache: <prefix>.bin is a flat little-endian float32 array of the
base-pool feature maps, image-major with row-major (H, W, D) per image;
<prefix>.json is the sidecar header. Writes go through temp-then-rename.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod

_MAGIC = b"PFCKPT01"

_DTYPES = {"float32": np.float32, "int64": np.int64}


class StoreError(RuntimeError):
    pass


def run_config_hash(cfg) -> str:
    return config_mod.config_hash(cfg)


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path, encoder, *, step: int = 0, config_hash: str = "") -> str:
    """Serialize encoder parameters and metadata; returns the file path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = encoder.state_dict()
    manifest, blobs = [], []
    for name in sorted(state):
        tensor = state[name].detach().cpu()
        arr = tensor.numpy()
        if arr.dtype == np.float32:
            dtype = "float32"
        elif arr.dtype == np.int64:
            dtype = "int64"
        else:
            arr = arr.astype(np.float32)
            dtype = "float32"
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    header = json.dumps(
        {
            "meta": encoder.metadata(),
            "step": int(step),
            "config_hash": config_hash,
            "tensors": manifest,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    payload = _MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)
    _atomic_write_bytes(path, payload)
    return str(path)


def read_checkpoint_header(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise StoreError(f"not a checkpoint file: {path}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    return json.loads(raw[16 : 16 + hlen])


def load_checkpoint(path):
    """Rebuild the encoder from a checkpoint; returns (encoder, header)."""
    from .encoder import encoder_from_metadata

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != _MAGIC:
        raise StoreError(f"not a checkpoint file: {path}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    offset = 16 + hlen
    state = {}
    for entry in header["tensors"]:
        dt = np.dtype(_DTYPES[entry["dtype"]]).newbyteorder("<")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
        offset += arr.nbytes
        state[entry["name"]] = torch.from_numpy(
            arr.astype(_DTYPES[entry["dtype"]]).reshape(entry["shape"]).copy()
        )
    encoder = encoder_from_metadata(header["meta"])
    encoder.load_state_dict(state)
    encoder.eval()
    return encoder, header


# ---------------------------------------------------------------------------
# feature cache


def save_feature_cache(prefix, maps, image_ids, *, encoder_hash: str, config_hash: str = "") -> str:
    """Write (N, D, H, W) maps as a flat (N, H, W, D) float32 array + sidecar."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    maps = torch.as_tensor(maps).detach().cpu().float()
    n, d, h, w = maps.shape
    flat = np.ascontiguousarray(maps.permute(0, 2, 3, 1).numpy(), dtype="<f4")
    _atomic_write_bytes(prefix.with_suffix(".bin"), flat.tobytes())
    sidecar = {
        "dims": [n, h, w, d],
        "image_ids": [int(i) for i in image_ids],
        "encoder_ckpt_hash": encoder_hash,
        "config_hash": config_hash,
    }
    _atomic_write_bytes(
        prefix.with_suffix(".json"),
        (json.dumps(sidecar, indent=2, sort_keys=True) + "\n").encode(),
    )
    return str(prefix)


def load_feature_cache(prefix, *, expected_encoder_hash=None):
    """Read maps back as (N, D, H, W); verifies sizes and provenance hash."""
    prefix = Path(prefix)
    sidecar_path = prefix.with_suffix(".json")
    bin_path = prefix.with_suffix(".bin")
    if not sidecar_path.is_file() or not bin_path.is_file():
        raise FileNotFoundError(f"feature cache not found at {prefix}")
    sidecar = json.loads(sidecar_path.read_text())
    n, h, w, d = sidecar["dims"]
    raw = np.fromfile(bin_path, dtype="<f4")
    if raw.size != n * h * w * d:
        raise StoreError(
            f"feature cache size mismatch: header says {n * h * w * d}, file has {raw.size}"
        )
    if expected_encoder_hash is not None and sidecar["encoder_ckpt_hash"] != expected_encoder_hash:
        raise StoreError(
            "feature cache was built with a different encoder checkpoint "
            f"({sidecar['encoder_ckpt_hash'][:12]}... != {expected_encoder_hash[:12]}...)"
        )
    maps = torch.from_numpy(raw.astype(np.float32).reshape(n, h, w, d)).permute(0, 3, 1, 2)
    return maps.contiguous(), sidecar


def feature_cache_matches(prefix, encoder_hash: str) -> bool:
    sidecar_path = Path(prefix).with_suffix(".json")
    if not sidecar_path.is_file():
        return False
    try:
        sidecar = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError:
        return False
    return sidecar.get("encoder_ckpt_hash") == encoder_hash


# ---------------------------------------------------------------------------
# logs and reports


def write_jsonl(path, records) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    _atomic_write_bytes(path, payload.encode())
    return str(path)


def write_report(path, report) -> tuple:
    """EvalReport -> JSON (full) and CSV (per-episode accuracies)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    json_path = path if path.suffix == ".json" else path.with_suffix(".json")
    csv_path = json_path.with_suffix(".csv")
    _atomic_write_bytes(
        json_path, (json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n").encode()
    )
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["episode", "accuracy"])
        for i, acc in enumerate(report.accuracies):
            writer.writerow([i, repr(float(acc))])
    return str(json_path), str(csv_path)
