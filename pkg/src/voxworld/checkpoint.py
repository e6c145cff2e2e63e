"""Checkpoint persistence: a JSON manifest plus one raw float32 payload.

A checkpoint is two files sharing a base path: ``<base>.json`` describing
every tensor (name, shape, dtype, byte offset) together with the training
seed/config, and ``<base>.bin`` holding the concatenated little-endian f32
values in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CorruptHeader, TruncatedPayload

FORMAT_NAME = "voxworld-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(base, arrays: dict, meta: dict | None = None) -> None:
    """Write arrays (sorted by name) and metadata to <base>.json/.bin."""
    base = Path(base)
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f4",
                "offset": len(payload),
            }
        )
        payload += arr.tobytes()
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "meta": meta or {},
        "arrays": entries,
        "payload_bytes": len(payload),
    }
    base.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    base.with_suffix(".bin").write_bytes(bytes(payload))


def load_checkpoint(base) -> tuple[dict, dict]:
    """Read <base>.json/.bin; returns (arrays as float64, meta)."""
    base = Path(base)
    try:
        manifest = json.loads(base.with_suffix(".json").read_text())
    except json.JSONDecodeError as exc:
        raise CorruptHeader(f"{base}.json: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise CorruptHeader(f"{base}.json: not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise CorruptHeader(f"{base}.json: unsupported version")
    raw = base.with_suffix(".bin").read_bytes()
    if len(raw) < manifest["payload_bytes"]:
        raise TruncatedPayload(
            f"{base}.bin: expected {manifest['payload_bytes']} bytes, found {len(raw)}"
        )
    arrays = {}
    for entry in manifest["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return arrays, manifest["meta"]
