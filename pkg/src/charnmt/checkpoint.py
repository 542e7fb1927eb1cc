"""Checkpoint container: UTF-8 manifest plus raw float32 payloads.

Layout: one header line ``CHARNMT-CKPT <version> <manifest-bytes>``, the
JSON manifest (parameter names, shapes, byte offsets into the payload,
plus config snapshot, rng state, and scheduler/optimizer scalars), a
newline, then the concatenated little-endian float32 arrays. Round trips
are bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = "CHARNMT-CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays, meta):
    """Write named float32 arrays and a JSON-serializable meta dict."""
    entries = []
    offset = 0
    payloads = []
    for name, arr in arrays.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        raw = arr32.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    manifest = json.dumps({"arrays": entries, "meta": meta},
                          ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(f"{MAGIC} {VERSION} {len(manifest)}\n".encode("utf-8"))
        f.write(manifest)
        f.write(b"\n")
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path):
    """Read back (arrays dict, meta dict); arrays come out float32."""
    with open(path, "rb") as f:
        header = f.readline().decode("utf-8").split()
        if len(header) != 3 or header[0] != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint container")
        if int(header[1]) != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header[1]}")
        manifest = json.loads(f.read(int(header[2])).decode("utf-8"))
        if f.read(1) != b"\n":
            raise CheckpointError("corrupt manifest terminator")
        payload = f.read()
    arrays = {}
    for entry in manifest["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(
            entry["shape"]).copy()
    return arrays, manifest["meta"]
