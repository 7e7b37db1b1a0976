"""Named-parameter checkpoints: JSON index + little-endian raw blob.

Layout: 8-byte magic, u32 format version, u32 header length, UTF-8 header
JSON, then the concatenated parameter bytes. The header carries a
fingerprint (sha256 of the canonical config JSON); loading against an
expected config refuses on mismatch, so stale weights can never be silently
reinterpreted under a different architecture.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

MAGIC = b"EEGMOECK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path, params: Dict[str, np.ndarray], config: dict,
                    meta: Optional[dict] = None) -> None:
    path = Path(path)
    index = []
    offset = 0
    blobs = []
    for name, arr in params.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append({"name": name, "shape": list(arr.shape),
                      "dtype": arr.dtype.name, "offset": offset,
                      "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"fingerprint": config_fingerprint(config), "config": config,
              "params": index, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, expected_config: Optional[dict] = None
                    ) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(hlen).decode())
        blob = fh.read()
    if expected_config is not None:
        want = config_fingerprint(expected_config)
        if header["fingerprint"] != want:
            raise CheckpointError(
                f"{path}: config fingerprint mismatch "
                f"(checkpoint {header['fingerprint'][:12]}..., "
                f"expected {want[:12]}...)")
    params: Dict[str, np.ndarray] = {}
    for entry in header["params"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated blob at {entry['name']}")
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob[start:start + nbytes], dtype=dt)
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(
            entry["dtype"])
    return params, header
