"""Single-file checkpoint container for model, adapter, and control weights.

Layout (little-endian):

    magic "DPCT" + 4-byte format version
    8-byte header length, then a UTF-8 JSON header:
        kind            "depth" | "adapter" | "rgb"
        arch            architecture table echo (validated on load)
        schedule        {"T", "beta_min", "beta_max"}
        meta            free-form provenance (steps, seeds, corpus checksum)
        tensors         ordered [{name, shape}] matching the blob section
    raw float32 tensor data, concatenated in header order
    sha256 digest of everything above (32 bytes)

Weights are always stored float32. Loading re-checks the digest, the kind,
and — when the caller supplies one — the architecture table, byte for byte
before any tensor is materialized.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DPCT"
FORMAT_VERSION = 1
KINDS = ("depth", "adapter", "rgb")


class CheckpointError(Exception):
    """Corrupt, truncated, or mismatched checkpoint file."""


def _state_arrays(state: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, value in state.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = arr.astype(np.float32, copy=False)
        # ascontiguousarray would promote 0-d scalars (adapter gates) to (1,)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        out[name] = arr
    return out


def save_checkpoint(
    path,
    kind: str,
    state: dict,
    *,
    arch: dict,
    schedule: dict,
    meta: dict | None = None,
) -> None:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}; expected one of {KINDS}")
    arrays = _state_arrays(state)
    header = {
        "kind": kind,
        "arch": arch,
        "schedule": schedule,
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    digest = hashlib.sha256()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:

        def put(chunk: bytes):
            digest.update(chunk)
            f.write(chunk)

        put(MAGIC + struct.pack("<I", FORMAT_VERSION))
        put(struct.pack("<Q", len(header_bytes)))
        put(header_bytes)
        for arr in arrays.values():
            put(arr.tobytes())
        f.write(digest.digest())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: expected {n} bytes of {what}")
    return data


def load_checkpoint(
    path,
    *,
    expected_kind: str | None = None,
    expected_arch: dict | None = None,
) -> tuple[dict[str, torch.Tensor], dict]:
    """Verify and read a checkpoint; returns (state, header)."""
    raw = Path(path).read_bytes()
    if len(raw) < 48:
        raise CheckpointError("file too small to be a checkpoint")
    body, stored_digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != stored_digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    if body[:4] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<I", body[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    (header_len,) = struct.unpack("<Q", body[8:16])
    if 16 + header_len > len(body):
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(body[16 : 16 + header_len].decode("utf-8"))

    if header["kind"] not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {header['kind']!r}")
    if expected_kind is not None and header["kind"] != expected_kind:
        raise CheckpointError(
            f"checkpoint kind {header['kind']!r} where {expected_kind!r} was required"
        )
    if expected_arch is not None and header["arch"] != _jsonized(expected_arch):
        raise CheckpointError(
            "architecture table mismatch: checkpoint was written for a different model\n"
            f"  file: {header['arch']}\n  want: {_jsonized(expected_arch)}"
        )

    state = {}
    offset = 16 + header_len
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        chunk = body[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"truncated tensor data for {entry['name']!r}")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        state[entry["name"]] = torch.from_numpy(arr)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{len(body) - offset} trailing bytes after tensor data")
    return state, header


def _jsonized(table: dict) -> dict:
    """Round-trip through JSON so tuples compare equal to stored lists."""
    return json.loads(json.dumps(table))


def load_into_module(module: torch.nn.Module, state: dict[str, torch.Tensor]) -> None:
    """Strict load with dtype restoration to the module's parameters."""
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    extra = sorted(set(state) - set(own))
    if missing or extra:
        raise CheckpointError(f"state mismatch: missing {missing}, unexpected {extra}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in state.items()})
