"""
persistence.py — the binary checkpoint format.

A checkpoint holds a complete TrainState: every parameter tensor
(generator and critic), both Adam states, the per-stage step counters,
the run config snapshot (as config-file text) and the run RNG state.
Loading a checkpoint and continuing reproduces uninterrupted training
bit for bit at float64.

File layout (all integers little-endian):

    offset 0   4 bytes   magic b"UVSC"
           4   uint32    format version (FORMAT_VERSION)
           8   uint32    header length H
          12   H bytes   UTF-8 JSON header (sorted keys)
        12+H   P bytes   tensor payload, little-endian, tensors back to back
      12+H+P   uint32    CRC-32 of every preceding byte

The header's "tensors" table lists name, shape, dtype, offset (into the
payload) and nbytes for every tensor, sorted by name.

Errors are distinct: a short file raises CheckpointTruncatedError, an
unknown version CheckpointVersionError, anything else that does not
check out CheckpointCorruptError. Nothing is built until the whole file
has been validated.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Any

import numpy as np

from nn_ops import AdamState
from tensor_core import Tensor
from training import TrainState, dump_config, parse_config

logger = logging.getLogger(__name__)

MAGIC = b"UVSC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")
_CRC = struct.Struct("<I")


class CheckpointError(Exception):
    """Base class for checkpoint read failures."""


class CheckpointCorruptError(CheckpointError):
    """Raised when magic, header, layout or checksum do not check out."""


class CheckpointVersionError(CheckpointError):
    """Raised for a checkpoint written by an unknown format version."""


class CheckpointTruncatedError(CheckpointError):
    """Raised when the file ends before the declared content does."""


# ---------------------------------------------------------------------------
# Encoding helpers
# ---------------------------------------------------------------------------

def _encode_state_value(value: Any) -> Any:
    """numpy arrays/ints inside a bit-generator state -> JSON-safe values."""
    if isinstance(value, np.ndarray):
        return {"dtype": value.dtype.str, "values": value.tolist()}
    if isinstance(value, dict):
        return {k: _encode_state_value(v) for k, v in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _decode_state_value(value: Any) -> Any:
    if isinstance(value, dict):
        if set(value) == {"dtype", "values"}:
            return np.array(value["values"], dtype=np.dtype(value["dtype"]))
        return {k: _decode_state_value(v) for k, v in value.items()}
    return value


def _adam_scalars(state: AdamState) -> dict[str, Any]:
    return {"t": state.t, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}


def _tensors(state: TrainState) -> dict[str, np.ndarray]:
    out = {f"param/{name}": p.data for name, p in state.params.items()}
    for group, adam in (("generator", state.gen_adam), ("discriminator", state.disc_adam)):
        for name, arr in adam.m.items():
            out[f"adam/{group}/m/{name}"] = arr
        for name, arr in adam.v.items():
            out[f"adam/{group}/v/{name}"] = arr
    return out


# ---------------------------------------------------------------------------
# Save
# ---------------------------------------------------------------------------

def encode_checkpoint(state: TrainState) -> bytes:
    table, chunks, offset = [], [], 0
    tensors = _tensors(state)
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": le.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)

    header = {
        "config": dump_config(state.config),
        "stage1_step": state.stage1_step,
        "stage2_step": state.stage2_step,
        "adam": {
            "generator": _adam_scalars(state.gen_adam),
            "discriminator": _adam_scalars(state.disc_adam),
        },
        "rng": _encode_state_value(state.rng.bit_generator.state),
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(state)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    logger.info("Saved checkpoint %s (%d bytes, stage1=%d stage2=%d)",
                path, len(blob), state.stage1_step, state.stage2_step)
    return path


# ---------------------------------------------------------------------------
# Load
# ---------------------------------------------------------------------------

def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> TrainState:
    if len(blob) >= 4 and blob[:4] != MAGIC:
        raise CheckpointCorruptError(f"{source}: not a checkpoint (bad magic {blob[:4]!r})")
    if len(blob) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{source}: file ends inside the fixed header")
    _, version, header_len = _PREFIX.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{source}: format version {version}, expected {FORMAT_VERSION}")
    header_end = _PREFIX.size + header_len
    if len(blob) < header_end:
        raise CheckpointTruncatedError(f"{source}: file ends inside the JSON header")
    try:
        header = json.loads(blob[_PREFIX.size:header_end].decode("utf-8"))
        table = header["tensors"]
        payload_size = sum(int(entry["nbytes"]) for entry in table)
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"{source}: unreadable header ({exc})") from None

    expected = header_end + payload_size + _CRC.size
    if len(blob) < expected:
        raise CheckpointTruncatedError(f"{source}: {len(blob)} bytes, header declares {expected}")
    if len(blob) > expected:
        raise CheckpointCorruptError(f"{source}: {len(blob) - expected} unexpected trailing bytes")
    (stored_crc,) = _CRC.unpack_from(blob, expected - _CRC.size)
    if zlib.crc32(blob[:expected - _CRC.size]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointCorruptError(f"{source}: checksum mismatch")

    payload = memoryview(blob)[header_end:header_end + payload_size]
    arrays: dict[str, np.ndarray] = {}

    def adam_state(group: str) -> AdamState:
        prefix_m, prefix_v = f"adam/{group}/m/", f"adam/{group}/v/"
        return AdamState(
            m={k[len(prefix_m):]: v for k, v in arrays.items() if k.startswith(prefix_m)},
            v={k[len(prefix_v):]: v for k, v in arrays.items() if k.startswith(prefix_v)},
            **header["adam"][group],
        )

    try:
        for entry in table:
            start, nbytes = int(entry["offset"]), int(entry["nbytes"])
            if start < 0 or start + nbytes > payload_size:
                raise ValueError(f"tensor {entry['name']!r} lies outside the payload")
            dtype = np.dtype(entry["dtype"])
            arr = np.frombuffer(payload[start:start + nbytes], dtype=dtype).reshape(entry["shape"])
            arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))
        config = parse_config(header["config"], source=f"{source}:config")
        rng = np.random.Generator(np.random.Philox())
        rng.bit_generator.state = _decode_state_value(header["rng"])
        gen_adam, disc_adam = adam_state("generator"), adam_state("discriminator")
        stage1_step, stage2_step = int(header["stage1_step"]), int(header["stage2_step"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"{source}: {exc}") from None

    params = {
        name[len("param/"):]: Tensor(arr, requires_grad=True, name=name[len("param/"):], dtype=arr.dtype)
        for name, arr in arrays.items() if name.startswith("param/")
    }
    return TrainState(
        config=config,
        params=params,
        gen_adam=gen_adam,
        disc_adam=disc_adam,
        rng=rng,
        stage1_step=stage1_step,
        stage2_step=stage2_step,
    )


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state = decode_checkpoint(path.read_bytes(), source=str(path))
    logger.info("Loaded checkpoint %s (stage1=%d stage2=%d)", path, state.stage1_step, state.stage2_step)
    return state
