"""Versioned binary checkpoint container.

Layout: magic 'MOEC', u32 version, u32 config-block length + UTF-8
key=value lines, u64 step, u32 rng-block length + JSON text, u32 parameter
count, then per parameter: u16 name length, name, u8 ndim, u32 dims,
raw little-endian float64 data.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError

MAGIC = b"MOEC"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict[str, dict]  # section -> {key: value}
    step: int
    rng_state: dict | None


def _encode_config(config: dict[str, dict]) -> bytes:
    lines = []
    for section in sorted(config):
        for key in sorted(config[section]):
            lines.append(f"{section}.{key}={json.dumps(config[section][key])}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _decode_config(blob: bytes) -> dict[str, dict]:
    config: dict[str, dict] = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        section, _, name = key.partition(".")
        config.setdefault(section, {})[name] = json.loads(value)
    return config


def save_checkpoint(path, params: dict[str, np.ndarray],
                    config: dict[str, dict], step: int,
                    rng_state: dict | None = None):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = _encode_config(config)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<Q", step))
    rng_blob = json.dumps(rng_state).encode("utf-8")
    buf.write(struct.pack("<I", len(rng_blob)))
    buf.write(rng_blob)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes(order="C"))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    try:
        view = io.BytesIO(blob)
        magic = view.read(4)
        if magic != MAGIC:
            raise CheckpointError(
                f"bad magic bytes {magic!r} in {path} (expected {MAGIC!r})")
        (version,) = struct.unpack("<I", view.read(4))
        if version != VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} in {path}")
        (cfg_len,) = struct.unpack("<I", view.read(4))
        config = _decode_config(view.read(cfg_len))
        (step,) = struct.unpack("<Q", view.read(8))
        (rng_len,) = struct.unpack("<I", view.read(4))
        rng_state = json.loads(view.read(rng_len).decode("utf-8"))
        (n_params,) = struct.unpack("<I", view.read(4))
        params: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", view.read(2))
            name = view.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", view.read(1))
            shape = tuple(struct.unpack("<I", view.read(4))[0]
                          for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(view.read(count * 8), dtype="<f8",
                                 count=count)
            params[name] = data.reshape(shape).copy()
        return Checkpoint(params=params, config=config, step=step,
                          rng_state=rng_state)
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
