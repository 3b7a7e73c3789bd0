"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"HOGF" | u32 version | u32 header length | header JSON (utf-8) | payload

The header echoes the model config, the training step, and a manifest of
blobs ``{name, shape, offset, length, crc32}`` with offsets relative to the
payload start. Blobs are raw little-endian float32. Optimizer moments, when
present, are stored as extra blobs named ``adam.m.<param>`` / ``adam.v.<param>``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .model import HogformerModel, build_model
from .optim import Adam, OptimState
from .tensor import ConfigurationError

MAGIC = b"HOGF"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: HogformerModel
    step: int
    optimizer: OptimState | None
    header: dict


def _encode(blobs: list[tuple[str, np.ndarray]]) -> tuple[list[dict], bytes]:
    manifest, chunks, offset = [], [], 0
    for name, arr in blobs:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "length": len(raw), "crc32": zlib.crc32(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    return manifest, b"".join(chunks)


def checkpoint_bytes(model: HogformerModel, step: int = 0, optimizer: Adam | None = None) -> bytes:
    blobs = [(n, p.data) for n, p in model.named_parameters()]
    opt_header = None
    if optimizer is not None:
        st = optimizer.state
        blobs += [(f"adam.m.{n}", st.m[n]) for n, _ in optimizer.params]
        blobs += [(f"adam.v.{n}", st.v[n]) for n, _ in optimizer.params]
        opt_header = {
            "step": st.step,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "schedule": st.schedule,
        }
    manifest, payload = _encode(blobs)
    header = {
        "format": "hogformer-checkpoint",
        "config": model.config.to_dict(),
        "step": int(step),
        "optimizer": opt_header,
        "blobs": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload


def save_checkpoint(model: HogformerModel, path: str, step: int = 0, optimizer: Adam | None = None) -> None:
    data = checkpoint_bytes(model, step, optimizer)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _parse(data: bytes, path: str) -> tuple[dict, bytes]:
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header ({len(data)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (this build reads {VERSION})")
    end = _PREFIX.size + hlen
    if len(data) < end:
        raise CheckpointError(f"{path}: truncated header ({len(data) - _PREFIX.size} of {hlen} bytes)")
    try:
        header = json.loads(data[_PREFIX.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    for key in ("config", "step", "blobs"):
        if key not in header:
            raise CheckpointError(f"{path}: corrupt header: missing {key!r}")
    return header, data[end:]


def _read_blobs(header: dict, payload: bytes, path: str) -> dict[str, np.ndarray]:
    out = {}
    for entry in header["blobs"]:
        name, off, length = entry["name"], entry["offset"], entry["length"]
        shape = tuple(entry["shape"])
        if off < 0 or off + length > len(payload):
            raise CheckpointError(f"{path}: truncated blob {name!r} (needs bytes {off}..{off + length}, have {len(payload)})")
        raw = payload[off : off + length]
        if zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointError(f"{path}: checksum failure in blob {name!r}")
        if int(np.prod(shape, dtype=np.int64)) * 4 != length:
            raise CheckpointError(f"{path}: blob {name!r} length {length} does not match shape {shape}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return out


def config_conflicts(saved: dict, expected: ModelConfig) -> list[str]:
    want = expected.to_dict()
    return [f"{k}: checkpoint={saved.get(k)!r} expected={want[k]!r}" for k in want if saved.get(k) != want[k]]


def load_checkpoint(path: str, expected_config: ModelConfig | None = None) -> Checkpoint:
    """Load a checkpoint; raises CheckpointError naming the defect.

    ``expected_config`` (if given) must equal the config echo, otherwise a
    ConfigurationError lists the conflicting keys.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc.strerror}") from None
    header, payload = _parse(data, path)
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (TypeError, ConfigurationError) as exc:
        raise CheckpointError(f"{path}: corrupt config echo: {exc}") from None
    if expected_config is not None:
        conflicts = config_conflicts(header["config"], expected_config)
        if conflicts:
            raise ConfigurationError(f"{path}: config conflict: " + "; ".join(conflicts))
    blobs = _read_blobs(header, payload, path)
    model = build_model(cfg, seed=0)
    params = dict(model.named_parameters())
    unknown = [n for n in blobs if n not in params and not n.startswith("adam.")]
    if unknown:
        raise CheckpointError(f"{path}: unknown parameter name(s) {unknown[:5]}")
    missing = [n for n in params if n not in blobs]
    if missing:
        raise CheckpointError(f"{path}: missing parameter(s) {missing[:5]}")
    for name, p in params.items():
        if blobs[name].shape != p.data.shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {blobs[name].shape}, model expects {p.data.shape}")
        p.data = blobs[name].copy()
    opt = None
    oh = header.get("optimizer")
    if oh is not None:
        opt = OptimState(step=int(oh["step"]), schedule=oh.get("schedule") or {})
        for name in params:
            try:
                opt.m[name] = blobs[f"adam.m.{name}"].copy()
                opt.v[name] = blobs[f"adam.v.{name}"].copy()
            except KeyError:
                raise CheckpointError(f"{path}: optimizer state lacks moments for {name!r}") from None
    return Checkpoint(model=model, step=int(header["step"]), optimizer=opt, header=header)
