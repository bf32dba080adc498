"""Checkpoint container and its binary file format.

Layout (all integers little-endian)::

    b"LFRCCKPT"              8-byte magic
    uint32 version
    uint32 header length n
    n bytes                  UTF-8 JSON header (sorted keys)
    parameter blobs          float64 LE, in header order, shapes from header
    32 bytes                 SHA-256 of everything above

The header carries the format version, config hash, seed, epoch, kind
(``best`` or ``last``), selection metric, model spec and the parameter
names/shapes/dtype.  Saving the same checkpoint twice gives identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IncompatibleCheckpointError
from .models import Model, ModelSpec, parameter_shapes
from .tensor import Tensor

MAGIC = b"LFRCCKPT"
FORMAT_VERSION = 1
KINDS = ("best", "last")


@dataclass
class Checkpoint:
    parameters: dict
    epoch: int
    kind: str
    metric: float
    config_hash: str
    seed: int
    model_spec: dict
    dtype: str = "float32"
    extra: dict = field(default_factory=dict)

    def spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.model_spec)

    def to_model(self) -> Model:
        return model_from_checkpoint(self)


def checkpoint_from_model(model: Model, epoch: int, kind: str, metric: float, config_hash: str, seed: int,
                          extra: dict | None = None) -> Checkpoint:
    return Checkpoint(
        parameters=model.state_dict(),
        epoch=int(epoch),
        kind=kind,
        metric=float(metric),
        config_hash=config_hash,
        seed=int(seed),
        model_spec=model.spec.to_dict(),
        dtype=str(model.dtype),
        extra=dict(extra or {}),
    )


def model_from_checkpoint(ckpt: Checkpoint, spec: ModelSpec | None = None) -> Model:
    spec = spec or ckpt.spec()
    validate_against_spec(ckpt, spec)
    params = {name: Tensor(np.asarray(ckpt.parameters[name]).astype(ckpt.dtype), requires_grad=True)
              for name in parameter_shapes(spec)}
    return Model(spec, params)


def validate_against_spec(ckpt: Checkpoint, spec: ModelSpec) -> None:
    expected = parameter_shapes(spec)
    for name, shape in expected.items():
        if name not in ckpt.parameters:
            raise IncompatibleCheckpointError(f"checkpoint has no parameter {name!r}")
        got = tuple(np.shape(ckpt.parameters[name]))
        if got != shape:
            raise IncompatibleCheckpointError(f"parameter {name!r}: checkpoint shape {got}, model expects {shape}")
    extra = set(ckpt.parameters) - set(expected)
    if extra:
        raise IncompatibleCheckpointError(f"checkpoint has parameters unknown to the model: {sorted(extra)}")


def to_bytes(ckpt: Checkpoint) -> bytes:
    if ckpt.kind not in KINDS:
        raise ValueError(f"checkpoint kind must be one of {KINDS}")
    names = list(ckpt.parameters)
    header = {
        "version": FORMAT_VERSION,
        "config_hash": ckpt.config_hash,
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "kind": ckpt.kind,
        "metric": ckpt.metric,
        "dtype": ckpt.dtype,
        "model_spec": ckpt.model_spec,
        "extra": ckpt.extra,
        "parameters": [{"name": n, "shape": list(np.shape(ckpt.parameters[n]))} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
    for n in names:
        parts.append(np.ascontiguousarray(ckpt.parameters[n], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def from_bytes(raw: bytes, expected_hash: str | None = None, spec: ModelSpec | None = None) -> Checkpoint:
    if len(raw) < 16:
        raise FormatError("checkpoint truncated inside the preamble", offset=len(raw))
    if raw[:8] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", offset=0)
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    if len(raw) < 16 + hlen:
        raise FormatError("checkpoint truncated inside the header", offset=len(raw))
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", offset=16) from None
    try:
        return _decode(raw, header, 16 + hlen, expected_hash, spec)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint header is missing or has a malformed field: {exc}", offset=16) from None


def _decode(raw, header, pos, expected_hash, spec):
    params = {}
    for entry in header["parameters"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if len(raw) < pos + nbytes:
            raise FormatError(f"checkpoint truncated inside parameter {entry['name']!r}", offset=len(raw))
        params[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if len(raw) != pos + 32:
        raise FormatError(f"checkpoint has {len(raw) - pos} bytes after the parameters, expected a 32-byte digest", offset=pos)
    if hashlib.sha256(raw[:pos]).digest() != raw[pos:]:
        raise FormatError("checkpoint digest mismatch (corrupted file)", offset=pos)
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise IncompatibleCheckpointError(f"config hash {header['config_hash'][:12]}... does not match expected {expected_hash[:12]}...")
    ckpt = Checkpoint(
        parameters=params,
        epoch=header["epoch"],
        kind=header["kind"],
        metric=header["metric"],
        config_hash=header["config_hash"],
        seed=header["seed"],
        model_spec=header["model_spec"],
        dtype=header["dtype"],
        extra=header.get("extra", {}),
    )
    if spec is not None:
        validate_against_spec(ckpt, spec)
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path, expected_hash: str | None = None, spec: ModelSpec | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expected_hash=expected_hash, spec=spec)
