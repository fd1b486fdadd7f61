"""Model Package binary format.

Layout (all integers little-endian)::

    b"MEDC"                      magic
    u16                          format version (1)
    u32 + bytes                  metadata, UTF-8 JSON with sorted keys
    u64 + bytes                  payload (serialized ParamSet, see below)
    32 bytes                     SHA-256 of everything above

Payload::

    u32 version tag, u32 tensor count, then per tensor:
    u16 + bytes name, u8 ndim, u32 * ndim shape, float64 data (C order, little-endian)
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from medc_lab.network import NetworkSpec, ParamSet

MAGIC = b"MEDC"
FORMAT_VERSION = 1
REQUIRED_METADATA = ("application", "environment_details", "description", "network_spec",
                     "training_steps")


class PackageError(ValueError):
    pass


def digest(data: bytes) -> str:
    """Content identifier: lowercase hex SHA-256."""
    return hashlib.sha256(data).hexdigest()


def encode_params(params: ParamSet) -> bytes:
    out = [struct.pack("<II", params.version, len(params))]
    for name, arr in params:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def decode_params(payload: bytes) -> ParamSet:
    try:
        version, count = struct.unpack_from("<II", payload, 0)
        pos = 8
        names, arrays = [], []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            names.append(payload[pos:pos + n].decode("utf-8"))
            pos += n
            (ndim,) = struct.unpack_from("<B", payload, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", payload, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(payload):
                raise PackageError("payload truncated")
            arrays.append(np.frombuffer(payload, dtype="<f8", count=size, offset=pos)
                          .reshape(shape).astype(np.float64))
            pos += 8 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise PackageError(f"malformed parameter payload: {exc}") from exc
    if pos != len(payload):
        raise PackageError("trailing bytes after parameter payload")
    return ParamSet(names, arrays, version)


@dataclass
class ModelPackage:
    params: ParamSet
    metadata: dict = field(default_factory=dict)

    @property
    def network_spec(self) -> NetworkSpec:
        return NetworkSpec.from_dict(self.metadata["network_spec"])

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = encode_params(self.params)
        body = (MAGIC + struct.pack("<H", FORMAT_VERSION)
                + struct.pack("<I", len(meta)) + meta
                + struct.pack("<Q", len(payload)) + payload)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes, require_complete: bool = False) -> "ModelPackage":
        if len(data) < 4 + 2 + 4 + 8 + 32:
            raise PackageError("package truncated")
        body, checksum = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != checksum:
            raise PackageError("checksum mismatch")
        if body[:4] != MAGIC:
            raise PackageError("bad magic bytes")
        (version,) = struct.unpack_from("<H", body, 4)
        if version != FORMAT_VERSION:
            raise PackageError(f"unsupported package version {version}")
        (mlen,) = struct.unpack_from("<I", body, 6)
        pos = 10
        if pos + mlen + 8 > len(body):
            raise PackageError("package truncated")
        try:
            metadata = json.loads(body[pos:pos + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise PackageError(f"bad metadata: {exc}") from exc
        pos += mlen
        (plen,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        if pos + plen != len(body):
            raise PackageError("payload length does not match package size")
        params = decode_params(body[pos:])
        pkg = cls(params, metadata)
        if require_complete:
            missing = [k for k in REQUIRED_METADATA if k not in metadata]
            if missing:
                raise PackageError(f"metadata missing keys: {missing}")
        return pkg


def save_params(params: ParamSet, metadata: dict | None = None) -> bytes:
    return ModelPackage(params, dict(metadata or {})).to_bytes()


def load_params(data: bytes) -> ParamSet:
    return ModelPackage.from_bytes(data).params


def write_package(path, pkg: ModelPackage) -> str:
    data = pkg.to_bytes()
    with open(path, "wb") as fh:
        fh.write(data)
    return digest(data)


def read_package(path, require_complete: bool = False) -> ModelPackage:
    with open(path, "rb") as fh:
        return ModelPackage.from_bytes(fh.read(), require_complete=require_complete)
