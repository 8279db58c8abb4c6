"""Binary checkpoints for trained backbones.

Layout (little-endian)::

    b"MFRLCKPT"  u32 version
    section*     4-byte tag, u64 payload length, payload

Sections, in this order: ``SPEC`` (architecture), ``PSGD`` (f64 parameters
at the end of SGD), optional ``PSWA`` (averaged parameters), ``LOGD``
(32-byte sha256 of the training log CSV), ``SEED`` (u64) and ``HASH``
(32-byte sha256 of the canonical config text). Writing then reading gives
back the same bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import MlpSpec, ParamVector

MAGIC = b"MFRLCKPT"
VERSION = 1
_ACTS = ("erf", "tanh", "relu")


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    spec: MlpSpec
    theta_sgd: ParamVector
    theta_swa: ParamVector | None
    config_hash: bytes
    log_digest: bytes = bytes(32)
    seed: int = 0

    def params(self, which: str) -> ParamVector:
        if which == "sgd":
            return self.theta_sgd
        if which == "swa":
            if self.theta_swa is None:
                raise CheckpointError("checkpoint has no averaged parameters")
            return self.theta_swa
        raise ValueError(f"which must be 'sgd' or 'swa', got {which!r}")


def _spec_bytes(spec: MlpSpec) -> bytes:
    dims = (spec.input_dim, len(spec.hidden_dims), *spec.hidden_dims, spec.output_dim)
    return struct.pack(f"<{len(dims)}I", *dims) + struct.pack("<BB", _ACTS.index(spec.activation), int(spec.bias))


def _parse_spec(buf: bytes) -> MlpSpec:
    try:
        inp, depth = struct.unpack_from("<II", buf, 0)
        hidden = struct.unpack_from(f"<{depth}I", buf, 8)
        off = 8 + 4 * depth
        out, = struct.unpack_from("<I", buf, off)
        act, bias = struct.unpack_from("<BB", buf, off + 4)
    except struct.error as err:
        raise CheckpointError(f"malformed SPEC section: {err}") from err
    if off + 6 != len(buf) or act >= len(_ACTS):
        raise CheckpointError("malformed SPEC section")
    return MlpSpec(inp, tuple(hidden), out, _ACTS[act], bool(bias))


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def to_bytes(ck: Checkpoint) -> bytes:
    if len(ck.config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), _section(b"SPEC", _spec_bytes(ck.spec)),
             _section(b"PSGD", ck.theta_sgd.values.astype("<f8").tobytes())]
    if ck.theta_swa is not None:
        parts.append(_section(b"PSWA", ck.theta_swa.values.astype("<f8").tobytes()))
    if len(ck.log_digest) != 32:
        raise ValueError("log digest must be 32 bytes")
    parts.append(_section(b"LOGD", ck.log_digest))
    parts.append(_section(b"SEED", struct.pack("<Q", ck.seed)))
    parts.append(_section(b"HASH", ck.config_hash))
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(buf) < 12:
        raise CheckpointError("truncated header")
    version, = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    sections = {}
    while off < len(buf):
        if off + 12 > len(buf):
            raise CheckpointError(f"truncated section header at offset {off}")
        tag = buf[off:off + 4]
        size, = struct.unpack_from("<Q", buf, off + 4)
        off += 12
        if off + size > len(buf):
            raise CheckpointError(f"truncated {tag!r} section at offset {off}")
        if tag in sections:
            raise CheckpointError(f"duplicate {tag!r} section")
        sections[tag] = buf[off:off + size]
        off += size
    for req in (b"SPEC", b"PSGD", b"LOGD", b"SEED", b"HASH"):
        if req not in sections:
            raise CheckpointError(f"missing {req.decode()} section")
    spec = _parse_spec(sections[b"SPEC"])
    n = spec.n_params()

    def vec(tag):
        raw = sections[tag]
        if len(raw) != 8 * n:
            raise CheckpointError(f"{tag.decode()} holds {len(raw) // 8} values, expected {n}")
        return ParamVector(np.frombuffer(raw, dtype="<f8").astype(np.float64), spec.shapes())

    if len(sections[b"HASH"]) != 32 or len(sections[b"LOGD"]) != 32:
        raise CheckpointError("HASH and LOGD sections must be 32 bytes")
    if len(sections[b"SEED"]) != 8:
        raise CheckpointError("SEED section must be 8 bytes")
    unknown = set(sections) - {b"SPEC", b"PSGD", b"PSWA", b"LOGD", b"SEED", b"HASH"}
    if unknown:
        raise CheckpointError(f"unknown sections {sorted(unknown)}")
    swa = vec(b"PSWA") if b"PSWA" in sections else None
    seed, = struct.unpack("<Q", sections[b"SEED"])
    return Checkpoint(spec, vec(b"PSGD"), swa, bytes(sections[b"HASH"]), bytes(sections[b"LOGD"]), seed)


def save(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    return from_bytes(buf)
