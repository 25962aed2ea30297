"""Binary checkpoint files.

Layout (all integers little-endian)::

    magic     8 bytes  b"SCLCKPT\\x00"
    version   uint32
    sections  repeated: tag (4 ASCII bytes), length (uint64), payload
    checksum  8 bytes  blake2b-64 of everything before it

Sections: CONF (encoder config, JSON), META (metadata, JSON), INDX (JSON list
of [name, shape]) and PARM (float64 blob in INDX order). Optimizer moments are
stored as extra arrays named ``opt.m.*`` / ``opt.v.*`` with their scalars in
OPTS.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .encoder import EncoderConfig, ModelParams
from .errors import CheckpointVersionError, CorruptedCheckpoint
from .optim import OptimizerState

MAGIC = b"SCLCKPT\x00"
VERSION = 1
_DIGEST = 8


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: ModelParams
    metadata: dict = field(default_factory=dict)
    optimizer: Optional[OptimizerState] = None


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_DIGEST).digest()


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    arrays = dict(ckpt.params.named())
    opts = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opts = {"t": o.t, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps}
        arrays.update({f"opt.m.{k}": a for k, a in o.m.items()})
        arrays.update({f"opt.v.{k}": a for k, a in o.v.items()})
    index = [[name, list(a.shape)] for name, a in arrays.items()]
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    body = MAGIC + struct.pack("<I", VERSION)
    body += _section(b"CONF", _json(ckpt.config.to_dict()))
    body += _section(b"META", _json(ckpt.metadata))
    body += _section(b"INDX", _json(index))
    body += _section(b"PARM", blob)
    if opts is not None:
        body += _section(b"OPTS", _json(opts))
    return body + _digest(body)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 + _DIGEST:
        raise CorruptedCheckpoint("file too short")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if body[: len(MAGIC)] != MAGIC:
        raise CorruptedCheckpoint("bad magic bytes")
    if _digest(body) != digest:
        raise CorruptedCheckpoint("checksum mismatch")
    (version,) = struct.unpack_from("<I", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")

    sections = {}
    pos = len(MAGIC) + 4
    while pos < len(body):
        if pos + 12 > len(body):
            raise CorruptedCheckpoint("truncated section header")
        tag = body[pos:pos + 4].decode("ascii", "replace")
        (length,) = struct.unpack_from("<Q", body, pos + 4)
        pos += 12
        if pos + length > len(body):
            raise CorruptedCheckpoint(f"section {tag} overruns file")
        sections[tag] = body[pos:pos + length]
        pos += length
    try:
        config = EncoderConfig.from_dict(json.loads(sections["CONF"]))
        metadata = json.loads(sections["META"])
        index = json.loads(sections["INDX"])
        blob = sections["PARM"]
    except KeyError as exc:
        raise CorruptedCheckpoint(f"missing section {exc}") from None

    arrays, offset = {}, 0
    for name, shape in index:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise CorruptedCheckpoint("parameter blob too short")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise CorruptedCheckpoint("parameter blob has trailing bytes")

    optimizer = None
    if "OPTS" in sections:
        o = json.loads(sections["OPTS"])
        optimizer = OptimizerState(
            t=o["t"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
            m={k[len("opt.m."):]: a for k, a in arrays.items() if k.startswith("opt.m.")},
            v={k[len("opt.v."):]: a for k, a in arrays.items() if k.startswith("opt.v.")},
        )
    params = ModelParams.from_named({k: a for k, a in arrays.items() if not k.startswith("opt.")})
    return Checkpoint(config, params, metadata, optimizer)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
