"""Binary checkpoint: magic ``FORC``, version, then tagged length-prefixed sections.

Sections: ``CONF`` (config JSON + digest), ``PARM`` (parameters), ``ADAM``
(optimizer moments), ``RNGS`` (seed + next epoch), ``METR`` (per-epoch metrics
so far), ``END_`` (CRC32 of all preceding bytes).
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..numerics import AdamState

MAGIC = b"FORC"
VERSION = 1
_DTYPES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8")}
_CODES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    digest: str
    params: dict[str, torch.Tensor]
    trainable: dict[str, bool]
    adam: AdamState
    epoch: int
    seed: int
    metrics: list = field(default_factory=list)

    def equals(self, other: "Checkpoint") -> bool:
        if (self.digest, self.epoch, self.seed, self.metrics) != (other.digest, other.epoch, other.seed, other.metrics):
            return False
        if self.params.keys() != other.params.keys() or self.trainable != other.trainable:
            return False
        same = all(torch.equal(self.params[k], other.params[k]) for k in self.params)
        a, b = self.adam, other.adam
        return (same and a.t == b.t and a.m.keys() == b.m.keys()
                and all(torch.equal(a.m[k], b.m[k]) and torch.equal(a.v[k], b.v[k]) for k in a.m))


def _tensor_bytes(name: str, t: torch.Tensor, flag: int = 0) -> bytes:
    code, np_dt = _DTYPES[t.dtype]
    arr = t.detach().cpu().numpy().astype(np_dt, copy=False)
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BBB", flag, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def _read_tensor(buf: memoryview, pos: int):
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    name = bytes(buf[pos:pos + n]).decode()
    pos += n
    flag, code, ndim = struct.unpack_from("<BBB", buf, pos)
    pos += 3
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype, np_dt = _CODES[code]
    count = int(np.prod(shape)) if ndim else 1
    size = count * np.dtype(np_dt).itemsize
    arr = np.frombuffer(bytes(buf[pos:pos + size]), dtype=np_dt).reshape(shape)
    pos += size
    return name, flag, torch.from_numpy(arr.copy()).to(dtype), pos


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(_section(b"CONF", json.dumps({"config": ckpt.config, "digest": ckpt.digest}, sort_keys=True).encode()))
    body = struct.pack("<I", len(ckpt.params))
    body += b"".join(_tensor_bytes(k, v, int(ckpt.trainable.get(k, True))) for k, v in ckpt.params.items())
    parts.append(_section(b"PARM", body))
    a = ckpt.adam
    head = json.dumps({"t": a.t, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps,
                       "weight_decay": a.weight_decay, "names": list(a.m)}).encode()
    body = struct.pack("<I", len(head)) + head
    body += b"".join(_tensor_bytes(k, a.m[k]) + _tensor_bytes(k, a.v[k]) for k in a.m)
    parts.append(_section(b"ADAM", body))
    parts.append(_section(b"RNGS", json.dumps({"seed": ckpt.seed, "epoch": ckpt.epoch}).encode()))
    parts.append(_section(b"METR", json.dumps(ckpt.metrics).encode()))
    blob = b"".join(parts)
    blob += _section(b"END_", struct.pack("<I", zlib.crc32(blob)))
    Path(path).write_bytes(blob)


def load_checkpoint(path, expect_digest: str | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    if len(blob) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    sections = {}
    pos = 8
    while pos < len(blob):
        if pos + 12 > len(blob):
            raise CheckpointError(f"{path}: truncated section header")
        tag = blob[pos:pos + 4]
        (n,) = struct.unpack_from("<Q", blob, pos + 4)
        start = pos + 12
        if start + n > len(blob):
            raise CheckpointError(f"{path}: truncated section {tag!r}")
        if tag == b"END_":
            (crc,) = struct.unpack_from("<I", blob, start)
            if crc != zlib.crc32(blob[:pos]):
                raise CheckpointError(f"{path}: checksum mismatch")
            sections[tag] = b""
            break
        sections[tag] = memoryview(blob)[start:start + n]
        pos = start + n
    for tag in (b"CONF", b"PARM", b"ADAM", b"RNGS", b"METR", b"END_"):
        if tag not in sections:
            raise CheckpointError(f"{path}: missing section {tag.decode()} (truncated file?)")

    conf = json.loads(bytes(sections[b"CONF"]))
    if expect_digest is not None and conf["digest"] != expect_digest:
        raise CheckpointError(f"{path}: config digest mismatch ({conf['digest'][:12]} != {expect_digest[:12]})")

    buf = sections[b"PARM"]
    (count,) = struct.unpack_from("<I", buf, 0)
    pos = 4
    params, trainable = {}, {}
    for _ in range(count):
        name, flag, t, pos = _read_tensor(buf, pos)
        params[name] = t
        trainable[name] = bool(flag)

    buf = sections[b"ADAM"]
    (hn,) = struct.unpack_from("<I", buf, 0)
    head = json.loads(bytes(buf[4:4 + hn]))
    pos = 4 + hn
    adam = AdamState(head["beta1"], head["beta2"], head["eps"], head["weight_decay"], head["t"])
    for _ in head["names"]:
        name, _, m, pos = _read_tensor(buf, pos)
        _, _, v, pos = _read_tensor(buf, pos)
        adam.m[name] = m
        adam.v[name] = v
    rng = json.loads(bytes(sections[b"RNGS"]))
    metrics = json.loads(bytes(sections[b"METR"]))
    return Checkpoint(conf["config"], conf["digest"], params, trainable, adam, rng["epoch"], rng["seed"], metrics)
