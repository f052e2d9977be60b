"""Checkpoint container: ASCII header followed by little-endian float32 payloads.

Layout::

    ORF1
    stage <tag>
    config <json>
    rng <json>
    tensors <count>
    <name> f32 <rank> <d0> <d1> ...     (one line per tensor)
    end
    <payloads in header order>
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = "ORF1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    tensors: dict
    config: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.tensors = {k: np.array(v, dtype=np.float32, order="C") for k, v in self.tensors.items()}

    def require_stage(self, stage: str) -> "Checkpoint":
        if self.stage != stage:
            raise CheckpointError(f"expected a {stage} checkpoint, got stage {self.stage!r}")
        return self

    def select(self, prefix: str) -> dict:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _header(ckpt: Checkpoint) -> str:
    lines = [
        MAGIC,
        f"stage {ckpt.stage}",
        "config " + json.dumps(ckpt.config, sort_keys=True),
        "rng " + json.dumps(ckpt.rng, sort_keys=True),
        f"tensors {len(ckpt.tensors)}",
    ]
    for name, arr in ckpt.tensors.items():
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} must be non-empty without whitespace")
        lines.append(" ".join([name, "f32", str(arr.ndim), *(str(d) for d in arr.shape)]))
    lines.append("end")
    return "\n".join(lines) + "\n"


def to_bytes(ckpt: Checkpoint) -> bytes:
    for name, arr in ckpt.tensors.items():
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name} has non-finite values")
    body = b"".join(arr.astype("<f4").tobytes() for arr in ckpt.tensors.values())
    return _header(ckpt).encode("ascii") + body


def save(ckpt: Checkpoint, path: str | Path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    pos = 0

    def line() -> str:
        nonlocal pos
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{source}: header ends early")
        text = raw[pos:nl].decode("ascii", errors="replace")
        pos = nl + 1
        return text

    if raw[:5] != (MAGIC + "\n").encode():
        raise CheckpointError(f"{source}: bad magic, not an {MAGIC} checkpoint")
    line()
    stage = _field(line(), "stage", source)
    try:
        config = json.loads(_field(line(), "config", source))
        rng = json.loads(_field(line(), "rng", source))
        count = int(_field(line(), "tensors", source))
    except ValueError as exc:
        raise CheckpointError(f"{source}: malformed header ({exc})") from None
    specs = []
    for _ in range(count):
        parts = line().split()
        if len(parts) < 3 or parts[1] != "f32":
            raise CheckpointError(f"{source}: malformed tensor entry {' '.join(parts)!r}")
        name, rank = parts[0], int(parts[2])
        dims = tuple(int(d) for d in parts[3:])
        if len(dims) != rank or any(d < 0 for d in dims):
            raise CheckpointError(f"{source}: tensor {name} declares rank {rank} with dims {dims}")
        specs.append((name, dims))
    if line() != "end":
        raise CheckpointError(f"{source}: header count does not match tensor entries")
    tensors = {}
    for name, dims in specs:
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        chunk = raw[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(
                f"{source}: truncated payload for tensor {name} ({len(chunk)} of {nbytes} bytes)")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(dims).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{source}: tensor {name} has non-finite values")
        tensors[name] = arr
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - pos} trailing bytes after payload")
    return Checkpoint(stage, tensors, config, rng)


def _field(text: str, key: str, source: str) -> str:
    head, _, rest = text.partition(" ")
    if head != key:
        raise CheckpointError(f"{source}: expected header field {key!r}, got {head!r}")
    return rest


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), str(path))


def assign(tensors: dict, arrays: dict, strict: bool = True) -> None:
    """Copy checkpoint arrays into live tensors, checking names and shapes."""
    missing = [k for k in tensors if k not in arrays]
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks tensor {missing[0]}")
    for name, t in tensors.items():
        if name not in arrays:
            continue
        arr = arrays[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(f"tensor {name}: checkpoint shape {arr.shape} vs model {t.data.shape}")
        t.data = arr.astype(t.data.dtype, copy=True)
