"""Binary checkpoints: a text manifest followed by little-endian float64 tensors.

Layout::

    BEVUNCERT-CKPT 1
    <n>
    <name> <rows> <cols>      (n lines, declaration order)
    <raw '<f8' data, tensors concatenated in the same order>
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .nn import ParamSet

MAGIC = "BEVUNCERT-CKPT 1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ParamSet, path) -> None:
    path = Path(path)
    if path.suffix != ".ckpt":
        raise CheckpointError(f"checkpoint files use the .ckpt extension, got {path.name}")
    lines = [MAGIC, str(len(params))]
    lines += [f"{p.name} {p.value.shape[0]} {p.value.shape[1]}" for p in params]
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def read_checkpoint(path) -> list[tuple[str, np.ndarray]]:
    with open(Path(path), "rb") as fh:
        blob = fh.read()

    def line(pos):
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated manifest")
        return blob[pos:end].decode("ascii", errors="replace"), end + 1

    head, pos = line(0)
    if head != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {head!r})")
    count, pos = line(pos)
    try:
        n = int(count)
    except ValueError:
        raise CheckpointError(f"{path}: bad tensor count {count!r}") from None
    manifest = []
    for _ in range(n):
        text, pos = line(pos)
        parts = text.split(" ")
        if len(parts) != 3:
            raise CheckpointError(f"{path}: bad manifest line {text!r}")
        manifest.append((parts[0], int(parts[1]), int(parts[2])))
    out = []
    for name, r, c in manifest:
        nbytes = 8 * r * c
        if pos + nbytes > len(blob):
            raise CheckpointError(f"{path}: data ends inside tensor {name}")
        out.append((name, np.frombuffer(blob, dtype="<f8", count=r * c, offset=pos).reshape(r, c).astype(np.float64)))
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes after the last tensor")
    return out


def load_into(params: ParamSet, path) -> None:
    """Copy checkpoint values into ``params``; names, order and shapes must match exactly."""
    tensors = read_checkpoint(path)
    want = [(p.name, p.value.shape) for p in params]
    got = [(name, a.shape) for name, a in tensors]
    if want != got:
        missing = sorted({n for n, _ in want} - {n for n, _ in got})
        extra = sorted({n for n, _ in got} - {n for n, _ in want})
        shapes = [n for (n, s), (m, t) in zip(want, got) if n == m and s != t]
        raise CheckpointError(f"checkpoint does not match the model config: missing {missing[:5]}, "
                              f"unexpected {extra[:5]}, shape mismatch {shapes[:5]}")
    for p, (_, a) in zip(params, tensors):
        p.value[...] = a
