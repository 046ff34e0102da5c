"""Named-tensor checkpoint files.

Format (UTF-8 text, LF line endings)::

    heatflow-checkpoint 1
    config <single-line JSON object>
    tensor <name> <ndim> <dim_0> ... <dim_{ndim-1}>
    <value> <value> ...                      # row-major, float.hex() notation
    tensor ...
    end

Values are written with ``float.hex`` so a save/load round trip is exact to
the bit. Tensors appear in sorted name order, which makes checkpoints of equal
models byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "heatflow-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], config: dict | None = None) -> str:
    lines = [f"{MAGIC} {VERSION}", "config " + json.dumps(config or {}, sort_keys=True)]
    for name in sorted(tensors):
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(tensors[name], dtype=np.float64)
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {arr.ndim} {dims}".rstrip())
        lines.append(" ".join(float(x).hex() for x in arr.reshape(-1)))
    lines.append("end")
    return "\n".join(lines) + "\n"


def loads(text: str) -> tuple[dict[str, np.ndarray], dict]:
    lines = text.split("\n")
    head = lines[0].split()
    if len(head) != 2 or head[0] != MAGIC:
        raise CheckpointError("not a heatflow checkpoint")
    if int(head[1]) != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {head[1]}")
    if not lines[1].startswith("config "):
        raise CheckpointError("missing config line")
    config = json.loads(lines[1][len("config "):])

    tensors: dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines):
        line = lines[i]
        if line == "end":
            return tensors, config
        parts = line.split()
        if not parts or parts[0] != "tensor":
            raise CheckpointError(f"line {i + 1}: expected 'tensor' record")
        name, ndim = parts[1], int(parts[2])
        shape = tuple(int(d) for d in parts[3 : 3 + ndim])
        body = lines[i + 1].split() if i + 1 < len(lines) else []
        values = np.array([float.fromhex(v) for v in body], dtype=np.float64)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {name!r}: expected {shape} values, got {values.size}")
        tensors[name] = values.reshape(shape)
        i += 2
    raise CheckpointError("truncated checkpoint (no 'end' line)")


def save(path, tensors: dict[str, np.ndarray], config: dict | None = None) -> None:
    Path(path).write_text(dumps(tensors, config), encoding="utf-8", newline="\n")


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_text(encoding="utf-8"))
