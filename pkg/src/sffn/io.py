"""Checkpoints, routing traces, metrics CSV, all written atomically.

Checkpoint layout::

    SFFN1\n
    <n entries>\n
    <name> float64 <dim0>x<dim1>...\n      (one line per tensor; "scalar" for 0-d)
    <raw little-endian float64 data, tensors in header order, row-major>
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .analysis import RoutingEvent, RoutingTrace

MAGIC = b"SFFN1"
TRACE_COLUMNS = ("layer", "seq", "pos", "token_id", "block_ids")


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- checkpoints -------------------------------------------------------------


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    header = [MAGIC.decode(), str(len(tensors))]
    chunks = []
    for name in sorted(tensors):
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"tensor names may not be empty or contain whitespace: {name!r}")
        arr = np.asarray(tensors[name], dtype="<f8")
        shape = "x".join(str(s) for s in arr.shape) if arr.ndim else "scalar"
        header.append(f"{name} float64 {shape}")
        chunks.append(arr.tobytes(order="C"))
    return ("\n".join(header) + "\n").encode("ascii") + b"".join(chunks)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(data)
    magic = buf.readline().rstrip(b"\n")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic[:16]!r}, expected {MAGIC!r}")
    try:
        n = int(buf.readline())
    except ValueError as exc:
        raise FormatError("bad entry count") from exc
    entries = []
    for line_no in range(3, 3 + n):
        parts = buf.readline().decode("ascii").split()
        if len(parts) != 3 or parts[1] != "float64":
            raise FormatError(f"line {line_no}: malformed header entry {' '.join(parts)!r}")
        shape = () if parts[2] == "scalar" else tuple(int(s) for s in parts[2].split("x"))
        entries.append((parts[0], shape))
    out = {}
    for name, shape in entries:
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(8 * count)
        if len(raw) != 8 * count:
            raise FormatError(f"truncated data for tensor {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if buf.read(1):
        raise FormatError("trailing bytes after last tensor")
    return out


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


# -- routing traces ------------------------------------------------------------


def trace_to_csv(rows: Iterable[tuple]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for layer, seq, pos, token, blocks in rows:
        w.writerow([layer, seq, pos, token, "|".join(str(b) for b in blocks)])
    return out.getvalue()


def write_trace(path, rows: Iterable[tuple]) -> None:
    atomic_write_text(path, trace_to_csv(rows))


def parse_trace(text: str, g: int, n_blocks: int | None = None) -> RoutingTrace:
    """Parse a trace CSV; malformed lines raise ``FormatError`` naming the line."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != TRACE_COLUMNS:
        raise FormatError(f"line 1: expected header {','.join(TRACE_COLUMNS)}, got {header}")
    events = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(TRACE_COLUMNS):
            raise FormatError(f"line {line_no}: expected {len(TRACE_COLUMNS)} fields, got {len(row)}")
        try:
            layer, seq, pos, token = (int(v) for v in row[:4])
            blocks = tuple(int(b) for b in row[4].split("|")) if row[4] else ()
        except ValueError as exc:
            raise FormatError(f"line {line_no}: {exc}") from exc
        if len(set(blocks)) != len(blocks):
            raise FormatError(f"line {line_no}: repeated block id in {row[4]!r}")
        if n_blocks is not None and any(not 0 <= b < n_blocks for b in blocks):
            raise FormatError(f"line {line_no}: block id out of range [0, {n_blocks})")
        events.append(RoutingEvent(layer, seq, pos, token, blocks))
    return RoutingTrace(events, g, n_blocks)


def read_trace(path, g: int, n_blocks: int | None = None) -> RoutingTrace:
    return parse_trace(Path(path).read_text(encoding="utf-8"), g, n_blocks)


# -- metrics -------------------------------------------------------------------


def metrics_to_csv(rows: list[dict], columns: tuple[str, ...]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], int) else repr(float(r[c])) for c in columns])
    return out.getvalue()
