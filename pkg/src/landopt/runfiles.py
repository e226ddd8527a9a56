"""Deterministic on-disk formats: header+blocks binaries and commented CSV.

Binary layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON
header (sorted keys), then the raw bytes of each block in header order.
Reruns with identical content produce identical bytes; no timestamps.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LDOPTBIN"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_blocks(path, schema: str, meta: dict, blocks: dict) -> None:
    """Write named float arrays with a JSON header. Block order is sorted."""
    names = sorted(blocks)
    header = {
        "schema": schema,
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "blocks": [
            {
                "name": n,
                "dtype": str(np.asarray(blocks[n]).dtype),
                "shape": list(np.asarray(blocks[n]).shape),
            }
            for n in names
        ],
    }
    raw = canonical_json(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for n in names:
            f.write(np.ascontiguousarray(blocks[n]).tobytes())


def read_blocks(path):
    """Return (schema, meta, blocks dict)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a landopt binary file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version")
        blocks = {}
        for spec in header["blocks"]:
            dtype = np.dtype(spec["dtype"])
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype)
            blocks[spec["name"]] = arr.reshape(shape).copy()
    return header["schema"], header["meta"], blocks


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, schema: str, meta: dict, columns, rows) -> None:
    """CSV with '# key=value' comment headers; float cells use repr
    (shortest round-trip), so identical data gives identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# schema={schema}"]
    for k in sorted(meta):
        lines.append(f"# {k}={_fmt(meta[k])}")
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path):
    """Return (meta dict, columns, list of row lists of floats/strings)."""
    meta = {}
    columns = None
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v.strip()
            continue
        if not line.strip():
            continue
        if columns is None:
            columns = line.split(",")
            continue
        cells = []
        for cell in line.split(","):
            try:
                cells.append(float(cell))
            except ValueError:
                cells.append(cell)
        rows.append(cells)
    return meta, columns, rows
