"""On-disk formats: grid files, score sidecars, array containers and TSV tables.

Grid file: one line of JSON (the header) terminated by ``\\n`` followed by the
raw little-endian float32 voxels in C order.  Array container: 8-byte magic,
uint64 header length, JSON header, then the concatenated array payloads.
Everything is written deterministically so reruns produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DataError

GRID_FORMAT = "csgrid"
GRID_VERSION = 1
CONTAINER_MAGIC = b"CSGCKPT1"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def fingerprint(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_grid(path, voxels: np.ndarray, **meta) -> None:
    arr = np.ascontiguousarray(voxels, dtype="<f4")
    header = {"format": GRID_FORMAT, "version": GRID_VERSION, "dtype": "<f4",
              "shape": list(arr.shape), **meta}
    with open(path, "wb") as f:
        f.write(canonical_json(header).encode() + b"\n")
        f.write(arr.tobytes())


def read_grid(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: malformed grid header") from exc
        if header.get("format") != GRID_FORMAT:
            raise DataError(f"{path}: not a {GRID_FORMAT} file")
        shape = tuple(header["shape"])
        payload = f.read()
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise DataError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    return header, np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def write_scores(path, scores) -> None:
    Path(path).write_text("".join(f"{float(s)!r}\n" for s in scores))


def read_scores(path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    try:
        return np.array([float(v) for v in lines], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric score line") from exc


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        raw = arr.astype(dtype).tobytes()
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = canonical_json({**header, "arrays": entries}).encode()
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(data) < 16 or data[:8] != CONTAINER_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint container")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    base = 16 + hlen
    arrays = {}
    for e in header.pop("arrays", []):
        start = base + e["offset"]
        stop = start + e["nbytes"]
        if stop > len(data):
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(data[start:stop], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return header, arrays


def format_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def write_tsv(path, columns, rows) -> None:
    lines = ["\t".join(columns)]
    for row in rows:
        if isinstance(row, dict):
            row = [row[c] for c in columns]
        lines.append("\t".join(format_value(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tsv(path) -> list[dict[str, str]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DataError(f"{path}: empty table")
    cols = lines[0].split("\t")
    return [dict(zip(cols, ln.split("\t"))) for ln in lines[1:] if ln]
