"""Binary container format shared by checkpoints, sequences, and grid exports.

Layout (all integers little-endian):

    bytes 0..7    magic b"ADSCBIN1"
    bytes 8..15   uint64 header length in bytes
    header        UTF-8 JSON:
                    {"format_version": 1,
                     "kind": "<schema name>",
                     "meta": {...},
                     "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload       raw array bytes, C order, at header-relative offsets

Array dtypes are restricted to little-endian float64 ("<f8"), int64 ("<i8")
and uint8 ("|u1") so third-party readers stay trivial. Loading validates the
magic, the version, and that the file is long enough for every declared
array; anything off is rejected with a diagnostic rather than half-read.
"""

import json
import os

import numpy as np

MAGIC = b"ADSCBIN1"
FORMAT_VERSION = 1
_ALLOWED_DTYPES = {"<f8", "<i8", "|u1"}


def _canonical_dtype(arr):
    if arr.dtype == np.float64:
        return "<f8", arr.astype("<f8", copy=False)
    if arr.dtype in (np.int64, np.int32, np.intp):
        return "<i8", arr.astype("<i8", copy=False)
    if arr.dtype in (np.uint8, np.bool_):
        return "|u1", arr.astype("|u1", copy=False)
    raise ValueError(f"container: unsupported dtype {arr.dtype}; use f8/i8/u1")


def save_container(path, arrays, kind, meta=None):
    """Write named arrays plus a JSON header; see module docstring for layout."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype, arr = _canonical_dtype(arr)
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": dtype,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": str(kind),
        "meta": meta or {},
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def load_container(path, expect_kind=None):
    """Read a container back as (meta, {name: array}). Rejects corrupt files."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"container: {path} is not an adaptivescan container")
    header_len = int.from_bytes(blob[len(MAGIC): len(MAGIC) + 8], "little")
    body_start = len(MAGIC) + 8
    if len(blob) < body_start + header_len:
        raise ValueError(f"container: {path} truncated inside header")
    try:
        header = json.loads(blob[body_start: body_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"container: {path} has an unreadable header: {exc}")
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"container: {path} format_version {header.get('format_version')} "
            f"!= supported {FORMAT_VERSION}")
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise ValueError(
            f"container: {path} holds kind '{header.get('kind')}', expected '{expect_kind}'")

    payload_start = body_start + header_len
    arrays = {}
    for entry in header["arrays"]:
        dtype = entry["dtype"]
        if dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"container: {path} declares unsupported dtype {dtype}")
        start = payload_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise ValueError(f"container: {path} truncated inside array '{entry['name']}'")
        arr = np.frombuffer(blob[start:end], dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()  # own the memory, keep tensors writable
    return header.get("meta", {}), arrays


def save_checkpoint(path, params, meta=None):
    """Persist named float64 parameter arrays (a flat name -> array list)."""
    arrays = {}
    for name, value in params.items():
        data = value.data if hasattr(value, "data") else value
        arrays[name] = np.asarray(data, dtype=np.float64)
    save_container(path, arrays, kind="checkpoint", meta=meta)


def load_checkpoint(path):
    """Load a checkpoint as (meta, {name: float64 array})."""
    return load_container(path, expect_kind="checkpoint")
