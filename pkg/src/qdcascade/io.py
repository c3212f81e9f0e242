"""
File formats.

Tag files (``.cltg``), little-endian::

    header  16 bytes: b"CLTG", u16 version, u16 channel_count, u64 duration_ps
    record  16 bytes: u64 t_ps, u16 channel, 6 reserved zero bytes

A text fallback with one ``channel<TAB>t_ps`` per line is accepted on read;
``#`` starts a comment, and ``# duration_ps=N`` / ``# channel_count=N``
set the stream header. Tag metadata lives in a ``<path>.meta`` sidecar.

Tables (histograms, fit results, scans) are text: ``# key=value`` header
lines followed by a CSV block with a column-name row.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct

import numpy as np

from .core import Histogram, TagStream, first_unsorted_index
from .errors import FormatError, IntegrityError

MAGIC = b"CLTG"
VERSION = 1
_HEADER = struct.Struct("<4sHHQ")
RECORD_DTYPE = np.dtype([("t", "<u8"), ("channel", "<u2"), ("reserved", "V6")])
assert _HEADER.size == 16 and RECORD_DTYPE.itemsize == 16


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- tags -------------------------------------------------------------------

def write_tags(path, stream: TagStream, fmt="binary", metadata=None):
    """Write a stream; ``metadata`` (dict) goes to the ``.meta`` sidecar."""
    if fmt == "binary":
        rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
        rec["t"] = stream.t
        rec["channel"] = stream.channel
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, stream.channel_count, stream.duration))
            f.write(rec.tobytes())
    elif fmt == "text":
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"# duration_ps={stream.duration}\n# channel_count={stream.channel_count}\n")
            for c, t in zip(stream.channel.tolist(), stream.t.tolist()):
                f.write(f"{c}\t{t}\n")
    else:
        raise ValueError(f"unknown tag format {fmt!r}")
    if metadata is not None:
        write_meta(str(path) + ".meta", metadata)


def _check_sorted(t, ch):
    bad = first_unsorted_index(t, ch)
    if bad >= 0:
        raise IntegrityError(f"tags not sorted at index {bad}", index=bad)


def _read_binary(path, data):
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the 16-byte header")
    magic, version, nch, duration = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = len(data) - _HEADER.size
    n_full, rest = divmod(body, RECORD_DTYPE.itemsize)
    if rest:
        off = _HEADER.size + n_full * RECORD_DTYPE.itemsize
        raise IntegrityError(f"{path}: truncated record at byte offset {off}", index=n_full, offset=off)
    rec = np.frombuffer(data, dtype=RECORD_DTYPE, count=n_full, offset=_HEADER.size)
    if n_full and np.any(np.frombuffer(rec["reserved"].tobytes(), dtype=np.uint8)):
        raise IntegrityError(f"{path}: non-zero reserved bytes")
    if n_full and int(rec["t"].max()) > np.iinfo(np.int64).max:
        raise IntegrityError(f"{path}: timestamp overflow")
    t = rec["t"].astype(np.int64)
    ch = rec["channel"].astype(np.uint16)
    _check_sorted(t, ch)
    return TagStream(t, ch, duration, nch)


def _read_text(path, text):
    duration = None
    nch = None
    ch, ts = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = (s.strip() for s in body.split("=", 1))
                if k == "duration_ps":
                    duration = int(v)
                elif k == "channel_count":
                    nch = int(v)
            continue
        parts = line.split("#", 1)[0].split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'channel<TAB>t_ps'")
        try:
            ch.append(int(parts[0]))
            ts.append(int(parts[1]))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    t = np.array(ts, dtype=np.int64)
    c = np.array(ch, dtype=np.uint16)
    _check_sorted(t, c)
    if duration is None:
        duration = int(t.max()) if t.size else 0
    if nch is None:
        nch = max(2, int(c.max()) + 1 if c.size else 2)
    return TagStream(t, c, duration, nch)


def read_tags(path) -> TagStream:
    """Read a binary ``.cltg`` file or its text twin."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] == MAGIC:
        return _read_binary(path, data)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: bad magic {data[:4]!r}") from None
    if text and not all(ch.isprintable() or ch in "\t\r\n" for ch in text[:4096]):
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    return _read_text(path, text)


def is_tag_file(path):
    with open(path, "rb") as f:
        return f.read(4) == MAGIC


# --- key=value metadata -----------------------------------------------------

def _escape(value):
    return str(value).replace("\\", "\\\\").replace("\n", "\\n")


def _unescape(value):
    out, i = [], 0
    while i < len(value):
        c = value[i]
        if c == "\\" and i + 1 < len(value):
            nxt = value[i + 1]
            out.append("\n" if nxt == "n" else nxt)
            i += 2
            continue
        out.append(c)
        i += 1
    return "".join(out)


def _meta_lines(meta):
    for k, v in meta.items():
        if "=" in k or "\n" in k:
            raise FormatError(f"invalid metadata key {k!r}")
        yield f"# {k}={_escape(v)}\n"


def write_meta(path, meta):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(_meta_lines(meta))


def read_meta(path):
    meta, _, _ = _read_table_text(path, require_columns=False)
    return meta


def _read_table_text(path, require_columns=True):
    meta = {}
    columns = None
    rows = []
    with open(path, encoding="utf-8") as f:
        for raw in f:
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line[1:].lstrip(" ")
                if "=" in body:
                    k, v = body.split("=", 1)
                    meta[k.strip()] = _unescape(v)
                continue
            if columns is None:
                columns = [c.strip() for c in line.split(",")]
                continue
            rows.append(line.split(","))
    if require_columns and columns is None:
        raise FormatError(f"{path}: missing column header row")
    return meta, columns, rows


# --- tables -----------------------------------------------------------------

def fmt_value(v):
    """Round-trip exact text for numbers; plain ``str`` otherwise."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, meta, columns, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(_meta_lines(meta))
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(fmt_value(v) for v in row) + "\n")


def read_table(path):
    """Return ``(metadata, columns, rows)``; cells are left as strings."""
    return _read_table_text(path)


def _float(s):
    s = s.strip()
    return float("nan") if s in ("", "nan", "None") else float(s)


def read_columns(path, *names):
    """Numeric columns of a table as float arrays."""
    meta, cols, rows = _read_table_text(path)
    out = []
    for name in names:
        if name not in cols:
            raise FormatError(f"{path}: missing column {name!r}")
        i = cols.index(name)
        out.append(np.array([_float(r[i]) for r in rows], dtype=float))
    return meta, out


# --- histograms -------------------------------------------------------------

_HIST_RESERVED = ("bin_width_ps", "tau_min_ps", "norm")


def write_histogram(path, hist: Histogram):
    meta = {"bin_width_ps": hist.bin_width, "tau_min_ps": hist.tau_min,
            "norm": "None" if hist.norm is None else repr(float(hist.norm))}
    for k, v in hist.metadata.items():
        meta[k] = v
    rows = zip(hist.centers.tolist(), hist.counts.tolist())
    write_table(path, meta, ["tau_center_ps", "count"], rows)


def read_histogram(path) -> Histogram:
    meta, cols, rows = _read_table_text(path)
    for key in ("bin_width_ps", "tau_min_ps"):
        if key not in meta:
            raise FormatError(f"{path}: missing mandatory header key {key!r}")
    if cols[:2] != ["tau_center_ps", "count"]:
        raise FormatError(f"{path}: expected columns tau_center_ps,count")
    bw = int(meta["bin_width_ps"])
    tau_min = int(meta["tau_min_ps"])
    counts = np.array([float(r[1]) for r in rows], dtype=np.float64)
    centers = np.array([float(r[0]) for r in rows], dtype=np.float64)
    expected = tau_min + bw * (np.arange(counts.size) + 0.5)
    if not np.allclose(centers, expected, rtol=0, atol=1e-6):
        raise FormatError(f"{path}: bin centers inconsistent with bin_width/tau_min")
    norm = meta.get("norm", "None")
    norm = None if norm in ("None", "") else float(norm)
    if norm is not None and not math.isfinite(norm):
        raise FormatError(f"{path}: invalid norm {norm}")
    extra = {k: v for k, v in meta.items() if k not in _HIST_RESERVED}
    return Histogram(bw, tau_min, counts, norm, extra)


def bundled_path(name):
    return os.path.join(os.path.dirname(__file__), "data", name)
