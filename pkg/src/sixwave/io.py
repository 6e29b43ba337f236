"""On-disk formats for time tags, camera frames, maps and result tables.

Time tags (binary, little-endian)::

    magic   4s   b"TTAG"
    version u16
    channel u16
    dt      f64  ns
    duration f64 ns
    count   u64
    tags    count x u64

Time tags (CSV): ``#key=value`` header lines (format, version, channel,
dt, duration) followed by one integer tag per line.

Frames: ``#key=value`` header lines (format, version, n_frames,
calibration, bounds) then ``frame_id,channel,kx,ky`` records.  Floats are
written with ``repr`` so a write/read round trip is exact.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .biphoton import PatternMap
from .synthesis import Channel, PhotonFrameSet, TimeTagStream

TIMETAG_MAGIC = b"TTAG"
TIMETAG_VERSION = 1
FRAMES_VERSION = 1
_HEADER = struct.Struct("<4sHHddQ")


class FormatError(ValueError):
    """A file is not in the expected format or version."""


def _read_header_lines(fh, fmt: str, version: int) -> dict:
    head = {}
    pos = fh.tell()
    line = fh.readline()
    while line.startswith("#"):
        key, _, value = line[1:].strip().partition("=")
        head[key.strip()] = value.strip()
        pos = fh.tell()
        line = fh.readline()
    fh.seek(pos)
    if head.get("format") != fmt:
        raise FormatError(f"not a {fmt} file (format={head.get('format')!r})")
    try:
        v = int(head.get("version", ""))
    except ValueError as exc:
        raise FormatError("missing format version") from exc
    if v != version:
        raise FormatError(f"{fmt} format version {v} is not supported (expected {version})")
    return head


# -- time tags ---------------------------------------------------------------

def write_timetags(stream: TimeTagStream, path, fmt: str = "binary") -> Path:
    path = Path(path)
    if fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(TIMETAG_MAGIC, TIMETAG_VERSION, int(stream.channel),
                                  float(stream.dt), float(stream.duration), len(stream)))
            fh.write(stream.tags.astype("<u8").tobytes())
    elif fmt == "csv":
        with open(path, "w", newline="\n") as fh:
            fh.write(f"#format=timetags\n#version={TIMETAG_VERSION}\n"
                     f"#channel={stream.channel.name.lower()}\n"
                     f"#dt={stream.dt!r}\n#duration={stream.duration!r}\n")
            fh.write("\n".join(map(str, stream.tags.tolist())))
            if len(stream):
                fh.write("\n")
    else:
        raise ValueError(f"unknown time-tag format {fmt!r}")
    return path


def read_timetags(path) -> TimeTagStream:
    """Read a time-tag file in either format (detected from its first bytes)."""
    path = Path(path)
    with open(path, "rb") as fh:
        start = fh.read(4)
    if start == TIMETAG_MAGIC:
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise FormatError("truncated time-tag header")
        _, version, channel, dt, duration, count = _HEADER.unpack_from(raw)
        if version != TIMETAG_VERSION:
            raise FormatError(f"time-tag format version {version} is not supported "
                              f"(expected {TIMETAG_VERSION})")
        body = raw[_HEADER.size:]
        if len(body) != 8 * count:
            raise FormatError(f"header announces {count} tags, file holds {len(body) // 8}")
        tags = np.frombuffer(body, dtype="<u8").astype(np.int64)
    elif start.startswith(b"#"):
        with open(path, "r") as fh:
            head = _read_header_lines(fh, "timetags", TIMETAG_VERSION)
            try:
                tags = np.array([int(v) for v in fh.read().split()], dtype=np.int64)
            except ValueError as exc:
                raise FormatError(f"bad time-tag record: {exc}") from exc
        try:
            channel = Channel[head["channel"].upper()]
            dt, duration = float(head["dt"]), float(head["duration"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"incomplete time-tag header: {exc}") from exc
    else:
        raise FormatError(f"{path} is not a time-tag file")
    try:
        return TimeTagStream(Channel(channel), tags, dt, duration)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


# -- frames ------------------------------------------------------------------

def write_frames(frames: PhotonFrameSet, path) -> Path:
    path = Path(path)
    (xlo, xhi), (ylo, yhi) = frames.bounds
    with open(path, "w", newline="\n") as fh:
        fh.write(f"#format=frames\n#version={FRAMES_VERSION}\n#n_frames={frames.n_frames}\n"
                 f"#calibration={frames.calibration!r}\n"
                 f"#bounds={xlo!r},{xhi!r},{ylo!r},{yhi!r}\n")
        fh.writelines(f"{f},{c},{x!r},{y!r}\n" for f, c, x, y in
                      zip(frames.frame.tolist(), frames.channel.tolist(),
                          frames.kx.tolist(), frames.ky.tolist()))
    return path


def read_frames(path) -> PhotonFrameSet:
    path = Path(path)
    with open(path, "r") as fh:
        head = _read_header_lines(fh, "frames", FRAMES_VERSION)
        rows = list(csv.reader(fh))
    try:
        n_frames = int(head["n_frames"])
        cal = float(head["calibration"])
        b = [float(v) for v in head["bounds"].split(",")]
        bounds = ((b[0], b[1]), (b[2], b[3]))
        frame = np.array([int(r[0]) for r in rows], dtype=np.int64)
        channel = np.array([int(r[1]) for r in rows], dtype=np.int8)
        kx = np.array([float(r[2]) for r in rows])
        ky = np.array([float(r[3]) for r in rows])
        return PhotonFrameSet(n_frames, frame, channel, kx, ky, cal, bounds)
    except (KeyError, IndexError, ValueError) as exc:
        raise FormatError(f"bad frames file {path}: {exc}") from exc


# -- maps and tables ---------------------------------------------------------

def write_pattern(pattern: PatternMap, stem) -> list[Path]:
    """``stem.txt`` matrix (rows = kx), ``stem.pgm`` 16-bit graymap and ``stem.meta.json``."""
    stem = Path(stem)
    txt = stem.with_suffix(".txt")
    np.savetxt(txt, pattern.values, fmt="%.10e")
    pgm = stem.with_suffix(".pgm")
    write_pgm(pattern.values, pgm)
    meta = stem.with_suffix(".meta.json")
    info = {"kx": [float(pattern.kx[0]), float(pattern.kx[-1]), len(pattern.kx)],
            "ky": [float(pattern.ky[0]), float(pattern.ky[-1]), len(pattern.ky)],
            "layout": "values[i, j] at (kx[i], ky[j]); graymap rows run over ky descending"}
    info.update({k: v for k, v in pattern.meta.items() if _jsonable(v)})
    meta.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return [txt, pgm, meta]


def read_pattern(stem) -> PatternMap:
    stem = Path(stem)
    values = np.loadtxt(stem.with_suffix(".txt"), ndmin=2)
    info = json.loads(stem.with_suffix(".meta.json").read_text())
    kx = np.linspace(*info["kx"][:2], info["kx"][2])
    ky = np.linspace(*info["ky"][:2], info["ky"][2])
    return PatternMap(values, kx, ky, info)


def write_pgm(values: np.ndarray, path) -> Path:
    v = np.nan_to_num(np.asarray(values, dtype=float))
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    img = np.rint(scaled * 65535).astype(">u2").T[::-1]  # image rows: ky from top
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode())
        fh.write(img.tobytes())
    return path


def write_table(path, header: list[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return path


def _jsonable(v) -> bool:
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False
