"""On-disk formats.

Volumes are raw little-endian arrays in C order (last axis fastest) with a JSON sidecar of the same stem::

    {"dims": [nx, ny, nz, ...], "dtype": "<f4", "spacing": 1.0, "frame": "native"}

Path dumps are binary: ``uint32`` path count, then per path a ``uint32``
length ``L`` followed by ``L x 3`` little-endian ``float32`` positions.
"""

import hashlib
import json
import re
from pathlib import Path

import numpy as np

from .domain import Mask, PeakField
from .errors import VolumeFormatError

DTYPES = {"<f4", "<f8", "|u1", "<i4"}


def _stem(path):
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".raw", ".json") else p


def write_volume(path, values, spacing=1.0, frame="native", dtype="<f4"):
    """Write ``values`` to ``<stem>.raw`` plus ``<stem>.json``; returns the raw path."""
    if dtype not in DTYPES:
        raise VolumeFormatError(f"unsupported dtype {dtype!r}")
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(np.asarray(values).astype(dtype))
    raw = stem.with_suffix(".raw")
    raw.write_bytes(arr.tobytes())
    meta = {"dims": list(arr.shape), "dtype": dtype, "spacing": float(spacing), "frame": frame}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return raw


def read_volume(path):
    """Return ``(array, meta)`` for a volume written by :func:`write_volume`."""
    stem = _stem(path)
    try:
        meta = json.loads(stem.with_suffix(".json").read_text())
        data = stem.with_suffix(".raw").read_bytes()
    except FileNotFoundError as exc:
        raise VolumeFormatError(f"missing volume file: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"malformed sidecar for {stem}: {exc}") from exc
    for key in ("dims", "dtype"):
        if key not in meta:
            raise VolumeFormatError(f"sidecar of {stem} lacks {key!r}")
    if meta["dtype"] not in DTYPES:
        raise VolumeFormatError(f"unsupported dtype {meta['dtype']!r}")
    dt = np.dtype(meta["dtype"])
    dims = tuple(int(d) for d in meta["dims"])
    if len(data) != int(np.prod(dims)) * dt.itemsize:
        raise VolumeFormatError(f"{stem}.raw holds {len(data)} bytes, sidecar implies {np.prod(dims) * dt.itemsize}")
    return np.frombuffer(data, dtype=dt).reshape(dims).copy(), meta


def write_mask(path, mask):
    return write_volume(path, mask.values, mask.voxel_size, dtype="|u1")


def read_mask(path):
    v, meta = read_volume(path)
    if v.ndim != 3:
        raise VolumeFormatError("a mask must be three-dimensional")
    return Mask(v, float(meta.get("spacing", 1.0)))


def write_peaks(path, peaks):
    # Double precision keeps the unit-norm check of PeakField exact on reload.
    return write_volume(path, peaks.vectors, peaks.voxel_size, dtype="<f8")


def read_peaks(path):
    v, meta = read_volume(path)
    if v.ndim != 5 or v.shape[-1] != 3:
        raise VolumeFormatError("peak volumes must have shape (nx, ny, nz, K, 3)")
    return PeakField(v, float(meta.get("spacing", 1.0)), max(4, v.shape[3]))


def write_pgm(path, image, vmin=None, vmax=None):
    """8-bit binary PGM of a 2-D array, linearly scaled to ``[vmin, vmax]``."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise VolumeFormatError("PGM export needs a 2-D slice")
    lo = np.nanmin(img) if vmin is None else vmin
    hi = np.nanmax(img) if vmax is None else vmax
    scaled = np.zeros(img.shape) if hi <= lo else (img - lo) / (hi - lo)
    pix = np.round(255 * np.clip(np.nan_to_num(scaled), 0, 1)).astype(np.uint8)
    # Rows of the image are y, columns x.
    pix = pix.T[::-1]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode())
        fh.write(pix.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    # exactly one whitespace byte separates maxval from the pixels
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise VolumeFormatError("not a binary PGM file")
    w, h = int(m.group(1)), int(m.group(2))
    body = data[m.end():m.end() + w * h]
    if len(body) != w * h:
        raise VolumeFormatError("truncated PGM file")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    return pix[::-1].T


def write_paths(path, paths):
    with open(path, "wb") as fh:
        fh.write(np.uint32(len(paths)).astype("<u4").tobytes())
        for p in paths:
            p = np.asarray(p, dtype="<f4").reshape(-1, 3)
            fh.write(np.uint32(len(p)).astype("<u4").tobytes())
            fh.write(p.tobytes())


def read_paths(path):
    data = Path(path).read_bytes()
    count = int(np.frombuffer(data[:4], "<u4")[0])
    off, out = 4, []
    for _ in range(count):
        L = int(np.frombuffer(data[off:off + 4], "<u4")[0])
        off += 4
        out.append(np.frombuffer(data[off:off + 12 * L], "<f4").reshape(L, 3).copy())
        off += 12 * L
    if off != len(data):
        raise VolumeFormatError("trailing bytes in path dump")
    return out


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
