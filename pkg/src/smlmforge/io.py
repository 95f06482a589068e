"""
File formats: SMLF frame stacks, localization CSVs, PSF JSON and output maps.

SMLF v1 layout (little endian)::

    b"SMLF"  u32 version=1  u32 width  u32 height  u32 n_frames  f64 pixel_size_nm
    f32 pixels, row-major within a frame, frames consecutive
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

from .losses import CHANNELS, OutputMaps
from .psf import PARAM_TYPES, PixelMap3D, PsfModel
from .simulator import FrameStack
from .table import LOC_DTYPE, empty_locs, empty_truth

MAGIC = b"SMLF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIId")
_MAX_PAYLOAD = 1 << 40  # bytes; anything larger is treated as a corrupt header

LOC_HEADER = ("frame", "x_nm", "y_nm", "z_nm", "photons", "prob", "sig_x", "sig_y", "sig_z")
TRUTH_HEADER = ("frame", "id", "x_nm", "y_nm", "z_nm", "photons")
_COLUMN_FIELDS = {"x_nm": "x", "y_nm": "y", "z_nm": "z"}


class FormatError(ValueError):
    """A malformed input file. ``code`` is a short machine-readable tag."""

    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


# ---------------------------------------------------------------- SMLF


def write_smlf(stack, path):
    frames = np.asarray(stack.frames, dtype="<f4")
    n, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, w, h, n, float(stack.pixel_size)))
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_smlf(path):
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("bad_magic", f"{path} is not an SMLF file")
    if len(raw) < _HEADER.size:
        raise FormatError("truncated_payload", f"{path}: header is cut short")
    _, version, w, h, n, pixel_size = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError("bad_version", f"{path}: unsupported SMLF version {version}")
    n_bytes = 4 * w * h * n
    if n_bytes > _MAX_PAYLOAD or (n > 0 and (w == 0 or h == 0)):
        raise FormatError("dimension_overflow", f"{path}: implausible dimensions {w}x{h}x{n}")
    payload = len(raw) - _HEADER.size
    if payload < n_bytes:
        raise FormatError("truncated_payload", f"{path}: expected {n_bytes} pixel bytes, found {payload}")
    if payload > n_bytes:
        raise FormatError("trailing_data", f"{path}: {payload - n_bytes} bytes after the last frame")
    if not (math.isfinite(pixel_size) and pixel_size > 0):
        raise FormatError("bad_header", f"{path}: pixel size {pixel_size} is not positive")
    frames = np.frombuffer(raw, dtype="<f4", count=w * h * n, offset=_HEADER.size)
    return FrameStack(frames.reshape(n, h, w).astype(np.float32), pixel_size=pixel_size)


# ---------------------------------------------------------------- tables


def _fmt(value):
    return repr(float(value))


def write_table(table, path):
    """Localization CSV with shortest round-trip decimals."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOC_HEADER)
        for row in table:
            w.writerow([int(row["frame"])] + [_fmt(row[f]) for f, _ in LOC_DTYPE[1:]])


def write_truth(truth, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        for row in truth:
            w.writerow([int(row["frame"]), int(row["id"])] + [_fmt(row[f]) for f in ("x", "y", "z", "photons")])


def _read_rows(path, required):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError("missing_column", f"{path}: empty file, no header") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise FormatError("missing_column", f"{path}: header lacks {', '.join(missing)}")
        rows = [r for r in reader if r]
    return header, rows


def _column(path, header, rows, name, kind):
    j = header.index(name)
    out = np.empty(len(rows), dtype=kind)
    for i, r in enumerate(rows):
        cell = r[j].strip() if j < len(r) else ""
        try:
            out[i] = int(cell) if kind is np.int64 else float(cell)
        except ValueError:
            # row numbers count the header as line 1
            raise FormatError("non_numeric", f"{path}: row {i + 2}, column {name}: {cell!r}") from None
    return out


def read_table(path):
    """Read a localization CSV.

    A 6-column ground-truth CSV (``frame,id,x_nm,y_nm,z_nm,photons``) is
    accepted as well; its rows get ``prob = 1`` and zero sigmas.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
    names = [h.strip() for h in first.strip().split(",")]
    truth_like = "prob" not in names and "id" in names
    header, rows = _read_rows(path, TRUTH_HEADER if truth_like else LOC_HEADER)
    out = empty_locs(len(rows))
    out["frame"] = _column(path, header, rows, "frame", np.int64)
    for col in ("x_nm", "y_nm", "z_nm", "photons"):
        out[_COLUMN_FIELDS.get(col, col)] = _column(path, header, rows, col, np.float64)
    if truth_like:
        out["prob"] = 1.0
    else:
        for col in ("prob", "sig_x", "sig_y", "sig_z"):
            out[col] = _column(path, header, rows, col, np.float64)
    return out


def read_truth(path):
    header, rows = _read_rows(path, TRUTH_HEADER)
    out = empty_truth(len(rows))
    out["frame"] = _column(path, header, rows, "frame", np.int64)
    out["id"] = _column(path, header, rows, "id", np.int64)
    for col in ("x_nm", "y_nm", "z_nm", "photons"):
        out[_COLUMN_FIELDS.get(col, col)] = _column(path, header, rows, col, np.float64)
    return out


# ---------------------------------------------------------------- PSF JSON


def psf_to_dict(psf, data_file=None):
    params = psf.parametric
    doc = {"kind": params.kind, "params": {n: float(getattr(params, n)) for n in params.names}}
    if psf.pixmap is not None:
        nz, ny, nx = psf.pixmap.shape
        doc["pixmap"] = {
            "dims": [nx, ny, nz],
            "pixel_size_xy": psf.pixmap.pixel_size_xy,
            "z_spacing": psf.pixmap.z_spacing,
            "origin": list(psf.pixmap.origin),
            "data_file": str(data_file),
        }
    return doc


def write_psf(psf, path):
    """PSF JSON; a pixel map goes to ``<stem>.pixmap.f32`` next to it (x fastest)."""
    path = Path(path)
    data_file = None
    if psf.pixmap is not None:
        data_file = path.with_suffix(".pixmap.f32")
        data_file.write_bytes(np.asarray(psf.pixmap.values, dtype="<f4").tobytes())
        data_file = data_file.name
    path.write_text(json.dumps(psf_to_dict(psf, data_file), indent=2) + "\n", encoding="utf-8")


def psf_from_dict(doc, base_dir="."):
    try:
        kind = doc["kind"]
        cls = PARAM_TYPES[kind]
    except (KeyError, TypeError):
        raise FormatError("bad_psf", f"unknown or missing PSF kind in {doc!r:.80}") from None
    params = doc.get("params", {})
    unknown = set(params) - set(cls.names)
    missing = set(cls.names) - set(params)
    if unknown or missing:
        raise FormatError("bad_psf", f"{kind} PSF params: missing {sorted(missing)}, unknown {sorted(unknown)}")
    parametric = cls(**{n: float(params[n]) for n in cls.names})
    pix = doc.get("pixmap")
    if pix is None:
        return PsfModel(parametric)
    nx, ny, nz = (int(v) for v in pix["dims"])
    raw = (Path(base_dir) / pix["data_file"]).read_bytes()
    if len(raw) != 4 * nx * ny * nz:
        raise FormatError("truncated_payload", f"pixel map {pix['data_file']}: expected {4 * nx * ny * nz} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4").reshape(nz, ny, nx).astype(float)
    pixmap = PixelMap3D(values, float(pix["pixel_size_xy"]), float(pix["z_spacing"]), tuple(pix.get("origin", (0.0, 0.0, 0.0))))
    return PsfModel(parametric, pixmap)


def read_psf(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError("bad_json", f"{path}: {exc}") from None
    return psf_from_dict(doc, path.parent)


# ---------------------------------------------------------------- output maps


def write_maps(maps_per_frame, path):
    """Output maps as an SMLF stack of planes (frame-major, channels in
    ``CHANNELS`` order) plus a ``<path>.json`` sidecar naming the channels."""
    maps_per_frame = list(maps_per_frame)
    if not maps_per_frame:
        raise ValueError("need at least one frame of maps")
    planes = np.stack([getattr(m, c) for m in maps_per_frame for c in CHANNELS])
    ps = maps_per_frame[0].pixel_size
    write_smlf(FrameStack(planes.astype(np.float32), pixel_size=ps), path)
    sidecar = {"channels": list(CHANNELS), "n_frames": len(maps_per_frame), "pixel_size": ps, "data_file": Path(path).name}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")


def read_maps(path):
    sidecar = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    channels = sidecar["channels"]
    if sorted(channels) != sorted(CHANNELS):
        raise FormatError("bad_sidecar", f"channels {channels} do not match {list(CHANNELS)}")
    stack = read_smlf(path)
    nc = len(channels)
    if stack.n_frames != nc * sidecar["n_frames"]:
        raise FormatError("bad_sidecar", f"{stack.n_frames} planes for {sidecar['n_frames']} frames of {nc} channels")
    planes = stack.frames.astype(float)
    out = []
    for t in range(sidecar["n_frames"]):
        block = planes[t * nc:(t + 1) * nc]
        out.append(OutputMaps(pixel_size=float(sidecar["pixel_size"]), **dict(zip(channels, block))))
    return out
