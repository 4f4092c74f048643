"""File formats and dataset containers.

A .grid file is one JSON header line followed by a newline and the raw
little-endian IEEE-754 payload, row-major with axis 0 slowest; vector
fields store their d components interleaved per voxel.  The format is
deliberately minimal so round trips are bit-exact and headers stay
greppable.

Landmarks travel as plain CSV (header ``id,x0,...,x{d-1}``); reports are
pretty-printed JSON with sorted keys, so identical runs produce
byte-identical files apart from the timestamp field.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GridFileError
from .grid import GridDesc, LandmarkSet, MaskImage, ScalarImage, VectorField

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_KINDS = ("scalar", "vector", "mask")


def _kind_of(obj) -> str:
    if isinstance(obj, MaskImage):
        return "mask"
    if isinstance(obj, VectorField):
        return "vector"
    if isinstance(obj, ScalarImage):
        return "scalar"
    raise GridFileError(f"cannot serialize {type(obj).__name__}", code="bad-header-field")


def save_grid(obj, path, dtype: str = "f64") -> None:
    """Write a field to ``path``; dtype 'f32' halves the file at 2^-24
    relative rounding cost."""
    if dtype not in _DTYPES:
        raise GridFileError(f"dtype must be 'f32' or 'f64', got {dtype!r}",
                            code="bad-header-field")
    kind = _kind_of(obj)
    grid = obj.grid
    header = {
        "dim": grid.dim,
        "sizes": list(grid.sizes),
        "spacing": list(grid.spacing),
        "dtype": dtype,
        "kind": kind,
    }
    data = obj.data
    if kind == "vector":
        data = np.moveaxis(data, 0, -1)  # interleave components per voxel
    payload = np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii"))
        fh.write(b"\n")
        fh.write(payload)


def _parse_header(line: bytes, path) -> dict:
    try:
        header = json.loads(line.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GridFileError(f"{path}: unparseable header: {exc}",
                            code="malformed-header") from exc
    if not isinstance(header, dict):
        raise GridFileError(f"{path}: header is not a JSON object",
                            code="malformed-header")
    return header


def _header_field(header: dict, key: str, path):
    if key not in header:
        raise GridFileError(f"{path}: header misses {key!r}", code="bad-header-field")
    return header[key]


def load_grid(path) -> ScalarImage | VectorField | MaskImage:
    """Read a .grid file back into its typed container.

    f32 payloads are widened to f64 in memory.  Distinct error codes:
    malformed-header, bad-header-field, length-mismatch, mask-range.
    """
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise GridFileError(f"{path}: no header line", code="malformed-header")
    header = _parse_header(raw[:nl], path)
    payload = raw[nl + 1:]

    dim = _header_field(header, "dim", path)
    sizes = _header_field(header, "sizes", path)
    spacing = _header_field(header, "spacing", path)
    dtype = _header_field(header, "dtype", path)
    kind = _header_field(header, "kind", path)
    if dtype not in _DTYPES:
        raise GridFileError(f"{path}: unknown dtype {dtype!r}", code="bad-header-field")
    if kind not in _KINDS:
        raise GridFileError(f"{path}: unknown kind {kind!r}", code="bad-header-field")
    if (
        not isinstance(dim, int)
        or not isinstance(sizes, list)
        or not isinstance(spacing, list)
        or len(sizes) != dim
        or len(spacing) != dim
        or not all(isinstance(n, int) and n > 0 for n in sizes)
        or not all(isinstance(s, (int, float)) and s > 0 for s in spacing)
    ):
        raise GridFileError(f"{path}: inconsistent dim/sizes/spacing",
                            code="bad-header-field")
    try:
        grid = GridDesc(tuple(sizes), tuple(float(s) for s in spacing))
    except ValueError as exc:
        raise GridFileError(f"{path}: {exc}", code="bad-header-field") from exc

    ncomp = dim if kind == "vector" else 1
    itemsize = _DTYPES[dtype].itemsize
    expect = itemsize * ncomp * grid.voxel_count
    if len(payload) != expect:
        raise GridFileError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expect}",
            code="length-mismatch",
        )
    flat = np.frombuffer(payload, dtype=_DTYPES[dtype]).astype(np.float64)
    if kind == "vector":
        data = np.moveaxis(flat.reshape(grid.sizes + (dim,)), -1, 0)
        return VectorField(grid, data)
    data = flat.reshape(grid.sizes)
    if kind == "mask":
        bad = (data < 0.0) | (data > 1.0)
        if bad.any():
            raise GridFileError(
                f"{path}: mask value {data.reshape(-1)[np.argmax(bad)]!r} outside "
                f"[0, 1] at flat index {int(np.argmax(bad))}",
                code="mask-range",
            )
        return MaskImage(grid, data)
    return ScalarImage(grid, data)


def save_landmarks(points: LandmarkSet, path) -> None:
    d = points.points.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"x{j}" for j in range(d)])
        for i, row in enumerate(points.points):
            label = points.labels[i] if points.labels else str(i)
            writer.writerow([label] + [repr(float(c)) for c in row])


def load_landmarks(path) -> LandmarkSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise GridFileError(f"{path}: empty landmark file", code="csv-columns")
    ncol = len(rows[0])
    if ncol not in (3, 4) or rows[0][0] != "id":
        raise GridFileError(f"{path}: expected header id,x0,...,x{{d-1}}",
                            code="csv-columns")
    pts, labels = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != ncol:
            raise GridFileError(f"{path}: line {i} has {len(row)} columns, expected {ncol}",
                                code="csv-columns")
        labels.append(row[0])
        try:
            pts.append([float(c) for c in row[1:]])
        except ValueError as exc:
            raise GridFileError(f"{path}: line {i}: {exc}", code="csv-columns") from exc
    return LandmarkSet(np.asarray(pts, dtype=np.float64).reshape(len(pts), ncol - 1),
                       tuple(labels))


def save_report(report: dict, path) -> None:
    """Pretty-printed JSON with sorted keys: stable bytes for stable input."""
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# dataset layout: one directory per pair
# ---------------------------------------------------------------------------

_FILES = {
    "source": "source.grid",
    "target": "target.grid",
    "mask_source": "mask_source.grid",
    "mask_target": "mask_target.grid",
    "landmarks_source": "landmarks_source.csv",
    "landmarks_target": "landmarks_target.csv",
    "truth_v0": "truth_v0.grid",
}


@dataclass(frozen=True, eq=False)
class ImagePair:
    """One registration problem: images plus whatever ground truth exists."""

    name: str
    source: ScalarImage
    target: ScalarImage
    mask_source: MaskImage | None = None
    mask_target: MaskImage | None = None
    landmarks_source: LandmarkSet | None = None
    landmarks_target: LandmarkSet | None = None
    truth_v0: VectorField | None = None

    @property
    def grid(self) -> GridDesc:
        return self.source.grid

    @property
    def has_masks(self) -> bool:
        return self.mask_source is not None and self.mask_target is not None

    @property
    def has_landmarks(self) -> bool:
        return self.landmarks_source is not None and self.landmarks_target is not None


def save_pair(pair: ImagePair, directory, dtype: str = "f64") -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save_grid(pair.source, out / _FILES["source"], dtype)
    save_grid(pair.target, out / _FILES["target"], dtype)
    if pair.mask_source is not None:
        save_grid(pair.mask_source, out / _FILES["mask_source"], dtype)
    if pair.mask_target is not None:
        save_grid(pair.mask_target, out / _FILES["mask_target"], dtype)
    if pair.landmarks_source is not None:
        save_landmarks(pair.landmarks_source, out / _FILES["landmarks_source"])
    if pair.landmarks_target is not None:
        save_landmarks(pair.landmarks_target, out / _FILES["landmarks_target"])
    if pair.truth_v0 is not None:
        save_grid(pair.truth_v0, out / _FILES["truth_v0"], dtype)


def load_pair(directory) -> ImagePair:
    src = Path(directory)
    if not (src / _FILES["source"]).exists() or not (src / _FILES["target"]).exists():
        raise GridFileError(f"{src}: pair directory needs source.grid and target.grid",
                            code="bad-header-field")

    def opt(key, loader):
        p = src / _FILES[key]
        return loader(p) if p.exists() else None

    return ImagePair(
        name=src.name,
        source=load_grid(src / _FILES["source"]),
        target=load_grid(src / _FILES["target"]),
        mask_source=opt("mask_source", load_grid),
        mask_target=opt("mask_target", load_grid),
        landmarks_source=opt("landmarks_source", load_landmarks),
        landmarks_target=opt("landmarks_target", load_landmarks),
        truth_v0=opt("truth_v0", load_grid),
    )
