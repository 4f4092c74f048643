"""Grid geometry, field containers and the shared finite-difference /
interpolation primitives.

All fields live on a periodic voxel grid (a d-dimensional torus): every
differential operator wraps around the boundary and every interpolation
coordinate is taken modulo the grid sizes.  Arrays are stored row-major
with axis 0 slowest, one numpy array per field, always float64.

Containers are frozen dataclasses and are treated as immutable: no
operation in this package ever writes into the ``data`` array of one of
its inputs, so instances can be shared freely across workers.

The numerical kernels are written against torch tensors (CPU, float64)
so that the registration energy can be differentiated by autograd; the
public functions here are thin numpy-facing wrappers over those kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import GridMismatchError

_SPATIAL0 = 0  # component tensors carry spatial axes starting at 0


@dataclass(frozen=True)
class GridDesc:
    """Geometry of a periodic voxel grid.

    sizes   -- per-axis voxel counts, each >= 4; length 2 or 3
    spacing -- per-axis physical step (unitless, default 1.0)
    """

    sizes: tuple[int, ...]
    spacing: tuple[float, ...] = ()

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if len(sizes) not in (2, 3):
            raise ValueError(f"grid must be 2- or 3-dimensional, got {len(sizes)} axes")
        if any(n < 4 for n in sizes):
            raise ValueError(f"every grid axis needs at least 4 voxels, got {sizes}")
        spacing = self.spacing or tuple(1.0 for _ in sizes)
        spacing = tuple(float(s) for s in spacing)
        object.__setattr__(self, "spacing", spacing)
        if len(spacing) != len(sizes):
            raise ValueError("spacing must have one entry per axis")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")

    @property
    def dim(self) -> int:
        return len(self.sizes)

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.sizes))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))


def _as_field_array(data, shape, name: str) -> np.ndarray:
    # always copy: containers own their storage, callers keep theirs
    arr = np.array(data, dtype=np.float64, order="C")
    if arr.shape != shape:
        raise ValueError(f"{name} data must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class ScalarImage:
    """One real intensity per voxel."""

    grid: GridDesc
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "data", _as_field_array(self.data, self.grid.sizes, "ScalarImage")
        )


@dataclass(frozen=True, eq=False)
class VectorField:
    """d real components per voxel, stored component-major: shape (d, *sizes).

    Component j is the displacement / velocity along axis j in voxel
    units per unit time.
    """

    grid: GridDesc
    data: np.ndarray

    def __post_init__(self):
        shape = (self.grid.dim,) + self.grid.sizes
        object.__setattr__(
            self, "data", _as_field_array(self.data, shape, "VectorField")
        )


@dataclass(frozen=True, eq=False)
class MaskImage:
    """Soft mask with one value in [0, 1] per voxel."""

    grid: GridDesc
    data: np.ndarray

    def __post_init__(self):
        arr = _as_field_array(self.data, self.grid.sizes, "MaskImage")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            bad = int(np.argmax((arr < 0.0) | (arr > 1.0)))
            raise ValueError(f"MaskImage values must lie in [0, 1]; first offender at flat index {bad}")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True, eq=False)
class DeformationField:
    """A map psi(x) = x + u(x), u in voxel units."""

    grid: GridDesc
    u: VectorField

    def __post_init__(self):
        if self.u.grid != self.grid:
            raise GridMismatchError("displacement grid differs from stated grid")

    @classmethod
    def identity(cls, grid: GridDesc) -> "DeformationField":
        return cls(grid, VectorField(grid, np.zeros((grid.dim,) + grid.sizes)))


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Point coordinates in voxel units, interpreted modulo the grid sizes."""

    points: np.ndarray  # (n, d)
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] not in (2, 3):
            raise ValueError(f"points must be (n, d) with d in (2, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.labels:
            labels = tuple(str(s) for s in self.labels)
            if len(labels) != pts.shape[0]:
                raise ValueError("one label per point required")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.points.shape[0]


def require_same_grid(*fields) -> GridDesc:
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise GridMismatchError(f"grids differ: {grid} vs {f.grid}")
    return grid


# ---------------------------------------------------------------------------
# tensor kernels (torch, float64): shared by the public wrappers below and by
# the autograd path in optimize.grad_v0
# ---------------------------------------------------------------------------

def as_tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))


def to_array(t: torch.Tensor) -> np.ndarray:
    return t.detach().numpy().copy()


def central_diff_t(t: torch.Tensor, axis: int, h: float) -> torch.Tensor:
    """Periodic central difference along one spatial axis."""
    return (torch.roll(t, -1, axis) - torch.roll(t, 1, axis)) / (2.0 * h)


def gradient_t(img: torch.Tensor, spacing: Sequence[float]) -> torch.Tensor:
    return torch.stack(
        [central_diff_t(img, j, spacing[j]) for j in range(len(spacing))]
    )


def jacobian_t(vf: torch.Tensor, spacing: Sequence[float]) -> torch.Tensor:
    """Entry (i, j) is the central difference of component i along axis j."""
    d = vf.shape[0]
    rows = [
        torch.stack([central_diff_t(vf[i], j, spacing[j]) for j in range(d)])
        for i in range(d)
    ]
    return torch.stack(rows)


def divergence_t(vf: torch.Tensor, spacing: Sequence[float]) -> torch.Tensor:
    d = vf.shape[0]
    out = central_diff_t(vf[0], 0, spacing[0])
    for j in range(1, d):
        out = out + central_diff_t(vf[j], j, spacing[j])
    return out


def warp_t(img: torch.Tensor, u: torch.Tensor, sizes: Sequence[int]) -> torch.Tensor:
    """Multilinear interpolation of ``img`` at x + u(x), wrapped periodically.

    Differentiable with respect to both ``img`` and ``u`` (the cell
    assignment from floor() is treated as constant, so the map is
    piecewise-smooth with sub-gradients at cell boundaries).
    """
    d = len(sizes)
    base = torch.meshgrid(
        *[torch.arange(n, dtype=img.dtype) for n in sizes], indexing="ij"
    )
    lo_idx, hi_idx, frac = [], [], []
    for j, n in enumerate(sizes):
        c = torch.remainder(base[j] + u[j], float(n))
        f0 = torch.floor(c)
        lo = f0.long().remainder(n)  # f0 == n can occur from rounding
        lo_idx.append(lo)
        hi_idx.append((lo + 1).remainder(n))
        frac.append(c - f0)
    out = torch.zeros_like(img)
    for corner in range(2 ** d):
        w = None
        idx = []
        for j in range(d):
            if (corner >> j) & 1:
                idx.append(hi_idx[j])
                wj = frac[j]
            else:
                idx.append(lo_idx[j])
                wj = 1.0 - frac[j]
            w = wj if w is None else w * wj
        out = out + w * img[tuple(idx)]
    return out


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def gradient_central(img: ScalarImage) -> VectorField:
    """Per-axis periodic central differences of a scalar image."""
    t = gradient_t(as_tensor(img.data), img.grid.spacing)
    return VectorField(img.grid, to_array(t))


def jacobian(vf: VectorField) -> np.ndarray:
    """Per-voxel Jacobian, shape (d, d, *sizes); entry (i, j) = d v_i / d x_j."""
    t = jacobian_t(as_tensor(vf.data), vf.grid.spacing)
    return to_array(t)


def divergence(vf: VectorField) -> ScalarImage:
    """Trace of the Jacobian."""
    t = divergence_t(as_tensor(vf.data), vf.grid.spacing)
    return ScalarImage(vf.grid, to_array(t))


def interp_scalar(img: ScalarImage, psi: DeformationField) -> ScalarImage:
    """Sample ``img`` at psi(x) = x + u(x) with periodic multilinear weights."""
    require_same_grid(img, psi)
    out = warp_t(as_tensor(img.data), as_tensor(psi.u.data), img.grid.sizes)
    return ScalarImage(img.grid, to_array(out))


def interp_vector(vf: VectorField, points: np.ndarray | LandmarkSet) -> np.ndarray:
    """Componentwise multilinear interpolation of a vector field at points.

    ``points`` is (n, d) in voxel units; coordinates wrap modulo the grid.
    Returns an (n, d) array.
    """
    pts = points.points if isinstance(points, LandmarkSet) else np.asarray(points, dtype=np.float64)
    sizes = vf.grid.sizes
    d = vf.grid.dim
    lo, hi, frac = [], [], []
    for j, n in enumerate(sizes):
        c = np.remainder(pts[:, j], n)
        f0 = np.floor(c)
        lo_j = f0.astype(np.int64) % n
        lo.append(lo_j)
        hi.append((lo_j + 1) % n)
        frac.append(c - f0)
    out = np.zeros_like(pts)
    for corner in range(2 ** d):
        w = np.ones(pts.shape[0])
        idx = []
        for j in range(d):
            if (corner >> j) & 1:
                idx.append(hi[j])
                w = w * frac[j]
            else:
                idx.append(lo[j])
                w = w * (1.0 - frac[j])
        out += w[:, None] * vf.data[(slice(None),) + tuple(idx)].T
    return out


def mask_image(img: ScalarImage, mask: MaskImage) -> ScalarImage:
    """Suppress the masked region: output = img * (1 - mask)."""
    require_same_grid(img, mask)
    return ScalarImage(img.grid, img.data * (1.0 - mask.data))


def mask_velocity(vf: VectorField, mask: MaskImage) -> VectorField:
    """Scale every component pointwise by (1 - mask)."""
    require_same_grid(vf, mask)
    return VectorField(vf.grid, vf.data * (1.0 - mask.data))


def zero_vector_field(grid: GridDesc) -> VectorField:
    return VectorField(grid, np.zeros((grid.dim,) + grid.sizes))


def zero_mask(grid: GridDesc) -> MaskImage:
    return MaskImage(grid, np.zeros(grid.sizes))
