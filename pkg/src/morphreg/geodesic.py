"""Geodesic shooting of diffeomorphisms by forward integration.

The velocity field evolves by the momentum conservation law

    dv/dt = -K [ (Dv)^T m + Dm v + m div v ],   m = L v,

integrated with forward Euler over t in [0, 1].  Alongside the velocity
we integrate the *pullback* displacement u of the inverse map
psi(x) = x + u(x):

    du/dt = -(v + Du v),   u(0) = 0,

so that warping is a single resample  (S o psi)(x) = S(x + u(x)).

Everything here has a torch twin (suffix ``_t``) operating on float64
tensors; the twins form one differentiable graph from v0 to the warped
image, which is what the registration gradient is taken through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidParameterError, ShootingInstabilityError
from .grid import (
    DeformationField,
    GridDesc,
    LandmarkSet,
    MaskImage,
    ScalarImage,
    VectorField,
    as_tensor,
    divergence_t,
    gradient_t,
    interp_scalar,
    interp_vector,
    jacobian_t,
    require_same_grid,
    to_array,
    warp_t,
)
from .operators import FluidKernel, apply_multiplier_t, build_kernel


@dataclass(frozen=True)
class ShootingConfig:
    """Integration choices for one shooting run."""

    steps: int = 10
    check_every: int = 1  # instability scan cadence, in steps

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidParameterError(f"steps must be >= 1, got {self.steps}")
        if self.check_every < 1:
            raise InvalidParameterError("check_every must be >= 1")


@dataclass(frozen=True, eq=False)
class GeodesicPath:
    """Velocities at every Euler node plus the integrated pullback map.

    velocities[i] is v at t = i / steps, i = 0 .. steps.
    """

    grid: GridDesc
    velocities: tuple[VectorField, ...]
    psi: DeformationField

    @property
    def steps(self) -> int:
        return len(self.velocities) - 1


def _matvec_t(mat: torch.Tensor, vec: torch.Tensor) -> torch.Tensor:
    # mat: (d, d, *sizes), vec: (d, *sizes) -> (d, *sizes)
    return torch.einsum("ij...,j...->i...", mat, vec)


def epdiff_rhs_t(v: torch.Tensor, lam: torch.Tensor, lam_inv: torch.Tensor,
                 spacing) -> torch.Tensor:
    m = apply_multiplier_t(v, lam)
    dv = jacobian_t(v, spacing)
    dm = jacobian_t(m, spacing)
    # (Dv)^T m: component i is sum_j (d v_j / d x_i) m_j
    adv = torch.einsum("ji...,j...->i...", dv, m)
    transport = _matvec_t(dm, v)
    compress = m * divergence_t(v, spacing)
    return -apply_multiplier_t(adv + transport + compress, lam_inv)


def integrate_psi_step_t(u: torch.Tensor, v: torch.Tensor, dt: float,
                         spacing) -> torch.Tensor:
    du = jacobian_t(u, spacing)
    return u - dt * (v + _matvec_t(du, v))


def _max_mag(v: torch.Tensor) -> float:
    return float((v.detach() ** 2).sum(dim=0).max().sqrt())


def shoot_t(v0: torch.Tensor, kernel: FluidKernel, steps: int,
            check_every: int = 1) -> tuple[list[torch.Tensor], torch.Tensor]:
    """Euler-integrate EPDiff and the pullback map; returns (vs, u).

    Aborts with ShootingInstabilityError on non-finite values or when the
    velocity magnitude blows past 1000 x its initial value plus one (an
    obviously-pathological threshold, not a tuning knob).  The scans
    detach from the graph, so the checks do not break autograd.
    """
    spacing = kernel.grid.spacing
    lam, lam_inv = kernel.lam_t, kernel.lam_inv_t
    dt = 1.0 / steps
    limit = 1e3 * _max_mag(v0) + 1.0
    vs = [v0]
    u = torch.zeros_like(v0)
    v = v0
    for i in range(steps):
        u = integrate_psi_step_t(u, v, dt, spacing)
        v = v + dt * epdiff_rhs_t(v, lam, lam_inv, spacing)
        vs.append(v)
        if (i + 1) % check_every == 0 or i == steps - 1:
            bad = not bool(torch.isfinite(v.detach()).all()) or not bool(
                torch.isfinite(u.detach()).all()
            )
            if bad or _max_mag(v) > limit:
                raise ShootingInstabilityError(
                    f"velocity blew up after step {i + 1}/{steps}; "
                    "reduce the initial velocity or increase steps"
                )
    return vs, u


def epdiff_rhs(kernel: FluidKernel, v: VectorField) -> VectorField:
    """Right-hand side of the momentum conservation law at one instant."""
    if v.grid != kernel.grid:
        raise InvalidParameterError("kernel was built for a different grid")
    out = epdiff_rhs_t(as_tensor(v.data), kernel.lam_t, kernel.lam_inv_t,
                       kernel.grid.spacing)
    return VectorField(v.grid, to_array(out))


def shoot(kernel: FluidKernel, v0: VectorField,
          config: ShootingConfig = ShootingConfig()) -> GeodesicPath:
    """Integrate the geodesic with initial velocity ``v0``."""
    if v0.grid != kernel.grid:
        raise InvalidParameterError("kernel was built for a different grid")
    vs, u = shoot_t(as_tensor(v0.data), kernel, config.steps, config.check_every)
    grid = v0.grid
    return GeodesicPath(
        grid,
        tuple(VectorField(grid, to_array(t)) for t in vs),
        DeformationField(grid, VectorField(grid, to_array(u))),
    )


def integrate_psi(kernel: FluidKernel, velocities, steps: int | None = None) -> DeformationField:
    """Rebuild the pullback map from an existing velocity sequence.

    ``velocities`` holds v at the Euler nodes (the last entry is unused by
    the update, matching the forward scheme).
    """
    vel = list(velocities)
    n = steps if steps is not None else len(vel) - 1
    if n < 1 or len(vel) < n:
        raise InvalidParameterError("need at least one velocity per step")
    grid = vel[0].grid
    dt = 1.0 / n
    u = torch.zeros((grid.dim,) + grid.sizes, dtype=torch.float64)
    for i in range(n):
        u = integrate_psi_step_t(u, as_tensor(vel[i].data), dt, grid.spacing)
    return DeformationField(grid, VectorField(grid, to_array(u)))


def warp(img: ScalarImage, psi: DeformationField) -> ScalarImage:
    """Resample an image through a pullback map (one interpolation pass)."""
    return interp_scalar(img, psi)


def propagate_label(mask: MaskImage, psi: DeformationField,
                    mode: str = "linear") -> MaskImage:
    """Warp a soft mask through the pullback map.

    linear mode interpolates (then clamps against roundoff); nearest mode
    gathers the closest voxel, so binary masks stay exactly binary.
    """
    require_same_grid(mask, psi)
    if mode == "linear":
        out = warp_t(as_tensor(mask.data), as_tensor(psi.u.data), mask.grid.sizes)
        return MaskImage(mask.grid, np.clip(to_array(out), 0.0, 1.0))
    if mode != "nearest":
        raise InvalidParameterError(f"mode must be 'linear' or 'nearest', got {mode!r}")
    sizes = mask.grid.sizes
    base = np.meshgrid(*[np.arange(n) for n in sizes], indexing="ij")
    idx = tuple(
        np.rint(np.remainder(base[j] + psi.u.data[j], n)).astype(np.int64) % n
        for j, n in enumerate(sizes)
    )
    return MaskImage(mask.grid, mask.data[idx])


def _velocity_list(velocities) -> list[VectorField]:
    if isinstance(velocities, GeodesicPath):
        return list(velocities.velocities)
    return list(velocities)


def propagate_landmarks(points: LandmarkSet, velocities,
                        config: ShootingConfig | None = None) -> LandmarkSet:
    """Carry points forward with the flow: dp/dt = v_t(p), Euler steps.

    This is the *forward* motion of material points, the counterpart of
    the pullback resampling applied to images.  Coordinates wrap modulo
    the grid sizes (torus domain).
    """
    vel = _velocity_list(velocities)
    n = config.steps if config is not None else len(vel) - 1
    if n < 1 or len(vel) < n:
        raise InvalidParameterError("need at least one velocity per step")
    pts = points.points.copy() if isinstance(points, LandmarkSet) else np.asarray(
        points, dtype=np.float64).copy()
    grid = vel[0].grid
    dt = 1.0 / n
    for i in range(n):
        pts = pts + dt * interp_vector(vel[i], pts)
    pts = np.remainder(pts, np.asarray(grid.sizes, dtype=np.float64))
    labels = points.labels if isinstance(points, LandmarkSet) else ()
    return LandmarkSet(pts, labels)


def jacobian_determinant(psi: DeformationField) -> ScalarImage:
    """det(I + Du) per voxel; positive everywhere for an orientation-
    preserving map."""
    grid = psi.grid
    du = jacobian_t(as_tensor(psi.u.data), grid.spacing)
    d = grid.dim
    eye = torch.eye(d, dtype=torch.float64).reshape((d, d) + (1,) * d)
    j = du + eye
    if d == 2:
        det = j[0, 0] * j[1, 1] - j[0, 1] * j[1, 0]
    else:
        det = (
            j[0, 0] * (j[1, 1] * j[2, 2] - j[1, 2] * j[2, 1])
            - j[0, 1] * (j[1, 0] * j[2, 2] - j[1, 2] * j[2, 0])
            + j[0, 2] * (j[1, 0] * j[2, 1] - j[1, 1] * j[2, 0])
        )
    return ScalarImage(grid, to_array(det))


def default_kernel(grid: GridDesc, alpha: float = 3.0, power: float = 3.0) -> FluidKernel:
    return build_kernel(grid, alpha, power)
