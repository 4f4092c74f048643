"""Scalar objectives: image distances, overlap scores, regularity energies
and the combined registration losses.

Every public function returns a plain float.  The ``*_t`` twins operate
on torch float64 tensors and stay inside one autograd graph, which is how
the optimizer obtains gradients of the full shoot-warp-compare pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np
import torch

from .errors import DegenerateStatisticsError, InvalidParameterError
from .geodesic import ShootingConfig, shoot_t
from .grid import (
    MaskImage,
    ScalarImage,
    VectorField,
    as_tensor,
    require_same_grid,
    warp_t,
)
from .operators import FluidKernel, apply_multiplier_t

_CE_CLAMP = 1e-6


@dataclass(frozen=True)
class RmiConfig:
    """Neighborhood statistics settings for the region-wise similarity.

    radius   -- neighborhood half-width; vectors have (2r+1)^d entries
    stride   -- subsampling step between neighborhood centers
    epsilon  -- diagonal loading of every covariance
    batch    -- pairs averaged by rmi_batch callers
    sign_literal -- flip the information term to the printed-form sign
    """

    radius: int = 1
    stride: int = 2
    epsilon: float = 1e-6
    batch: int = 4
    sign_literal: bool = False

    def __post_init__(self):
        if self.radius < 1:
            raise InvalidParameterError(f"radius must be >= 1, got {self.radius}")
        if self.stride < 1:
            raise InvalidParameterError(f"stride must be >= 1, got {self.stride}")
        if self.epsilon <= 0:
            raise InvalidParameterError(f"epsilon must be positive, got {self.epsilon}")
        if self.batch < 1:
            raise InvalidParameterError(f"batch must be >= 1, got {self.batch}")


@dataclass(frozen=True)
class EnergyReport:
    """One evaluation of the joint loss: total = dist + reg + gamma * seg."""

    dist: float
    reg: float
    seg: float
    gamma: float
    total: float

    def __post_init__(self):
        for name in ("dist", "reg", "seg", "gamma", "total"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidParameterError(f"EnergyReport.{name} is not finite")
        if self.reg < 0:
            raise InvalidParameterError(f"reg must be nonnegative, got {self.reg}")
        if not 0.0 <= self.seg <= 1.0:
            raise InvalidParameterError(f"seg must lie in [0, 1], got {self.seg}")
        expect = self.dist + self.reg + self.gamma * self.seg
        if abs(self.total - expect) > 1e-12 * max(1.0, abs(expect)):
            raise InvalidParameterError("total does not decompose into dist + reg + gamma*seg")


# ---------------------------------------------------------------------------
# tensor twins
# ---------------------------------------------------------------------------

def ssd_t(a: torch.Tensor, b: torch.Tensor, voxel_volume: float) -> torch.Tensor:
    diff = a - b
    return (diff * diff).sum() * voxel_volume


def cross_entropy_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    ac = torch.clamp(a, _CE_CLAMP, 1.0 - _CE_CLAMP)
    bc = torch.clamp(b, _CE_CLAMP, 1.0 - _CE_CLAMP)
    return -(bc * torch.log(ac) + (1.0 - bc) * torch.log(1.0 - ac)).mean()


def _neighborhood_matrix_t(img: torch.Tensor, cfg: RmiConfig) -> torch.Tensor:
    """Rows are flattened (2r+1)^d patches around every stride-th voxel.

    Patches wrap around the periodic boundary, so every center yields a
    full vector and the sample count is exactly prod(ceil(N_j / stride)).
    """
    d = img.ndim
    r = cfg.radius
    offsets = list(product(range(-r, r + 1), repeat=d))
    sel = np.ix_(*[np.arange(0, n, cfg.stride) for n in img.shape])
    rows = []
    for off in offsets:
        # roll by -off puts img(x + off) at position x
        shifted = torch.roll(img, shifts=tuple(-o for o in off), dims=tuple(range(d)))
        rows.append(shifted[sel].reshape(-1))
    return torch.stack(rows)  # (K, M)


def rmi_t(a: torch.Tensor, b: torch.Tensor, cfg: RmiConfig) -> torch.Tensor:
    pa = _neighborhood_matrix_t(a, cfg)
    pb = _neighborhood_matrix_t(b, cfg)
    k, m = pa.shape
    if m < k:
        raise DegenerateStatisticsError(
            f"{m} neighborhood samples for {k}-dimensional patches; "
            "decrease the stride or the radius"
        )
    ac = pa - pa.mean(dim=1, keepdim=True)
    bc = pb - pb.mean(dim=1, keepdim=True)
    denom = float(m - 1)
    cov_a = ac @ ac.T / denom
    cov_b = bc @ bc.T / denom
    cov_ba = bc @ ac.T / denom
    eye = torch.eye(k, dtype=a.dtype)
    eps = cfg.epsilon
    post = cov_b - cov_ba @ torch.linalg.solve(cov_a + eps * eye, cov_ba.T) + eps * eye
    sign, logabsdet = torch.linalg.slogdet(post)
    if float(sign.detach()) <= 0:
        raise DegenerateStatisticsError("posterior covariance lost positive definiteness")
    info = 0.5 * logabsdet if cfg.sign_literal else -0.5 * logabsdet
    return cross_entropy_t(a, b) - info


def reg_energy_t(v: torch.Tensor, kernel: FluidKernel) -> torch.Tensor:
    lv = apply_multiplier_t(v, kernel.lam_t)
    return (lv * v).sum() * kernel.grid.voxel_volume


def metamorphic_terms_t(
    v0: torch.Tensor,
    src: torch.Tensor,
    tgt: torch.Tensor,
    mask: torch.Tensor | None,
    kernel: FluidKernel,
    steps: int,
    dist: str,
    rmi_cfg: RmiConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Distance and regularity terms of the masked registration energy,
    as one differentiable graph from ``v0``.

    With ``mask`` None (or all zero) this is the plain geodesic energy.
    """
    if dist not in ("rmi", "ssd"):
        raise InvalidParameterError(f"dist must be 'rmi' or 'ssd', got {dist!r}")
    if mask is not None:
        keep = 1.0 - mask
        v0 = v0 * keep
        src = src * keep
        tgt = tgt * keep
    _, u = shoot_t(v0, kernel, steps)
    warped = warp_t(src, u, kernel.grid.sizes)
    if dist == "ssd":
        dist_t = ssd_t(warped, tgt, kernel.grid.voxel_volume)
    else:
        dist_t = rmi_t(warped, tgt, rmi_cfg)
    return dist_t, reg_energy_t(v0, kernel)


# ---------------------------------------------------------------------------
# public scalar objectives
# ---------------------------------------------------------------------------

def ssd(a: ScalarImage, b: ScalarImage) -> float:
    """Sum of squared intensity differences times the voxel volume."""
    require_same_grid(a, b)
    return float(ssd_t(as_tensor(a.data), as_tensor(b.data), a.grid.voxel_volume))


def dice(y: MaskImage, yhat: MaskImage, threshold: float = 0.5) -> float:
    """Overlap score of the masks binarized at ``threshold``; 1 when both
    are empty."""
    require_same_grid(y, yhat)
    p = y.data >= threshold
    q = yhat.data >= threshold
    denom = int(p.sum()) + int(q.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & q).sum()) / denom


def dice_loss(y: MaskImage, yhat: MaskImage, threshold: float = 0.5) -> float:
    return 1.0 - dice(y, yhat, threshold)


def cross_entropy(a: ScalarImage, b: ScalarImage) -> float:
    """Mean binary cross entropy of ``b`` against predictions ``a``.

    Both images are clamped into [1e-6, 1 - 1e-6] first, so inputs are
    expected on a [0, 1] intensity scale.
    """
    require_same_grid(a, b)
    return float(cross_entropy_t(as_tensor(a.data), as_tensor(b.data)))


def rmi(a: ScalarImage, b: ScalarImage, cfg: RmiConfig = RmiConfig()) -> float:
    """Region-wise similarity: cross entropy minus a neighborhood
    information term.

    Patch vectors of both images are collected on a strided lattice, and
    the information term is the (sign-adjusted) half log-determinant of
    the posterior covariance of b-patches given a-patches.  Lower means
    more similar.
    """
    require_same_grid(a, b)
    return float(rmi_t(as_tensor(a.data), as_tensor(b.data), cfg))


def rmi_batch(pairs, cfg: RmiConfig = RmiConfig()) -> float:
    """Average rmi over (a, b) image pairs; the batch counterpart used by
    evaluation loops."""
    pairs = list(pairs)
    if not pairs:
        raise InvalidParameterError("rmi_batch needs at least one image pair")
    return sum(rmi(a, b, cfg) for a, b in pairs) / len(pairs)


def reg_energy(kernel: FluidKernel, v: VectorField) -> float:
    """Quadratic regularity <L v, v> summed over voxels, times voxel
    volume.  Clamped at zero against FFT roundoff on near-null fields."""
    if v.grid != kernel.grid:
        raise InvalidParameterError("kernel was built for a different grid")
    return max(float(reg_energy_t(as_tensor(v.data), kernel)), 0.0)


def reg_masked(kernel: FluidKernel, v0: VectorField, mask: MaskImage) -> float:
    """Regularity of the velocity with the masked region switched off."""
    require_same_grid(v0, mask)
    keep = as_tensor(v0.data) * (1.0 - as_tensor(mask.data))
    return max(float(reg_energy_t(keep, kernel)), 0.0)


def energy_metamorphic(
    src: ScalarImage,
    tgt: ScalarImage,
    mask: MaskImage | None,
    v0: VectorField,
    kernel: FluidKernel,
    shoot_cfg: ShootingConfig = ShootingConfig(),
    dist: str = "rmi",
    rmi_cfg: RmiConfig = RmiConfig(),
    dist_weight: float = 1.0,
) -> EnergyReport:
    """Masked registration energy: distance after shooting plus masked
    regularity.  The segmentation term is zero here; see loss_joint.

    ``dist_weight`` scales the distance term inside the objective (a
    noise-precision balance; 1.0 leaves the raw sum).  The report's dist
    field carries the weighted value so total stays dist + reg.
    """
    if dist_weight <= 0:
        raise InvalidParameterError(f"dist_weight must be positive, got {dist_weight}")
    if mask is None:
        require_same_grid(src, tgt, v0)
        mask_t = None
    else:
        require_same_grid(src, tgt, v0, mask)
        mask_t = as_tensor(mask.data)
    if v0.grid != kernel.grid:
        raise InvalidParameterError("kernel was built for a different grid")
    dist_t, reg_t = metamorphic_terms_t(
        as_tensor(v0.data), as_tensor(src.data), as_tensor(tgt.data),
        mask_t, kernel, shoot_cfg.steps, dist, rmi_cfg,
    )
    reg_val = max(float(reg_t), 0.0)
    dist_val = dist_weight * float(dist_t)
    return EnergyReport(dist_val, reg_val, 0.0, 0.0, dist_val + reg_val)


def loss_joint(dist: float, reg: float, seg: float, gamma: float = 0.5) -> EnergyReport:
    """Assemble the combined loss: dist + reg + gamma * seg."""
    if gamma < 0:
        raise InvalidParameterError(f"gamma must be nonnegative, got {gamma}")
    return EnergyReport(dist, reg, seg, gamma, dist + reg + gamma * seg)
