"""FFT-diagonal fluid regularity operator and its inverse smoother.

The operator is L = (I - alpha * Laplacian)^power acting componentwise on
periodic vector fields.  On the torus the discrete periodic Laplacian is
diagonal in the Fourier basis, so L reduces to a real multiplier

    lam(k) = (1 + alpha * sum_j 2 (1 - cos(2 pi k_j / N_j)) / h_j^2) ^ power

and the smoother K = L^{-1} is simply 1 / lam(k).  Both are symmetric
positive definite for alpha > 0, power >= 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidParameterError
from .grid import GridDesc, VectorField, as_tensor, to_array


@dataclass(frozen=True, eq=False)
class FluidKernel:
    """Precomputed Fourier multipliers of L and K on one grid.

    lam has the full (unshifted) FFT layout of the grid, so fields can be
    multiplied in frequency space without any reindexing.
    """

    grid: GridDesc
    alpha: float
    power: float
    lam: np.ndarray     # multiplier of L, shape grid.sizes, all >= 1
    lam_inv: np.ndarray  # multiplier of K

    @property
    def lam_t(self) -> torch.Tensor:
        return as_tensor(self.lam)

    @property
    def lam_inv_t(self) -> torch.Tensor:
        return as_tensor(self.lam_inv)


def laplacian_symbol(grid: GridDesc) -> np.ndarray:
    """Eigenvalues of minus the periodic 7-point (5-point in 2d) Laplacian.

    Entry at multi-index k is sum_j 2 (1 - cos(2 pi k_j / N_j)) / h_j^2,
    which is the exact symbol of the second-order centered stencil.
    """
    parts = []
    for n, h in zip(grid.sizes, grid.spacing):
        k = np.arange(n)
        parts.append(2.0 * (1.0 - np.cos(2.0 * np.pi * k / n)) / (h * h))
    out = np.zeros(grid.sizes)
    for j, p in enumerate(parts):
        shape = [1] * grid.dim
        shape[j] = len(p)
        out = out + p.reshape(shape)
    return out


def build_kernel(grid: GridDesc, alpha: float = 3.0, power: float = 3.0) -> FluidKernel:
    """Assemble the multiplier pair for L = (I - alpha Lap)^power on ``grid``."""
    if alpha <= 0:
        raise InvalidParameterError(f"alpha must be positive, got {alpha}")
    if power < 1:
        raise InvalidParameterError(f"power must be >= 1, got {power}")
    lam = (1.0 + alpha * laplacian_symbol(grid)) ** power
    return FluidKernel(grid, float(alpha), float(power), lam, 1.0 / lam)


def apply_multiplier_t(vf: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
    """Multiply each component of ``vf`` by ``lam`` in frequency space.

    The multiplier is real and even, so the result of ifftn is real up to
    roundoff; the imaginary residue is dropped.
    """
    dims = tuple(range(1, vf.ndim))
    spec = torch.fft.fftn(vf, dim=dims)
    return torch.real(torch.fft.ifftn(spec * lam, dim=dims))


def apply_L(kernel: FluidKernel, vf: VectorField) -> VectorField:
    """Momentum of a velocity: m = L v."""
    if vf.grid != kernel.grid:
        raise InvalidParameterError("kernel was built for a different grid")
    out = apply_multiplier_t(as_tensor(vf.data), kernel.lam_t)
    return VectorField(vf.grid, to_array(out))


def apply_K(kernel: FluidKernel, vf: VectorField) -> VectorField:
    """Smoothed field: K v = L^{-1} v."""
    if vf.grid != kernel.grid:
        raise InvalidParameterError("kernel was built for a different grid")
    out = apply_multiplier_t(as_tensor(vf.data), kernel.lam_inv_t)
    return VectorField(vf.grid, to_array(out))
