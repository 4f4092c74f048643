"""Synthetic ground-truth data: shape images, smooth random velocities,
deformed pairs with landmarks, and inserted appearance changes.

Everything is a pure function of (spec, seed).  The appearance change
("tumor") is always added after the geometric deformation, so the
sampled initial velocity stays the unique geometric ground truth and the
inserted blob is pure intensity change.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import product

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidParameterError
from .geodesic import GeodesicPath, ShootingConfig, propagate_landmarks, shoot, warp
from .grid import GridDesc, LandmarkSet, MaskImage, ScalarImage, VectorField, zero_mask
from .gridio import ImagePair
from .operators import apply_K, build_kernel


@dataclass(frozen=True)
class TumorSpec:
    """One inserted appearance change.

    center None draws a position clear of the boundary from the pair
    seed.  delta may be negative (dark lesion).
    """

    radius: float = 8.0
    delta: float = 0.45
    center: tuple[float, ...] | None = None
    placed_in: str = "target"

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidParameterError("tumor radius must be positive")
        if self.placed_in not in ("source", "target", "both"):
            raise InvalidParameterError(
                f"placed_in must be 'source', 'target' or 'both', got {self.placed_in!r}"
            )


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic registration pair."""

    grid: GridDesc
    shape: str = "bullseye"
    v0_amplitude: float = 1.0
    tumor: TumorSpec | None = None
    landmark_spacing: int = 8
    seed: int = 0
    noise_sigma: float = 0.0
    alpha: float = 3.0
    power: float = 3.0
    steps: int = 10

    def __post_init__(self):
        if self.shape not in ("bullseye", "blobs"):
            raise InvalidParameterError(f"shape must be 'bullseye' or 'blobs', got {self.shape!r}")
        if self.v0_amplitude < 0:
            raise InvalidParameterError("v0_amplitude must be nonnegative")
        if self.landmark_spacing < 1:
            raise InvalidParameterError("landmark_spacing must be >= 1")
        if self.noise_sigma < 0:
            raise InvalidParameterError("noise_sigma must be nonnegative")
        if self.tumor is not None and self.tumor.radius >= min(self.grid.sizes) / 4:
            raise InvalidParameterError(
                f"tumor radius {self.tumor.radius} too large for sizes {self.grid.sizes}"
            )


def _center_coords(grid: GridDesc) -> list[np.ndarray]:
    axes = [np.arange(n, dtype=np.float64) - (n - 1) / 2.0 for n in grid.sizes]
    return list(np.meshgrid(*axes, indexing="ij"))


def make_image(spec: SynthSpec) -> ScalarImage:
    """Deterministic smooth test image with intensities in [0, 1].

    bullseye: concentric cosine rings under a smooth radial window, so
    the picture is exactly symmetric under 180-degree rotation and
    blends to a flat 0.5 before the periodic boundary.  blobs: periodic
    Gaussian bumps, min-max scaled into [0.05, 0.95].
    """
    rng = np.random.default_rng(spec.seed)
    grid = spec.grid
    if spec.shape == "bullseye":
        coords = _center_coords(grid)
        r = np.sqrt(sum(c * c for c in coords))
        period = float(rng.uniform(10.0, 14.0))
        r_max = 0.45 * min(grid.sizes)
        window = np.where(r < r_max, np.cos(np.pi * r / (2.0 * r_max)) ** 2, 0.0)
        data = 0.5 + 0.4 * np.cos(2.0 * np.pi * r / period) * window
        return ScalarImage(grid, data)
    # enough bumps that intensity gradients reach every neighborhood;
    # a sparse sum would leave flat patches where matching is blind
    n_lo = max(6, grid.voxel_count // 80)
    n_hi = max(n_lo + 4, grid.voxel_count // 50)
    nblob = int(rng.integers(n_lo, n_hi + 1))
    axes = [np.arange(n, dtype=np.float64) for n in grid.sizes]
    mesh = np.meshgrid(*axes, indexing="ij")
    data = np.zeros(grid.sizes)
    for _ in range(nblob):
        center = [rng.uniform(0, n) for n in grid.sizes]
        # widths track the grid so small debug grids still get resolvable bumps
        sig_lo = max(1.8, 0.03 * min(grid.sizes))
        sig_hi = max(3.0, 0.07 * min(grid.sizes))
        sigma = float(rng.uniform(sig_lo, sig_hi))
        height = float(rng.uniform(0.3, 1.0))
        d2 = np.zeros(grid.sizes)
        for j, n in enumerate(grid.sizes):
            dj = np.remainder(mesh[j] - center[j] + n / 2.0, n) - n / 2.0
            d2 = d2 + dj * dj
        data = data + height * np.exp(-d2 / (2.0 * sigma * sigma))
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        return ScalarImage(grid, np.full(grid.sizes, 0.5))
    return ScalarImage(grid, 0.05 + 0.9 * (data - lo) / (hi - lo))


def sample_v0(kernel, grid: GridDesc, amplitude: float, seed: int) -> VectorField:
    """Smooth random velocity: white noise smoothed twice by the fluid
    kernel, rescaled so the largest voxel speed equals ``amplitude``."""
    if amplitude < 0:
        raise InvalidParameterError("amplitude must be nonnegative")
    if amplitude == 0:
        return VectorField(grid, np.zeros((grid.dim,) + grid.sizes))
    rng = np.random.default_rng(seed)
    noise = VectorField(grid, rng.standard_normal((grid.dim,) + grid.sizes))
    v = apply_K(kernel, apply_K(kernel, noise))
    mag = float(np.sqrt((v.data ** 2).sum(axis=0)).max())
    if mag == 0.0:
        return VectorField(grid, np.zeros((grid.dim,) + grid.sizes))
    return VectorField(grid, v.data * (amplitude / mag))


def insert_tumor(img: ScalarImage, center, radius: float, delta: float) -> tuple[ScalarImage, MaskImage]:
    """Add a cosine-tapered bump of height ``delta`` and report its
    support as a binary mask; the image stays clamped to [0, 1]."""
    grid = img.grid
    center = tuple(float(c) for c in center)
    if len(center) != grid.dim:
        raise InvalidParameterError("tumor center dimensionality mismatch")
    for c, n in zip(center, grid.sizes):
        if c - radius < 0 or c + radius > n - 1:
            raise InvalidParameterError(
                f"tumor at {center} with radius {radius} crosses the grid boundary"
            )
    mesh = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in grid.sizes], indexing="ij")
    r = np.sqrt(sum((m - c) ** 2 for m, c in zip(mesh, center)))
    # flat plateau with a cosine roll-off over the outer 15% of the disk:
    # the change stays material through most of its own support instead of
    # fading from the center out
    q = np.minimum(r / radius, 1.0)
    ramp = np.clip((q - 0.85) / 0.15, 0.0, 1.0)
    taper = np.where(r < radius, 0.5 * (1.0 + np.cos(np.pi * ramp)), 0.0)
    bumped = np.clip(img.data + delta * taper, 0.0, 1.0)
    return ScalarImage(grid, bumped), MaskImage(grid, (r < radius).astype(np.float64))


def _lattice(grid: GridDesc, spacing: int) -> LandmarkSet:
    axes = [np.arange(spacing // 2, n, spacing, dtype=np.float64) for n in grid.sizes]
    pts = np.array(list(product(*axes)), dtype=np.float64)
    return LandmarkSet(pts.reshape(-1, grid.dim))


def _min_image_dist(points: np.ndarray, center, sizes) -> np.ndarray:
    d2 = np.zeros(points.shape[0])
    for j, n in enumerate(sizes):
        dj = np.abs(points[:, j] - center[j]) % n
        dj = np.minimum(dj, n - dj)
        d2 += dj * dj
    return np.sqrt(d2)


def _auto_center(img: ScalarImage, radius: float, rng) -> tuple[float, ...]:
    """Pick a tumor site on bright tissue, away from the boundary.

    The site is the brightest point of the radius/2-smoothed image over
    the admissible interior box, plus a small jitter; placing appearance
    changes on structure (rather than empty background) is what makes
    them destructive to intensity matching.
    """
    grid = img.grid
    margin = int(np.ceil(radius)) + 2
    smooth = gaussian_filter(img.data, sigma=max(1.0, radius / 2.0), mode="wrap")
    interior = tuple(slice(margin, n - margin) for n in grid.sizes)
    if any(s.stop <= s.start for s in interior):
        raise InvalidParameterError("tumor radius leaves no room for placement")
    local = smooth[interior]
    best = np.unravel_index(int(np.argmax(local)), local.shape)
    center = []
    for j, n in enumerate(grid.sizes):
        c = float(best[j] + margin) + float(rng.uniform(-2.0, 2.0))
        center.append(float(np.clip(c, margin, n - 1 - margin)))
    return tuple(center)


def make_pair(spec: SynthSpec) -> tuple[ImagePair, GeodesicPath]:
    """Build one registration problem with full ground truth.

    The target is the source warped by a sampled geodesic; landmarks are
    a lattice on the source pushed through the same flow.  Appearance
    changes go in after warping, and landmarks whose relevant position
    falls within radius + 2 voxels of the blob are dropped, so landmark
    error stays a purely geometric measure.
    """
    grid = spec.grid
    seeds = np.random.SeedSequence(spec.seed).spawn(3)
    v0_seed, tumor_seed, noise_seed = (int(s.generate_state(1)[0]) for s in seeds)

    src = make_image(spec)
    kernel = build_kernel(grid, spec.alpha, spec.power)
    v0 = sample_v0(kernel, grid, spec.v0_amplitude, v0_seed)
    path = shoot(kernel, v0, ShootingConfig(steps=spec.steps))
    tgt = warp(src, path.psi)

    lm_src = _lattice(grid, spec.landmark_spacing)
    lm_tgt = propagate_landmarks(lm_src, path.velocities, ShootingConfig(steps=spec.steps))

    mask_src: MaskImage = zero_mask(grid)
    mask_tgt: MaskImage = zero_mask(grid)
    if spec.tumor is not None:
        t = spec.tumor
        if t.center is None:
            t_rng = np.random.default_rng(tumor_seed)
            t = replace(t, center=_auto_center(tgt, t.radius, t_rng))
        if t.placed_in in ("source", "both"):
            src, mask_src = insert_tumor(src, t.center, t.radius, t.delta)
        if t.placed_in in ("target", "both"):
            tgt, mask_tgt = insert_tumor(tgt, t.center, t.radius, t.delta)
        keep = np.ones(len(lm_src), dtype=bool)
        margin = t.radius + 2.0
        if t.placed_in in ("source", "both"):
            keep &= _min_image_dist(lm_src.points, t.center, grid.sizes) > margin
        if t.placed_in in ("target", "both"):
            keep &= _min_image_dist(lm_tgt.points, t.center, grid.sizes) > margin
        lm_src = LandmarkSet(lm_src.points[keep])
        lm_tgt = LandmarkSet(lm_tgt.points[keep])

    if spec.noise_sigma > 0:
        n_rng = np.random.default_rng(noise_seed)
        noisy = tgt.data + n_rng.normal(0.0, spec.noise_sigma, grid.sizes)
        tgt = ScalarImage(grid, np.clip(noisy, 0.0, 1.0))

    pair = ImagePair(
        name=f"{spec.shape}-{spec.seed:d}",
        source=src,
        target=tgt,
        mask_source=mask_src,
        mask_target=mask_tgt,
        landmarks_source=lm_src,
        landmarks_target=lm_tgt,
        truth_v0=v0,
    )
    return pair, path
