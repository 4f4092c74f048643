"""Appearance-change mask estimation and the alternating joint loop.

Two estimators share one interface: 'oracle' returns attached
ground-truth masks (the stand-in for a trained segmenter), 'residual'
thresholds the smoothed absolute image difference and keeps connected
components above a minimum area, assigning each component to the image
that is brighter inside it.

joint_fit alternates mask estimation and masked registration a fixed
number of rounds, optionally growing the working set with deformed
copies of the labeled sources.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import InvalidParameterError, MissingLabelsError, MorphRegError
from .geodesic import GeodesicPath, propagate_label, warp
from .grid import MaskImage, ScalarImage, require_same_grid, zero_mask
from .gridio import ImagePair
from .metrics import EnergyReport, dice_loss, loss_joint
from .optimize import RegistrationConfig, RegistrationResult, register


@dataclass(frozen=True)
class MaskEstimator:
    """Pluggable appearance-change segmenter.

    residual parameters: smooth_sigma is the Gaussian pre-smoothing width
    in voxels, threshold None means Otsu's method on the smoothed
    residual, components below min_area voxels are dropped.
    """

    kind: str = "residual"
    smooth_sigma: float = 2.0
    threshold: float | None = None
    min_area: int = 9
    labels: tuple[MaskImage, MaskImage] | None = None

    def __post_init__(self):
        if self.kind not in ("oracle", "residual"):
            raise InvalidParameterError(f"kind must be 'oracle' or 'residual', got {self.kind!r}")
        if self.smooth_sigma < 0:
            raise InvalidParameterError("smooth_sigma must be nonnegative")
        if self.min_area < 0:
            raise InvalidParameterError("min_area must be nonnegative")

    def with_labels(self, mask_src: MaskImage, mask_tgt: MaskImage) -> "MaskEstimator":
        return replace(self, labels=(mask_src, mask_tgt))


@dataclass(frozen=True)
class JointConfig:
    """Outer-loop settings of the alternating scheme."""

    q: int = 5
    gamma: float = 0.5
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    augment: bool = True

    def __post_init__(self):
        if self.q < 1:
            raise InvalidParameterError(f"q must be >= 1, got {self.q}")
        if self.gamma < 0:
            raise InvalidParameterError("gamma must be nonnegative")


def _otsu(values: np.ndarray) -> float:
    """Threshold maximizing between-class variance of a 256-bin histogram."""
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(values, bins=256, range=(lo, hi))
    mids = 0.5 * (edges[:-1] + edges[1:])
    w = hist.astype(np.float64)
    below = np.cumsum(w)
    above = below[-1] - below
    moments = np.cumsum(w * mids)
    mean_below = moments / np.maximum(below, 1e-300)
    mean_above = (moments[-1] - moments) / np.maximum(above, 1e-300)
    score = below * above * (mean_below - mean_above) ** 2
    return float(mids[int(np.argmax(score))])


def estimate_masks(
    estimator: MaskEstimator,
    src: ScalarImage,
    tgt: ScalarImage,
    context: ScalarImage | None = None,
) -> tuple[MaskImage, MaskImage]:
    """Per-side appearance-change masks for one pair.

    The residual estimator compares ``context`` (a current deformed
    image, when the caller has one) or ``src`` against ``tgt``;
    components brighter in the target go to the target mask and vice
    versa, so the union is the full detection either way.
    """
    require_same_grid(src, tgt)
    if estimator.kind == "oracle":
        if estimator.labels is None:
            raise MissingLabelsError(
                "oracle estimator needs ground-truth masks attached (with_labels)"
            )
        return estimator.labels

    ref = context if context is not None else src
    require_same_grid(ref, tgt)
    residual = np.abs(ref.data - tgt.data)
    if estimator.smooth_sigma > 0:
        residual = ndimage.gaussian_filter(residual, estimator.smooth_sigma, mode="wrap")
    grid = src.grid
    if residual.max() <= 0.0:
        return zero_mask(grid), zero_mask(grid)
    thr = estimator.threshold if estimator.threshold is not None else _otsu(residual)
    detected = residual > thr
    # component analysis does not wrap; generated appearance changes keep
    # clear of the boundary, real ones crossing it would split in two
    comp, ncomp = ndimage.label(detected)
    u_src = np.zeros(grid.sizes)
    u_tgt = np.zeros(grid.sizes)
    for c in range(1, ncomp + 1):
        inside = comp == c
        if int(inside.sum()) < estimator.min_area:
            continue
        if float(tgt.data[inside].mean()) >= float(ref.data[inside].mean()):
            u_tgt[inside] = 1.0
        else:
            u_src[inside] = 1.0
    return MaskImage(grid, u_src), MaskImage(grid, u_tgt)


def union_mask(a: MaskImage, b: MaskImage) -> MaskImage:
    """Pointwise maximum: commutative, associative, idempotent."""
    require_same_grid(a, b)
    return MaskImage(a.grid, np.maximum(a.data, b.data))


def augment(src: ScalarImage, label: MaskImage, path: GeodesicPath) -> tuple[ScalarImage, MaskImage]:
    """Deform a labeled image through an existing path, giving one new
    training sample; nearest-neighbor label transport keeps binary masks
    binary."""
    require_same_grid(src, label)
    return warp(src, path.psi), propagate_label(label, path.psi, mode="nearest")


@dataclass(frozen=True, eq=False)
class JointResult:
    """Outcome of joint_fit over one dataset."""

    results: tuple[RegistrationResult, ...]
    masks_source: tuple[MaskImage, ...]
    masks_target: tuple[MaskImage, ...]
    history: tuple[tuple[EnergyReport, ...], ...]  # [iteration][pair]
    augmented: tuple[tuple[ScalarImage, MaskImage], ...]
    failures: tuple[tuple[int, str], ...]

    @property
    def unions(self) -> tuple[MaskImage, ...]:
        return tuple(union_mask(a, b) for a, b in zip(self.masks_source, self.masks_target))

    @property
    def mean_totals(self) -> tuple[float, ...]:
        return tuple(
            float(np.mean([r.total for r in reports])) if reports else float("nan")
            for reports in self.history
        )


def _pair_estimator(estimator: MaskEstimator, pair: ImagePair) -> MaskEstimator:
    if estimator.kind == "oracle" and estimator.labels is None:
        if not pair.has_masks:
            raise MissingLabelsError(f"pair {pair.name!r} carries no ground-truth masks")
        return estimator.with_labels(pair.mask_source, pair.mask_target)
    return estimator


def _joint_pair_step(item):
    """One pair's mask-then-register round; top-level so worker pools can
    pickle it.  Returns ('ok', ...) or ('err', message)."""
    pair, context, estimator, reg_cfg, gamma, do_augment = item
    try:
        est = _pair_estimator(estimator, pair)
        u_src, u_tgt = estimate_masks(est, pair.source, pair.target, context)
        union = union_mask(u_src, u_tgt)
        res = register(pair.source, pair.target, union, reg_cfg)
        if pair.has_masks:
            truth = union_mask(pair.mask_source, pair.mask_target)
            seg = dice_loss(truth, union)
        else:
            seg = 0.0
        report = loss_joint(res.report.dist, res.report.reg, seg, gamma)
        aug = None
        if do_augment:
            label = pair.mask_source if pair.mask_source is not None else u_src
            aug = augment(pair.source, label, res.path)
        return ("ok", u_src, u_tgt, res, report, aug)
    except MorphRegError as exc:
        return ("err", f"{type(exc).__name__}: {exc}")


def joint_fit(dataset, estimator: MaskEstimator, cfg: JointConfig = JointConfig(),
              map_fn=map) -> JointResult:
    """Alternate mask estimation and masked registration for q rounds.

    Each round re-estimates masks (with the previous round's deformed
    image as context), registers every pair against the mask union, and,
    when enabled, appends one deformed labeled copy of each source to
    the working set.  Augmented samples are extra segmentation data;
    registration always runs on the original pairs.  A failing pair is
    recorded and skipped, the rest continue.

    ``map_fn`` orders one round's per-pair work; pass a pool's map to
    spread pairs over workers (results stay ordered by pair).
    """
    pairs = list(dataset)
    if not pairs:
        raise InvalidParameterError("joint_fit needs at least one pair")
    n = len(pairs)
    results: list[RegistrationResult | None] = [None] * n
    mask_src: list[MaskImage] = [zero_mask(p.grid) for p in pairs]
    mask_tgt: list[MaskImage] = [zero_mask(p.grid) for p in pairs]
    deformed: list[ScalarImage | None] = [None] * n
    history: list[tuple[EnergyReport, ...]] = []
    augmented: list[tuple[ScalarImage, MaskImage]] = []
    failures: dict[int, str] = {}

    reg_cfg = cfg.registration
    if reg_cfg.mode != "metamorph":
        reg_cfg = replace(reg_cfg, mode="metamorph")

    for _ in range(cfg.q):
        live = [i for i in range(n) if i not in failures]
        items = [
            (pairs[i], deformed[i], estimator, reg_cfg, cfg.gamma, cfg.augment)
            for i in live
        ]
        reports: list[EnergyReport] = []
        for i, outcome in zip(live, map_fn(_joint_pair_step, items)):
            if outcome[0] == "err":
                failures[i] = outcome[1]
                continue
            _, u_src, u_tgt, res, report, aug = outcome
            mask_src[i], mask_tgt[i] = u_src, u_tgt
            results[i] = res
            deformed[i] = res.deformed
            reports.append(report)
            if aug is not None:
                augmented.append(aug)
        history.append(tuple(reports))

    done = [r for r in results if r is not None]
    if not done:
        raise InvalidParameterError(
            "every pair failed: " + "; ".join(failures.values())
        )
    return JointResult(
        results=tuple(done),
        masks_source=tuple(m for i, m in enumerate(mask_src) if i not in failures),
        masks_target=tuple(m for i, m in enumerate(mask_tgt) if i not in failures),
        history=tuple(history),
        augmented=tuple(augmented),
        failures=tuple(sorted(failures.items())),
    )
