"""Mask estimation, augmentation, and the alternating joint loop."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphreg import (
    GridDesc,
    ImagePair,
    InvalidParameterError,
    JointConfig,
    MaskEstimator,
    MaskImage,
    MissingLabelsError,
    RegistrationConfig,
    ScalarImage,
    SynthSpec,
    TumorSpec,
    VectorField,
    augment,
    build_kernel,
    dice,
    estimate_masks,
    joint_fit,
    make_pair,
    register,
    shoot,
    union_mask,
    zero_mask,
)

from conftest import random_image


def patch_image(grid, value, box, base=0.0):
    data = np.full(grid.sizes, base)
    data[box] = value
    return ScalarImage(grid, data)


class TestMaskEstimatorConfig:
    @pytest.mark.parametrize("bad", [
        dict(kind="unet"),
        dict(smooth_sigma=-1.0),
        dict(min_area=-1),
    ])
    def test_validation(self, bad):
        with pytest.raises(InvalidParameterError):
            MaskEstimator(**bad)

    def test_with_labels_attaches(self, grid8):
        a, b = zero_mask(grid8), zero_mask(grid8)
        est = MaskEstimator(kind="oracle").with_labels(a, b)
        assert est.labels == (a, b)


class TestEstimateMasks:
    def test_identical_images_exactly_empty(self, grid16, rng):
        img = random_image(grid16, rng)
        u_src, u_tgt = estimate_masks(MaskEstimator(), img, img)
        assert not u_src.data.any()
        assert not u_tgt.data.any()

    def test_oracle_passthrough(self, grid8, rng):
        a = MaskImage(grid8, (rng.random((8, 8)) < 0.3).astype(float))
        b = MaskImage(grid8, (rng.random((8, 8)) < 0.3).astype(float))
        est = MaskEstimator(kind="oracle").with_labels(a, b)
        src, tgt = random_image(grid8, rng), random_image(grid8, rng)
        got_src, got_tgt = estimate_masks(est, src, tgt)
        assert got_src is a and got_tgt is b

    def test_oracle_without_labels_rejected(self, grid8, rng):
        with pytest.raises(MissingLabelsError):
            estimate_masks(MaskEstimator(kind="oracle"),
                           random_image(grid8, rng), random_image(grid8, rng))

    def test_bright_tumor_lands_in_target_mask(self):
        spec = SynthSpec(grid=GridDesc((64, 64)), shape="blobs",
                         v0_amplitude=0.6,
                         tumor=TumorSpec(radius=8.0, delta=0.45,
                                         placed_in="target"),
                         seed=5)
        pair, _ = make_pair(spec)
        u_src, u_tgt = estimate_masks(MaskEstimator(), pair.source, pair.target)
        assert dice(u_tgt, pair.mask_target) >= 0.7

    def test_outputs_binary(self, grid16, rng):
        src, tgt = random_image(grid16, rng), random_image(grid16, rng)
        u_src, u_tgt = estimate_masks(MaskEstimator(min_area=1), src, tgt)
        for u in (u_src, u_tgt):
            assert set(np.unique(u.data)) <= {0.0, 1.0}

    def test_min_area_drops_specks(self, grid16):
        box = (slice(4, 6), slice(4, 6))  # 4 voxels
        src = patch_image(grid16, 0.0, box)
        tgt = patch_image(grid16, 1.0, box)
        est = MaskEstimator(smooth_sigma=0.0, threshold=0.5, min_area=9)
        u_src, u_tgt = estimate_masks(est, src, tgt)
        assert not u_src.data.any() and not u_tgt.data.any()
        est = MaskEstimator(smooth_sigma=0.0, threshold=0.5, min_area=4)
        u_src, u_tgt = estimate_masks(est, src, tgt)
        assert u_tgt.data[box].all() and not u_src.data.any()

    def test_brighter_side_claims_component(self, grid16):
        box = (slice(8, 12), slice(8, 12))
        src = patch_image(grid16, 0.9, box, base=0.2)
        tgt = patch_image(grid16, 0.2, box, base=0.2)
        est = MaskEstimator(smooth_sigma=0.0, threshold=0.5, min_area=4)
        u_src, u_tgt = estimate_masks(est, src, tgt)
        assert u_src.data[box].all() and not u_tgt.data.any()

    def test_context_replaces_source(self, grid16, rng):
        src, tgt = random_image(grid16, rng), random_image(grid16, rng)
        u_src, u_tgt = estimate_masks(MaskEstimator(), src, tgt, context=tgt)
        assert not u_src.data.any() and not u_tgt.data.any()

    def test_fixed_threshold_gates_detection(self, grid16):
        box = (slice(4, 10), slice(4, 10))
        src = patch_image(grid16, 0.0, box)
        tgt = patch_image(grid16, 0.4, box)
        est_hi = MaskEstimator(smooth_sigma=0.0, threshold=0.5, min_area=1)
        est_lo = MaskEstimator(smooth_sigma=0.0, threshold=0.3, min_area=1)
        _, hi_tgt = estimate_masks(est_hi, src, tgt)
        _, lo_tgt = estimate_masks(est_lo, src, tgt)
        assert not hi_tgt.data.any()
        assert lo_tgt.data[box].all()


def binary_mask_from_seed(grid, seed, p=0.4):
    r = np.random.default_rng(seed)
    return MaskImage(grid, (r.random(grid.sizes) < p).astype(float))


class TestUnionMask:
    @given(st.integers(0, 2**31), st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_commutative(self, sa, sb):
        grid = GridDesc((8, 8))
        a, b = binary_mask_from_seed(grid, sa), binary_mask_from_seed(grid, sb)
        np.testing.assert_array_equal(union_mask(a, b).data,
                                      union_mask(b, a).data)

    @given(st.integers(0, 2**31), st.integers(0, 2**31), st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_associative(self, sa, sb, sc):
        grid = GridDesc((8, 8))
        a = binary_mask_from_seed(grid, sa)
        b = binary_mask_from_seed(grid, sb)
        c = binary_mask_from_seed(grid, sc)
        np.testing.assert_array_equal(
            union_mask(union_mask(a, b), c).data,
            union_mask(a, union_mask(b, c)).data,
        )

    @given(st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_idempotent(self, sa):
        grid = GridDesc((8, 8))
        a = binary_mask_from_seed(grid, sa)
        np.testing.assert_array_equal(union_mask(a, a).data, a.data)

    def test_soft_masks_take_pointwise_max(self, grid8):
        a = MaskImage(grid8, np.full((8, 8), 0.3))
        b = MaskImage(grid8, np.full((8, 8), 0.7))
        assert (union_mask(a, b).data == 0.7).all()

    def test_zero_mask_is_identity(self, grid8, rng):
        a = MaskImage(grid8, (rng.random((8, 8)) < 0.5).astype(float))
        np.testing.assert_array_equal(union_mask(a, zero_mask(grid8)).data,
                                      a.data)


def disk_mask(grid, center, radius):
    mesh = np.meshgrid(*[np.arange(n, dtype=float) for n in grid.sizes],
                       indexing="ij")
    r = np.sqrt(sum((m - c) ** 2 for m, c in zip(mesh, center)))
    return MaskImage(grid, (r < radius).astype(np.float64))


class TestAugment:
    def test_identity_path_returns_original(self, grid16, rng):
        kernel = build_kernel(grid16)
        img = random_image(grid16, rng)
        mask = disk_mask(grid16, (8, 8), 4.0)
        path = shoot(kernel, VectorField(grid16, np.zeros((2, 16, 16))))
        out_img, out_mask = augment(img, mask, path)
        np.testing.assert_array_equal(out_img.data, img.data)
        np.testing.assert_array_equal(out_mask.data, mask.data)

    def test_integer_translation_shifts_both(self, grid16, rng):
        kernel = build_kernel(grid16)
        img = random_image(grid16, rng)
        mask = disk_mask(grid16, (8, 8), 4.0)
        vc = VectorField(grid16, np.stack([np.full((16, 16), 2.0),
                                           np.zeros((16, 16))]))
        path = shoot(kernel, vc)
        out_img, out_mask = augment(img, mask, path)
        np.testing.assert_allclose(out_img.data, np.roll(img.data, 2, axis=0),
                                   atol=1e-9)
        np.testing.assert_array_equal(out_mask.data,
                                      np.roll(mask.data, 2, axis=0))
        assert set(np.unique(out_mask.data)) <= {0.0, 1.0}

    def test_subvoxel_shift_tracks_analytic_disk(self):
        # ground truth for a rigid shift is just the disk around the
        # shifted center; nearest-neighbor transport must stay close
        grid = GridDesc((32, 32))
        kernel = build_kernel(grid)
        c = (0.6, -0.4)
        vc = VectorField(grid, np.stack([np.full((32, 32), c[0]),
                                         np.full((32, 32), c[1])]))
        path = shoot(kernel, vc)
        mask = disk_mask(grid, (16, 16), 6.0)
        img = ScalarImage(grid, mask.data * 0.8)
        _, out_mask = augment(img, mask, path)
        truth = disk_mask(grid, (16 + c[0], 16 + c[1]), 6.0)
        assert dice(out_mask, truth) >= 0.9
        assert set(np.unique(out_mask.data)) <= {0.0, 1.0}


def small_pair(seed=3, tumor=None, amp=0.5):
    spec = SynthSpec(grid=GridDesc((16, 16)), shape="blobs", v0_amplitude=amp,
                     landmark_spacing=8, tumor=tumor, seed=seed)
    pair, _ = make_pair(spec)
    return pair


def fast_cfg(max_iters=8):
    return RegistrationConfig(mode="metamorph", dist="ssd", dist_weight=3e5,
                              max_iters=max_iters)


class TestJointFit:
    def test_oracle_single_round_is_plain_register(self):
        pair = small_pair(tumor=TumorSpec(radius=3.0, delta=0.4,
                                          placed_in="target"))
        cfg = JointConfig(q=1, registration=fast_cfg(), augment=False)
        res = joint_fit([pair], MaskEstimator(kind="oracle"), cfg)
        truth_union = union_mask(pair.mask_source, pair.mask_target)
        direct = register(pair.source, pair.target, truth_union, fast_cfg())
        np.testing.assert_array_equal(res.results[0].v0.data, direct.v0.data)
        assert res.results[0].trace == direct.trace

    def test_tumor_free_reduces_to_plain_registration(self):
        pair = small_pair(tumor=None)
        est = MaskEstimator(threshold=0.9)  # nothing clears this bar
        cfg = JointConfig(q=2, registration=fast_cfg(), augment=False)
        res = joint_fit([pair], est, cfg)
        assert not res.masks_source[0].data.any()
        assert not res.masks_target[0].data.any()
        plain = register(pair.source, pair.target, None,
                         fast_cfg())
        np.testing.assert_allclose(res.results[0].v0.data, plain.v0.data,
                                   atol=1e-12)

    def test_history_shape_and_augment_count(self):
        pairs = [small_pair(seed=s, tumor=TumorSpec(radius=3.0, delta=0.4,
                                                    placed_in="target"))
                 for s in (3, 4)]
        cfg = JointConfig(q=2, registration=fast_cfg(max_iters=4),
                          augment=True)
        res = joint_fit(pairs, MaskEstimator(), cfg)
        assert len(res.history) == 2
        assert all(len(row) == 2 for row in res.history)
        assert len(res.augmented) == 4  # one per pair per round
        assert len(res.mean_totals) == 2
        for row, mean in zip(res.history, res.mean_totals):
            assert mean == pytest.approx(np.mean([r.total for r in row]))

    def test_partial_failure_continues(self):
        good = small_pair(seed=3, tumor=TumorSpec(radius=3.0, delta=0.4,
                                                  placed_in="target"))
        donor = small_pair(seed=4, tumor=None)
        bad = ImagePair(name="bare", source=donor.source,
                        target=donor.target)  # no ground-truth masks
        cfg = JointConfig(q=1, registration=fast_cfg(max_iters=4),
                          augment=False)
        res = joint_fit([good, bad], MaskEstimator(kind="oracle"), cfg)
        assert len(res.results) == 1
        assert len(res.failures) == 1
        assert res.failures[0][0] == 1
        assert "MissingLabels" in res.failures[0][1]

    def test_all_failures_raise(self):
        donor = small_pair(tumor=None)
        bad = ImagePair(name="bare", source=donor.source, target=donor.target)
        cfg = JointConfig(q=1, registration=fast_cfg(max_iters=4))
        with pytest.raises(InvalidParameterError):
            joint_fit([bad], MaskEstimator(kind="oracle"), cfg)

    def test_empty_dataset_rejected(self):
        with pytest.raises(InvalidParameterError):
            joint_fit([], MaskEstimator(), JointConfig())

    def test_unions_property(self):
        pair = small_pair(tumor=TumorSpec(radius=3.0, delta=0.4,
                                          placed_in="target"))
        cfg = JointConfig(q=1, registration=fast_cfg(max_iters=4),
                          augment=False)
        res = joint_fit([pair], MaskEstimator(), cfg)
        expect = union_mask(res.masks_source[0], res.masks_target[0])
        np.testing.assert_array_equal(res.unions[0].data, expect.data)

    @pytest.mark.parametrize("bad", [dict(q=0), dict(gamma=-0.5)])
    def test_config_validation(self, bad):
        with pytest.raises(InvalidParameterError):
            JointConfig(**bad)
