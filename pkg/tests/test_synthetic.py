"""Tests for synthetic model generation, sampling, rendering, and datasets."""

import numpy as np
import pytest

from morphfit.errors import InvalidArgumentError
from morphfit.geometry import (
    CoeffPair,
    MorphableModel,
    PoseParams,
    Shape,
    compose_shape,
    coord_rows,
    project_landmarks,
    rotation_zyx,
    select_landmarks,
)
from morphfit.synthetic import (
    Dataset,
    DatasetSpec,
    PoseRanges,
    SyntheticModelSpec,
    build_dataset,
    dilate_max,
    generate_model,
    rasterize_depth,
    render_landmarks,
    sample_instance,
    sample_subject,
    split_indices,
)

from conftest import WIDE_RANGES


def flat_square_model(z: float = 0.0, extra_vertex: tuple | None = None) -> MorphableModel:
    """Hand-built model: a unit square at constant depth z, zero bases."""
    verts = [(0.0, 0.0, z), (1.0, 0.0, z), (0.0, 1.0, z), (1.0, 1.0, z)]
    if extra_vertex is not None:
        verts.append(extra_vertex)
    coords = np.array(verts, dtype=np.float64).ravel()
    n = len(verts)
    return MorphableModel(mean=Shape(coords),
                          basis_id=np.zeros((3 * n, 1)),
                          basis_exp=np.zeros((3 * n, 1)),
                          sigma_id=np.array([1.0]),
                          sigma_exp=np.array([1.0]),
                          landmark_indices=np.array([0, 1, 2, 3]),
                          nose_tip_index=0)


IDENTITY_POSE = PoseParams(1.0, np.eye(3), np.zeros(3))
ZERO_COEFFS = CoeffPair(np.zeros(1), np.zeros(1))


# ---------------------------------------------------------------------------
# generate_model


class TestGenerateModel:
    def test_deterministic_rebuild(self):
        spec = SyntheticModelSpec(n_vertices=150, k_id=6, k_exp=4, seed=5)
        a, b = generate_model(spec), generate_model(spec)
        assert np.array_equal(a.mean.coords, b.mean.coords)
        assert np.array_equal(a.basis_id, b.basis_id)
        assert np.array_equal(a.basis_exp, b.basis_exp)
        assert np.array_equal(a.landmark_indices, b.landmark_indices)
        assert a.nose_tip_index == b.nose_tip_index

    def test_combined_basis_orthonormal(self, desk_model):
        combined = np.hstack([desk_model.basis_id, desk_model.basis_exp])
        gram = combined.T @ combined
        assert np.max(np.abs(gram - np.eye(gram.shape[0]))) < 1e-10

    def test_landmark_cross_moments_vanish(self, desk_model):
        # paired identity/residual columns have zero cross-moment matrices
        # over the landmark subset, so their projected blocks decouple
        rows = coord_rows(desk_model.landmark_indices)
        ident = desk_model.basis_id[rows].reshape(-1, 3, desk_model.k_id)
        resid = desk_model.basis_exp[rows].reshape(-1, 3, desk_model.k_exp)
        cross = np.einsum("lre,lcb->recb", resid, ident)
        assert np.max(np.abs(cross)) < 1e-10

    def test_landmark_affine_moments_vanish(self, desk_model):
        rows = coord_rows(desk_model.landmark_indices)
        positions = desk_model.mean.points[desk_model.landmark_indices]
        for basis in (desk_model.basis_id, desk_model.basis_exp):
            per_landmark = basis[rows].reshape(-1, 3, basis.shape[1])
            assert np.max(np.abs(per_landmark.sum(axis=0))) < 1e-8
            moments = np.einsum("lrk,lc->rck", per_landmark, positions)
            assert np.max(np.abs(moments)) < 1e-8

    def test_sigma_decay(self, desk_model):
        assert np.array_equal(desk_model.sigma_id, 0.9 ** np.arange(20))
        assert np.array_equal(desk_model.sigma_exp, 0.9 ** np.arange(8))

    def test_landmarks_distinct_and_seed_independent(self):
        a = generate_model(SyntheticModelSpec(n_vertices=150, k_id=6, k_exp=4, seed=1))
        b = generate_model(SyntheticModelSpec(n_vertices=150, k_id=6, k_exp=4, seed=9))
        assert len(set(a.landmark_indices.tolist())) == 68
        assert np.array_equal(a.landmark_indices, b.landmark_indices)
        assert a.nose_tip_index == b.nose_tip_index

    def test_nose_tip_is_depth_peak(self, desk_model):
        z = desk_model.mean.points[:, 2]
        assert desk_model.nose_tip_index == int(np.argmax(z))
        assert desk_model.landmark_indices[0] == desk_model.nose_tip_index

    def test_too_few_vertices_rejected(self):
        with pytest.raises(InvalidArgumentError):
            SyntheticModelSpec(n_vertices=50)

    def test_widths_exceeding_vertices_rejected(self):
        with pytest.raises(InvalidArgumentError):
            SyntheticModelSpec(n_vertices=68, k_id=60, k_exp=9)

    def test_full_scale_spec_accepted(self):
        spec = SyntheticModelSpec(n_vertices=29495, k_id=199, k_exp=29)
        assert spec.n_vertices == 29495


# ---------------------------------------------------------------------------
# coefficient and pose sampling


class TestSampling:
    def test_zero_sigma_override_collapses_draw(self, small_model):
        rng = np.random.default_rng(0)
        alpha = sample_subject(small_model, rng, sigma_override=np.zeros(small_model.k_id))
        assert np.array_equal(alpha, np.zeros(small_model.k_id))

    def test_override_length_checked(self, small_model):
        with pytest.raises(InvalidArgumentError):
            sample_subject(small_model, np.random.default_rng(0), sigma_override=np.zeros(3))

    def test_subject_draws_reproducible(self, small_model):
        a = sample_subject(small_model, np.random.default_rng(7))
        b = sample_subject(small_model, np.random.default_rng(7))
        assert np.array_equal(a, b)

    def test_subject_draw_scales(self, small_model):
        rng = np.random.default_rng(3)
        draws = np.stack([sample_subject(small_model, rng) for _ in range(4000)])
        observed = draws.std(axis=0, ddof=1)
        assert np.all(np.abs(observed / small_model.sigma_id - 1.0) < 0.05)

    def test_degenerate_ranges_give_exact_pose(self, small_model):
        ranges = PoseRanges(yaw=(0.3, 0.3), pitch=(-0.1, -0.1), roll=(0.05, 0.05),
                            scale=(1.7, 1.7), tx=(0.2, 0.2), ty=(-0.3, -0.3),
                            tz=(0.1, 0.1))
        spec = DatasetSpec(pose_ranges=ranges)
        _, pose = sample_instance(small_model, spec, np.random.default_rng(0))
        assert pose.scale == 1.7
        assert np.array_equal(pose.rotation, rotation_zyx(0.3, -0.1, 0.05))
        assert np.array_equal(pose.translation, np.array([0.2, -0.3, 0.1]))

    def test_instance_draws_stay_in_ranges(self, small_model):
        spec = DatasetSpec(pose_ranges=WIDE_RANGES)
        rng = np.random.default_rng(11)
        scales, translations = [], []
        for _ in range(2000):
            alpha_exp, pose = sample_instance(small_model, spec, rng)
            assert alpha_exp.shape == (small_model.k_exp,)
            scales.append(pose.scale)
            translations.append(pose.translation)
        scales = np.array(scales)
        translations = np.array(translations)
        assert scales.min() >= 0.9 and scales.max() <= 1.1
        assert translations.min() >= -0.1 and translations.max() <= 0.1
        # uniform on [0.9, 1.1]: std = 0.2 / sqrt(12)
        assert abs(scales.std() / (0.2 / np.sqrt(12.0)) - 1.0) < 0.05

    def test_residual_draw_scales(self, small_model):
        spec = DatasetSpec()
        rng = np.random.default_rng(13)
        draws = np.stack([sample_instance(small_model, spec, rng)[0]
                          for _ in range(4000)])
        observed = draws.std(axis=0, ddof=1)
        assert np.all(np.abs(observed / small_model.sigma_exp - 1.0) < 0.05)


# ---------------------------------------------------------------------------
# render_landmarks


class TestRenderLandmarks:
    def test_noiseless_matches_projection(self, small_model):
        rng = np.random.default_rng(2)
        coeffs = CoeffPair(sample_subject(small_model, rng),
                           np.zeros(small_model.k_exp))
        pose = PoseParams(1.2, rotation_zyx(0.2, -0.1, 0.3), np.array([0.1, 0.2, 5.0]))
        got = render_landmarks(small_model, coeffs, pose, 0.0, np.random.default_rng(0))
        shape = compose_shape(small_model, coeffs)
        expected = project_landmarks(
            select_landmarks(shape, small_model.landmark_indices), pose)
        assert np.array_equal(got.coords, expected.coords)

    def test_rng_state_independent_of_noise_level(self, small_model):
        rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
        render_landmarks(small_model, ZERO_COEFFS_FOR(small_model), IDENTITY_POSE, 0.0, rng_a)
        render_landmarks(small_model, ZERO_COEFFS_FOR(small_model), IDENTITY_POSE, 1.0, rng_b)
        assert rng_a.random() == rng_b.random()

    def test_noise_scale(self, small_model):
        coeffs = ZERO_COEFFS_FOR(small_model)
        clean = render_landmarks(small_model, coeffs, IDENTITY_POSE, 0.0,
                                 np.random.default_rng(0))
        rng = np.random.default_rng(17)
        deviations = []
        for _ in range(100):
            noisy = render_landmarks(small_model, coeffs, IDENTITY_POSE, 0.25, rng)
            deviations.append(noisy.coords - clean.coords)
        observed = np.concatenate(deviations).std(ddof=1)
        assert abs(observed / 0.25 - 1.0) < 0.05

    def test_negative_sigma_rejected(self, small_model):
        with pytest.raises(InvalidArgumentError):
            render_landmarks(small_model, ZERO_COEFFS_FOR(small_model), IDENTITY_POSE,
                             -1.0, np.random.default_rng(0))


def ZERO_COEFFS_FOR(model: MorphableModel) -> CoeffPair:
    return CoeffPair(np.zeros(model.k_id), np.zeros(model.k_exp))


# ---------------------------------------------------------------------------
# rasterize_depth / dilate_max


class TestRasterizeDepth:
    def test_constant_depth_reads_plus_one(self):
        model = flat_square_model(z=0.37)
        image = rasterize_depth(model, ZERO_COEFFS, IDENTITY_POSE, 2)
        assert np.array_equal(image, np.ones((2, 2)))

    def test_all_points_in_one_pixel(self):
        model = flat_square_model(z=-1.3)
        image = rasterize_depth(model, ZERO_COEFFS, IDENTITY_POSE, 1)
        assert np.array_equal(image, np.ones((1, 1)))

    def test_nearest_point_wins_pixel(self):
        # fifth vertex shares the (0, 0) pixel with a farther square corner
        model = flat_square_model(z=0.0, extra_vertex=(0.01, 0.01, 0.9))
        image = rasterize_depth(model, ZERO_COEFFS, IDENTITY_POSE, 2)
        assert np.array_equal(image, np.array([[1.0, -1.0], [-1.0, -1.0]]))

    def test_range_and_extremes(self, desk_model):
        coeffs = CoeffPair(np.zeros(desk_model.k_id), np.zeros(desk_model.k_exp))
        image = rasterize_depth(desk_model, coeffs, IDENTITY_POSE, 32)
        assert image.shape == (32, 32)
        assert image.min() >= -1.0 and image.max() <= 1.0
        assert np.any(image == 1.0)   # nearest point always lands at +1
        assert np.any(image == -1.0)  # 600 points leave holes on a 32x32 grid

    def test_deterministic(self, small_model):
        coeffs = ZERO_COEFFS_FOR(small_model)
        a = rasterize_depth(small_model, coeffs, IDENTITY_POSE, 16)
        b = rasterize_depth(small_model, coeffs, IDENTITY_POSE, 16)
        assert np.array_equal(a, b)

    def test_matches_pixel_oracle(self, small_model):
        rng = np.random.default_rng(21)
        spec = DatasetSpec(pose_ranges=WIDE_RANGES)
        for _ in range(5):
            alpha_exp, pose = sample_instance(small_model, spec, rng)
            coeffs = CoeffPair(sample_subject(small_model, rng), alpha_exp)
            resolution = 8
            got = rasterize_depth(small_model, coeffs, pose, resolution)

            points = compose_shape(small_model, coeffs).points
            rotated = (points + pose.translation) @ pose.rotation.T
            u, v, depth = pose.scale * rotated[:, 0], pose.scale * rotated[:, 1], rotated[:, 2]
            side = max(u.max() - u.min(), v.max() - v.min())
            ox = (u.max() + u.min()) / 2.0 - side / 2.0
            oy = (v.max() + v.min()) / 2.0 - side / 2.0
            best: dict[tuple[int, int], float] = {}
            for ui, vi, zi in zip(u, v, depth):
                col = min(max(int((ui - ox) / side * resolution), 0), resolution - 1)
                row = min(max(int((vi - oy) / side * resolution), 0), resolution - 1)
                key = (row, col)
                best[key] = max(best.get(key, -np.inf), zi)
            expected = np.full((resolution, resolution), -1.0)
            z_min, z_max = depth.min(), depth.max()
            for (row, col), z in best.items():
                expected[row, col] = 2.0 * (z - z_min) / (z_max - z_min) - 1.0
            assert np.max(np.abs(got - expected)) < 1e-12

    def test_bad_resolution_rejected(self, small_model):
        with pytest.raises(InvalidArgumentError):
            rasterize_depth(small_model, ZERO_COEFFS_FOR(small_model), IDENTITY_POSE, 0)


class TestDilateMax:
    def test_matches_neighborhood_oracle(self):
        rng = np.random.default_rng(3)
        image = rng.normal(size=(9, 7))
        got = dilate_max(image)
        expected = np.empty_like(image)
        for r in range(9):
            for c in range(7):
                window = image[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2]
                expected[r, c] = window.max()
        assert np.array_equal(got, expected)

    def test_constant_image_unchanged(self):
        image = np.full((4, 4), 0.25)
        assert np.array_equal(dilate_max(image), image)

    def test_requires_2d(self):
        with pytest.raises(InvalidArgumentError):
            dilate_max(np.zeros(5))


# ---------------------------------------------------------------------------
# splits and dataset assembly


class TestSplitIndices:
    def test_canonical_split(self):
        train, val, test = split_indices(20, 10)
        assert np.array_equal(test, np.arange(150, 200))
        expected_val = np.concatenate([np.arange(s * 10 + 8, s * 10 + 10)
                                       for s in range(15)])
        assert np.array_equal(val, expected_val)
        assert np.array_equal(np.sort(np.concatenate([train, val, test])),
                              np.arange(200))

    @pytest.mark.parametrize("n_subjects,images", [(2, 1), (2, 3), (5, 5),
                                                   (20, 10), (7, 4)])
    def test_partition_properties(self, n_subjects, images):
        train, val, test = split_indices(n_subjects, images)
        combined = np.concatenate([train, val, test])
        assert np.array_equal(np.sort(combined), np.arange(n_subjects * images))
        assert len(test) >= images           # at least one held-out subject
        assert len(train) >= images          # and at least one training subject
        # held-out subjects contribute no train/val samples
        heldout_start = test.min()
        assert np.all(train < heldout_start) and (len(val) == 0 or np.all(val < heldout_start))

    def test_too_few_subjects_rejected(self):
        with pytest.raises(InvalidArgumentError):
            split_indices(1, 10)
        with pytest.raises(InvalidArgumentError):
            split_indices(2, 0)


@pytest.fixture(scope="module")
def tiny(small_model) -> Dataset:
    spec = DatasetSpec(n_subjects=2, images_per_subject=3, image_resolution=16,
                       seed=42)
    return build_dataset(small_model, spec)


class TestBuildDataset:
    def test_labels_subject_major(self, tiny):
        labels = [s.subject_label for s in tiny.samples]
        assert labels == [0, 0, 0, 1, 1, 1]

    def test_identity_shared_within_subject(self, tiny):
        first = tiny.samples[0].ground_truth_coeffs.alpha_id
        for sample in tiny.samples[1:3]:
            assert np.array_equal(sample.ground_truth_coeffs.alpha_id, first)
        assert not np.array_equal(tiny.samples[3].ground_truth_coeffs.alpha_id, first)

    def test_stored_shape_matches_coefficients(self, tiny, small_model):
        for sample in tiny.samples:
            expected = compose_shape(small_model, sample.ground_truth_coeffs)
            assert np.array_equal(sample.ground_truth_shape.coords, expected.coords)

    def test_stored_raster_is_dilated_render(self, tiny, small_model):
        for sample in tiny.samples:
            expected = dilate_max(rasterize_depth(
                small_model, sample.ground_truth_coeffs,
                sample.ground_truth_pose, tiny.spec.image_resolution))
            assert np.array_equal(sample.depth_image, expected)

    def test_noiseless_landmarks_match_projection(self, tiny, small_model):
        for sample in tiny.samples:
            shape = compose_shape(small_model, sample.ground_truth_coeffs)
            expected = project_landmarks(
                select_landmarks(shape, small_model.landmark_indices),
                sample.ground_truth_pose)
            assert np.array_equal(sample.landmarks.coords, expected.coords)

    def test_rebuild_bit_identical(self, tiny, small_model):
        again = build_dataset(small_model, tiny.spec)
        for a, b in zip(tiny.samples, again.samples):
            assert np.array_equal(a.depth_image, b.depth_image)
            assert np.array_equal(a.landmarks.coords, b.landmarks.coords)
            assert np.array_equal(a.ground_truth_coeffs.alpha_exp,
                                  b.ground_truth_coeffs.alpha_exp)
            assert a.ground_truth_pose.scale == b.ground_truth_pose.scale

    def test_tiny_split(self, tiny):
        assert np.array_equal(tiny.train_indices, np.arange(0, 3))
        assert len(tiny.val_indices) == 0
        assert np.array_equal(tiny.test_indices, np.arange(3, 6))

    def test_default_dataset_layout(self, default_dataset):
        assert len(default_dataset.samples) == 200
        assert default_dataset.n_train_subjects == 15
        assert default_dataset.heldout_subjects == [15, 16, 17, 18, 19]
        labels = np.array([s.subject_label for s in default_dataset.samples])
        assert np.array_equal(labels, np.repeat(np.arange(20), 10))
        image = default_dataset.samples[0].depth_image
        assert image.shape == (32, 32)
        assert image.min() >= -1.0 and image.max() <= 1.0
