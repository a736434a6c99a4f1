"""
Tests for 2D to 3D label reconstruction.
Run with: pytest test_postprocess.py -v
"""
import math

import numpy as np
import pytest
from pydantic import ValidationError

import brute_force
from conftest import random_cloud
from core.exceptions import MappingError, ParameterError, ShapeError
from models.domain import ProjectionIndex, ScoreVolume
from models.params import KnnParams, NnriParams
from services.postprocess_service import postprocess_service
from services.projection_service import projection_service


def random_instance(rng: np.random.Generator, n_images: int = None, points: int = 30):
    """Random score volume, range stack and point index on a small raster."""
    n = n_images or int(rng.integers(1, 4))
    c = int(rng.integers(2, 6))
    h = int(rng.integers(2, 12))
    w = int(rng.integers(2, 12))

    occupancy = rng.random((n, h, w)) < 0.7
    ranges = np.where(occupancy, rng.uniform(5.0, 8.0, (n, h, w)), -1.0).astype(np.float32)
    raw = rng.random((n, c, h, w))
    scores = raw / raw.sum(axis=1, keepdims=True) * occupancy[:, np.newaxis]
    volume = ScoreVolume(scores=scores, occupancy=occupancy)

    sub = rng.integers(0, n, points)
    vs = rng.integers(0, h, points)
    us = rng.integers(0, w, points)
    own = ranges[sub, vs, us]
    point_ranges = np.where(own > 0, own + rng.choice([0.0, 0.3, 1.5], points),
                            rng.uniform(5.0, 8.0, points))
    index = ProjectionIndex(
        us=us, vs=vs, winner=np.zeros(points, dtype=bool), subcloud_id=sub,
        ranges=point_ranges, n_subclouds=n, height=h, width=w,
    )
    return volume, ranges, index


def single_point(u: int, v: int, r: float, height: int = 5, width: int = 5,
                 n_subclouds: int = 1) -> ProjectionIndex:
    return ProjectionIndex(us=[u], vs=[v], winner=[False], subcloud_id=[0], ranges=[r],
                           n_subclouds=n_subclouds, height=height, width=width)


class TestCutoff:
    """Test the adaptive NNRI cut-off."""

    def test_mean_range_gives_alpha(self):
        assert postprocess_service.cutoff(10.0, 10.0, 5.0, 1.0) == pytest.approx(1.0)

    def test_one_std_above_mean_gives_e(self):
        assert postprocess_service.cutoff(15.0, 10.0, 5.0, 1.0) == pytest.approx(math.e)

    def test_grows_with_range_and_alpha(self):
        ranges = np.linspace(2.0, 50.0, 20)
        small = postprocess_service.cutoff(ranges, 12.0, 9.0, 0.5)
        large = postprocess_service.cutoff(ranges, 12.0, 9.0, 2.0)
        assert np.all(np.diff(small) > 0)
        assert np.all(large >= small)

    def test_rejects_non_positive_std(self):
        with pytest.raises(ParameterError):
            postprocess_service.cutoff(10.0, 10.0, 0.0, 1.0)

    def test_range_statistics(self):
        mean, std = postprocess_service.range_statistics(np.array([2.0, 4.0]))
        assert mean == pytest.approx(3.0)
        assert std == pytest.approx(1.0)
        assert postprocess_service.range_statistics(np.array([5.0, 5.0])) == (5.0, 1.0)


class TestNnri:
    """Test Nearest Neighbors Range Interpolation."""

    def test_k1_single_image_takes_own_argmax(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            volume, ranges, index = random_instance(rng, n_images=1)
            labels = postprocess_service.nnri(volume, ranges, index, NnriParams(k=1))
            expected = np.argmax(volume.scores[0][:, index.vs, index.us], axis=0)
            np.testing.assert_array_equal(labels, expected)

    def test_unanimous_window(self):
        height, width = 6, 7
        occupancy = np.ones((2, height, width), dtype=bool)
        scores = np.zeros((2, 4, height, width))
        scores[:, 2] = 0.7
        scores[:, 0] = 0.1
        scores[:, 1] = 0.1
        scores[:, 3] = 0.1
        rng = np.random.default_rng(0)
        ranges = rng.uniform(5.0, 6.0, (2, height, width)).astype(np.float32)
        volume = ScoreVolume(scores=scores, occupancy=occupancy)
        index = ProjectionIndex(
            us=rng.integers(0, width, 25), vs=rng.integers(0, height, 25),
            winner=np.zeros(25, dtype=bool), subcloud_id=rng.integers(0, 2, 25),
            ranges=rng.uniform(5.0, 6.0, 25), n_subclouds=2, height=height, width=width,
        )
        labels = postprocess_service.nnri(volume, ranges, index, NnriParams())
        assert np.all(labels == 2)

    def test_winners_recover_one_hot_labels(self, kitti_sensor):
        rng = np.random.default_rng(11)
        cloud = random_cloud(rng, 3000, kitti_sensor, num_classes=6)
        image, index = projection_service.project(cloud, kitti_sensor, 32, 256)
        plane = image.label_plane
        scores = np.zeros((1, 6) + plane.shape)
        rows, cols = np.nonzero(image.occupancy)
        scores[0, plane[rows, cols], rows, cols] = 1.0
        volume = ScoreVolume(scores=scores, occupancy=image.occupancy[np.newaxis])

        labels = postprocess_service.nnri(volume, image.ranges[np.newaxis], index, NnriParams(k=1))
        np.testing.assert_array_equal(labels[index.winner], cloud.labels[index.winner])

    def test_matches_reference_loops(self):
        rng = np.random.default_rng(2024)
        for trial in range(200):
            volume, ranges, index = random_instance(rng)
            k = (1, 3, 5)[trial % 3]
            params = NnriParams(k=k, alpha=float(rng.choice([0.5, 1.0, 2.0])), r_mean=6.5, r_std=1.0)
            labels = postprocess_service.nnri(volume, ranges, index, params)
            expected = brute_force.nnri(
                volume.scores, volume.occupancy, ranges, index.ranges, index.vs, index.us,
                k, params.alpha, params.r_mean, params.r_std,
            )
            np.testing.assert_array_equal(labels, expected, err_msg=f"trial {trial}")

    def test_scale_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            volume, ranges, index = random_instance(rng)
            params = NnriParams(alpha=1.0, r_mean=6.5, r_std=1.0)
            scaled_params = NnriParams(alpha=4.0, r_mean=26.0, r_std=4.0)
            scaled_index = index.model_copy(update={"ranges": index.ranges * np.float32(4.0)})
            scaled_ranges = np.where(ranges > 0, ranges * np.float32(4.0), ranges)
            np.testing.assert_array_equal(
                postprocess_service.nnri(volume, ranges, index, params),
                postprocess_service.nnri(volume, scaled_ranges, scaled_index, scaled_params),
            )

    def test_score_scale_invariance(self):
        rng = np.random.default_rng(6)
        for trial in range(50):
            volume, ranges, index = random_instance(rng)
            params = NnriParams(k=(1, 3, 5)[trial % 3], r_mean=6.5, r_std=1.0)
            labels = postprocess_service.nnri(volume, ranges, index, params)
            for factor in (0.25, 4.0, 8.0):
                scaled = ScoreVolume(scores=volume.scores * np.float32(factor),
                                     occupancy=volume.occupancy)
                np.testing.assert_array_equal(
                    postprocess_service.nnri(scaled, ranges, index, params), labels,
                    err_msg=f"trial {trial}, factor {factor}",
                )

    def test_larger_alpha_never_drops_neighbours(self):
        rng = np.random.default_rng(7)
        alphas = (0.25, 0.5, 1.0, 2.0, 4.0)
        for trial in range(50):
            volume, ranges, index = random_instance(rng)
            mode = ("adaptive", "constant")[trial % 2]
            supports = [
                postprocess_service.neighbour_weights(
                    volume, ranges, index,
                    NnriParams(k=(3, 5)[trial % 2], alpha=alpha, cutoff_mode=mode,
                               r_mean=6.5, r_std=1.0),
                ) > 0
                for alpha in alphas
            ]
            for small, large in zip(supports, supports[1:]):
                assert np.all(~small | large), f"trial {trial}"

    def test_constant_cutoff_ignores_range(self):
        ranges = np.full((1, 5, 5), -1.0, dtype=np.float32)
        ranges[0, 2, 2], ranges[0, 2, 3] = 30.0, 31.5
        occupancy = ranges > 0
        scores = np.zeros((1, 3, 5, 5))
        scores[0, 1, 2, 2] = scores[0, 2, 2, 3] = 1.0
        volume = ScoreVolume(scores=scores, occupancy=occupancy)
        index = single_point(2, 2, 30.0)

        adaptive = NnriParams(alpha=1.0, r_mean=10.0, r_std=5.0)
        constant = adaptive.model_copy(update={"cutoff_mode": "constant"})
        assert postprocess_service.cutoffs(index.ranges, 10.0, 5.0, constant).tolist() == [1.0]

        far = postprocess_service.neighbour_weights(volume, ranges, index, adaptive)
        near = postprocess_service.neighbour_weights(volume, ranges, index, constant)
        assert far[0, 0, 4] == near[0, 0, 4] == 1.0
        assert far[0, 0, 5] > 0.9
        assert near[0, 0, 5] == 0.0
        assert postprocess_service.nnri(volume, ranges, index, constant).tolist() == [1]

    def test_constant_cutoff_matches_reference_loops(self):
        rng = np.random.default_rng(2025)
        for trial in range(200):
            volume, ranges, index = random_instance(rng)
            k = (1, 3, 5)[trial % 3]
            params = NnriParams(k=k, alpha=float(rng.choice([0.25, 0.5, 1.0, 2.0])),
                                cutoff_mode="constant")
            labels = postprocess_service.nnri(volume, ranges, index, params)
            r_mean, r_std = postprocess_service.range_statistics(index.ranges)
            expected = brute_force.nnri(
                volume.scores, volume.occupancy, ranges, index.ranges, index.vs, index.us,
                k, params.alpha, r_mean, r_std, cutoff_mode="constant",
            )
            np.testing.assert_array_equal(labels, expected, err_msg=f"trial {trial}")

    def test_chunking_does_not_change_labels(self):
        rng = np.random.default_rng(8)
        volume, ranges, index = random_instance(rng, points=100)
        whole = postprocess_service.nnri(volume, ranges, index, NnriParams())
        chunked = postprocess_service.nnri(volume, ranges, index, NnriParams(chunk_size=7))
        np.testing.assert_array_equal(whole, chunked)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValidationError):
            NnriParams(k=2)

    def test_range_shape_mismatch(self):
        volume, ranges, index = random_instance(np.random.default_rng(0))
        with pytest.raises(ShapeError):
            postprocess_service.nnri(volume, ranges[:, :-1], index, NnriParams())

    def test_index_size_mismatch(self):
        volume, ranges, _ = random_instance(np.random.default_rng(0))
        index = single_point(0, 0, 5.0, height=volume.height + 1, width=volume.width)
        with pytest.raises(ShapeError):
            postprocess_service.nnri(volume, ranges, index, NnriParams())


class TestKnn:
    """Test window KNN voting in one and in several range images."""

    @staticmethod
    def plane(cells, height=5, width=5):
        ranges = np.full((height, width), -1.0, dtype=np.float32)
        labels = np.full((height, width), -1, dtype=np.int32)
        for (v, u), (r, label) in cells.items():
            ranges[v, u] = r
            labels[v, u] = label
        return ranges, labels

    def test_single_neighbour_decides(self):
        ranges, labels = self.plane({(2, 3): (10.0, 1)})
        result = postprocess_service.knn_single(ranges, labels, single_point(2, 2, 10.2),
                                                KnnParams(), 3, 0)
        assert result.tolist() == [1]

    def test_plurality_of_five(self):
        cells = {(1, 1): (10.0, 1), (1, 2): (10.1, 1), (1, 3): (10.2, 1),
                 (3, 1): (10.0, 2), (3, 2): (10.1, 2)}
        ranges, labels = self.plane(cells)
        result = postprocess_service.knn_single(ranges, labels, single_point(2, 2, 10.0),
                                                KnnParams(), 3, 0)
        assert result.tolist() == [1]

    def test_falls_back_to_own_label(self):
        ranges, labels = self.plane({(2, 2): (20.0, 2)})
        result = postprocess_service.knn_single(ranges, labels, single_point(2, 2, 10.0),
                                                KnnParams(), 3, 0)
        assert result.tolist() == [2]

    def test_empty_window_gives_ignore(self):
        ranges, labels = self.plane({(0, 0): (10.0, 2)}, height=9, width=9)
        result = postprocess_service.knn_single(ranges, labels,
                                                single_point(4, 4, 10.0, height=9, width=9),
                                                KnnParams(), 3, 0)
        assert result.tolist() == [0]

    def test_window_wraps_horizontally(self):
        ranges, labels = self.plane({(2, 4): (10.0, 2)})
        result = postprocess_service.knn_single(ranges, labels, single_point(0, 2, 10.0),
                                                KnnParams(k=3), 3, 0)
        assert result.tolist() == [2]

    def test_multi_accumulates_across_images(self):
        first_r, first_l = self.plane({(1, 1): (10.0, 1), (1, 2): (10.0, 1)})
        second_r, second_l = self.plane({(3, 1): (10.0, 2), (3, 2): (10.0, 2), (3, 3): (10.0, 2)})
        ranges = np.stack([first_r, second_r])
        labels = np.stack([first_l, second_l])
        index = single_point(2, 2, 10.0, n_subclouds=2)
        result = postprocess_service.knn_multi(ranges, labels, index, KnnParams(), 3, 0)
        assert result.tolist() == [2]
        per_subcloud = postprocess_service.knn_per_subcloud(ranges, labels, index, KnnParams(), 3, 0)
        assert per_subcloud.tolist() == [1]

    def test_multi_with_one_image_equals_single(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            volume, ranges, index = random_instance(rng, n_images=1)
            planes = postprocess_service.labels_from_scores(volume)
            params = KnnParams(k=3, votes=4)
            single = postprocess_service.knn_single(ranges[0], planes[0], index, params,
                                                    volume.num_classes, 0)
            multi = postprocess_service.knn_multi(ranges, planes, index, params,
                                                  volume.num_classes, 0)
            np.testing.assert_array_equal(single, multi)

    def test_single_matches_reference_loops(self):
        rng = np.random.default_rng(99)
        for trial in range(200):
            volume, ranges, index = random_instance(rng, n_images=1)
            planes = postprocess_service.labels_from_scores(volume)
            sigma = None if trial % 2 else 1.5
            k = (1, 3, 5)[trial % 3]
            params = KnnParams(k=k, votes=min(5, k * k), cutoff=1.0, sigma=sigma)
            labels = postprocess_service.knn_single(ranges[0], planes[0], index, params,
                                                    volume.num_classes, 0)
            expected = brute_force.knn_single(
                ranges[0], planes[0], index.ranges, index.vs, index.us, params.k, params.votes,
                params.cutoff, params.sigma, volume.num_classes, 0,
            )
            np.testing.assert_array_equal(labels, expected, err_msg=f"trial {trial}")

    def test_multi_matches_reference_loops(self):
        rng = np.random.default_rng(100)
        for trial in range(200):
            volume, ranges, index = random_instance(rng)
            planes = postprocess_service.labels_from_scores(volume)
            sigma = 2.0 if trial % 3 == 0 else None
            k = (1, 3, 5)[trial % 3]
            params = KnnParams(k=k, votes=min(5, k * k), cutoff=0.5, sigma=sigma)
            labels = postprocess_service.knn_multi(ranges, planes, index, params,
                                                   volume.num_classes, 0)
            expected = brute_force.knn_multi(
                ranges, planes, index.ranges, index.vs, index.us, index.subcloud_id, params.k,
                params.votes, params.cutoff, params.sigma, volume.num_classes, 0,
            )
            np.testing.assert_array_equal(labels, expected, err_msg=f"trial {trial}")

    def test_even_kernel_rejected(self):
        with pytest.raises(ValidationError):
            KnnParams(k=4, votes=3)

    def test_label_outside_class_range(self):
        ranges, labels = self.plane({(2, 3): (10.0, 7)})
        with pytest.raises(MappingError):
            postprocess_service.knn_single(ranges, labels, single_point(2, 2, 10.0),
                                           KnnParams(), 3, 0)


class TestNla:
    """Test Nearest Label Assignment."""

    def test_winner_keeps_own_label(self):
        ranges = np.array([[10.0, 12.0, 14.0]], dtype=np.float32)
        labels = np.array([[1, 2, 1]], dtype=np.int32)
        index = single_point(1, 0, 12.0, height=1, width=3)
        assert postprocess_service.nla(ranges, labels, index, 3, 0).tolist() == [2]

    def test_occluded_point_takes_nearest_in_range(self):
        ranges = np.array([[5.0, 5.0, 10.1]], dtype=np.float32)
        labels = np.array([[1, 1, 2]], dtype=np.int32)
        index = single_point(1, 0, 10.0, height=1, width=3)
        assert postprocess_service.nla(ranges, labels, index, 3, 0).tolist() == [2]

    def test_empty_window_gives_ignore(self):
        ranges = np.full((5, 5), -1.0, dtype=np.float32)
        labels = np.full((5, 5), -1, dtype=np.int32)
        assert postprocess_service.nla(ranges, labels, single_point(2, 2, 10.0), 3, 0).tolist() == [0]

    def test_even_kernel_rejected(self):
        ranges = np.full((5, 5), 10.0, dtype=np.float32)
        labels = np.ones((5, 5), dtype=np.int32)
        with pytest.raises(ParameterError):
            postprocess_service.nla(ranges, labels, single_point(2, 2, 10.0), 2, 0)

    def test_matches_reference_loops(self):
        rng = np.random.default_rng(101)
        for trial in range(200):
            volume, ranges, index = random_instance(rng, n_images=1)
            planes = postprocess_service.labels_from_scores(volume)
            k = (1, 3, 5)[trial % 3]
            labels = postprocess_service.nla(ranges[0], planes[0], index, k, 0)
            expected = brute_force.nla(ranges[0], planes[0], index.ranges, index.vs, index.us, k, 0)
            np.testing.assert_array_equal(labels, expected, err_msg=f"trial {trial}")


class TestDispatch:
    """Test post-processor selection by name."""

    def test_named_methods(self):
        volume, ranges, index = random_instance(np.random.default_rng(4))
        planes = postprocess_service.labels_from_scores(volume)
        c = volume.num_classes
        np.testing.assert_array_equal(
            postprocess_service.run("nla", volume, ranges, index, 0),
            postprocess_service.nla_per_subcloud(ranges, planes, index, 5, 0),
        )
        np.testing.assert_array_equal(
            postprocess_service.run("knn-multi", volume, ranges, index, 0),
            postprocess_service.knn_multi(ranges, planes, index, KnnParams(), c, 0),
        )
        np.testing.assert_array_equal(
            postprocess_service.run("knn", volume, ranges, index, 0),
            postprocess_service.knn_per_subcloud(ranges, planes, index, KnnParams(), c, 0),
        )
        assert len(postprocess_service.run("nnri", volume, ranges, index, 0)) == index.count

    def test_unknown_method(self):
        volume, ranges, index = random_instance(np.random.default_rng(4))
        with pytest.raises(ParameterError):
            postprocess_service.run("majority", volume, ranges, index, 0)

    def test_labels_from_scores_marks_empty(self):
        volume, _, _ = random_instance(np.random.default_rng(4))
        planes = postprocess_service.labels_from_scores(volume)
        assert np.all(planes[~volume.occupancy] == -1)
        assert np.all(planes[volume.occupancy] >= 0)
