"""2D to 3D label reconstruction: NNRI, window KNN voting and nearest label assignment.

All kernels look at a k×k window around each point's pixel. The window wraps around
horizontally (azimuth is periodic) and treats rows beyond the image as unoccupied.
Window positions are enumerated row-major from the top-left; every tie-break that
depends on neighbour order uses that enumeration.
"""
import logging
from typing import Iterator, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.exceptions import MappingError, ParameterError, ShapeError
from models.domain import EMPTY_LABEL, ProjectionIndex, ScoreVolume
from models.params import KnnParams, NnriParams

logger = logging.getLogger(__name__)

MODULE = "postproc"
KNN_CHUNK = 32768
POST_PROCESSORS = ("nnri", "knn", "knn-multi", "nla")


def _chunks(count: int, size: int) -> Iterator[slice]:
    for start in range(0, count, size):
        yield slice(start, min(start + size, count))


def _pad_plane(plane: np.ndarray, pad: int, fill) -> np.ndarray:
    """Pad the last two axes: circular in width, constant ``fill`` in height."""
    if pad == 0:
        return plane
    lead = [(0, 0)] * (plane.ndim - 2)
    wrapped = np.pad(plane, lead + [(0, 0), (pad, pad)], mode="wrap")
    return np.pad(wrapped, lead + [(pad, pad), (0, 0)], mode="constant", constant_values=fill)


def _windows(plane: np.ndarray, vs: np.ndarray, us: np.ndarray, k: int, fill) -> np.ndarray:
    """(m, k*k) neighbourhoods of an (H, W) plane at the given pixels."""
    padded = _pad_plane(plane, (k - 1) // 2, fill)
    view = sliding_window_view(padded, (k, k))
    return view[vs, us].reshape(len(vs), k * k)


def _window_offsets(k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row and column offset of every window position, row-major."""
    half = (k - 1) // 2
    dv, du = np.meshgrid(np.arange(k) - half, np.arange(k) - half, indexing="ij")
    return dv.ravel(), du.ravel()


def _nnri_weights(range_view, occupancy_view, vs, us, point_ranges, limit, k: int) -> np.ndarray:
    """(m, k*k) weights 1 - min(delta, D) / D; unoccupied neighbours have delta = inf."""
    neighbour_ranges = range_view[vs, us].reshape(len(vs), k * k)
    occupied = occupancy_view[vs, us].reshape(len(vs), k * k)
    delta = np.where(occupied, np.abs(neighbour_ranges - point_ranges[:, np.newaxis]), np.inf)
    return 1.0 - np.minimum(delta, limit) / limit


class PostprocessService:
    """Service assigning a label to every 3D point from 2D predictions."""

    def cutoff(self, ranges, r_mean: float, r_std: float, alpha: float):
        """Adaptive neighbour cut-off alpha * exp((r - r_mean) / r_std), in meters."""
        if r_std <= 0 or alpha <= 0:
            raise ParameterError(f"cut-off needs r_std > 0 and alpha > 0, got {r_std}, {alpha}",
                                 module=MODULE)
        return alpha * np.exp((np.asarray(ranges, dtype=np.float64) - r_mean) / r_std)

    def range_statistics(self, point_ranges: np.ndarray) -> Tuple[float, float]:
        """Per-scan mean and standard deviation; a zero deviation is replaced by 1."""
        if len(point_ranges) == 0:
            return 0.0, 1.0
        values = np.asarray(point_ranges, dtype=np.float64)
        std = float(values.std())
        return float(values.mean()), std if std > 0 else 1.0

    def labels_from_scores(self, volume: ScoreVolume) -> np.ndarray:
        """(N, H, W) argmax label planes, -1 at unoccupied pixels."""
        labels = np.argmax(volume.scores, axis=1).astype(np.int32)
        labels[~volume.occupancy] = EMPTY_LABEL
        return labels

    # ------------------------------------------------------------------
    # Nearest Neighbors Range Interpolation
    # ------------------------------------------------------------------

    def cutoffs(self, point_ranges, r_mean: float, r_std: float, params: NnriParams) -> np.ndarray:
        """Per-point cut-off for ``params.cutoff_mode``; "constant" is alpha everywhere."""
        if params.cutoff_mode == "constant":
            return np.full(len(point_ranges), float(params.alpha))
        return self.cutoff(point_ranges, r_mean, r_std, params.alpha)

    def neighbour_weights(self, volume: ScoreVolume, ranges: np.ndarray, index: ProjectionIndex,
                          params: NnriParams) -> np.ndarray:
        """(count, N, k*k) NNRI weight of every window position in every image."""
        range_views, occupancy_views, r_mean, r_std = self._nnri_inputs(volume, ranges, index, params)
        k = params.k
        weights = np.empty((index.count, len(range_views), k * k), dtype=np.float64)
        for chunk in _chunks(index.count, params.chunk_size):
            vs, us = index.vs[chunk], index.us[chunk]
            point_ranges = index.ranges[chunk].astype(np.float64)
            limit = self.cutoffs(point_ranges, r_mean, r_std, params)[:, np.newaxis]
            for n in range(len(range_views)):
                weights[chunk, n] = _nnri_weights(range_views[n], occupancy_views[n], vs, us,
                                                  point_ranges, limit, k)
        return weights

    def nnri(self, volume: ScoreVolume, ranges: np.ndarray, index: ProjectionIndex,
             params: NnriParams) -> np.ndarray:
        """Depth-weighted sum of class scores over the k×k window in all N images.

        Weight of a neighbour: w = 1 - min(delta, D) / D with delta its absolute range
        difference to the point and D the point's cut-off; unoccupied neighbours get 0.
        A point whose neighbours all weigh 0 takes the argmax of its own pixel's scores
        summed over the N images.
        """
        range_views, occupancy_views, r_mean, r_std = self._nnri_inputs(volume, ranges, index, params)
        k, pad = params.k, params.pad
        n_images, num_classes = volume.scores.shape[:2]
        # (N, H', W', C) so a gathered neighbour is a contiguous score vector
        score_planes = np.ascontiguousarray(
            np.moveaxis(_pad_plane(volume.scores, pad, 0.0), 1, -1)
        )
        dv, du = _window_offsets(k)

        labels = np.empty(index.count, dtype=np.int32)
        for chunk in _chunks(index.count, params.chunk_size):
            vs, us = index.vs[chunk], index.us[chunk]
            point_ranges = index.ranges[chunk].astype(np.float64)
            limit = self.cutoffs(point_ranges, r_mean, r_std, params)[:, np.newaxis]

            total = np.zeros((len(vs), num_classes), dtype=np.float64)
            support = np.zeros(len(vs), dtype=bool)
            for n in range(n_images):
                weights = _nnri_weights(range_views[n], occupancy_views[n], vs, us,
                                        point_ranges, limit, k)
                support |= (weights > 0).any(axis=1)

                rows, cols = vs + pad, us + pad
                for j in range(k * k):
                    neighbour_scores = score_planes[n, rows + dv[j], cols + du[j]]
                    total += weights[:, j:j + 1] * neighbour_scores

            if not support.all():
                lonely = ~support
                own = volume.scores[:, :, vs[lonely], us[lonely]]
                fallback = np.zeros((int(lonely.sum()), num_classes), dtype=np.float64)
                for n in range(n_images):
                    fallback += own[n].T
                total[lonely] = fallback

            labels[chunk] = np.argmax(total, axis=1)

        logger.info(f"NNRI labeled {index.count} points (k={k}, alpha={params.alpha}, "
                    f"cutoff={params.cutoff_mode}, N={n_images})")
        return labels

    def _nnri_inputs(self, volume: ScoreVolume, ranges: np.ndarray, index: ProjectionIndex,
                     params: NnriParams):
        n_images, _, height, width = volume.scores.shape
        ranges = np.asarray(ranges)
        if ranges.shape != (n_images, height, width):
            raise ShapeError(f"ranges {ranges.shape} do not match scores {volume.scores.shape}",
                             module=MODULE)
        self._check_index(index, height, width)

        r_mean, r_std = self.range_statistics(index.ranges)
        if params.r_mean is not None:
            r_mean = params.r_mean
        if params.r_std is not None:
            r_std = params.r_std

        k, pad = params.k, params.pad
        range_planes = _pad_plane(ranges.astype(np.float64), pad, np.nan)
        occupancy_planes = _pad_plane(volume.occupancy, pad, False)
        range_views = [sliding_window_view(range_planes[n], (k, k)) for n in range(n_images)]
        occupancy_views = [sliding_window_view(occupancy_planes[n], (k, k)) for n in range(n_images)]
        return range_views, occupancy_views, r_mean, r_std

    # ------------------------------------------------------------------
    # Window KNN voting
    # ------------------------------------------------------------------

    def knn_votes(self, ranges: np.ndarray, label_plane: np.ndarray, point_ranges: np.ndarray,
                  vs: np.ndarray, us: np.ndarray, params: KnnParams,
                  num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
        """Votes of one image: (m, C) vote sums and the number of voting neighbours per point.

        Neighbours within the cut-off are ranked by absolute range difference (ties by
        window position) and the ``params.votes`` closest vote. Votes are 1, or a Gaussian
        of the window offset when ``params.sigma`` is set.
        """
        k = params.k
        dv, du = _window_offsets(k)
        if params.sigma is None:
            offset_weights = np.ones(k * k)
        else:
            offset_weights = np.exp(-(du * du + dv * dv) / (2.0 * params.sigma * params.sigma))

        votes = np.zeros((len(vs), num_classes), dtype=np.float64)
        voters = np.zeros(len(vs), dtype=np.int64)
        occupancy = label_plane != EMPTY_LABEL
        for chunk in _chunks(len(vs), KNN_CHUNK):
            cv, cu = vs[chunk], us[chunk]
            neighbour_ranges = _windows(ranges.astype(np.float64), cv, cu, k, np.nan)
            neighbour_labels = _windows(label_plane, cv, cu, k, EMPTY_LABEL)
            occupied = _windows(occupancy, cv, cu, k, False)

            delta = np.abs(neighbour_ranges - point_ranges[chunk, np.newaxis].astype(np.float64))
            valid = occupied & (delta <= params.cutoff)
            key = np.where(valid, delta, np.inf)
            ranked = np.argsort(key, axis=1, kind="stable")[:, :params.votes]

            rows = np.arange(len(cv))
            chunk_votes = votes[chunk]  # view
            for rank in range(ranked.shape[1]):
                position = ranked[:, rank]
                selected = valid[rows, position]
                classes = np.where(selected, neighbour_labels[rows, position], 0)
                chunk_votes[rows, classes] += np.where(selected, offset_weights[position], 0.0)
                voters[chunk] += selected
        return votes, voters

    def knn_single(self, ranges: np.ndarray, label_plane: np.ndarray, index: ProjectionIndex,
                   params: KnnParams, num_classes: int, ignore_id: int) -> np.ndarray:
        """Plurality of window votes in one range image.

        Points without a voting neighbour keep their own pixel's label, or ``ignore_id``
        when that pixel is empty.
        """
        ranges, label_plane = self._check_plane(ranges, label_plane, index, num_classes)
        votes, voters = self.knn_votes(ranges, label_plane, index.ranges, index.vs, index.us,
                                       params, num_classes)
        own = label_plane[index.vs, index.us]
        return self._decide(votes, voters, own, ignore_id)

    def knn_multi(self, ranges: np.ndarray, label_planes: np.ndarray, index: ProjectionIndex,
                  params: KnnParams, num_classes: int, ignore_id: int) -> np.ndarray:
        """Window votes accumulated over all N images; ties go to the lower class id."""
        ranges, label_planes = self._check_stack(ranges, label_planes, index, num_classes)

        votes = np.zeros((index.count, num_classes), dtype=np.float64)
        voters = np.zeros(index.count, dtype=np.int64)
        for n in range(ranges.shape[0]):
            image_votes, image_voters = self.knn_votes(
                ranges[n], label_planes[n], index.ranges, index.vs, index.us, params, num_classes
            )
            votes += image_votes
            voters += image_voters

        own = label_planes[self._own_image(index, ranges.shape[0]), index.vs, index.us]
        labels = self._decide(votes, voters, own, ignore_id)
        logger.info(f"Multi-range KNN labeled {index.count} points over {ranges.shape[0]} images")
        return labels

    def knn_per_subcloud(self, ranges: np.ndarray, label_planes: np.ndarray,
                         index: ProjectionIndex, params: KnnParams, num_classes: int,
                         ignore_id: int) -> np.ndarray:
        """Single-range KNN where every point votes only in its own sub-cloud's image."""
        ranges, label_planes = self._check_stack(ranges, label_planes, index, num_classes)
        image = self._own_image(index, ranges.shape[0])

        labels = np.empty(index.count, dtype=np.int32)
        for n in range(ranges.shape[0]):
            members = np.flatnonzero(image == n)
            if not len(members):
                continue
            votes, voters = self.knn_votes(
                ranges[n], label_planes[n], index.ranges[members], index.vs[members],
                index.us[members], params, num_classes,
            )
            own = label_planes[n][index.vs[members], index.us[members]]
            labels[members] = self._decide(votes, voters, own, ignore_id)
        logger.info(f"Per-sub-cloud KNN labeled {index.count} points")
        return labels

    # ------------------------------------------------------------------
    # Nearest Label Assignment
    # ------------------------------------------------------------------

    def nla(self, ranges: np.ndarray, label_plane: np.ndarray, index: ProjectionIndex, k: int,
            ignore_id: int) -> np.ndarray:
        """Label of the window neighbour closest in range; ``ignore_id`` for empty windows."""
        ranges, label_plane = self._check_plane(ranges, label_plane, index, None)
        return self._nla_points(ranges, label_plane, index.ranges, index.vs, index.us, k, ignore_id)

    def nla_per_subcloud(self, ranges: np.ndarray, label_planes: np.ndarray,
                         index: ProjectionIndex, k: int, ignore_id: int) -> np.ndarray:
        ranges, label_planes = self._check_stack(ranges, label_planes, index, None)
        image = self._own_image(index, ranges.shape[0])

        labels = np.empty(index.count, dtype=np.int32)
        for n in range(ranges.shape[0]):
            members = np.flatnonzero(image == n)
            labels[members] = self._nla_points(
                ranges[n], label_planes[n], index.ranges[members], index.vs[members],
                index.us[members], k, ignore_id,
            )
        return labels

    def _nla_points(self, ranges: np.ndarray, label_plane: np.ndarray, point_ranges: np.ndarray,
                    vs: np.ndarray, us: np.ndarray, k: int, ignore_id: int) -> np.ndarray:
        if k < 1 or k % 2 == 0:
            raise ParameterError(f"kernel size must be a positive odd number, got {k}", module=MODULE)

        occupancy = label_plane != EMPTY_LABEL
        labels = np.empty(len(vs), dtype=np.int32)
        for chunk in _chunks(len(vs), KNN_CHUNK):
            cv, cu = vs[chunk], us[chunk]
            neighbour_ranges = _windows(ranges.astype(np.float64), cv, cu, k, np.nan)
            neighbour_labels = _windows(label_plane, cv, cu, k, EMPTY_LABEL)
            occupied = _windows(occupancy, cv, cu, k, False)

            delta = np.where(
                occupied,
                np.abs(neighbour_ranges - point_ranges[chunk, np.newaxis].astype(np.float64)),
                np.inf,
            )
            nearest = np.argmin(delta, axis=1)
            rows = np.arange(len(cv))
            found = occupied[rows, nearest]
            labels[chunk] = np.where(found, neighbour_labels[rows, nearest], ignore_id)
        return labels

    # ------------------------------------------------------------------
    # Dispatch
    # ------------------------------------------------------------------

    def run(self, method: str, volume: ScoreVolume, ranges: np.ndarray, index: ProjectionIndex,
            ignore_id: int, nnri_params: Optional[NnriParams] = None,
            knn_params: Optional[KnnParams] = None) -> np.ndarray:
        """Label every point of ``index`` with the named post-processor."""
        nnri_params = nnri_params or NnriParams()
        knn_params = knn_params or KnnParams()
        if method == "nnri":
            return self.nnri(volume, ranges, index, nnri_params)

        label_planes = self.labels_from_scores(volume)
        if method == "knn":
            return self.knn_per_subcloud(ranges, label_planes, index, knn_params,
                                         volume.num_classes, ignore_id)
        if method == "knn-multi":
            return self.knn_multi(ranges, label_planes, index, knn_params,
                                  volume.num_classes, ignore_id)
        if method == "nla":
            return self.nla_per_subcloud(ranges, label_planes, index, knn_params.k, ignore_id)
        raise ParameterError(f"unknown post-processor '{method}', expected one of {POST_PROCESSORS}",
                             module=MODULE)

    # ------------------------------------------------------------------
    # Helpers
    # ------------------------------------------------------------------

    def _decide(self, votes: np.ndarray, voters: np.ndarray, own: np.ndarray,
                ignore_id: int) -> np.ndarray:
        fallback = np.where(own != EMPTY_LABEL, own, ignore_id)
        return np.where(voters > 0, np.argmax(votes, axis=1), fallback).astype(np.int32)

    def _own_image(self, index: ProjectionIndex, n_images: int) -> np.ndarray:
        if index.count and index.subcloud_id.max() >= n_images:
            raise ShapeError(f"index refers to sub-cloud {int(index.subcloud_id.max())} "
                             f"but only {n_images} images were given", module=MODULE)
        return index.subcloud_id

    def _check_index(self, index: ProjectionIndex, height: int, width: int) -> None:
        if (index.height, index.width) != (height, width):
            raise ShapeError(f"index is for {index.height}x{index.width} images, "
                             f"predictions are {height}x{width}", module=MODULE)

    def _check_labels(self, labels: np.ndarray, num_classes: Optional[int]) -> None:
        occupied = labels[labels != EMPTY_LABEL]
        if not occupied.size:
            return
        if occupied.min() < 0 or (num_classes is not None and occupied.max() >= num_classes):
            raise MappingError(f"label plane holds ids outside the {num_classes} classes",
                               module=MODULE)

    def _check_plane(self, ranges, label_plane, index: ProjectionIndex,
                     num_classes: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
        ranges, label_plane = np.asarray(ranges), np.asarray(label_plane)
        if ranges.ndim != 2 or ranges.shape != label_plane.shape:
            raise ShapeError(f"ranges {ranges.shape} and labels {label_plane.shape} must be one "
                             f"H×W plane each", module=MODULE)
        self._check_index(index, *ranges.shape)
        self._check_labels(label_plane, num_classes)
        return ranges, label_plane

    def _check_stack(self, ranges, label_planes, index: ProjectionIndex,
                     num_classes: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
        ranges, label_planes = np.asarray(ranges), np.asarray(label_planes)
        if ranges.ndim != 3 or ranges.shape != label_planes.shape:
            raise ShapeError(f"ranges {ranges.shape} and labels {label_planes.shape} must be "
                             f"N×H×W stacks", module=MODULE)
        self._check_index(index, *ranges.shape[1:])
        self._check_labels(label_planes, num_classes)
        return ranges, label_planes


# Global instance
postprocess_service = PostprocessService()
