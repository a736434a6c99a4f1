"""Straight-loop reference implementations of the label reconstruction kernels.

Used by the tests as oracles. They visit neighbours in the same order as the
vectorized kernels (image, then window row, then window column) and accumulate in
float64, so their results match bit for bit.
"""
import math
from typing import List, Optional, Tuple

import numpy as np


def _neighbour(plane_height: int, plane_width: int, v: int, u: int, a: int, b: int,
               half: int) -> Optional[Tuple[int, int]]:
    row = v + a - half
    if row < 0 or row >= plane_height:
        return None
    return row, (u + b - half) % plane_width


def nnri(scores: np.ndarray, occupancy: np.ndarray, ranges: np.ndarray, point_ranges: np.ndarray,
         vs: np.ndarray, us: np.ndarray, k: int, alpha: float, r_mean: float,
         r_std: float, cutoff_mode: str = "adaptive") -> List[int]:
    n_images, num_classes, height, width = scores.shape
    half = (k - 1) // 2
    if cutoff_mode == "constant":
        limits = np.full(len(point_ranges), float(alpha))
    else:
        limits = alpha * np.exp((np.asarray(point_ranges, dtype=np.float64) - r_mean) / r_std)
    labels = []
    for p in range(len(vs)):
        r = float(point_ranges[p])
        limit = float(limits[p])
        total = [0.0] * num_classes
        support = False
        for n in range(n_images):
            for a in range(k):
                for b in range(k):
                    cell = _neighbour(height, width, int(vs[p]), int(us[p]), a, b, half)
                    if cell is None:
                        continue
                    row, col = cell
                    if occupancy[n, row, col]:
                        delta = abs(float(ranges[n, row, col]) - r)
                    else:
                        delta = math.inf
                    weight = 1.0 - min(delta, limit) / limit
                    if weight > 0:
                        support = True
                    for c in range(num_classes):
                        total[c] += weight * float(scores[n, c, row, col])
        if not support:
            total = [0.0] * num_classes
            for n in range(n_images):
                for c in range(num_classes):
                    total[c] += float(scores[n, c, vs[p], us[p]])
        labels.append(_first_max(total))
    return labels


def knn_votes(ranges: np.ndarray, label_plane: np.ndarray, point_range: float, v: int, u: int,
              k: int, votes: int, cutoff: float, sigma: Optional[float],
              num_classes: int) -> Tuple[List[float], int]:
    height, width = label_plane.shape
    half = (k - 1) // 2
    candidates = []
    position = 0
    for a in range(k):
        for b in range(k):
            cell = _neighbour(height, width, v, u, a, b, half)
            if cell is not None and label_plane[cell] != -1:
                delta = abs(float(ranges[cell]) - float(point_range))
                if delta <= cutoff:
                    candidates.append((delta, position, int(label_plane[cell]), a - half, b - half))
            position += 1
    candidates.sort(key=lambda c: (c[0], c[1]))
    if sigma is not None:
        offsets = np.arange(k) - half
        dv, du = np.meshgrid(offsets, offsets, indexing="ij")
        gaussian = np.exp(-(du * du + dv * dv) / (2.0 * sigma * sigma))

    tally = [0.0] * num_classes
    chosen = candidates[:votes]
    for _, _, label, dv, du in chosen:
        if sigma is None:
            weight = 1.0
        else:
            weight = float(gaussian[dv + half, du + half])
        tally[label] += weight
    return tally, len(chosen)


def knn_single(ranges, label_plane, point_ranges, vs, us, k, votes, cutoff, sigma, num_classes,
               ignore_id) -> List[int]:
    labels = []
    for p in range(len(vs)):
        tally, voters = knn_votes(ranges, label_plane, point_ranges[p], int(vs[p]), int(us[p]),
                                  k, votes, cutoff, sigma, num_classes)
        own = int(label_plane[vs[p], us[p]])
        labels.append(_first_max(tally) if voters else (own if own != -1 else ignore_id))
    return labels


def knn_multi(ranges, label_planes, point_ranges, vs, us, subcloud_id, k, votes, cutoff, sigma,
              num_classes, ignore_id) -> List[int]:
    labels = []
    for p in range(len(vs)):
        total = [0.0] * num_classes
        voters = 0
        for n in range(len(label_planes)):
            tally, count = knn_votes(ranges[n], label_planes[n], point_ranges[p], int(vs[p]),
                                     int(us[p]), k, votes, cutoff, sigma, num_classes)
            total = [x + y for x, y in zip(total, tally)]
            voters += count
        own = int(label_planes[subcloud_id[p], vs[p], us[p]])
        labels.append(_first_max(total) if voters else (own if own != -1 else ignore_id))
    return labels


def nla(ranges, label_plane, point_ranges, vs, us, k, ignore_id) -> List[int]:
    height, width = label_plane.shape
    half = (k - 1) // 2
    labels = []
    for p in range(len(vs)):
        best = None
        best_delta = math.inf
        for a in range(k):
            for b in range(k):
                cell = _neighbour(height, width, int(vs[p]), int(us[p]), a, b, half)
                if cell is None or label_plane[cell] == -1:
                    continue
                delta = abs(float(ranges[cell]) - float(point_ranges[p]))
                if best is None or delta < best_delta:
                    best, best_delta = int(label_plane[cell]), delta
        labels.append(ignore_id if best is None else best)
    return labels


def _first_max(values: List[float]) -> int:
    best = 0
    for c in range(1, len(values)):
        if values[c] > values[best]:
            best = c
    return best
