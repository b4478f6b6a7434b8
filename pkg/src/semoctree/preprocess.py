"""Outlier removal, voxel downsampling and local surface statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_cloud, check_positive, check_points
from .core import DomainError, KnnIndex, LabeledCloud

DEFAULT_SOR_NEIGHBORS = 20
DEFAULT_SOR_STD_RATIO = 1.7
DEFAULT_EPSILON = 1e-3
DEFAULT_NORMAL_NEIGHBORS = 20


@dataclass(frozen=True)
class SorParams:
    neighbors: int = DEFAULT_SOR_NEIGHBORS
    std_ratio: float = DEFAULT_SOR_STD_RATIO

    def __post_init__(self):
        check_positive(self.neighbors, "neighbors", integer=True, minimum=2)
        check_positive(self.std_ratio, "std_ratio")


@dataclass(frozen=True, eq=False)
class SurfaceStats:
    """Per-point unit normals and plane-regularised covariances.

    ``degenerate`` flags points whose neighbourhood was collinear or
    coincident; their covariance is ``diag(eps, 1, 1)`` in world axes.
    """

    normals: np.ndarray
    covariances: np.ndarray
    degenerate: np.ndarray
    epsilon: float

    def __len__(self):
        return len(self.normals)


def mean_neighbor_distances(points, k, workers=1):
    """Mean distance of every point to its ``k`` nearest other points."""
    points = check_points(points)
    n = len(points)
    idx, dist = KnnIndex(points, workers=workers).query(points, k + 1)
    keep = idx != np.arange(n)[:, None]
    # Duplicates may push a point out of its own window; drop the farthest then.
    no_self = keep.all(axis=1)
    keep[no_self, -1] = False
    return dist[keep].reshape(n, k).mean(axis=1)


def statistical_outlier_removal(cloud: LabeledCloud, params: SorParams = SorParams(), workers=1):
    """Drop points whose mean k-NN distance exceeds ``mu + std_ratio * sigma``.

    ``mu`` and ``sigma`` are the mean and (population) standard deviation of
    the per-point mean distances. Returns ``(filtered_cloud, removed_indices)``.
    """
    n = len(cloud)
    if n <= params.neighbors:
        raise DomainError(
            f"statistical outlier removal needs more than {params.neighbors} points, got {n}"
        )
    mean_d = mean_neighbor_distances(cloud.points, params.neighbors, workers)
    outlier = mean_d > _sor_threshold(mean_d, params.std_ratio)
    return cloud.subset(~outlier), np.flatnonzero(outlier)


def _sor_threshold(mean_d, std_ratio):
    mu = mean_d.mean()
    # Means equal up to rounding must not be split by a rounding-level sigma.
    slack = 64 * np.finfo(float).eps * abs(mu)
    return mu + std_ratio * mean_d.std() + slack


def voxel_cells(points, voxel_size, origin=None):
    points = check_points(points)
    if origin is None:
        origin = points.min(axis=0)
    return np.floor((points - origin) / voxel_size).astype(np.int64)


def voxel_downsample(cloud: LabeledCloud, voxel_size: float, origin=None) -> LabeledCloud:
    """Replace the points of every occupied voxel by their centroid.

    The grid has cell size ``voxel_size`` and is anchored at the cloud's
    minimum corner unless ``origin`` is given. Output points follow the
    lexicographic order of their cell index; each carries the majority label
    of its members (ties go to the smallest class id).
    """
    check_positive(voxel_size, "voxel_size")
    if len(cloud) == 0:
        return cloud
    cells = voxel_cells(cloud.points, voxel_size, origin)
    # np.unique(axis=0) sorts rows lexicographically.
    uniq, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    m = len(uniq)
    sums = np.zeros((m, 3))
    np.add.at(sums, inverse, cloud.points)
    centroids = sums / counts[:, None]
    labels = None
    if cloud.labels is not None:
        labels = majority_labels(inverse, cloud.labels, m)
    return LabeledCloud(centroids, labels)


def majority_labels(group, labels, n_groups):
    """Most frequent label per group; ties resolve to the smallest label."""
    pairs, pair_counts = np.unique(np.stack([group, labels], axis=1), axis=0, return_counts=True)
    # Sort by group, then descending count, then ascending label.
    order = np.lexsort((pairs[:, 1], -pair_counts, pairs[:, 0]))
    pairs = pairs[order]
    first = np.ones(len(pairs), dtype=bool)
    first[1:] = pairs[1:, 0] != pairs[:-1, 0]
    out = np.empty(n_groups, dtype=np.int64)
    out[pairs[first, 0]] = pairs[first, 1]
    return out


def estimate_surface_stats(
    cloud: LabeledCloud,
    k: int = DEFAULT_NORMAL_NEIGHBORS,
    epsilon: float = DEFAULT_EPSILON,
    viewpoint=None,
    workers=1,
) -> SurfaceStats:
    """PCA normals and GICP plane covariances from k-NN neighbourhoods.

    The neighbourhood of a point is its ``k`` nearest points, itself
    included. The regularised covariance replaces the eigenvalues of the
    neighbourhood covariance by ``(epsilon, 1, 1)``, smallest first.
    Normals point away from ``viewpoint`` reflected through the point, i.e.
    outward from the cloud centroid by default.
    """
    check_positive(k, "k", integer=True, minimum=3)
    check_positive(epsilon, "epsilon")
    n = len(cloud)
    if n <= k:
        raise DomainError(f"surface statistics need more than k={k} points, got {n}")
    pts = cloud.points
    idx, _ = KnnIndex(pts, workers=workers).query(pts, k)
    nbh = pts[idx]
    centered = nbh - nbh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)

    scale = np.maximum(evals[:, 2], 0.0)
    degenerate = (scale <= 0.0) | (evals[:, 1] <= 1e-12 * scale)
    evecs[degenerate] = np.eye(3)

    normals = evecs[:, :, 0].copy()
    if viewpoint is None:
        outward = pts - pts.mean(axis=0)
    else:
        outward = np.asarray(viewpoint, dtype=float) - pts
    flip = np.einsum("ni,ni->n", normals, outward) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    diag = np.array([epsilon, 1.0, 1.0])
    covariances = np.einsum("nij,j,nkj->nik", evecs, diag, evecs)
    covariances = 0.5 * (covariances + covariances.transpose(0, 2, 1))
    return SurfaceStats(normals, covariances, degenerate, float(epsilon))


class StatisticalOutlierRemoval(OutlierMixin, BaseEstimator):
    """Statistical outlier detector with the usual ``fit_predict`` contract.

    ``fit_predict`` returns ``1`` for inliers and ``-1`` for outliers.

    Parameters
    ----------
    n_neighbors : int, default=20
        Neighbours used for the mean distance of each point.
    std_ratio : float, default=1.7
        Allowed deviation above the cloud mean, in standard deviations.
    """

    def __init__(self, n_neighbors=DEFAULT_SOR_NEIGHBORS, std_ratio=DEFAULT_SOR_STD_RATIO, n_jobs=1):
        self.n_neighbors = n_neighbors
        self.std_ratio = std_ratio
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        cloud = as_cloud(X)
        params = SorParams(self.n_neighbors, self.std_ratio)
        if len(cloud) <= params.neighbors:
            raise DomainError(f"need more than {params.neighbors} points, got {len(cloud)}")
        self.mean_distances_ = mean_neighbor_distances(cloud.points, params.neighbors, self.n_jobs)
        self.threshold_ = _sor_threshold(self.mean_distances_, params.std_ratio)
        self.inlier_mask_ = self.mean_distances_ <= self.threshold_
        return self

    def fit_predict(self, X, y=None):
        self.fit(X)
        return np.where(self.inlier_mask_, 1, -1)


class VoxelDownsampler(TransformerMixin, BaseEstimator):
    """Voxel-grid centroid downsampling.

    ``fit`` anchors the grid at the minimum corner of the training points;
    ``transform`` then returns one centroid per occupied voxel.
    """

    def __init__(self, voxel_size=0.1):
        self.voxel_size = voxel_size

    def fit(self, X, y=None):
        check_positive(self.voxel_size, "voxel_size")
        self.origin_ = as_cloud(X).points.min(axis=0)
        return self

    def transform(self, X):
        check_is_fitted(self, "origin_")
        return voxel_downsample(as_cloud(X), self.voxel_size, origin=self.origin_).points
