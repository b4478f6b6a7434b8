"""Point-cloud data model, bounding geometry and k-nearest-neighbour search."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_labels, check_points

#: Sentinel for points that carry no annotation.
UNLABELED = 255
#: Class assigned to target points that fall into an empty leaf.
NEW = 254
RESERVED_LABELS = frozenset({NEW, UNLABELED})

MIN_CUBE_SIDE = 1e-6


class SemOctreeError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(SemOctreeError, ValueError):
    """An input violates the precondition of an operation."""


class CloudFormatError(SemOctreeError, ValueError):
    """A point-cloud file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    """Ordered 3D points with optional per-point integer class ids.

    ``points`` is an ``(n, 3)`` float64 array. ``labels`` is either ``None``
    (unlabeled cloud) or an ``(n,)`` int64 array aligned with ``points``.
    Both arrays are made read-only on construction.
    """

    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = check_points(self.points)
        lab = None if self.labels is None else check_labels(self.labels, len(pts))
        if pts is self.points:
            pts = pts.copy()
        pts.setflags(write=False)
        if lab is not None:
            if lab is self.labels:
                lab = lab.copy()
            lab.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    def __len__(self):
        return len(self.points)

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def subset(self, index) -> "LabeledCloud":
        """Return the cloud restricted to ``index`` (mask or integer array)."""
        labels = None if self.labels is None else self.labels[index]
        return LabeledCloud(self.points[index], labels)

    def with_labels(self, labels) -> "LabeledCloud":
        return LabeledCloud(self.points, labels)

    def with_points(self, points) -> "LabeledCloud":
        return LabeledCloud(points, self.labels)

    def __eq__(self, other):
        if not isinstance(other, LabeledCloud):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        if not np.array_equal(self.points, other.points):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)

    def __repr__(self):
        state = "labeled" if self.is_labeled else "unlabeled"
        return f"LabeledCloud(n={len(self)}, {state})"


@dataclass(frozen=True)
class Cube:
    """Axis-aligned cube ``[origin, origin + side)`` on every axis."""

    origin: tuple
    side: float

    def __post_init__(self):
        origin = tuple(float(v) for v in np.asarray(self.origin, dtype=float).ravel())
        if len(origin) != 3 or not all(np.isfinite(origin)):
            raise DomainError(f"cube origin must be 3 finite numbers, got {self.origin!r}")
        if not (np.isfinite(self.side) and self.side > 0):
            raise DomainError(f"cube side must be positive, got {self.side!r}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "side", float(self.side))

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + 0.5 * self.side

    @property
    def volume(self) -> float:
        return self.side**3

    def contains(self, points) -> np.ndarray:
        """Half-open containment test, vectorised over ``(n, 3)`` input."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        lo = np.asarray(self.origin)
        return np.all((p >= lo) & (p < lo + self.side), axis=1)


def bounding_cube(cloud, padding: float = 0.0) -> Cube:
    """Smallest axis-aligned cube around the cloud, grown by ``padding``.

    The side equals the largest axis extent plus ``2 * padding`` and the cube
    is centred on the centre of the axis-aligned bounding box. Coincident
    points yield a cube of side ``MIN_CUBE_SIDE``.
    """
    points = cloud.points if isinstance(cloud, LabeledCloud) else check_points(cloud)
    if len(points) == 0:
        raise DomainError("bounding_cube of an empty cloud")
    if padding < 0 or not np.isfinite(padding):
        raise DomainError(f"padding must be a non-negative number, got {padding!r}")
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    side = max(float((hi - lo).max()) + 2.0 * padding, MIN_CUBE_SIDE)
    center = 0.5 * (lo + hi)
    return Cube(center - 0.5 * side, side)


class KnnIndex:
    """Immutable k-d tree over the points of a cloud.

    Neighbour lists are sorted by increasing Euclidean distance; equal
    distances are ordered by increasing point index, so results equal a
    brute-force scan with the same tie rule.
    """

    def __init__(self, cloud, workers: int = 1):
        points = cloud.points if isinstance(cloud, LabeledCloud) else check_points(cloud)
        self.points = points
        self.workers = workers
        self._tree = cKDTree(points) if len(points) else None

    def __len__(self):
        return len(self.points)

    def query(self, queries, k: int):
        """Batch k-NN. Returns ``(indices, distances)`` of shape ``(m, min(k, n))``."""
        if k < 1:
            raise DomainError(f"k must be >= 1, got {k}")
        if self._tree is None:
            raise DomainError("k-NN query on an empty index")
        q = check_points(queries)
        n = len(self.points)
        k = min(int(k), n)
        # A few extra candidates reveal whether the k-th distance is tied
        # with points beyond the window.
        window = min(n, k + 4)
        dist, idx = self._tree.query(q, k=window, workers=self.workers)
        dist = np.asarray(dist, dtype=float).reshape(len(q), window)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(q), window)
        order = np.lexsort((idx, dist), axis=1)
        dist = np.take_along_axis(dist, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        if window < n:
            spill = np.flatnonzero(dist[:, window - 1] <= dist[:, k - 1])
            for row in spill:
                cand = np.asarray(
                    self._tree.query_ball_point(q[row], dist[row, k - 1] * (1 + 1e-12) + 1e-300),
                    dtype=np.int64,
                )
                d = np.linalg.norm(self.points[cand] - q[row], axis=1)
                o = np.lexsort((cand, d))[:k]
                idx[row, :k] = cand[o]
                dist[row, :k] = d[o]
        return idx[:, :k], dist[:, :k]


def knn(index: KnnIndex, query, k: int):
    """k nearest neighbours of a single point as ``[(index, distance), ...]``."""
    idx, dist = index.query(np.asarray(query, dtype=float).reshape(1, 3), k)
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]
