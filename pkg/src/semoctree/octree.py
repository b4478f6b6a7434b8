"""Semantic octree: label transfer and coarse change detection.

The tree is grown from a labeled source cloud. A node becomes a leaf as
soon as it is empty (``EMPTY``, labeled ``NEW``), holds a single class
(``ONE_LABEL``) or reaches the maximum depth (``MAX_DEPTH``, labeled with
the majority class); the tests run in that order. Target points then pick
up the label of the leaf they fall into and clear that leaf's ``removed``
flag, so leaves still flagged afterwards are source regions the target
no longer shows.

Cells are addressed by integer coordinates on the finest grid
(``root.side / 2**max_depth``); a node at depth ``d`` owns the cells whose
coordinates shifted right by ``max_depth - d`` equal its own.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_cloud, check_points, check_positive
from .core import NEW, RESERVED_LABELS, Cube, DomainError, LabeledCloud, bounding_cube

#: Keys pack three coordinates of up to 21 bits into one int64.
MAX_SUPPORTED_DEPTH = 21
PADDING_FRACTION = 1e-9


class LeafKind(IntEnum):
    EMPTY = 0
    ONE_LABEL = 1
    MAX_DEPTH = 2


class _OutOfBounds:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "OUT_OF_BOUNDS"

    def __bool__(self):
        return False


#: Returned by :meth:`SemanticOctree.query` for points outside the root cube.
OUT_OF_BOUNDS = _OutOfBounds()


def compute_depth(lateral_length: float, max_lat: float) -> int:
    """Smallest depth whose leaf side ``lateral_length / 2**depth`` is <= ``max_lat``.

    This is ``ceil(log2(lateral_length / max_lat))`` evaluated exactly
    (division by a power of two is exact in binary floating point), and 0
    when ``max_lat >= lateral_length``.
    """
    for value, name in ((lateral_length, "lateral_length"), (max_lat, "max_lat")):
        if not (isinstance(value, (int, float, np.floating, np.integer)) and math.isfinite(value) and value > 0):
            raise DomainError(f"{name} must be a positive finite number, got {value!r}")
    lateral_length = float(lateral_length)
    max_lat = float(max_lat)
    if max_lat >= lateral_length:
        return 0
    depth = max(int(math.floor(math.log2(lateral_length / max_lat))) - 1, 0)
    while math.ldexp(lateral_length, -depth) > max_lat:
        depth += 1
    return depth


def _pack(cells, bits):
    return (cells[..., 0] << (2 * bits)) | (cells[..., 1] << bits) | cells[..., 2]


def _unpack(keys, bits):
    mask = (1 << bits) - 1
    return np.stack([(keys >> (2 * bits)) & mask, (keys >> bits) & mask, keys & mask], axis=-1)


_CHILD_OFFSETS = np.array([[i >> 2 & 1, i >> 1 & 1, i & 1] for i in range(8)], dtype=np.int64)


class SemanticLeaf:
    """Live view of one leaf of a :class:`SemanticOctree`."""

    __slots__ = ("_tree", "index")

    def __init__(self, tree, index):
        self._tree = tree
        self.index = int(index)

    @property
    def depth(self) -> int:
        return int(self._tree.leaf_depth[self.index])

    @property
    def kind(self) -> LeafKind:
        return LeafKind(int(self._tree.leaf_kind[self.index]))

    @property
    def label(self) -> int:
        return int(self._tree.leaf_label[self.index])

    @property
    def removed(self) -> bool:
        return bool(self._tree.leaf_removed[self.index])

    @property
    def source_point_count(self) -> int:
        return int(self._tree.leaf_source_count[self.index])

    @property
    def hit_count(self) -> int:
        return int(self._tree.leaf_hit_count[self.index])

    @property
    def cube(self) -> Cube:
        return self._tree.leaf_cube(self.index)

    def __eq__(self, other):
        return isinstance(other, SemanticLeaf) and other._tree is self._tree and other.index == self.index

    def __hash__(self):
        return hash((id(self._tree), self.index))

    def __repr__(self):
        return (
            f"SemanticLeaf(index={self.index}, depth={self.depth}, kind={self.kind.name}, "
            f"label={self.label}, removed={self.removed})"
        )


@dataclass(frozen=True, eq=False)
class ChangeReport:
    labels: np.ndarray
    new_points: int
    unchanged_points: int
    out_of_bounds_points: int
    removed_leaves: tuple
    new_fraction: float

    @property
    def total_points(self) -> int:
        return self.new_points + self.unchanged_points + self.out_of_bounds_points

    def to_dict(self, precision=9):
        return {
            "new_points": self.new_points,
            "unchanged_points": self.unchanged_points,
            "out_of_bounds_points": self.out_of_bounds_points,
            "new_fraction": round(self.new_fraction, precision),
            "removed_leaves": [
                {"origin": [round(v, precision) for v in c.origin], "side": round(c.side, precision)}
                for c in self.removed_leaves
            ],
        }

    def to_json(self, precision=9):
        return json.dumps(self.to_dict(precision), indent=2)


class SemanticOctree:
    """Cubic octree over a labeled cloud; see the module docstring.

    Leaves are stored column-wise (``leaf_depth``, ``leaf_kind``,
    ``leaf_label``, ...) in order of increasing depth, then key.
    """

    def __init__(self, root: Cube, max_depth: int, leaves: dict):
        self.root = root
        self.max_depth = int(max_depth)
        self.leaf_depth = leaves["depth"]
        self.leaf_key = leaves["key"]
        self.leaf_kind = leaves["kind"]
        self.leaf_label = leaves["label"]
        self.leaf_source_count = leaves["source_count"]
        self.leaf_removed = leaves["kind"] != LeafKind.EMPTY
        self.leaf_hit_count = np.zeros(len(self.leaf_depth), dtype=np.int64)
        self.transferred = False
        # Per-depth sorted keys for lookup; leaves are already sorted by (depth, key).
        self._level_start = np.searchsorted(self.leaf_depth, np.arange(self.max_depth + 2))

    # construction -------------------------------------------------------

    @classmethod
    def build(cls, source: LabeledCloud, max_lat: float = 0.1, padding: float = None) -> "SemanticOctree":
        """Grow the tree from ``source``; ``padding`` defaults to ``1e-9`` of the extent."""
        if len(source) == 0:
            raise DomainError("cannot build an octree from an empty cloud")
        if source.labels is None:
            raise DomainError("octree source cloud must be labeled")
        reserved = np.isin(source.labels, list(RESERVED_LABELS))
        if reserved.any():
            i = int(np.flatnonzero(reserved)[0])
            raise DomainError(
                f"source point {i} carries reserved label {int(source.labels[i])}; "
                "every source point needs a dataset class"
            )
        check_positive(max_lat, "max_lat")
        if padding is None:
            extent = float(np.ptp(source.points, axis=0).max())
            padding = PADDING_FRACTION * max(extent, 1.0)
        root = bounding_cube(source, padding)
        depth = compute_depth(root.side, max_lat)
        if depth > MAX_SUPPORTED_DEPTH:
            raise DomainError(
                f"max_lat={max_lat} needs depth {depth} on a {root.side:g} m cloud; "
                f"at most {MAX_SUPPORTED_DEPTH} is supported"
            )
        cells = cls._cells(root, depth, source.points)
        if (cells < 0).any():
            raise DomainError("source point outside its own bounding cube")
        return cls(root, depth, cls._grow(cells, source.labels, depth))

    @staticmethod
    def _cells(root, depth, points):
        """Finest-grid cell coordinates; ``-1`` rows mark points outside the root."""
        n_cells = 1 << depth
        leaf_side = root.side / n_cells
        rel = (points - np.asarray(root.origin)) / leaf_side
        cells = np.clip(np.floor(rel), -1, n_cells).astype(np.int64)
        lo = np.asarray(root.origin)
        inside = np.all((points >= lo) & (points < lo + root.side), axis=1)
        cells = np.clip(cells, 0, n_cells - 1)
        cells[~inside] = -1
        return cells

    @staticmethod
    def _grow(cells, labels, max_depth):
        bits = max(max_depth, 1)
        out = {k: [] for k in ("depth", "key", "kind", "label", "source_count")}

        def emit(depth, keys, kind, lab, count):
            out["depth"].append(np.full(len(keys), depth, dtype=np.int64))
            out["key"].append(np.asarray(keys, dtype=np.int64))
            out["kind"].append(np.full(len(keys), kind, dtype=np.int64))
            out["label"].append(np.asarray(lab, dtype=np.int64))
            out["source_count"].append(np.asarray(count, dtype=np.int64))

        active_cells, active_labels = cells, labels
        for depth in range(max_depth + 1):
            node_keys = _pack(active_cells >> (max_depth - depth), bits)
            order = np.lexsort((active_labels, node_keys))
            node_keys = node_keys[order]
            lab = active_labels[order]
            active_cells = active_cells[order]
            uniq, start, counts = np.unique(node_keys, return_index=True, return_counts=True)
            lo = lab[start]
            hi = lab[start + counts - 1]
            uniform = lo == hi
            emit(depth, uniq[uniform], LeafKind.ONE_LABEL, lo[uniform], counts[uniform])

            mixed = ~uniform
            if depth == max_depth:
                group = np.repeat(np.arange(len(uniq)), counts)
                sel = np.repeat(mixed, counts)
                maj = _majority(group[sel], lab[sel], len(uniq))
                emit(depth, uniq[mixed], LeafKind.MAX_DEPTH, maj[mixed], counts[mixed])
                break

            split = uniq[mixed]
            if len(split) == 0:
                break
            keep = np.repeat(mixed, counts)
            active_cells = active_cells[keep]
            active_labels = lab[keep]

            # Children of split nodes that receive no point become empty leaves.
            parents = _unpack(split, bits)
            children = _pack((parents[:, None, :] << 1) + _CHILD_OFFSETS[None, :, :], bits).ravel()
            occupied = np.unique(_pack(active_cells >> (max_depth - depth - 1), bits))
            empty = np.setdiff1d(children, occupied, assume_unique=True)
            zeros = np.zeros(len(empty), dtype=np.int64)
            emit(depth + 1, empty, LeafKind.EMPTY, np.full(len(empty), NEW), zeros)

        cols = {k: np.concatenate(v) if v else np.zeros(0, dtype=np.int64) for k, v in out.items()}
        order = np.lexsort((cols["key"], cols["depth"]))
        return {k: v[order] for k, v in cols.items()}

    # lookup -------------------------------------------------------------

    def __len__(self):
        return len(self.leaf_depth)

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_depth)

    @property
    def leaves(self):
        return [SemanticLeaf(self, i) for i in range(self.n_leaves)]

    def leaf_cube(self, index) -> Cube:
        depth = int(self.leaf_depth[index])
        bits = max(self.max_depth, 1)
        cell = _unpack(np.asarray([self.leaf_key[index]]), bits)[0]
        side = self.root.side / (1 << depth)
        return Cube(np.asarray(self.root.origin) + cell * side, side)

    def leaf_sides(self) -> np.ndarray:
        return self.root.side / np.left_shift(1, self.leaf_depth).astype(float)

    def leaf_centers(self) -> np.ndarray:
        bits = max(self.max_depth, 1)
        cells = _unpack(self.leaf_key, bits).astype(float)
        sides = self.leaf_sides()
        return np.asarray(self.root.origin) + (cells + 0.5) * sides[:, None]

    def leaf_index(self, points) -> np.ndarray:
        """Index of the leaf housing each point, ``-1`` when outside the root."""
        pts = check_points(points)
        cells = self._cells(self.root, self.max_depth, pts)
        inside = cells[:, 0] >= 0
        result = np.full(len(pts), -1, dtype=np.int64)
        pending = np.flatnonzero(inside)
        bits = max(self.max_depth, 1)
        for depth in range(self.max_depth + 1):
            if len(pending) == 0:
                break
            lo, hi = self._level_start[depth], self._level_start[depth + 1]
            if hi == lo:
                continue
            level_keys = self.leaf_key[lo:hi]
            keys = _pack(cells[pending] >> (self.max_depth - depth), bits)
            pos = np.searchsorted(level_keys, keys)
            pos_c = np.minimum(pos, hi - lo - 1)
            found = level_keys[pos_c] == keys
            result[pending[found]] = lo + pos_c[found]
            pending = pending[~found]
        if len(pending):
            raise RuntimeError("octree leaves do not tile the root cube")
        return result

    def query(self, point):
        """Leaf containing ``point`` or :data:`OUT_OF_BOUNDS`."""
        i = int(self.leaf_index(np.asarray(point, dtype=float).reshape(1, 3))[0])
        return OUT_OF_BOUNDS if i < 0 else SemanticLeaf(self, i)

    def predict(self, points) -> np.ndarray:
        """Leaf labels for ``points`` without touching removed flags."""
        idx = self.leaf_index(points)
        labels = np.full(len(idx), NEW, dtype=np.int64)
        inside = idx >= 0
        labels[inside] = self.leaf_label[idx[inside]]
        return labels

    # transfer -----------------------------------------------------------

    def transfer_labels(self, target: LabeledCloud):
        """Label ``target`` from its leaves and clear those leaves' removed flags.

        Returns ``(labeled_target, ChangeReport)``. Points outside the root
        cube are labeled ``NEW`` and counted as out of bounds.
        """
        if len(target) == 0:
            raise DomainError("cannot transfer labels to an empty cloud")
        idx = self.leaf_index(target.points)
        inside = idx >= 0
        hits = np.bincount(idx[inside], minlength=self.n_leaves)
        self.leaf_hit_count += hits
        self.leaf_removed &= self.leaf_hit_count == 0
        self.transferred = True

        labels = np.full(len(idx), NEW, dtype=np.int64)
        labels[inside] = self.leaf_label[idx[inside]]
        in_empty = np.zeros(len(idx), dtype=bool)
        in_empty[inside] = self.leaf_kind[idx[inside]] == LeafKind.EMPTY
        n_new = int(in_empty.sum())
        n_oob = int((~inside).sum())
        n = len(idx)
        report = ChangeReport(
            labels=labels,
            new_points=n_new,
            unchanged_points=n - n_new - n_oob,
            out_of_bounds_points=n_oob,
            removed_leaves=tuple(self.leaf_cube(i) for i in np.flatnonzero(self.leaf_removed)),
            new_fraction=(n_new + n_oob) / n,
        )
        return target.with_labels(labels), report

    def removed_regions(self):
        """Source-occupied leaves that no target point has hit."""
        if not self.transferred:
            raise DomainError("removed_regions requires transfer_labels to have run")
        return [SemanticLeaf(self, i) for i in np.flatnonzero(self.leaf_removed)]

    def removed_mask(self) -> np.ndarray:
        if not self.transferred:
            raise DomainError("removed_regions requires transfer_labels to have run")
        return self.leaf_removed.copy()

    def dump_leaves(self, path, only_removed=False):
        """Write leaf centres as ``x y z kind label`` rows for inspection."""
        sel = np.flatnonzero(self.leaf_removed) if only_removed else np.arange(self.n_leaves)
        centers = self.leaf_centers()[sel]
        sides = self.leaf_sides()[sel]
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("# x y z kind label side removed\n")
            for c, s, k, lab, r in zip(
                centers.tolist(), sides.tolist(), self.leaf_kind[sel].tolist(),
                self.leaf_label[sel].tolist(), self.leaf_removed[sel].tolist(),
            ):
                fh.write(f"{c[0]!r} {c[1]!r} {c[2]!r} {LeafKind(k).name} {lab} {s!r} {int(r)}\n")


def _majority(group, labels, n_groups):
    from .preprocess import majority_labels

    out = np.full(n_groups, -1, dtype=np.int64)
    if len(group):
        present = np.unique(group)
        out[present] = majority_labels(group, labels, n_groups)[present]
    return out


def build(source: LabeledCloud, max_lat: float = 0.1, padding: float = None) -> SemanticOctree:
    return SemanticOctree.build(source, max_lat, padding)


def query(octree: SemanticOctree, point):
    return octree.query(point)


def transfer_labels(octree: SemanticOctree, target: LabeledCloud):
    return octree.transfer_labels(target)


def removed_regions(octree: SemanticOctree):
    return octree.removed_regions()


class SemanticLabelTransfer(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :class:`SemanticOctree`.

    ``fit(X, y)`` builds the octree from labeled source points, ``predict``
    labels new points read-only and ``transfer`` additionally records the
    change report in ``change_report_``.

    Parameters
    ----------
    max_lat : float, default=0.1
        Largest permitted side length of the smallest leaf, in metres.
    padding : float or None, default=None
        Growth of the root cube on each side; ``None`` uses a negligible
        fraction of the cloud extent.
    """

    def __init__(self, max_lat=0.1, padding=None):
        self.max_lat = max_lat
        self.padding = padding

    def fit(self, X, y=None):
        cloud = as_cloud(X, y)
        self.octree_ = SemanticOctree.build(cloud, self.max_lat, self.padding)
        self.classes_ = np.unique(cloud.labels)
        self.depth_ = self.octree_.max_depth
        return self

    def predict(self, X):
        check_is_fitted(self, "octree_")
        return self.octree_.predict(as_cloud(X).points)

    def transfer(self, X):
        check_is_fitted(self, "octree_")
        labeled, self.change_report_ = self.octree_.transfer_labels(as_cloud(X))
        return labeled.labels
