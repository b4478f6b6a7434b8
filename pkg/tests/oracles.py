"""Brute-force reference implementations used as independent test oracles.

Nothing here imports the algorithm it checks; only plain numpy and the
standard library.
"""

from fractions import Fraction

import numpy as np


def brute_knn(points, query, k):
    d = np.sqrt(((points - query) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(len(points)), d))[:k]
    return order, d[order]


def brute_sor(points, k, std_ratio):
    """Removed indices of statistical outlier removal by full distance matrix."""
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    means = np.sort(dist, axis=1)[:, :k].mean(axis=1)
    mu = means.sum() / len(means)
    sigma = np.sqrt(((means - mu) ** 2).sum() / len(means))
    return np.flatnonzero(means > mu + std_ratio * sigma), means


def brute_occupied_cells(points, size):
    lo = points.min(axis=0)
    cells = set()
    for p in points:
        cells.add(tuple(int(np.floor((p[i] - lo[i]) / size)) for i in range(3)))
    return cells


def ceil_depth(lateral, max_lat):
    """ceil(log2(lateral / max_lat)) in exact rational arithmetic, clamped at 0."""
    ratio = Fraction(lateral) / Fraction(max_lat)
    depth = 0
    while Fraction(2) ** depth < ratio:
        depth += 1
    return depth


def majority(labels):
    values, counts = np.unique(labels, return_counts=True)
    return int(values[counts == counts.max()].min())


class RefNode:
    __slots__ = ("origin", "side", "depth", "children", "kind", "label", "count")

    def __init__(self, origin, side, depth):
        self.origin = origin
        self.side = side
        self.depth = depth
        self.children = None
        self.kind = None
        self.label = None
        self.count = 0


def _inside(points, origin, side):
    return np.all((points >= origin) & (points < origin + side), axis=1)


def ref_build(points, labels, max_lat, padding, new_label):
    """Plain recursive semantic octree; returns (root, max_depth)."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    side = max(float((hi - lo).max()) + 2 * padding, 1e-6)
    origin = (lo + hi) / 2 - side / 2
    max_depth = ceil_depth(side, max_lat)
    root = RefNode(origin, side, 0)

    def grow(node, pts, labs):
        node.count = len(pts)
        if len(pts) == 0:
            node.kind, node.label = "EMPTY", new_label
            return
        if np.all(labs == labs[0]):
            node.kind, node.label = "ONE_LABEL", int(labs[0])
            return
        if node.depth == max_depth:
            node.kind, node.label = "MAX_DEPTH", majority(labs)
            return
        half = node.side / 2
        node.children = []
        for i in range(8):
            off = np.array([(i >> 2) & 1, (i >> 1) & 1, i & 1], dtype=float)
            child = RefNode(node.origin + off * half, half, node.depth + 1)
            m = _inside(pts, child.origin, half)
            grow(child, pts[m], labs[m])
            node.children.append(child)

    grow(root, points, labels)
    return root, max_depth


def ref_query(root, p):
    if not _inside(p[None, :], root.origin, root.side)[0]:
        return None
    node = root
    while node.children is not None:
        for child in node.children:
            if _inside(p[None, :], child.origin, child.side)[0]:
                node = child
                break
        else:
            raise AssertionError("point fell between children")
    return node


def ref_leaves(root):
    out, stack = [], [root]
    while stack:
        node = stack.pop()
        if node.children is None:
            out.append(node)
        else:
            stack.extend(node.children)
    return out


def brute_confusion(pred, truth, classes):
    classes = list(classes)
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(pred, truth):
        counts[classes.index(int(t)), classes.index(int(p))] += 1
    return counts


def brute_kappa(counts):
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    po = sum(counts[i, i] for i in range(len(counts))) / n
    pe = sum(counts[i, :].sum() * counts[:, i].sum() for i in range(len(counts))) / n**2
    return po, pe, (po - pe) / (1 - pe)
