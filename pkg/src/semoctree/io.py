"""ASCII PLY and XYZ readers/writers for labeled clouds."""

from __future__ import annotations

import math
import os

import numpy as np

from .core import CloudFormatError, LabeledCloud

FORMATS = ("ply-ascii", "xyz")

_PLY_INT_TYPES = {
    "char", "uchar", "short", "ushort", "int", "uint",
    "int8", "uint8", "int16", "uint16", "int32", "uint32",
}
_PLY_FLOAT_TYPES = {"float", "double", "float32", "float64"}


def infer_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        return "ply-ascii"
    if ext in (".xyz", ".txt", ".pts"):
        return "xyz"
    raise CloudFormatError(f"cannot infer cloud format from extension {ext!r}", path)


def load_cloud(path, format=None) -> LabeledCloud:
    """Read a cloud from ``path``; ``format`` is inferred from the extension when omitted."""
    fmt = format or infer_format(path)
    if fmt not in FORMATS:
        raise CloudFormatError(f"unknown format {fmt!r}", path)
    with open(path, "r", encoding="ascii", errors="strict") as fh:
        lines = fh.read().splitlines()
    if fmt == "xyz":
        return _parse_xyz(lines, path)
    return _parse_ply(lines, path)


def _to_float(token, path, lineno):
    try:
        value = float(token)
    except ValueError:
        raise CloudFormatError(f"not a number: {token!r}", path, lineno) from None
    if not math.isfinite(value):
        raise CloudFormatError(f"non-finite coordinate {token!r}", path, lineno)
    return value


def _to_label(token, path, lineno):
    try:
        value = int(token)
    except ValueError:
        raise CloudFormatError(f"label must be an integer, got {token!r}", path, lineno) from None
    if value < 0:
        raise CloudFormatError(f"label must be non-negative, got {value}", path, lineno)
    return value


def _parse_xyz(lines, path):
    points, labels = [], []
    has_labels = None
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if len(tokens) not in (3, 4):
            raise CloudFormatError(f"expected 3 or 4 columns, got {len(tokens)}", path, lineno)
        row_labeled = len(tokens) == 4
        if has_labels is None:
            has_labels = row_labeled
        elif has_labels != row_labeled:
            raise CloudFormatError("inconsistent label column", path, lineno)
        points.append([_to_float(t, path, lineno) for t in tokens[:3]])
        if row_labeled:
            labels.append(_to_label(tokens[3], path, lineno))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return LabeledCloud(pts, np.asarray(labels, dtype=np.int64) if has_labels else None)


def _parse_ply(lines, path):
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError("missing 'ply' magic", path, 1)
    n_vertex = None
    props = []
    in_vertex = False
    body_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens:
            continue
        key = tokens[0]
        if key == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise CloudFormatError("only 'format ascii 1.0' is supported", path, lineno)
        elif key in ("comment", "obj_info"):
            continue
        elif key == "element":
            if len(tokens) != 3:
                raise CloudFormatError("malformed element line", path, lineno)
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tokens[2])
                except ValueError:
                    raise CloudFormatError("vertex count is not an integer", path, lineno) from None
                if n_vertex < 0:
                    raise CloudFormatError("negative vertex count", path, lineno)
            elif n_vertex is None:
                raise CloudFormatError("elements before 'vertex' are not supported", path, lineno)
        elif key == "property":
            if len(tokens) != 3 or tokens[1] == "list":
                raise CloudFormatError("only scalar properties are supported", path, lineno)
            if in_vertex:
                if tokens[1] not in _PLY_INT_TYPES | _PLY_FLOAT_TYPES:
                    raise CloudFormatError(f"unknown property type {tokens[1]!r}", path, lineno)
                props.append((tokens[2], tokens[1]))
        elif key == "end_header":
            body_start = lineno
            break
        else:
            raise CloudFormatError(f"unexpected header keyword {key!r}", path, lineno)
    if body_start is None:
        raise CloudFormatError("missing end_header", path, len(lines))
    if n_vertex is None:
        raise CloudFormatError("missing 'element vertex'", path, body_start)
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise CloudFormatError(f"missing vertex property {axis!r}", path, body_start)
    cols = [names.index(a) for a in "xyz"]
    label_col = names.index("class") if "class" in names else None
    if label_col is not None and props[label_col][1] not in _PLY_INT_TYPES:
        raise CloudFormatError("property 'class' must be an integer type", path, body_start)

    points = np.empty((n_vertex, 3), dtype=np.float64)
    labels = np.empty(n_vertex, dtype=np.int64) if label_col is not None else None
    row = 0
    lineno = body_start
    for line in lines[body_start:]:
        lineno += 1
        if row == n_vertex:
            break
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != len(props):
            raise CloudFormatError(f"expected {len(props)} values, got {len(tokens)}", path, lineno)
        for j, c in enumerate(cols):
            points[row, j] = _to_float(tokens[c], path, lineno)
        if labels is not None:
            labels[row] = _to_label(tokens[label_col], path, lineno)
        row += 1
    if row != n_vertex:
        raise CloudFormatError(f"header declares {n_vertex} vertices, found {row}", path, lineno)
    return LabeledCloud(points, labels)


def _fmt(value):
    # Shortest repr that round-trips exactly.
    return repr(float(value))


def save_cloud(cloud: LabeledCloud, path, format=None) -> None:
    """Write ``cloud`` to ``path``. Coordinates round-trip bit-exactly."""
    fmt = format or infer_format(path)
    if fmt not in FORMATS:
        raise CloudFormatError(f"unknown format {fmt!r}", path)
    pts = cloud.points.tolist()
    labels = None if cloud.labels is None else cloud.labels.tolist()
    out = []
    if fmt == "ply-ascii":
        out.append("ply")
        out.append("format ascii 1.0")
        out.append(f"element vertex {len(pts)}")
        out.extend(f"property double {a}" for a in "xyz")
        if labels is not None:
            ltype = "uchar" if not labels or max(labels) <= 255 else "int"
            out.append(f"property {ltype} class")
        out.append("end_header")
    if labels is None:
        out.extend(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in pts)
    else:
        out.extend(f"{_fmt(x)} {_fmt(y)} {_fmt(z)} {int(c)}" for (x, y, z), c in zip(pts, labels))
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("\n".join(out))
            if out:
                fh.write("\n")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write cloud: {exc.strerror}", str(path)) from exc
