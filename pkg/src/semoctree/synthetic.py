"""Deterministic synthetic façades for tests and desk-scale experiments.

A façade is a set of planar rectangular elements (wall, window reveals and
panes, door, cornice, return walls) sampled uniformly at a given density.
Randomness comes from numpy's PCG64 generator seeded by ``FacadeSpec.seed``,
so equal specs always reproduce the same cloud.

The main wall lies in the plane ``y = 0`` facing ``-y``, spans
``x in [-width/2, width/2]`` and ``z in [0, height]``; openings are inset
towards ``+y``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .core import DomainError, LabeledCloud
from .registration import RigidTransform, apply_transform

WALL = 1
WINDOW = 2
DOOR = 3
MOLDING = 4
OTHER = 5

CLASS_NAMES = {WALL: "wall", WINDOW: "window", DOOR: "door", MOLDING: "molding", OTHER: "other"}


@dataclass(frozen=True)
class Element:
    """Rectangle ``origin + s*u + t*v`` for ``s, t in [0, 1)``.

    ``cutouts`` are ``(s0, s1, t0, t1)`` windows in metres along ``u`` and
    ``v`` that are left unsampled.
    """

    origin: tuple
    u: tuple
    v: tuple
    label: int
    cutouts: tuple = ()

    def __post_init__(self):
        for name in ("origin", "u", "v"):
            vec = tuple(float(x) for x in getattr(self, name))
            if len(vec) != 3 or not np.isfinite(vec).all():
                raise DomainError(f"element {name} must be 3 finite numbers")
            object.__setattr__(self, name, vec)
        u, v = np.asarray(self.u), np.asarray(self.v)
        if np.linalg.norm(u) == 0 or np.linalg.norm(v) == 0:
            raise DomainError("element edges must have non-zero length")
        if abs(u @ v) > 1e-9 * np.linalg.norm(u) * np.linalg.norm(v):
            raise DomainError("element edges must be perpendicular")
        object.__setattr__(self, "cutouts", tuple(tuple(float(c) for c in box) for box in self.cutouts))
        object.__setattr__(self, "label", int(self.label))

    @property
    def area(self) -> float:
        full = float(np.linalg.norm(self.u) * np.linalg.norm(self.v))
        return full - sum((s1 - s0) * (t1 - t0) for s0, s1, t0, t1 in self.cutouts)

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    def sample(self, density, noise, rng) -> np.ndarray:
        u, v = np.asarray(self.u), np.asarray(self.v)
        lu, lv = np.linalg.norm(u), np.linalg.norm(v)
        count = rng.poisson(density * lu * lv)
        st = rng.random((count, 2))
        keep = np.ones(count, dtype=bool)
        for s0, s1, t0, t1 in self.cutouts:
            s, t = st[:, 0] * lu, st[:, 1] * lv
            keep &= ~((s >= s0) & (s < s1) & (t >= t0) & (t < t1))
        st = st[keep]
        pts = np.asarray(self.origin) + st[:, :1] * u + st[:, 1:] * v
        if noise > 0:
            pts = pts + rng.normal(0.0, noise, size=(len(pts), 1)) * self.normal
        return pts

    def to_dict(self):
        return {"origin": list(self.origin), "u": list(self.u), "v": list(self.v),
                "label": self.label, "cutouts": [list(c) for c in self.cutouts]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["origin"], d["u"], d["v"], d["label"], tuple(d.get("cutouts", ())))


def panel(center, width, height, label, offset=0.0, horizontal=False) -> Element:
    """Axis-aligned rectangle parallel to the main wall (or horizontal) around ``center``."""
    cx, cy, cz = (float(c) for c in center)
    if horizontal:
        return Element((cx - width / 2, cy - height / 2 - offset, cz), (width, 0, 0), (0, height, 0), label)
    return Element((cx - width / 2, cy - offset, cz - height / 2), (width, 0, 0), (0, 0, height), label)


@dataclass(frozen=True)
class FacadeSpec:
    width: float = 20.0
    height: float = 12.0
    window_rows: int = 3
    window_cols: int = 6
    window_size: tuple = (1.2, 1.6)
    window_inset: float = 0.2
    door_size: Optional[tuple] = (1.6, 2.4)
    door_inset: float = 0.3
    molding_height: float = 0.5
    molding_depth: float = 0.3
    side_depth: float = 4.0
    extras: tuple = ()
    wall_class: int = WALL
    window_class: int = WINDOW
    door_class: int = DOOR
    molding_class: int = MOLDING
    density: float = 200.0
    noise: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise DomainError("wall extent must be positive")
        if not self.density > 0:
            raise DomainError("density must be positive")
        if self.noise < 0:
            raise DomainError("noise must be non-negative")
        if self.window_rows < 0 or self.window_cols < 0:
            raise DomainError("window grid must be non-negative")
        extras = tuple(e if isinstance(e, Element) else Element.from_dict(e) for e in self.extras)
        object.__setattr__(self, "extras", extras)
        object.__setattr__(self, "window_size", tuple(self.window_size))
        if self.door_size is not None:
            object.__setattr__(self, "door_size", tuple(self.door_size))
        self.elements()  # validates layout

    def replace(self, **changes) -> "FacadeSpec":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return FacadeSpec(**d)

    def to_dict(self):
        d = asdict(self)
        d["extras"] = [e.to_dict() for e in self.extras]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown façade spec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    # layout -------------------------------------------------------------

    def openings(self):
        """``(x0, x1, z0, z1, kind)`` in wall coordinates."""
        W, H = self.width, self.height
        top = H - self.molding_height
        out = []
        door = None
        if self.door_size is not None:
            dw, dh = self.door_size
            door = (-dw / 2, dw / 2, 0.0, dh, "door")
            out.append(door)
        if self.window_rows and self.window_cols:
            ww, wh = self.window_size
            storey = top / self.window_rows
            if ww >= W / self.window_cols or wh >= storey:
                raise DomainError("windows overlap; reduce window_size or the window grid")
            for i in range(self.window_rows):
                z0 = i * storey + 0.45 * storey - wh / 2
                for j in range(self.window_cols):
                    xc = -W / 2 + (j + 0.5) * W / self.window_cols
                    box = (xc - ww / 2, xc + ww / 2, z0, z0 + wh, "window")
                    if door is not None and box[0] < door[1] + 0.2 and box[1] > door[0] - 0.2 and box[2] < door[3] + 0.2:
                        continue
                    out.append(box)
        for x0, x1, z0, z1, _ in out:
            if x0 < -W / 2 or x1 > W / 2 or z0 < 0 or z1 > top:
                raise DomainError("opening does not fit inside the wall")
        return out

    def elements(self):
        W, H = self.width, self.height
        top = H - self.molding_height
        openings = self.openings()
        cut = tuple((x0 + W / 2, x1 + W / 2, z0, z1) for x0, x1, z0, z1, _ in openings)
        els = [Element((-W / 2, 0, 0), (W, 0, 0), (0, 0, top), self.wall_class, cut)]
        for x0, x1, z0, z1, kind in openings:
            label = self.door_class if kind == "door" else self.window_class
            inset = self.door_inset if kind == "door" else self.window_inset
            w, h = x1 - x0, z1 - z0
            els.append(Element((x0, inset, z0), (w, 0, 0), (0, 0, h), label))
            if inset > 0:
                els.append(Element((x0, 0, z0), (0, inset, 0), (0, 0, h), label))
                els.append(Element((x1, 0, z0), (0, 0, h), (0, inset, 0), label))
                if z0 > 0:
                    els.append(Element((x0, 0, z0), (w, 0, 0), (0, inset, 0), label))
                els.append(Element((x0, 0, z1), (0, inset, 0), (w, 0, 0), label))
        if self.molding_height > 0:
            md, mh = self.molding_depth, self.molding_height
            els.append(Element((-W / 2, -md, top), (W, 0, 0), (0, 0, mh), self.molding_class))
            if md > 0:
                els.append(Element((-W / 2, -md, top), (0, md, 0), (W, 0, 0), self.molding_class))
                els.append(Element((-W / 2, -md, H), (W, 0, 0), (0, md, 0), self.molding_class))
        if self.side_depth > 0:
            els.append(Element((-W / 2, 0, 0), (0, 0, H), (0, self.side_depth, 0), self.wall_class))
            els.append(Element((W / 2, 0, 0), (0, self.side_depth, 0), (0, 0, H), self.wall_class))
        els.extend(self.extras)
        return els


def sample_elements(elements, density, noise, rng):
    pts, labels = [], []
    for el in elements:
        p = el.sample(density, noise, rng)
        pts.append(p)
        labels.append(np.full(len(p), el.label, dtype=np.int64))
    if not pts:
        return LabeledCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    return LabeledCloud(np.concatenate(pts), np.concatenate(labels))


def generate(spec: FacadeSpec) -> LabeledCloud:
    """Sample every element of ``spec`` at ``spec.density`` points per m²."""
    rng = np.random.default_rng(spec.seed)
    return sample_elements(spec.elements(), spec.density, spec.noise, rng)


def perturb(cloud: LabeledCloud, transform: RigidTransform = None, noise: float = 0.0, seed: int = 0) -> LabeledCloud:
    """Apply ``transform``, then add isotropic Gaussian noise of std ``noise``."""
    out = cloud if transform is None else apply_transform(cloud, transform)
    if noise > 0:
        rng = np.random.default_rng(seed)
        out = out.with_points(out.points + rng.normal(0.0, noise, size=out.points.shape))
    return out


def random_rotation_transform(angle_deg, translation_norm, seed=0) -> RigidTransform:
    """Rotation by ``angle_deg`` about a random axis plus a random translation of given length."""
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    direction = rng.normal(size=3)
    direction *= translation_norm / np.linalg.norm(direction)
    return RigidTransform.from_axis_angle(axis, np.radians(angle_deg), direction)


@dataclass(frozen=True, eq=False)
class ChangeTruth:
    """Ground truth of :func:`inject_changes`.

    ``added`` flags appended points of the output cloud; ``kept`` holds the
    input indices of the remaining output points (in output order) and
    ``removed`` flags input points deleted by a removal box.
    """

    added: np.ndarray
    kept: np.ndarray
    removed: np.ndarray
    removal_boxes: tuple = field(default=())

    @property
    def added_fraction(self) -> float:
        return float(self.added.mean()) if len(self.added) else 0.0


def in_boxes(points, boxes) -> np.ndarray:
    mask = np.zeros(len(points), dtype=bool)
    for lo, hi in boxes:
        mask |= np.all((points >= np.asarray(lo)) & (points < np.asarray(hi)), axis=1)
    return mask


def inject_changes(cloud: LabeledCloud, removals=(), additions=(), density=200.0, noise=0.0, seed=0):
    """Delete points inside ``removals`` boxes and append sampled ``additions``.

    ``removals`` are ``(lo, hi)`` corner pairs. Returns ``(cloud, ChangeTruth)``.
    """
    boxes = tuple((tuple(map(float, lo)), tuple(map(float, hi))) for lo, hi in removals)
    removed = in_boxes(cloud.points, boxes)
    kept = np.flatnonzero(~removed)
    base = cloud.subset(kept)
    rng = np.random.default_rng(seed)
    extra = sample_elements(list(additions), density, noise, rng)
    pts = np.concatenate([base.points, extra.points])
    if base.labels is not None:
        labels = np.concatenate([base.labels, extra.labels])
    else:
        labels = None
    added = np.zeros(len(pts), dtype=bool)
    added[len(base):] = True
    return LabeledCloud(pts, labels), ChangeTruth(added, kept, removed, boxes)
