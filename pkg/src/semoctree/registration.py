"""Plane-to-plane Generalized-ICP registration.

The pose is refined by Gauss-Newton over left-multiplied twist increments
``exp(xi) * T`` with ``xi = (omega, v)``: rotation by the Rodrigues
exponential of ``omega`` followed by translation by ``v``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_cloud, check_points, check_positive
from .core import KnnIndex, LabeledCloud, SemOctreeError
from .preprocess import (
    DEFAULT_EPSILON,
    DEFAULT_NORMAL_NEIGHBORS,
    SurfaceStats,
    estimate_surface_stats,
    voxel_downsample,
)

logger = logging.getLogger(__name__)

MAX_STEP_HALVINGS = 8


class RegistrationError(SemOctreeError, RuntimeError):
    """Registration could not proceed (no correspondences, non-finite objective)."""


def hat(w):
    """Skew-symmetric matrix of a 3-vector (or a stack of them)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(omega):
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    K = hat(omega)
    if theta < 1e-8:
        # Second-order Taylor expansion avoids 0/0.
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1.0 - np.cos(theta)) / theta**2 * K @ K


def rotation_angle(R) -> float:
    """Rotation angle of ``R`` in radians."""
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise ValueError("transform must be finite")
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, matrix):
        M = np.asarray(matrix, dtype=float)
        if M.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {M.shape}")
        if not np.allclose(M[3], [0, 0, 0, 1]):
            raise ValueError("last row of a rigid transform must be [0, 0, 0, 1]")
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_axis_angle(cls, axis, angle, translation=(0.0, 0.0, 0.0)):
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return cls(so3_exp(axis * angle), translation)

    @classmethod
    def exp(cls, xi):
        xi = np.asarray(xi, dtype=float)
        return cls(so3_exp(xi[:3]), xi[3:])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        return check_points(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self * other``: apply ``other`` first."""
        return RigidTransform(
            _orthonormalize(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        return self.compose(other)

    def __repr__(self):
        return f"RigidTransform(angle={np.degrees(rotation_angle(self.rotation)):.6g} deg, t={self.translation})"


def _orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


def apply_transform(cloud: LabeledCloud, T: RigidTransform) -> LabeledCloud:
    """Map every point ``p -> R p + t``; labels and order are kept."""
    return cloud.with_points(T.apply(cloud.points))


@dataclass(frozen=True)
class ConvergenceCriteria:
    max_iterations: int = 50
    rel_fitness: float = 1e-6
    rel_rmse: float = 1e-6

    def __post_init__(self):
        check_positive(self.max_iterations, "max_iterations", integer=True)
        check_positive(self.rel_fitness, "rel_fitness")
        check_positive(self.rel_rmse, "rel_rmse")


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    iterations_used: int
    converged: bool
    #: ``(objective_before, objective_after)`` of every Gauss-Newton step,
    #: both evaluated on that iteration's correspondence set.
    objective_history: tuple = ()


def gicp_objective(T, src_pts, src_cov, tgt_pts, tgt_cov):
    """Sum of Mahalanobis residuals ``d^T (C_B + R C_A R^T)^-1 d``."""
    R = T.rotation
    d = tgt_pts - (src_pts @ R.T + T.translation)
    S = np.einsum("ij,njk,lk->nil", R, src_cov, R)
    M = tgt_cov + S
    u = np.linalg.solve(M, d[..., None])[..., 0]
    return float(np.einsum("ni,ni->", d, u))


def gicp_linearize(T, src_pts, src_cov, tgt_pts, tgt_cov):
    """Objective, exact gradient and Gauss-Newton Hessian w.r.t. ``xi``.

    The gradient includes the dependence of the combined covariance on the
    rotation; the Hessian keeps the covariance fixed.
    """
    R = T.rotation
    a = src_pts @ R.T + T.translation
    d = tgt_pts - a
    S = np.einsum("ij,njk,lk->nil", R, src_cov, R)
    M_inv = np.linalg.inv(tgt_cov + S)
    u = np.einsum("nij,nj->ni", M_inv, d)
    f = float(np.einsum("ni,ni->", d, u))

    # Residual Jacobian: d(d)/d(omega) = hat(a), d(d)/d(v) = -I.
    J = np.zeros((len(a), 3, 6))
    J[:, :, :3] = hat(a)
    J[:, :, 3:] = -np.eye(3)
    grad = 2.0 * np.einsum("nij,ni->j", J, u)
    Su = np.einsum("nij,nj->ni", S, u)
    grad[:3] += 2.0 * np.cross(u, Su).sum(axis=0)
    H = 2.0 * np.einsum("nki,nkl,nlj->ij", J, M_inv, J)
    return f, grad, H


def _rel_change(new, old):
    scale = max(abs(old), abs(new))
    if scale == 0.0:
        return 0.0
    return abs(new - old) / scale


def gicp_register(
    source: LabeledCloud,
    source_stats: SurfaceStats,
    target: LabeledCloud,
    target_stats: SurfaceStats,
    init: RigidTransform = None,
    max_correspondence_distance: float = 10.0,
    criteria: ConvergenceCriteria = ConvergenceCriteria(),
    workers: int = 1,
) -> RegistrationResult:
    """Align ``source`` to ``target`` with plane-to-plane GICP.

    Each iteration pairs every transformed source point with its nearest
    target point, drops pairs farther than ``max_correspondence_distance``
    and takes one Gauss-Newton step (halved up to eight times while it
    increases the objective). Iteration stops once the relative changes of
    both fitness and inlier RMSE fall below ``criteria``.
    """
    if len(source) == 0 or len(target) == 0:
        raise RegistrationError("registration needs non-empty source and target clouds")
    if len(source_stats) != len(source) or len(target_stats) != len(target):
        raise RegistrationError("surface statistics do not match their clouds")
    lam = check_positive(max_correspondence_distance, "max_correspondence_distance")
    T = init if init is not None else RigidTransform.identity()
    tree = KnnIndex(target, workers=workers)
    src = source.points

    def correspond(T):
        moved = T.apply(src)
        idx, dist = tree.query(moved, 1)
        idx, dist = idx[:, 0], dist[:, 0]
        inlier = dist <= lam
        n_in = int(inlier.sum())
        if n_in == 0:
            raise RegistrationError(
                f"no correspondences within max_correspondence_distance={lam:g} m"
            )
        fitness = n_in / len(src)
        rmse = float(np.sqrt(np.mean(dist[inlier] ** 2)))
        return np.flatnonzero(inlier), idx[inlier], fitness, rmse

    history = []
    prev = None
    converged = False
    iterations = 0
    fitness = rmse = None
    for it in range(1, criteria.max_iterations + 1):
        iterations = it
        s_idx, t_idx, fitness, rmse = correspond(T)
        if prev is not None and (
            _rel_change(fitness, prev[0]) < criteria.rel_fitness
            and _rel_change(rmse, prev[1]) < criteria.rel_rmse
        ):
            converged = True
            break
        prev = (fitness, rmse)

        args = (src[s_idx], source_stats.covariances[s_idx], target.points[t_idx], target_stats.covariances[t_idx])
        _, grad, H = gicp_linearize(T, *args)
        f0 = gicp_objective(T, *args)
        if not np.isfinite(f0) or not np.isfinite(grad).all():
            raise RegistrationError(f"non-finite objective at iteration {it}")
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, grad, rcond=None)[0]
        f_new = f0
        for _ in range(MAX_STEP_HALVINGS + 1):
            candidate = RigidTransform.exp(step) @ T
            f_try = gicp_objective(candidate, *args)
            if np.isfinite(f_try) and f_try <= f0:
                T, f_new = candidate, f_try
                break
            step = 0.5 * step
        history.append((f0, f_new))
        logger.debug("gicp it=%d fitness=%.6f rmse=%.6g objective=%.6g", it, fitness, rmse, f_new)
    else:
        # Report the quality of the final pose, not of the pose before the last step.
        _, _, fitness, rmse = correspond(T)

    return RegistrationResult(
        transform=T,
        fitness=float(fitness),
        inlier_rmse=float(rmse),
        iterations_used=iterations,
        converged=converged,
        objective_history=tuple(history),
    )


class GICPRegistration(TransformerMixin, BaseEstimator):
    """Downsample, estimate plane covariances and run GICP.

    ``fit(X, y)`` registers the source points ``X`` onto the target points
    ``y``; ``transform`` then maps points into the target frame.
    The downsampled clouds drive the optimisation only.
    """

    def __init__(
        self,
        voxel_size=0.1,
        max_correspondence_distance=10.0,
        max_iter=50,
        rel_fitness=1e-6,
        rel_rmse=1e-6,
        n_neighbors=DEFAULT_NORMAL_NEIGHBORS,
        epsilon=DEFAULT_EPSILON,
        init=None,
        n_jobs=1,
    ):
        self.voxel_size = voxel_size
        self.max_correspondence_distance = max_correspondence_distance
        self.max_iter = max_iter
        self.rel_fitness = rel_fitness
        self.rel_rmse = rel_rmse
        self.n_neighbors = n_neighbors
        self.epsilon = epsilon
        self.init = init
        self.n_jobs = n_jobs

    def _prepare(self, cloud):
        if self.voxel_size:
            cloud = voxel_downsample(cloud, self.voxel_size)
        return cloud, estimate_surface_stats(cloud, self.n_neighbors, self.epsilon, workers=self.n_jobs)

    def fit(self, X, y):
        source, source_stats = self._prepare(as_cloud(X))
        target, target_stats = self._prepare(as_cloud(y))
        init = self.init
        if init is not None and not isinstance(init, RigidTransform):
            init = RigidTransform.from_matrix(init)
        self.result_ = gicp_register(
            source,
            source_stats,
            target,
            target_stats,
            init=init,
            max_correspondence_distance=self.max_correspondence_distance,
            criteria=ConvergenceCriteria(self.max_iter, self.rel_fitness, self.rel_rmse),
            workers=self.n_jobs,
        )
        self.transform_ = self.result_.transform
        self.n_iter_ = self.result_.iterations_used
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        if isinstance(X, LabeledCloud):
            return apply_transform(X, self.transform_)
        return self.transform_.apply(X)
