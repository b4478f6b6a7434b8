import numpy as np
import pytest
from sklearn.base import clone

from semoctree import (
    ConvergenceCriteria,
    GICPRegistration,
    LabeledCloud,
    RegistrationError,
    RigidTransform,
    apply_transform,
    estimate_surface_stats,
    gicp_register,
    voxel_downsample,
)
from semoctree.registration import gicp_linearize, gicp_objective, rotation_angle, so3_exp
from semoctree.synthetic import generate, perturb, random_rotation_transform


def random_transform(rng, angle=0.1, shift=0.5):
    return RigidTransform.from_axis_angle(rng.normal(size=3), angle * rng.uniform(-1, 1), rng.normal(size=3) * shift)


def test_transform_validation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        RigidTransform(2 * np.eye(3))


def test_apply_identity_and_translation():
    cloud = LabeledCloud(np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]), np.array([4, 5]))
    assert apply_transform(cloud, RigidTransform()) == cloud
    moved = apply_transform(cloud, RigidTransform(np.eye(3), [1, 2, 3]))
    np.testing.assert_array_equal(moved.points[0], [1, 2, 3])
    assert moved.labels.tolist() == [4, 5]


def test_apply_then_inverse(rng):
    cloud = LabeledCloud(rng.normal(scale=50, size=(500, 3)))
    T = random_transform(rng, angle=1.0, shift=10)
    back = apply_transform(apply_transform(cloud, T), T.inverse())
    np.testing.assert_allclose(back.points, cloud.points, atol=1e-9)


def test_matrix_round_trip(rng):
    T = random_transform(rng)
    U = RigidTransform.from_matrix(T.matrix())
    np.testing.assert_array_equal(U.matrix(), T.matrix())
    np.testing.assert_allclose((T @ T.inverse()).matrix(), np.eye(4), atol=1e-12)


def test_so3_exp_small_and_large_angles():
    for w in ([1e-10, 0, 0], [0.3, -0.2, 0.9]):
        R = so3_exp(w)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert rotation_angle(R) == pytest.approx(np.linalg.norm(w), abs=1e-9)


def test_criteria_validation():
    with pytest.raises(Exception):
        ConvergenceCriteria(0, 1e-6, 1e-6)
    with pytest.raises(Exception):
        ConvergenceCriteria(50, 0.0, 1e-6)


@pytest.fixture(scope="module")
def prepared(small_facade):
    cloud = voxel_downsample(small_facade, 0.1)
    return cloud, estimate_surface_stats(cloud)


def test_identity_fixed_point(prepared):
    cloud, stats = prepared
    res = gicp_register(cloud, stats, cloud, stats)
    assert res.converged and res.iterations_used <= 2
    assert res.fitness == 1.0
    assert res.inlier_rmse == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(res.transform.matrix(), np.eye(4), atol=1e-12)


def test_disjoint_clouds_raise(prepared):
    cloud, stats = prepared
    far = apply_transform(cloud, RigidTransform(np.eye(3), [1000.0, 0, 0]))
    with pytest.raises(RegistrationError, match="max_correspondence_distance=10"):
        gicp_register(cloud, stats, far, stats, max_correspondence_distance=10.0)


def test_gradient_matches_central_differences(prepared, rng):
    cloud, stats = prepared
    target = apply_transform(cloud, random_transform(rng, 0.02, 0.1))
    tstats = estimate_surface_stats(target)
    idx = rng.choice(len(cloud), 800, replace=False)
    args = (cloud.points[idx], stats.covariances[idx], target.points[idx], tstats.covariances[idx])
    h = 1e-6
    for _ in range(5):
        T = random_transform(rng, 0.05, 0.2)
        _, grad, H = gicp_linearize(T, *args)
        fd = np.zeros(6)
        for j in range(6):
            e = np.zeros(6)
            e[j] = h
            fp = gicp_objective(RigidTransform.exp(e) @ T, *args)
            fm = gicp_objective(RigidTransform.exp(-e) @ T, *args)
            fd[j] = (fp - fm) / (2 * h)
        assert np.linalg.norm(fd - grad) <= 1e-5 * np.linalg.norm(grad)
        assert np.all(np.linalg.eigvalsh(H) > 0)


def test_objective_non_increasing_and_recovery(small_facade, small_spec):
    T_star = random_rotation_transform(2.0, 0.5, seed=3)
    target = perturb(generate(small_spec.replace(seed=11)), T_star)
    est = GICPRegistration().fit(small_facade, target)
    res = est.result_
    assert all(after <= before for before, after in res.objective_history)
    err = T_star.inverse() @ res.transform
    assert np.degrees(rotation_angle(err.rotation)) <= 0.5
    assert np.linalg.norm(res.transform.translation - T_star.translation) <= 0.05
    assert res.iterations_used <= 50 and res.fitness > 0.99


def test_self_consistency_recovers_inverse(small_facade):
    T_star = random_rotation_transform(1.5, 0.3, seed=8)
    moved = apply_transform(small_facade, T_star)
    est = GICPRegistration().fit(moved, small_facade)
    np.testing.assert_allclose(est.transform_.matrix(), T_star.inverse().matrix(), atol=5e-3)


def test_estimator_params_and_transform(small_facade):
    est = GICPRegistration(voxel_size=0.2, max_iter=5)
    assert clone(est).get_params()["voxel_size"] == 0.2
    est.fit(small_facade, small_facade)
    out = est.transform(small_facade)
    assert isinstance(out, LabeledCloud)
    np.testing.assert_allclose(out.points, small_facade.points, atol=1e-9)
    np.testing.assert_allclose(est.transform(small_facade.points[:3]), small_facade.points[:3], atol=1e-9)
