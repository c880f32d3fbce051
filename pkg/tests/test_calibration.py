import warnings

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from drift_forge import calibration as C
from drift_forge import pose as P
from drift_forge import simulator as S
from drift_forge.calibration import CalibSample, IllConditionedError, LmConfig, fit_mount, lm_solve

from oracles import angle_between, rot


def euler(m):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", P.GimbalLockWarning)
        return P.wrap_deg(P.matrix_to_euler(m))


def make_samples(mount_deg, n, noise_deg, rng):
    refs = Rotation.random(n, random_state=rng).as_matrix()
    imu = refs @ rot(mount_deg)
    a = P.wrap_deg(euler(imu) + rng.normal(0.0, noise_deg, (n, 3)))
    b = euler(refs)
    return [CalibSample(tuple(x), tuple(y)) for x, y in zip(a, b)]


def test_config_invariants():
    with pytest.raises(ValueError):
        LmConfig(lambda_up=0.5)
    with pytest.raises(ValueError):
        LmConfig(lambda_down=1.5)
    with pytest.raises(ValueError):
        LmConfig(tol_step=0.0)


def test_linear_least_squares_matches_normal_equations():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(30, 4)), rng.normal(size=30)
    x, rep = lm_solve(lambda x: a @ x - b, lambda x: a, np.zeros(4))
    want = np.linalg.solve(a.T @ a, a.T @ b)
    np.testing.assert_allclose(x, want, atol=1e-8)
    assert rep.converged


def test_optimal_start_takes_no_step():
    a = np.eye(2)
    x, rep = lm_solve(lambda x: a @ x - 1.0, lambda x: a, np.ones(2))
    assert rep.iterations <= 1 and rep.converged
    np.testing.assert_array_equal(x, np.ones(2))


def test_rosenbrock():
    res = lambda x: np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])
    jac = lambda x: np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])
    x, rep = lm_solve(res, jac, np.array([-1.2, 1.0]), LmConfig(max_iters=500))
    np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-6)
    norms = np.array(rep.residual_norms)
    assert np.all(np.diff(norms) <= 0)
    assert rep.lambdas and len(rep.lambdas) == len(rep.accepted)


def test_max_iters_is_not_an_error():
    res = lambda x: np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])
    jac = lambda x: np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])
    _, rep = lm_solve(res, jac, np.array([-1.2, 1.0]), LmConfig(max_iters=2))
    assert not rep.converged and rep.reason == "max_iters reached"


def test_damping_blowup_raises():
    # jacobian pointing the wrong way: no step ever decreases the cost
    with pytest.raises(C.LmDivergedError):
        lm_solve(lambda x: x, lambda x: -np.eye(1), np.array([1.0]))


def test_numeric_jacobian():
    f = lambda x: np.array([x[0] * x[1], np.sin(x[0])])
    j = C.numeric_jacobian(f, np.array([0.3, 2.0]))
    np.testing.assert_allclose(j, [[2.0, 0.3], [np.cos(0.3), 0.0]], atol=1e-8)


def test_known_mount_noiseless():
    rng = np.random.default_rng(1)
    fit = fit_mount(make_samples((0.0, 0.0, 90.0), 40, 0.0, rng))
    err = np.radians(angle_between(fit.rotation.to_matrix()[:3, :3], rot([0, 0, 90])))
    assert err <= 1e-6
    assert fit.report.final_residual / np.sqrt(40) <= 1e-10


def test_identity_mount_noiseless():
    fit = fit_mount(make_samples((0.0, 0.0, 0.0), 20, 0.0, np.random.default_rng(2)))
    assert angle_between(fit.rotation.to_matrix()[:3, :3], np.eye(3)) < 1e-6


def test_noisy_recovery():
    errs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        mount = rng.uniform(-90, 90, 3)
        fit = fit_mount(make_samples(mount, 500, 0.5, rng))
        errs.append(angle_between(fit.rotation.to_matrix()[:3, :3], rot(mount)))
    assert np.mean(errs) <= 0.2


def test_equivariance():
    rng = np.random.default_rng(3)
    samples = make_samples((20.0, -10.0, 35.0), 30, 0.2, rng)
    q = rot([5.0, 10.0, -15.0])
    # imu = ref @ R; substituting ref' = ref @ q^T gives imu = ref' @ (q R)
    moved = [CalibSample(s.imu_angle, tuple(euler(rot(s.ref_angle) @ q.T))) for s in samples]
    r1 = fit_mount(samples).rotation.to_matrix()[:3, :3]
    r2 = fit_mount(moved).rotation.to_matrix()[:3, :3]
    assert angle_between(q @ r1, r2) < 1e-6


def test_degenerate_samples():
    same = [CalibSample((1.0, 2.0, 3.0), (0.0, 0.0, 0.0))] * 10
    with pytest.raises(IllConditionedError):
        fit_mount(same)
    single_axis = [CalibSample((0.0, 0.0, float(a)), (0.0, 0.0, float(a))) for a in range(0, 60, 5)]
    with pytest.raises(IllConditionedError):
        fit_mount(single_axis)
    with pytest.raises(IllConditionedError):
        fit_mount(same[:2])


def test_sample_range_checked():
    with pytest.raises(ValueError):
        CalibSample((181.0, 0.0, 0.0), (0.0, 0.0, 0.0))


def test_scan_round_trip_noiseless():
    sensors = S.SensorConfig.noiseless()
    scans = [S.simulate_scan(t, 40, 100.0, k, sensors=sensors) for k, t in enumerate(["curved", "sector", "loop"])]
    for j, mount in enumerate(sensors.mount_angles):
        samples = [s for sc in scans for s in C.samples_from_scan(sc, j)]
        fit = fit_mount(samples)
        assert angle_between(fit.rotation.to_matrix()[:3, :3], rot(mount)) <= 1e-4


def test_report_json():
    fit = fit_mount(make_samples((0.0, 0.0, 90.0), 10, 0.0, np.random.default_rng(4)))
    import json

    doc = json.loads(C.calibration_report([fit], truth=[(0.0, 0.0, 90.0)]))
    assert doc["converged"] is True
    row = doc["mounts"][0]
    assert {"mount_deg", "final_residual_rad", "iterations", "error_deg"} <= set(row)
    assert row["error_deg"] < 1e-6
