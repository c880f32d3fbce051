import itertools
import warnings

import numpy as np
import pytest

from drift_forge import autodiff as ad
from drift_forge import estimator as E
from drift_forge import losses as L
from drift_forge import simulator as S
from drift_forge.losses import DegenerateLossWarning, TauSpec

from oracles import central_diff, homogeneous, pearson_direct, random_pose

warnings.simplefilter("ignore", S.P.GimbalLockWarning)


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a))))


def test_pearson_examples():
    a = np.random.default_rng(0).normal(size=(10, 3))
    assert float(L.pearson_loss(a, a)) == pytest.approx(0.0, abs=1e-12)
    assert float(L.pearson_loss(a, -a)) == pytest.approx(2.0, abs=1e-12)
    assert float(L.pearson_loss(a, 3 * a + 5)) == pytest.approx(0.0, abs=1e-12)
    b = np.random.default_rng(1).normal(size=(10, 3))
    assert float(L.pearson_loss(a, b)) == pytest.approx(pearson_direct(a, b), abs=1e-12)


def test_pearson_degenerate_component():
    a = np.random.default_rng(0).normal(size=(10, 2))
    b = a.copy()
    b[:, 1] = 4.0
    with pytest.warns(DegenerateLossWarning):
        val = float(L.pearson_loss(a, b))
    assert val == pytest.approx(0.5, abs=1e-12)
    terms, mask = L.pearson_terms(a, b)
    assert mask.tolist() == [False, True]
    with pytest.raises(ValueError):
        L.pearson_loss(a[:1], b[:1])


def test_pearson_gradient_finite_near_constant():
    x = ad.Tensor(np.column_stack([np.linspace(0, 1, 6), np.full(6, 2.0)]), requires_grad=True)
    with pytest.warns(DegenerateLossWarning):
        out = L.pearson_loss(x, np.random.default_rng(2).normal(size=(6, 2)))
    ad.backward(out)
    assert np.all(np.isfinite(x.grad))


def test_supervised_examples():
    th = np.random.default_rng(3).normal(size=(8, 6))
    assert float(L.supervised_loss(th, th)) == pytest.approx(0.0, abs=1e-12)
    c = np.array([1.0, -2.0, 0.5, 0.0, 3.0, -1.0])
    assert float(L.supervised_loss(th + c, th)) == pytest.approx(np.abs(c).mean(), abs=1e-12)


def test_derive_accel_examples():
    const = np.tile([1.0, 0, 0, 0, 0, 0], (5, 1))
    np.testing.assert_allclose(L.derive_accel(const), 0.0, atol=1e-15)
    steps = np.zeros((3, 6))
    steps[:, 0] = [1.0, 2.0, 4.0]
    np.testing.assert_allclose(L.derive_accel(steps), [[-0.5, 0, 0], [0.5, 0, 0]], atol=1e-15)
    with pytest.raises(ValueError):
        L.derive_accel(steps[:1])


def test_derive_accel_matches_matrix_oracle():
    rng = np.random.default_rng(4)
    th = np.array([random_pose(rng, 2.0, 60.0) for _ in range(7)])
    raw = []
    for i in range(1, 7):
        m_prev = homogeneous(th[i - 1])
        raw.append(-m_prev[:3, :3].T @ m_prev[:3, 3] + th[i, :3])
    raw = np.array(raw)
    np.testing.assert_allclose(L.derive_accel(th), raw - raw.mean(0), atol=1e-12)


def noiseless_scan(tactic="curved", n=40, seed=2):
    return S.simulate_scan(tactic, n, 120.0, seed, sensors=S.SensorConfig.noiseless())


def test_single_imu_loss_vanishes_on_gt():
    sc = noiseless_scan()
    feats = E.imu_features(sc)
    per_imu = np.repeat(sc.gt.rel[None], 4, 0)
    val = float(L.single_imu_loss(per_imu, feats.accel, feats.dphi))
    assert val <= 1e-9


def test_single_imu_loss_quantization_floor():
    # same scan, default 0.5 deg / 5e-4 g quantization; pinned floor
    sc = S.simulate_scan("curved", 40, 120.0, 2, sensors=S.SensorConfig.noiseless(angle_resolution_deg=0.5, accel_resolution_g=5e-4))
    feats = E.imu_features(sc)
    val = float(L.single_imu_loss(np.repeat(sc.gt.rel[None], 4, 0), feats.accel, feats.dphi))
    assert val < 2.0


def test_single_imu_loss_constant_velocity_flags():
    rel = np.tile([0.0, 1.0, 0, 0, 0, 0], (6, 1))
    per_imu = np.repeat(rel[None], 2, 0)
    acc = np.random.default_rng(0).normal(size=(2, 6, 3))
    with pytest.warns(DegenerateLossWarning):
        val = float(L.single_imu_loss(per_imu, acc, np.zeros((2, 6, 3))))
    assert val == pytest.approx(2 * 1.0, abs=1e-12)


def test_single_imu_loss_scale_and_offset_invariance():
    rng = np.random.default_rng(5)
    per_imu = rng.normal(size=(3, 9, 6))
    acc, dphi = rng.normal(size=(3, 9, 3)), rng.normal(size=(3, 9, 3))
    base = float(L.single_imu_loss(per_imu, acc, dphi))
    shifted = float(L.single_imu_loss(per_imu, acc + np.array([0.0, 0.0, 1.0]), dphi))
    assert shifted == pytest.approx(base, abs=1e-12)
    scaled = per_imu.copy()
    scaled[..., :3] *= 2.0  # doubles every derived acceleration
    pearson_before = base - np.abs(per_imu[..., 3:] - dphi).mean(axis=(1, 2)).sum()
    pearson_after = float(L.single_imu_loss(scaled, acc, dphi)) - np.abs(scaled[..., 3:] - dphi).mean(axis=(1, 2)).sum()
    assert pearson_after == pytest.approx(pearson_before, abs=1e-12)


def direct_multi(per_imu):
    acc = [L.derive_accel(p) for p in per_imu]
    total = 0.0
    for j, k in itertools.combinations(range(len(per_imu)), 2):
        total += pearson_direct(acc[j], acc[k]) + np.abs(per_imu[j, :, 3:] - per_imu[k, :, 3:]).mean()
    return total


def test_multi_imu_loss():
    rng = np.random.default_rng(6)
    per_imu = rng.normal(size=(4, 8, 6))
    assert float(L.multi_imu_loss(per_imu)) == pytest.approx(direct_multi(per_imu), abs=1e-10)
    same = np.repeat(per_imu[:1], 4, 0)
    assert float(L.multi_imu_loss(same)) == pytest.approx(0.0, abs=1e-12)
    perm = per_imu[[3, 1, 0, 2]]
    assert float(L.multi_imu_loss(perm)) == pytest.approx(float(L.multi_imu_loss(per_imu)), abs=1e-12)
    with pytest.warns(DegenerateLossWarning):
        assert float(L.multi_imu_loss(per_imu[:1])) == 0.0


def test_multi_imu_pair_count():
    # zero translations: every pair's Pearson term is the neutral 1; angles differ by |j - k| in one component
    per_imu = np.zeros((4, 5, 6))
    per_imu[:, :, 3] = np.arange(4)[:, None]
    expected = sum(1.0 + abs(j - k) / 3.0 for j, k in itertools.combinations(range(4), 2))
    assert float(L.multi_imu_loss(per_imu)) == pytest.approx(expected, abs=1e-12)


def test_tau_examples():
    chain = np.tile([1.0, 0, 0, 0, 0, 0], (2, 1))
    np.testing.assert_allclose(L.h_tau(chain, TauSpec(stride=2)), [[2.0, 0, 0, 0, 0, 0]])
    th = np.random.default_rng(8).normal(size=(9, 6))
    np.testing.assert_array_equal(L.h_tau(th, TauSpec()), th)
    with pytest.raises(ValueError):
        TauSpec(stride=0)


def test_h_tau_matches_matrix_oracle():
    rng = np.random.default_rng(9)
    th = np.array([random_pose(rng, 2.0, 60.0) for _ in range(12)])
    out = L.h_tau(th, TauSpec(stride=3, flip=True, offset=1))
    absolute = [np.eye(4)]
    for p in th:
        absolute.append(absolute[-1] @ homogeneous(p))
    idx = list(range(1, 13, 3))[::-1]
    for k in range(len(idx) - 1):
        want = np.linalg.inv(absolute[idx[k]]) @ absolute[idx[k + 1]]
        np.testing.assert_allclose(homogeneous(out[k]), want, atol=1e-9)


@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("flip", [False, True])
def test_h_tau_on_gt_equals_gt_of_tau_scan(stride, flip):
    sc = S.simulate_scan("loop", 40, 120.0, 4)
    for offset in range(stride):
        tau = TauSpec(stride=stride, flip=flip, offset=offset)
        np.testing.assert_allclose(L.h_tau(sc.gt.rel, tau), L.apply_tau_to_scan(sc, tau).gt.rel, atol=1e-9)


def test_apply_tau_identity_and_involution():
    sc = S.simulate_scan("sector", 20, 50.0, 1)
    same = L.apply_tau_to_scan(sc, TauSpec())
    np.testing.assert_array_equal(same.obs, sc.obs)
    np.testing.assert_array_equal(same.gt.rel, sc.gt.rel)
    twice = L.apply_tau_to_scan(L.apply_tau_to_scan(sc, TauSpec(flip=True)), TauSpec(flip=True))
    np.testing.assert_allclose(twice.gt.rel, sc.gt.rel, atol=1e-9)
    with pytest.raises(ValueError):
        L.apply_tau_to_scan(sc, TauSpec(stride=10))


def test_sample_tau_family():
    rng = np.random.default_rng(0)
    draws = [L.sample_tau(rng, 100) for _ in range(600)]
    assert {t.stride for t in draws} == {1, 2, 3}
    assert all(0 <= t.offset < t.stride for t in draws)
    flips = np.mean([t.flip for t in draws])
    assert 0.4 < flips < 0.6
    assert all(L.sample_tau(rng, 5).stride <= 2 for _ in range(50))
    with pytest.raises(ValueError):
        L.sample_tau(rng, 2)


def test_loss_breakdown_row():
    lb = L.LossBreakdown(0.1, 0.2, 0.3, 0.6)
    assert lb.as_row() == {"single_imu": 0.1, "multi_imu": 0.2, "self_consistency": 0.3, "total": 0.6}


# --- gradients --------------------------------------------------------------------


def grad_check(fn, x):
    _, (g,) = ad.grad(fn, [x])
    fd = central_diff(lambda v: float(ad.value_of(fn(v))), x)
    return rel_err(g, fd)


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    th = rng.normal(0.0, 1.0, (3, 7, 6))
    th[..., 3:] *= 10.0
    acc, dphi, target = rng.normal(size=(3, 7, 3)), rng.normal(size=(3, 7, 3)), rng.normal(size=(7, 6))
    assert grad_check(lambda v: L.supervised_loss(v[0], target), th) < 1e-5
    assert grad_check(lambda v: ad.tsum(L.derive_accel(v) * np.arange(18.0).reshape(6, 3)), th) < 1e-5
    assert grad_check(lambda v: L.single_imu_loss(v, acc, dphi), th) < 1e-5
    assert grad_check(lambda v: L.multi_imu_loss(v), th) < 1e-5
    tau = TauSpec(stride=2, flip=True, offset=1)
    sub = rng.normal(size=(3, 6))
    assert grad_check(lambda v: L.mae(sub, L.h_tau(v[0], tau)), th) < 1e-5
