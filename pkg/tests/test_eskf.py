import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from legodom import eskf
from legodom.eskf import (DIM, FilterConfig, FilterError, ImuSample, LegSample, ModeFilter,
                          NoiseConfig, RobotState, debias_imu, default_initial_covariance,
                          discretize, error_dynamics_matrices, idx_f, idx_vf, joseph_update,
                          log_gaussian, measurement_point_contact, measurement_rolling,
                          on_contact_transition, predict, propagate_nominal, stack_measurements,
                          update)
from legodom.kinematics import forward_kinematics, jacobian

import jacobian_checks
import oracles

G_COMP = np.array([0.0, 0.0, 9.81])


def static_imu(gyro=(0.0, 0.0, 0.0), accel=G_COMP):
    return ImuSample(0.0, np.array(gyro, float), np.array(accel, float))


# debias / propagation ----------------------------------------------------

def test_debias_examples():
    s = RobotState()
    w, a = debias_imu(ImuSample(0, np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0])), s)
    assert np.array_equal(w, [0.1, 0.2, 0.3]) and np.array_equal(a, [1, 2, 3])
    s.bw = np.array([0.1, 0, 0])
    s.ba = np.array([0, 0, 0.10])
    w, a = debias_imu(ImuSample(0, np.array([0.1, 0, 0]), np.array([0, 0, 9.91])), s)
    assert np.array_equal(w, [0, 0, 0])
    assert np.allclose(a, [0, 0, 9.81], atol=1e-15)


def test_propagate_static_unchanged():
    s = RobotState(p=np.array([1.0, 2.0, 0.4]))
    out = propagate_nominal(s, static_imu(), 0.01)
    assert np.array_equal(out.p, s.p) and np.array_equal(out.v, s.v)
    assert np.array_equal(out.G, s.G)


def test_propagate_constant_velocity():
    s = RobotState(v=np.array([1.0, 0.0, 0.0]))
    for _ in range(25):
        s = propagate_nominal(s, static_imu(), 0.02)
    assert np.abs(s.p - [0.5, 0, 0]).max() < 1e-15


def test_propagate_rejects_long_step():
    # steps longer than the log-gap guard are refused rather than integrated
    with pytest.raises(FilterError):
        propagate_nominal(RobotState(), static_imu(), 0.5)


def test_propagate_constant_rate_rotation():
    s = RobotState()
    for _ in range(1000):
        s = propagate_nominal(s, static_imu(gyro=(0, 0, 1.0)), 0.001)
    assert np.abs(s.G - oracles.rot_exp([0, 0, 1.0])).max() < 1e-9


def test_propagate_feet_follow_foot_velocity():
    s = RobotState(vf=np.tile([0.1, -0.2, 0.0], (4, 1)))
    out = propagate_nominal(s, static_imu(), 0.01)
    assert np.allclose(out.f, 0.01 * s.vf)
    assert np.array_equal(out.vf, s.vf)


@pytest.mark.parametrize("dt", [0.0, -0.001, float("nan")])
def test_propagate_rejects_bad_dt(dt):
    with pytest.raises(FilterError):
        propagate_nominal(RobotState(), static_imu(), dt)


def test_propagate_rejects_non_finite_imu():
    with pytest.raises(FilterError):
        propagate_nominal(RobotState(), static_imu(accel=(0, float("inf"), 0)), 0.002)


# linearization ----------------------------------------------------------

def test_a_structure():
    rng = np.random.default_rng(0)
    s = oracles.random_state(rng, RobotState)
    A, B = error_dynamics_matrices(s, static_imu(rng.normal(size=3), rng.normal(size=3)))
    assert A.shape == (39, 39) and B.shape == (39, 24)
    assert np.array_equal(A[0:3, 3:6], np.eye(3))
    assert np.array_equal(A[6:9, 36:39], -np.eye(3))
    assert np.allclose(A[3:6, 33:36], -s.G)
    for leg in range(4):
        assert np.array_equal(A[idx_f(leg), idx_vf(leg)], np.eye(3))


def test_a_zero_inputs_decouple_attitude():
    A, _ = error_dynamics_matrices(RobotState(), static_imu(accel=(0, 0, 0)))
    assert np.array_equal(A[3:6, 6:9], np.zeros((3, 3)))


def test_a_matches_error_flow_derivative():
    rng = np.random.default_rng(1)
    for _ in range(10):
        state, _, gyro, accel = jacobian_checks.random_setup(rng)
        assert jacobian_checks.a_matrix_error(state, gyro, accel) < 1e-5


def test_a_matches_propagation_finite_difference():
    rng = np.random.default_rng(2)
    for _ in range(5):
        state, _, gyro, accel = jacobian_checks.random_setup(rng)
        assert jacobian_checks.a_matrix_propagation_error(state, gyro, accel) < 1e-4


def test_discretize_zero_dynamics():
    rng = np.random.default_rng(3)
    B = rng.normal(size=(4, 2))
    Q = np.diag([0.3, 0.7])
    Phi, Qd = discretize(np.zeros((4, 4)), B, Q, 0.01)
    assert np.array_equal(Phi, np.eye(4))
    assert np.allclose(Qd, B @ Q @ B.T * 0.01, atol=1e-18)
    _, Qd0 = discretize(rng.normal(size=(4, 4)), B, np.zeros((2, 2)), 0.01)
    assert np.array_equal(Qd0, np.zeros((4, 4)))


@pytest.mark.parametrize("dt,q", [(0.002, 1.0), (0.1, 2.5)])
def test_discretize_double_integrator(dt, q):
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    Q = np.array([[q]])
    exact = q * np.array([[dt ** 3 / 3, dt ** 2 / 2], [dt ** 2 / 2, dt]])
    Phi, Qd = discretize(A, B, Q, dt)
    assert np.array_equal(Phi, [[1.0, dt], [0.0, 1.0]])
    # trapezoid rule: exact except the (0,0) entry, which is off by q dt^3 / 6
    trap = q * np.array([[dt ** 3 / 2, dt ** 2 / 2], [dt ** 2 / 2, dt]])
    assert np.abs(Qd - trap).max() < 1e-15
    PhiV, QdV = discretize(A, B, Q, dt, method="vanloan")
    assert np.abs(PhiV - Phi).max() < 1e-12
    assert np.abs(QdV - exact).max() < 1e-10
    _, QdO = oracles.vanloan(A, B, Q, dt)
    assert np.abs(QdO - exact).max() < 1e-10


def test_discretize_trapezoid_close_to_vanloan_at_imu_rate():
    rng = np.random.default_rng(4)
    s = oracles.random_state(rng, RobotState)
    A, B = error_dynamics_matrices(s, static_imu(rng.normal(size=3), G_COMP))
    Qc = NoiseConfig().continuous_covariance()
    Phi, Qd = discretize(A, B, Qc, 0.002)
    PhiV, QdV = discretize(A, B, Qc, 0.002, method="vanloan")
    assert np.abs(Phi - PhiV).max() < 1e-6
    assert np.abs(Qd - QdV).max() < 1e-8 * max(np.abs(QdV).max(), 1)
    with pytest.raises(ValueError):
        discretize(A, B, Qc, 0.002, method="euler")


def test_discretize_series_order():
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    exact = oracles.series_exp(A * 0.1)
    errs = [np.abs(discretize(A, np.zeros((2, 1)), np.zeros((1, 1)), 0.1, order=k)[0] - exact).max()
            for k in (1, 2, 4)]
    assert errs[0] > errs[1] > errs[2]


# predict ----------------------------------------------------------------

def test_predict_zero_noise_zero_dynamics_keeps_P():
    cfg = FilterConfig(noise=NoiseConfig(0, 0, 0, 0, 0.0))
    P = default_initial_covariance()
    # zero velocities and feet velocities so A only couples zero blocks
    _, P1 = predict(RobotState(), P, static_imu(), 0.002, cfg)
    Phi, _ = discretize(*error_dynamics_matrices(RobotState(), static_imu()), np.zeros((24, 24)),
                        0.002)
    assert np.allclose(P1, Phi @ P @ Phi.T, atol=1e-18)
    A0 = np.zeros((39, 39))
    _, Qd = discretize(A0, np.zeros((39, 24)), np.zeros((24, 24)), 0.002)
    assert np.array_equal(Qd, np.zeros((39, 39)))


def test_predict_adds_psd_noise():
    rng = np.random.default_rng(5)
    s = oracles.random_state(rng, RobotState)
    imu = static_imu(rng.normal(size=3), rng.normal(size=3))
    P = default_initial_covariance()
    cfg = FilterConfig()
    _, P1 = predict(s, P, imu, 0.002, cfg)
    Phi, _ = discretize(*error_dynamics_matrices(s, imu), cfg.noise.continuous_covariance(), 0.002)
    assert np.trace(P1) >= np.trace(Phi @ P @ Phi.T)


def test_alpha_scales_only_foot_noise():
    rng = np.random.default_rng(6)
    s = oracles.random_state(rng, RobotState)
    imu = static_imu(rng.normal(size=3), rng.normal(size=3))
    A, B = error_dynamics_matrices(s, imu)
    n = NoiseConfig()
    _, Q1 = discretize(A, B, n.continuous_covariance(1.0), 0.002)
    _, Q100 = discretize(A, B, n.continuous_covariance(100.0), 0.002)
    diff = Q100 - Q1
    foot = np.zeros(39, bool)
    foot[9:33] = True
    assert np.array_equal(diff[~foot][:, ~foot], np.zeros(((~foot).sum(), (~foot).sum())))
    assert np.array_equal(diff[~foot][:, foot], np.zeros(((~foot).sum(), foot.sum())))
    for leg in range(4):
        sl = idx_vf(leg)
        assert np.allclose(Q100[sl, sl], 100 * Q1[sl, sl], rtol=1e-13, atol=0)
    # position of the foot integrates its velocity, so its blocks scale too
    nz = Q1[foot][:, foot] != 0
    ratio = Q100[foot][:, foot][nz] / Q1[foot][:, foot][nz]
    assert np.allclose(ratio, 100, rtol=1e-12)


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(alpha=0.5)
    with pytest.raises(ValueError):
        NoiseConfig(r_pos=-1)
    with pytest.raises(ValueError):
        NoiseConfig(q_vf=-np.eye(3))
    assert np.array_equal(NoiseConfig(q_vf=2.0).foot_velocity_noise(), 2 * np.eye(3))


# measurements -------------------------------------------------------------

CFG = FilterConfig()


def consistent_setup(rng, vf_rolling=True):
    """State whose feet agree with the leg kinematics exactly."""
    G = oracles.rot_exp(rng.normal(scale=0.3, size=3))
    p = rng.normal(size=3)
    v = rng.normal(size=3)
    q = rng.uniform([-0.3, -0.8, -1.8], [0.3, 0.8, -0.6], size=(4, 3))
    dq = rng.normal(size=(4, 3))
    omega = rng.normal(size=3)
    sample = LegSample(0.0, q, dq, np.ones(4, bool))
    f = np.zeros((4, 3))
    vf = np.zeros((4, 3))
    for leg in range(4):
        zeta = forward_kinematics(q[leg], CFG.legs[leg])
        f[leg] = p + G @ zeta
        # world foot velocity from the body motion and the joint rates
        vf[leg] = v + G @ (np.cross(omega, zeta) + jacobian(q[leg], CFG.legs[leg]) @ dq[leg])
    state = RobotState(p, v, G, f, vf)
    return state, sample, omega


def test_point_contact_residual_zero_when_consistent():
    rng = np.random.default_rng(7)
    state, sample, omega = consistent_setup(rng)
    state.vf[:] = 0.0
    # stationary feet: body velocity must cancel the kinematic foot velocity
    for leg in range(4):
        sample.dq[leg] = 0.0
    sample.cache.clear()
    omega = np.zeros(3)
    state.v = np.zeros(3)
    for leg in range(4):
        res, H, R = measurement_point_contact(state, sample, omega, CFG, leg)
        assert res.shape == (6,) and H.shape == (6, 39) and R.shape == (6, 6)
        assert np.abs(res).max() < 1e-14


def test_point_contact_position_sign():
    rng = np.random.default_rng(8)
    state, sample, omega = consistent_setup(rng)
    state.G = np.eye(3)
    r0 = measurement_point_contact(state, sample, omega, CFG, 0)[0]
    state.p = state.p + [1e-3, 0, 0]
    r1 = measurement_point_contact(state, sample, omega, CFG, 0)[0]
    assert np.allclose(r1[:3] - r0[:3], [1e-3, 0, 0], atol=1e-15)


def test_swing_foot_emits_no_rows():
    rng = np.random.default_rng(9)
    state, sample, omega = consistent_setup(rng)
    sample.contact[:] = [True, False, False, True]
    assert measurement_point_contact(state, sample, omega, CFG, 1) is None
    assert measurement_rolling(state, sample, omega, CFG, 2) is None
    residual, H, R = stack_measurements(state, sample, omega, CFG)
    assert residual.shape == (18,) and H.shape == (18, 39) and R.shape == (18, 18)
    sample.contact[:] = False
    assert stack_measurements(state, sample, omega, CFG) is None


def test_rolling_residual_zero_when_consistent():
    rng = np.random.default_rng(10)
    state, sample, omega = consistent_setup(rng)
    # feet roll: set foot velocity to the rolling value, body velocity to match
    for leg in range(4):
        u, r = eskf.foot_rolling_terms(state, sample, omega, CFG, leg)
        state.vf[leg] = np.cross(state.G @ u, r)
    state.v = state.vf[0] - state.G @ (np.cross(omega, forward_kinematics(sample.q[0], CFG.legs[0]))
                                       + jacobian(sample.q[0], CFG.legs[0]) @ sample.dq[0])
    res, H, R = measurement_rolling(state, sample, omega, CFG, 0)
    assert res.shape == (9,) and H.shape == (9, 39)
    assert np.abs(res).max() < 1e-14
    assert np.array_equal(np.diag(R), [1e-4] * 3 + [1e-3] * 3 + [1e-3] * 3)


def test_rolling_zero_foot_rate_reduces_to_stationary_foot():
    rng = np.random.default_rng(11)
    state, sample, _ = consistent_setup(rng)
    sample.dq[:] = 0.0
    sample.cache.clear()
    res = measurement_rolling(state, sample, np.zeros(3), CFG, 2)[0]
    assert np.array_equal(res[6:9], -state.vf[2])


@pytest.mark.parametrize("rolling", [False, True])
def test_measurement_jacobians_finite_difference(rolling):
    rng = np.random.default_rng(12)
    for _ in range(10):
        state, sample, gyro, _ = jacobian_checks.random_setup(rng)
        for jac, res in jacobian_checks.measurement_errors(state, sample, gyro - state.bw, rolling):
            assert jac < 1e-5
            assert res < 1e-8


def test_rolling_jacobian_foot_velocity_columns():
    rng = np.random.default_rng(13)
    state, sample, omega = consistent_setup(rng)
    _, H, _ = measurement_rolling(state, sample, omega, CFG, 1)
    assert np.array_equal(H[3:6, idx_vf(1)], -state.G.T)
    assert np.array_equal(H[6:9, idx_vf(1)], np.eye(3))
    assert not H[:, idx_vf(0)].any()


# update -------------------------------------------------------------------

def test_update_zero_residual():
    P = default_initial_covariance()
    rng = np.random.default_rng(14)
    state = oracles.random_state(rng, RobotState)
    H = rng.normal(size=(6, 39))
    out = update(state, P, np.zeros(6), H, 1e-3 * np.eye(6))
    assert out.ok
    assert np.array_equal(out.state.p, state.p) and np.array_equal(out.state.G, state.G)
    assert np.linalg.eigvalsh(P - out.P).min() > -1e-12


def test_update_scalar_case():
    P = np.eye(39)
    H = np.zeros((1, 39))
    H[0, 0] = 1.0
    out = update(RobotState(), P, np.array([1.0]), H, np.eye(1))
    assert out.state.p[0] == pytest.approx(0.5, abs=1e-15)
    assert out.P[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert np.array_equal(out.S, [[2.0]])
    assert np.array_equal(out.P[1:, 1:], np.eye(38))


def test_update_leaves_bias_without_information():
    rng = np.random.default_rng(15)
    state = oracles.random_state(rng, RobotState)
    P = default_initial_covariance()
    H = rng.normal(size=(6, 39))
    H[:, 33:39] = 0.0
    out = update(state, P, rng.normal(size=6), H, 1e-3 * np.eye(6))
    assert np.array_equal(out.state.ba, state.ba) and np.array_equal(out.state.bw, state.bw)


def test_joseph_matches_short_form():
    rng = np.random.default_rng(16)
    L = rng.normal(size=(39, 39))
    P = L @ L.T / 39 + np.eye(39)
    H = rng.normal(size=(9, 39))
    R = np.diag(rng.uniform(0.1, 1, size=9))
    _, Pj, S = joseph_update(P, H, R, np.zeros(9))
    K = P @ H.T @ np.linalg.inv(S)
    short = (np.eye(39) - K @ H) @ P
    assert np.abs(Pj - short).max() / np.abs(P).max() < 1e-8


def test_update_skips_ill_conditioned():
    P = np.zeros((39, 39))
    H = np.zeros((1, 39))
    state = RobotState()
    out = update(state, P, np.array([1.0]), H, np.zeros((1, 1)))
    assert not out.ok
    assert out.state is state and out.P is P


def test_update_injects_rotation_by_boxplus():
    P = np.eye(39)
    H = np.zeros((3, 39))
    H[:, 6:9] = np.eye(3)
    G0 = oracles.rot_exp([0.2, -0.1, 0.4])
    out = update(RobotState(G=G0), P, np.array([0.02, 0.04, -0.06]), H, np.eye(3))
    assert np.abs(out.state.G - G0 @ oracles.rot_exp([0.01, 0.02, -0.03])).max() < 1e-14


# contact transitions -------------------------------------------------------

def test_no_flag_change_is_identity():
    rng = np.random.default_rng(17)
    state = oracles.random_state(rng, RobotState)
    P = default_initial_covariance()
    flags = np.array([True, False, True, False])
    sample = LegSample(0.0, np.zeros((4, 3)), np.zeros((4, 3)), flags.copy())
    s2, P2 = on_contact_transition(state, P, flags, flags, sample, CFG)
    assert s2 is state and P2 is P
    # lift-off changes nothing either
    s3, P3 = on_contact_transition(state, P, flags, np.zeros(4, bool), sample, CFG)
    assert s3 is state and P3 is P


def test_touchdown_reanchors_foot():
    state = RobotState(p=np.array([1.0, 0.0, 0.0]))
    state.vf[0] = [0.3, 0.2, 0.1]
    rng = np.random.default_rng(18)
    L = rng.normal(size=(39, 39))
    P = L @ L.T
    sample = LegSample(0.0, np.zeros((4, 3)), np.zeros((4, 3)), np.array([True, False, False, False]))
    cfg = FilterConfig(noise=NoiseConfig(foot_vel_prior=0.25))
    s2, P2 = on_contact_transition(state, P, np.zeros(4, bool), sample.contact, sample, cfg)
    assert np.allclose(s2.f[0], [1.24, 0.133, -0.50], atol=1e-15)
    assert np.array_equal(s2.vf[0], np.zeros(3))
    assert np.array_equal(P2[idx_f(0), idx_f(0)], 1e2 * np.eye(3))
    assert np.array_equal(P2[idx_vf(0), idx_vf(0)], 0.25 * np.eye(3))
    mask = np.ones(39, bool)
    mask[idx_f(0)] = False
    mask[idx_vf(0)] = False
    assert not P2[~mask][:, mask].any()
    assert np.array_equal(P2[mask][:, mask], P[mask][:, mask])
    assert state.vf[0, 0] == 0.3     # input untouched


def test_default_initial_covariance():
    P = default_initial_covariance()
    assert P.shape == (DIM, DIM)
    assert np.array_equal(np.diag(P)[9:21], np.full(12, 1e2))


# filter object / likelihood -----------------------------------------------

def test_log_gaussian_matches_scipy():
    rng = np.random.default_rng(19)
    L = rng.normal(size=(6, 6))
    S = L @ L.T + np.eye(6)
    r = rng.normal(size=6)
    assert log_gaussian(r, S) == pytest.approx(multivariate_normal(np.zeros(6), S).logpdf(r),
                                               rel=1e-12)
    assert log_gaussian(np.array([1.0]), np.eye(1)) == pytest.approx(-0.5 - 0.5 * math.log(2 * math.pi))
    assert log_gaussian(np.ones(2), -np.eye(2)) == -math.inf


def test_mode_filter_correct_uses_bias_corrected_gyro():
    rng = np.random.default_rng(20)
    state, sample, omega = consistent_setup(rng)
    state.bw = np.array([0.01, -0.02, 0.03])
    f = ModeFilter(state.copy(), default_initial_covariance(), CFG)
    res = f.correct(sample, omega + state.bw)
    expected = stack_measurements(state, sample, omega, CFG)[0]
    assert np.array_equal(res.residual, expected)
    with pytest.raises(ValueError):
        ModeFilter(state, default_initial_covariance(), CFG, alpha=0.5)


def test_filter_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(model="ukf")
    assert FilterConfig(noise=NoiseConfig(foot_vel_prior=0.3)).foot_vel_prior == 0.3
    assert FilterConfig(foot_vel_prior=2.0).foot_vel_prior == 2.0
