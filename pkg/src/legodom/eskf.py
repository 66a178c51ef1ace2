"""Rolling-aware error-state Kalman filter for a quadruped.

Error-state layout (39)::

    [0:3]   dp      position (world)
    [3:6]   dv      velocity (world)
    [6:9]   dtheta  rotation error, right perturbation G = G_hat exp(dtheta)
    [9:21]  df1..4  foot positions (world)
    [21:33] dvf1..4 foot velocities (world)
    [33:36] dba     accelerometer bias (body)
    [36:39] dbw     gyroscope bias (body)

Process-noise layout (24): n_a, n_w, n_vf1..4, n_ba, n_bw.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from . import kinematics as kin
from .so3 import boxminus, boxplus, cross, exp_so3, normalize_rotation, skew

N_LEGS = 4
DIM = 39
NOISE_DIM = 24
GRAVITY = np.array([0.0, 0.0, -9.81])

IDX_P = slice(0, 3)
IDX_V = slice(3, 6)
IDX_TH = slice(6, 9)
IDX_BA = slice(33, 36)
IDX_BW = slice(36, 39)
MAX_DT = 0.02


def idx_f(leg: int) -> slice:
    return slice(9 + 3 * leg, 12 + 3 * leg)


def idx_vf(leg: int) -> slice:
    return slice(21 + 3 * leg, 24 + 3 * leg)


class FilterError(RuntimeError):
    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


@dataclass
class RobotState:
    """Nominal state: body pose and velocity, four feet, IMU biases."""

    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    G: np.ndarray = field(default_factory=lambda: np.eye(3))
    f: np.ndarray = field(default_factory=lambda: np.zeros((N_LEGS, 3)))
    vf: np.ndarray = field(default_factory=lambda: np.zeros((N_LEGS, 3)))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bw: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self) -> "RobotState":
        return RobotState(self.p.copy(), self.v.copy(), self.G.copy(), self.f.copy(),
                          self.vf.copy(), self.ba.copy(), self.bw.copy())

    def vector_part(self) -> np.ndarray:
        """All Euclidean components in error-state order, rotation slot zeroed."""
        out = np.empty(DIM)
        out[IDX_P] = self.p
        out[IDX_V] = self.v
        out[IDX_TH] = 0.0
        out[9:21] = self.f.ravel()
        out[21:33] = self.vf.ravel()
        out[IDX_BA] = self.ba
        out[IDX_BW] = self.bw
        return out

    @classmethod
    def from_vector_part(cls, x: np.ndarray, G: np.ndarray) -> "RobotState":
        return cls(x[IDX_P].copy(), x[IDX_V].copy(), G, x[9:21].reshape(N_LEGS, 3).copy(),
                   x[21:33].reshape(N_LEGS, 3).copy(), x[IDX_BA].copy(), x[IDX_BW].copy())

    def boxplus(self, dx: np.ndarray) -> "RobotState":
        x = self.vector_part() + dx
        return RobotState.from_vector_part(x, boxplus(self.G, dx[IDX_TH]))

    def boxminus(self, other: "RobotState") -> np.ndarray:
        """Error vector ``dx`` with ``other.boxplus(dx) == self``."""
        dx = self.vector_part() - other.vector_part()
        dx[IDX_TH] = boxminus(self.G, other.G)
        return dx

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.vector_part()).all() and np.isfinite(self.G).all())


@dataclass
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass
class LegSample:
    t: float
    q: np.ndarray          # (4, 3) joint angles
    dq: np.ndarray         # (4, 3) joint rates
    contact: np.ndarray    # (4,) bool
    # kinematic terms shared by every filter that consumes this sample
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def kinematics(self, leg: int, params: kin.LegParams):
        """``(zeta, J @ dq, Jr @ dq)``: foot position, its joint-rate velocity
        and the joint part of the foot angular rate, all body frame."""
        key = (leg, id(params))
        terms = self.cache.get(key)
        if terms is None:
            phi, dphi = self.q[leg], self.dq[leg]
            terms = (kin.forward_kinematics(phi, params), kin.jacobian(phi, params) @ dphi,
                     kin.rotational_jacobian(phi) @ dphi)
            self.cache[key] = terms
        return terms


@dataclass
class NoiseConfig:
    """Filter noise model.

    ``sigma_*`` are continuous-time densities; ``q_vf`` is the foot-velocity
    random-walk density (scalar or 3x3); ``r_*`` are measurement variances.
    """

    sigma_a: float = 0.01
    sigma_w: float = 0.001
    sigma_ba: float = 1e-3
    sigma_bw: float = 1e-4
    q_vf: object = 1e-3
    r_pos: float = 1e-4
    r_vel: float = 1e-3
    r_roll: float = 1e-3
    foot_vel_prior: float = 1.0     # (m/s)^2, foot-velocity variance at touchdown
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha < 1.0:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        for name in ("sigma_a", "sigma_w", "sigma_ba", "sigma_bw", "r_pos", "r_vel", "r_roll",
                     "foot_vel_prior"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        qvf = self.foot_velocity_noise()
        if np.linalg.eigvalsh(0.5 * (qvf + qvf.T)).min() < -1e-15:
            raise ValueError("q_vf must be positive semidefinite")

    def foot_velocity_noise(self) -> np.ndarray:
        q = np.asarray(self.q_vf, dtype=float)
        return q * np.eye(3) if q.ndim == 0 else q

    def continuous_covariance(self, alpha: float | None = None) -> np.ndarray:
        """24x24 covariance of the process-noise vector, foot block scaled by alpha."""
        alpha = self.alpha if alpha is None else alpha
        Q = np.zeros((NOISE_DIM, NOISE_DIM))
        Q[0:3, 0:3] = self.sigma_a ** 2 * np.eye(3)
        Q[3:6, 3:6] = self.sigma_w ** 2 * np.eye(3)
        qvf = alpha * self.foot_velocity_noise()
        for leg in range(N_LEGS):
            Q[6 + 3 * leg:9 + 3 * leg, 6 + 3 * leg:9 + 3 * leg] = qvf
        Q[18:21, 18:21] = self.sigma_ba ** 2 * np.eye(3)
        Q[21:24, 21:24] = self.sigma_bw ** 2 * np.eye(3)
        return Q


def debias_imu(sample: ImuSample, state: RobotState):
    return np.asarray(sample.gyro) - state.bw, np.asarray(sample.accel) - state.ba


def _check_step(imu: ImuSample, dt: float):
    if not (dt > 0.0) or dt > MAX_DT:
        raise FilterError(f"invalid propagation step dt={dt!r} at t={imu.t} "
                          f"(must satisfy 0 < dt <= {MAX_DT})")
    if not (np.isfinite(imu.gyro).all() and np.isfinite(imu.accel).all()):
        raise FilterError(f"non-finite IMU sample at t={imu.t}")


def propagate_nominal(state: RobotState, imu: ImuSample, dt: float,
                      gravity=GRAVITY) -> RobotState:
    """RK4 step of the nominal dynamics with the IMU held over ``dt``.

    The rotation follows the exact zero-order-hold solution
    ``G(tau) = G exp(w tau)``, which RK4 samples at its stage times.
    """
    _check_step(imu, dt)
    w, a = debias_imu(imu, state)
    G0 = state.G
    E = exp_so3(0.5 * dt * w)
    Gh = G0 @ E
    G1 = normalize_rotation(Gh @ E)
    acc0 = G0 @ a + gravity
    acch = Gh @ a + gravity
    acc1 = G1 @ a + gravity
    v = state.v
    k1p, k1v = v, acc0
    k2p, k2v = v + 0.5 * dt * k1v, acch
    k3p, k3v = v + 0.5 * dt * k2v, acch
    k4p, k4v = v + dt * k3v, acc1
    out = state.copy()
    out.p = state.p + dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
    out.v = state.v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    out.G = G1
    out.f = state.f + dt * state.vf
    return out


def error_dynamics_matrices(state: RobotState, imu: ImuSample):
    """Continuous-time error dynamics ``A`` (39x39) and noise input ``B_w`` (39x24)."""
    w, a = debias_imu(imu, state)
    G = state.G
    A = _A_TEMPLATE.copy()
    A[IDX_V, IDX_TH] = -G @ skew(a)
    A[IDX_V, IDX_BA] = -G
    A[IDX_TH, IDX_TH] = -skew(w)
    B = _B_TEMPLATE.copy()
    B[IDX_V, 0:3] = -G
    return A, B


def _templates():
    A = np.zeros((DIM, DIM))
    A[IDX_P, IDX_V] = _I3
    A[IDX_TH, IDX_BW] = -_I3
    for leg in range(N_LEGS):
        A[idx_f(leg), idx_vf(leg)] = _I3
    B = np.zeros((DIM, NOISE_DIM))
    B[IDX_TH, 3:6] = -_I3
    for leg in range(N_LEGS):
        B[idx_vf(leg), 6 + 3 * leg:9 + 3 * leg] = _I3
    B[IDX_BA, 18:21] = _I3
    B[IDX_BW, 21:24] = _I3
    return A, B


_I3 = np.eye(3)
_A_TEMPLATE, _B_TEMPLATE = _templates()


def discretize(A, B, Qc, dt, order=2, method="trapezoid"):
    """Transition matrix and discrete process noise over ``dt``.

    ``method="trapezoid"`` uses a truncated series of the given order for the
    transition and the trapezoidal rule for the noise integral.
    ``method="vanloan"`` evaluates both exactly via the Van Loan block
    exponential.
    """
    n = A.shape[0]
    BQB = B @ Qc @ B.T
    if method == "vanloan":
        M = np.zeros((2 * n, 2 * n))
        M[:n, :n] = -A
        M[:n, n:] = BQB
        M[n:, n:] = A.T
        E = expm(M * dt)
        Phi = E[n:, n:].T
        Qd = Phi @ E[:n, n:]
    elif method == "trapezoid":
        Ad = A * dt
        term = Ad
        Phi = np.eye(n) + Ad
        for k in range(2, order + 1):
            term = term @ Ad / k
            Phi += term
        Qd = 0.5 * (Phi @ BQB @ Phi.T + BQB) * dt
    else:
        raise ValueError(f"unknown discretization method {method!r}")
    return Phi, 0.5 * (Qd + Qd.T)


@dataclass
class FilterConfig:
    """Everything a single filter needs besides its state."""

    noise: NoiseConfig = field(default_factory=NoiseConfig)
    legs: list = field(default_factory=kin.default_legs)
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    contact_normal: tuple = (0.0, 0.0, 1.0)
    model: str = "rolling"                  # or "point"
    series_order: int = 2
    discretization: str = "trapezoid"
    foot_pos_prior: float = 1e2             # m^2, on touchdown
    foot_vel_prior: float | None = None     # (m/s)^2, on touchdown; None: noise.foot_vel_prior
    cond_limit: float = 1e12

    def __post_init__(self):
        if self.model not in ("rolling", "point"):
            raise ValueError(f"unknown measurement model {self.model!r}")
        if self.foot_vel_prior is None:
            self.foot_vel_prior = self.noise.foot_vel_prior


def predict(state: RobotState, P: np.ndarray, imu: ImuSample, dt: float,
            config: FilterConfig, alpha: float = 1.0, Qc=None):
    A, B = error_dynamics_matrices(state, imu)
    new_state = propagate_nominal(state, imu, dt, config.gravity)
    if Qc is None:
        Qc = config.noise.continuous_covariance(alpha)
    Phi, Qd = discretize(A, B, Qc, dt,
                         config.series_order, config.discretization)
    P_new = Phi @ P @ Phi.T + Qd
    return new_state, 0.5 * (P_new + P_new.T)


def _leg_terms(leg_sample: LegSample, leg: int, params: kin.LegParams, omega):
    zeta, Jdq, _ = leg_sample.kinematics(leg, params)
    y_vel = -Jdq - cross(omega, zeta)
    return leg_sample.q[leg], leg_sample.dq[leg], zeta, y_vel


def measurement_point_contact(state: RobotState, leg_sample: LegSample, omega_hat,
                              config: FilterConfig, leg: int):
    """Six rows for one stance foot under the stationary-foot assumption.

    Returns ``None`` for a foot that is not in contact.
    """
    if not leg_sample.contact[leg]:
        return None
    _, _, zeta, y_vel = _leg_terms(leg_sample, leg, config.legs[leg], omega_hat)
    Gt = state.G.T
    rel = Gt @ (state.f[leg] - state.p)
    vb = Gt @ state.v
    residual = np.concatenate([zeta - rel, y_vel - vb])
    H = np.zeros((6, DIM))
    H[0:3, IDX_P] = -Gt
    H[0:3, idx_f(leg)] = Gt
    H[0:3, IDX_TH] = skew(rel)
    H[3:6, IDX_V] = Gt
    H[3:6, IDX_TH] = skew(vb)
    n = config.noise
    R = np.diag([n.r_pos] * 3 + [n.r_vel] * 3)
    return residual, H, R


def foot_rolling_terms(state: RobotState, leg_sample: LegSample, omega_hat,
                       config: FilterConfig, leg: int):
    """Body-frame foot angular rate and contact radius used by the rolling rows."""
    u = np.asarray(omega_hat) + leg_sample.kinematics(leg, config.legs[leg])[2]
    r = kin.contact_radius(config.legs[leg].foot_radius, config.contact_normal)
    return u, r


def measurement_rolling(state: RobotState, leg_sample: LegSample, omega_hat,
                        config: FilterConfig, leg: int):
    """Nine rows for one stance foot: position, relative velocity, rolling constraint."""
    if not leg_sample.contact[leg]:
        return None
    _, _, zeta, y_vel = _leg_terms(leg_sample, leg, config.legs[leg], omega_hat)
    u, r = foot_rolling_terms(state, leg_sample, omega_hat, config, leg)
    G = state.G
    Gt = G.T
    vf = state.vf[leg]
    rel = Gt @ (state.f[leg] - state.p)
    vrel = Gt @ (state.v - vf)
    omega_f = G @ u
    h_roll = vf - cross(omega_f, r)
    residual = np.concatenate([zeta - rel, y_vel - vrel, -h_roll])
    H = np.zeros((9, DIM))
    H[0:3, IDX_P] = -Gt
    H[0:3, idx_f(leg)] = Gt
    H[0:3, IDX_TH] = skew(rel)
    H[3:6, IDX_V] = Gt
    H[3:6, idx_vf(leg)] = -Gt
    H[3:6, IDX_TH] = skew(vrel)
    H[6:9, idx_vf(leg)] = _I3
    H[6:9, IDX_TH] = -skew(r) @ G @ skew(u)
    n = config.noise
    R = np.diag([n.r_pos] * 3 + [n.r_vel] * 3 + [n.r_roll] * 3)
    return residual, H, R


def stack_measurements(state, leg_sample, omega_hat, config: FilterConfig):
    """All stance-foot rows of the configured model in one block, or ``None``."""
    model = measurement_rolling if config.model == "rolling" else measurement_point_contact
    rows = [m for leg in range(N_LEGS)
            if (m := model(state, leg_sample, omega_hat, config, leg)) is not None]
    if not rows:
        return None
    residual = np.concatenate([m[0] for m in rows])
    H = np.vstack([m[1] for m in rows])
    R = np.zeros((len(residual), len(residual)))
    i = 0
    for _, _, Rb in rows:
        k = Rb.shape[0]
        R[i:i + k, i:i + k] = Rb
        i += k
    return residual, H, R


def joseph_update(P, H, R, residual, cond_limit=1e12):
    """Kalman correction in Joseph form.

    Returns ``(dx, P_new, S)``; ``dx`` and ``P_new`` are ``None`` when the
    innovation covariance is too ill-conditioned to invert.
    """
    S = H @ P @ H.T + R
    S = 0.5 * (S + S.T)
    if not np.isfinite(S).all():
        return None, None, S
    ev = np.linalg.eigvalsh(S)
    if ev[0] <= 0.0 or ev[-1] >= cond_limit * ev[0]:
        return None, None, S
    K = np.linalg.solve(S, H @ P).T
    dx = K @ residual
    IKH = np.eye(P.shape[0]) - K @ H
    P_new = IKH @ P @ IKH.T + K @ R @ K.T
    return dx, 0.5 * (P_new + P_new.T), S


@dataclass
class UpdateResult:
    state: RobotState
    P: np.ndarray
    residual: np.ndarray | None
    S: np.ndarray | None
    ok: bool

    @property
    def rows(self) -> int:
        return 0 if self.residual is None else len(self.residual)


def update(state, P, residual, H, R, cond_limit=1e12) -> UpdateResult:
    dx, P_new, S = joseph_update(P, H, R, residual, cond_limit)
    if dx is None:
        return UpdateResult(state, P, residual, S, False)
    return UpdateResult(state.boxplus(dx), P_new, residual, S, True)


def on_contact_transition(state: RobotState, P: np.ndarray, prev_flags, new_flags,
                          leg_sample: LegSample, config: FilterConfig):
    """Re-anchor feet that just touched down; lift-off changes nothing."""
    touchdown = [leg for leg in range(N_LEGS) if new_flags[leg] and not prev_flags[leg]]
    if not touchdown:
        return state, P
    state = state.copy()
    P = P.copy()
    for leg in touchdown:
        zeta = kin.forward_kinematics(leg_sample.q[leg], config.legs[leg])
        state.f[leg] = state.p + state.G @ zeta
        state.vf[leg] = 0.0
        for sl, prior in ((idx_f(leg), config.foot_pos_prior), (idx_vf(leg), config.foot_vel_prior)):
            P[sl, :] = 0.0
            P[:, sl] = 0.0
            P[sl, sl] = prior * np.eye(3)
    return state, P


def default_initial_covariance(pos=1e-8, vel=1e-4, att=1e-6, foot_pos=1e2, foot_vel=1.0,
                               acc_bias=1e-4, gyro_bias=1e-6) -> np.ndarray:
    d = np.empty(DIM)
    d[IDX_P] = pos
    d[IDX_V] = vel
    d[IDX_TH] = att
    d[9:21] = foot_pos
    d[21:33] = foot_vel
    d[IDX_BA] = acc_bias
    d[IDX_BW] = gyro_bias
    return np.diag(d)


class ModeFilter:
    """One error-state filter: nominal state, covariance and foot-noise scale.

    Used both standalone and as a mode inside the IMM bank, so every mode
    shares the same propagation and measurement code.
    """

    def __init__(self, state: RobotState, P: np.ndarray, config: FilterConfig, alpha: float = 1.0):
        if alpha < 1.0:
            raise ValueError("alpha must be >= 1")
        self.state = state
        self.P = P
        self.config = config
        self.alpha = float(alpha)
        self.Qc = config.noise.continuous_covariance(self.alpha)
        self.last_update: UpdateResult | None = None

    def copy(self) -> "ModeFilter":
        out = ModeFilter(self.state.copy(), self.P.copy(), self.config, self.alpha)
        return out

    def predict(self, imu: ImuSample, dt: float):
        self.state, self.P = predict(self.state, self.P, imu, dt, self.config, self.alpha, self.Qc)

    def contact_transition(self, prev_flags, leg_sample: LegSample):
        self.state, self.P = on_contact_transition(self.state, self.P, prev_flags,
                                                   leg_sample.contact, leg_sample, self.config)

    def correct(self, leg_sample: LegSample, gyro) -> UpdateResult:
        """Stacked stance-foot update at a leg-sample timestamp.

        ``gyro`` is the raw gyro reading at that timestamp; it is bias
        corrected with the current estimate before entering the model.
        """
        omega_hat = np.asarray(gyro) - self.state.bw
        meas = stack_measurements(self.state, leg_sample, omega_hat, self.config)
        if meas is None:
            res = UpdateResult(self.state, self.P, None, None, True)
        else:
            res = update(self.state, self.P, *meas, cond_limit=self.config.cond_limit)
            self.state, self.P = res.state, res.P
        self.last_update = res
        return res


def step_linearization(state: RobotState, P: np.ndarray, imu_window, leg_sample: LegSample,
                       gyro, config: FilterConfig, alpha: float = 1.0):
    """``(F, H, K)`` of one leg step: transition over the IMU window, stacked
    measurement Jacobian and Kalman gain at the predicted state.

    ``H`` and ``K`` are ``None`` when no foot is in stance.
    """
    F = np.eye(DIM)
    Qc = config.noise.continuous_covariance(alpha)
    for imu, dt in imu_window:
        A, B = error_dynamics_matrices(state, imu)
        Phi, Qd = discretize(A, B, Qc, dt, config.series_order, config.discretization)
        F = Phi @ F
        P = Phi @ P @ Phi.T + Qd
        state = propagate_nominal(state, imu, dt, config.gravity)
    meas = stack_measurements(state, leg_sample, np.asarray(gyro) - state.bw, config)
    if meas is None:
        return F, None, None
    _, H, R = meas
    S = H @ P @ H.T + R
    K = np.linalg.solve(0.5 * (S + S.T), H @ P).T
    return F, H, K


def log_gaussian(residual: np.ndarray, S: np.ndarray) -> float:
    """Log density of ``N(0, S)`` at ``residual``; ``-inf`` when ``S`` is not PD."""
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return -math.inf
    z = np.linalg.solve(L, residual)
    n = len(residual)
    return float(-0.5 * (z @ z) - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2.0 * math.pi))


__all__ = [
    "DIM", "GRAVITY", "IDX_BA", "IDX_BW", "IDX_P", "IDX_TH", "IDX_V", "ImuSample", "LegSample",
    "FilterConfig", "FilterError", "ModeFilter", "NoiseConfig", "RobotState", "UpdateResult",
    "debias_imu", "default_initial_covariance", "discretize", "error_dynamics_matrices",
    "foot_rolling_terms", "idx_f", "idx_vf", "joseph_update", "log_gaussian",
    "measurement_point_contact", "measurement_rolling", "on_contact_transition", "predict",
    "propagate_nominal", "stack_measurements", "step_linearization", "update",
]
