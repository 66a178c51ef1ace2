"""Kinematic quadruped simulator with rolling and slipping stance feet.

There is no contact solver. The body follows a prescribed path with a
smooth speed profile, the legs trot in diagonal pairs, and every stance
foot-sphere center moves with ``omega_f x r`` (plus a commanded slip
velocity inside slip windows). Swing feet follow a cycloid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kinematics as kin
from .config import ScenarioConfig, SensorNoise
from .eskf import GRAVITY, N_LEGS
from .so3 import cross, rot_y, rot_z, skew

PAIR_A = (0, 3)    # LF, RH
PAIR_B = (1, 2)    # RF, LH


class SimulationError(RuntimeError):
    pass


@dataclass
class BodyTrajectory:
    t: np.ndarray
    p: np.ndarray        # (N, 3)
    v: np.ndarray        # (N, 3)
    a: np.ndarray        # (N, 3) world acceleration
    G: np.ndarray        # (N, 3, 3)
    omega: np.ndarray    # (N, 3) body-frame angular rate


@dataclass
class GroundTruth:
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    G: np.ndarray
    omega: np.ndarray
    f: np.ndarray          # (N, 4, 3) foot-sphere centers, world
    vf: np.ndarray         # (N, 4, 3)
    contact: np.ndarray    # (N, 4) bool
    slip: np.ndarray       # (N, 4) bool

    def __len__(self):
        return len(self.t)


@dataclass
class ImuLog:
    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __len__(self):
        return len(self.t)


@dataclass
class LegLog:
    t: np.ndarray
    q: np.ndarray          # (M, 4, 3)
    dq: np.ndarray         # (M, 4, 3)
    contact: np.ndarray    # (M, 4) bool

    def __len__(self):
        return len(self.t)


class SpeedProfile:
    """Arc length along the path: cosine ramp up, cruise, cosine ramp down."""

    def __init__(self, cruise: float, duration: float, ramp: float):
        self.vc = cruise
        self.T = duration
        self.Tr = ramp

    def __call__(self, t):
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.T)
        vc, T, Tr = self.vc, self.T, self.Tr
        s = np.empty_like(t)
        sd = np.empty_like(t)
        sdd = np.empty_like(t)
        if Tr <= 0.0:
            return vc * t, np.full_like(t, vc), np.zeros_like(t)
        w = np.pi / Tr
        up = t < Tr
        down = t > T - Tr
        mid = ~(up | down)
        tu = t[up]
        s[up] = 0.5 * vc * (tu - np.sin(w * tu) / w)
        sd[up] = 0.5 * vc * (1.0 - np.cos(w * tu))
        sdd[up] = 0.5 * vc * w * np.sin(w * tu)
        s[mid] = vc * (t[mid] - 0.5 * Tr)
        sd[mid] = vc
        sdd[mid] = 0.0
        u = t[down] - (T - Tr)
        s[down] = vc * (T - 1.5 * Tr) + 0.5 * vc * (u + np.sin(w * u) / w)
        sd[down] = 0.5 * vc * (1.0 + np.cos(w * u))
        sdd[down] = -0.5 * vc * w * np.sin(w * u)
        return s, sd, sdd

    @property
    def distance(self) -> float:
        return self.vc * (self.T - self.Tr) if self.Tr > 0 else self.vc * self.T


class BodyPath:
    """Analytic body pose, velocity, acceleration and angular rate."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        cruise = cfg.gait.step_length / cfg.gait.cycle
        self.profile = SpeedProfile(cruise, cfg.duration, cfg.ramp_time)
        self.h = cfg.gait.body_height
        if cfg.path.type == "slope":
            th = cfg.path.angle
            self.normal = np.array([-np.sin(th), 0.0, np.cos(th)])
        else:
            self.normal = np.array([0.0, 0.0, 1.0])

    def evaluate(self, t) -> BodyTrajectory:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s, sd, sdd = self.profile(t)
        n = len(t)
        zeros = np.zeros(n)
        kind = self.cfg.path.type
        if kind == "straight" or kind == "slope":
            th = self.cfg.path.angle if kind == "slope" else 0.0
            d = np.array([np.cos(th), 0.0, np.sin(th)])
            p = s[:, None] * d + self.h * self.normal
            v = sd[:, None] * d
            a = sdd[:, None] * d
            G = np.broadcast_to(rot_y(-th), (n, 3, 3)).copy()
            omega = np.zeros((n, 3))
        elif kind == "circular":
            R = self.cfg.path.radius
            psi = s / R
            c, sn = np.cos(psi), np.sin(psi)
            p = np.column_stack([R * sn, R * (1.0 - c), np.full(n, self.h)])
            v = np.column_stack([sd * c, sd * sn, zeros])
            a = np.column_stack([sdd * c - sd ** 2 / R * sn, sdd * sn + sd ** 2 / R * c, zeros])
            G = np.array([rot_z(x) for x in psi])
            omega = np.column_stack([zeros, zeros, sd / R])
        elif kind == "sinusoidal":
            A = self.cfg.path.amplitude
            k = 2.0 * np.pi / self.cfg.path.wavelength
            slope = A * k * np.cos(k * s)
            p = np.column_stack([s, A * np.sin(k * s), np.full(n, self.h)])
            v = np.column_stack([sd, slope * sd, zeros])
            a = np.column_stack([sdd, slope * sdd - A * k * k * np.sin(k * s) * sd ** 2, zeros])
            psi = np.arctan(slope)
            G = np.array([rot_z(x) for x in psi])
            psi_dot = -A * k * k * np.sin(k * s) * sd / (1.0 + slope ** 2)
            omega = np.column_stack([zeros, zeros, psi_dot])
        else:
            raise SimulationError(f"unknown path type {kind!r}")
        return BodyTrajectory(t, p, v, a, G, omega)


def sample_times(duration: float, rate: float) -> np.ndarray:
    n = int(round(duration * rate))
    return np.arange(n) / rate


def _swing(f_lo, f_td, normal, height, tau, tau_rate):
    d = f_td - f_lo
    two_pi = 2.0 * np.pi
    pos = f_lo + d * (tau - np.sin(two_pi * tau) / two_pi) + normal * height * 0.5 * (1.0 - np.cos(two_pi * tau))
    vel = d * (1.0 - np.cos(two_pi * tau)) * tau_rate + normal * height * np.pi * np.sin(two_pi * tau) * tau_rate
    return pos, vel


class _StanceDynamics:
    """Foot-center velocity of a stance foot that rolls (and possibly slips)."""

    def __init__(self, leg: kin.LegParams, r: np.ndarray):
        self.leg = leg
        self.r = r
        self.rx = skew(r)

    def __call__(self, f, p, v, G, omega, slip, t=None):
        zeta = G.T @ (f - p)
        phi = kin.inverse_kinematics(zeta, self.leg, t)
        JrJinv = kin.rotational_jacobian(phi) @ _inv3(kin.jacobian(phi, self.leg))
        c = G @ (omega + JrJinv @ (-G.T @ v - cross(omega, zeta)))
        M = G @ JrJinv @ G.T
        return _inv3(_I3 + self.rx @ M) @ (slip - self.rx @ c)


_I3 = np.eye(3)


def _inv3(A):
    """Adjugate inverse of a 3x3 matrix."""
    adj = np.array([cross(A[1], A[2]), cross(A[2], A[0]), cross(A[0], A[1])]).T
    return adj / (A[0] @ adj[:, 0])


def _slip_velocity(cfg: ScenarioConfig, leg: int, t: float):
    out = np.zeros(3)
    hit = False
    for w in cfg.slip_windows:
        if w.contains(t) and leg in w.leg_indices():
            out = out + np.asarray(w.velocity, dtype=float)
            hit = True
    return out, hit


def gait_phase(cfg: ScenarioConfig):
    """Per-leg sample offsets and stance/swing lengths in IMU samples."""
    rate = cfg.imu_rate
    n_st = int(round(cfg.gait.stance_duration * rate))
    n_sw = int(round(cfg.gait.swing_duration * rate))
    n_c = n_st + n_sw
    ipl = cfg.imu_per_leg
    half = int(round(n_c / 2 / ipl)) * ipl
    offsets = [0, half, half, 0]
    return n_st, n_sw, n_c, offsets


def nominal_foot_body(cfg: ScenarioConfig, leg: kin.LegParams) -> np.ndarray:
    return np.array([leg.hip_offset[0], leg.hip_offset[1] + leg.side * leg.l1,
                     -(cfg.gait.body_height - leg.foot_radius)])


def generate_truth(cfg: ScenarioConfig) -> GroundTruth:
    """Ground-truth body and foot motion sampled at the IMU rate."""
    t = sample_times(cfg.duration, cfg.imu_rate)
    N = len(t)
    legs = cfg.legs.build()
    path = BodyPath(cfg)
    normal = path.normal
    if N == 0:
        e3 = np.zeros((0, 3))
        return GroundTruth(t, e3, e3, e3, np.zeros((0, 3, 3)), e3, np.zeros((0, 4, 3)),
                           np.zeros((0, 4, 3)), np.zeros((0, 4), bool), np.zeros((0, 4), bool))
    dt = 1.0 / cfg.imu_rate
    body = path.evaluate(t)
    half = path.evaluate(t + 0.5 * dt)
    f = np.zeros((N, N_LEGS, 3))
    vf = np.zeros((N, N_LEGS, 3))
    contact = np.zeros((N, N_LEGS), bool)
    slip = np.zeros((N, N_LEGS), bool)
    walking = cfg.gait.step_length > 0.0
    n_st, n_sw, n_c, offsets = gait_phase(cfg)
    ipl = cfg.imu_per_leg
    rf = legs[0].foot_radius

    def on_ground(x, radius):
        return x - (x @ normal - radius) * normal

    def placement(leg, k_td):
        t_mid = (k_td + 0.5 * n_st) * dt
        b = path.evaluate([t_mid])
        return on_ground(b.p[0] + b.G[0] @ nominal_foot_body(cfg, leg), leg.foot_radius)

    def body_at(k, halfstep=False):
        src = half if halfstep else body
        return src.p[k], src.v[k], src.G[k], src.omega[k]

    for li, leg in enumerate(legs):
        dyn = _StanceDynamics(leg, kin.contact_radius(leg.foot_radius, normal))

        def rhs(fpos, k, halfstep, tk):
            p, v, G, w = body_at(k, halfstep)
            sv, _ = _slip_velocity(cfg, li, tk)
            return dyn(fpos, p, v, G, w, sv, tk)

        fk = on_ground(body.p[0] + body.G[0] @ nominal_foot_body(cfg, leg), leg.foot_radius)
        f_lo = fk
        f_td = fk
        k_td = 0
        prev_stance = False
        for k in range(N):
            m = (k - offsets[li]) % n_c
            stance = (not walking) or m >= n_sw
            if stance:
                if walking and m == n_sw:
                    fk = f_td
                elif prev_stance:
                    fk = _rk4_foot(rhs, fk, k - 1, dt, t[k - 1])
                vk = rhs(fk, k, False, t[k])
                if walking and cfg.touchdown_impulse > 0.0 and k - k_td < ipl and k >= k_td and k_td > 0:
                    vk = vk + cfg.touchdown_impulse * normal
                contact[k, li] = True
                slip[k, li] = _slip_velocity(cfg, li, t[k])[1]
            else:
                if m == 0:
                    if prev_stance:
                        fk = _rk4_foot(rhs, fk, k - 1, dt, t[k - 1])
                    f_lo = fk
                    k_td = k + n_sw
                    f_td = placement(leg, k_td)
                fk, vk = _swing(f_lo, f_td, normal, cfg.gait.step_height, m / n_sw, 1.0 / (n_sw * dt))
                kin.inverse_kinematics(body.G[k].T @ (fk - body.p[k]), leg, t[k])
            f[k, li] = fk
            vf[k, li] = vk
            prev_stance = stance
    return GroundTruth(t, body.p, body.v, body.a, body.G, body.omega, f, vf, contact, slip)


def _rk4_foot(rhs, f0, k, dt, t0):
    k1 = rhs(f0, k, False, t0)
    k2 = rhs(f0 + 0.5 * dt * k1, k, True, t0 + 0.5 * dt)
    k3 = rhs(f0 + 0.5 * dt * k2, k, True, t0 + 0.5 * dt)
    k4 = rhs(f0 + dt * k3, k + 1, False, t0 + dt)
    return f0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rngs(seed: int):
    imu_seq, enc_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(imu_seq), np.random.default_rng(enc_seq)


def synthesize_imu(truth: GroundTruth, noise: SensorNoise, seed: int, rate: float,
                   gravity=GRAVITY) -> ImuLog:
    """Gyro and accelerometer with white noise and random-walk biases."""
    rng, _ = _rngs(seed)
    N = len(truth)
    dt = 1.0 / rate
    specific = np.einsum("nji,nj->ni", truth.G, truth.a - gravity)
    white_a = rng.standard_normal((N, 3)) * (noise.accel / np.sqrt(dt))
    white_w = rng.standard_normal((N, 3)) * (noise.gyro / np.sqrt(dt))
    steps_a = rng.standard_normal((N, 3)) * (noise.accel_bias * np.sqrt(dt))
    steps_w = rng.standard_normal((N, 3)) * (noise.gyro_bias * np.sqrt(dt))
    ba = np.asarray(noise.initial_accel_bias, dtype=float) + np.vstack([np.zeros((1, 3)), np.cumsum(steps_a[:-1], axis=0)]) if N else np.zeros((0, 3))
    bw = np.asarray(noise.initial_gyro_bias, dtype=float) + np.vstack([np.zeros((1, 3)), np.cumsum(steps_w[:-1], axis=0)]) if N else np.zeros((0, 3))
    return ImuLog(truth.t.copy(), truth.omega + bw + white_w, specific + ba + white_a)


def synthesize_encoders(truth: GroundTruth, legs, noise: SensorNoise, seed: int,
                        imu_per_leg: int) -> LegLog:
    """Joint angles by inverse kinematics, joint rates from the Jacobian."""
    _, rng = _rngs(seed)
    idx = np.arange(0, len(truth), imu_per_leg)
    M = len(idx)
    q = np.zeros((M, N_LEGS, 3))
    dq = np.zeros((M, N_LEGS, 3))
    for j, k in enumerate(idx):
        G, p, v, w = truth.G[k], truth.p[k], truth.v[k], truth.omega[k]
        for li, leg in enumerate(legs):
            zeta = G.T @ (truth.f[k, li] - p)
            phi = kin.inverse_kinematics(zeta, leg, truth.t[k])
            vel_body = G.T @ (truth.vf[k, li] - v) - cross(w, zeta)
            q[j, li] = phi
            dq[j, li] = kin.joint_rates(phi, vel_body, leg)
    q += rng.standard_normal(q.shape) * noise.joint_angle
    dq += rng.standard_normal(dq.shape) * noise.joint_rate
    return LegLog(truth.t[idx].copy(), q, dq, truth.contact[idx].copy())


@dataclass
class SimulatedLog:
    config: ScenarioConfig
    truth: GroundTruth
    imu: ImuLog
    legs: LegLog


def simulate(cfg: ScenarioConfig, seed: int | None = None, truth: GroundTruth | None = None) -> SimulatedLog:
    """Truth plus synthetic sensors. ``truth`` may be passed in to reuse it across seeds."""
    seed = cfg.seed if seed is None else seed
    truth = generate_truth(cfg) if truth is None else truth
    legs = cfg.legs.build()
    imu = synthesize_imu(truth, cfg.noise, seed, cfg.imu_rate)
    enc = synthesize_encoders(truth, legs, cfg.noise, seed, cfg.imu_per_leg)
    return SimulatedLog(cfg, truth, imu, enc)
