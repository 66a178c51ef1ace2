"""Runs one estimator over a log.

The loop is driven by leg samples. Between two leg timestamps the filter is
propagated with every IMU sample in between (zero-order hold), then contact
changes are applied and all stance feet are stacked into one update using
the gyro reading at the leg timestamp.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import imm
from .config import ScenarioConfig
from .eskf import (FilterConfig, FilterError, ImuSample, LegSample, ModeFilter, RobotState,
                   default_initial_covariance, step_linearization)
from .sim import BodyPath

ESTIMATORS = ("eskf-pc", "eskf-r", "eskf-l", "imm-no-interaction", "imm-po", "imm-t")
WARMUP_STEPS = 1000


class UnknownEstimator(ValueError):
    def __init__(self, name):
        super().__init__(f"unknown estimator {name!r}; valid estimators: {', '.join(ESTIMATORS)}")
        self.name = name


@dataclass
class EstimatorOptions:
    modes: int | None = None
    alpha: tuple | None = None
    transition: object = None


def filter_config(cfg: ScenarioConfig, model: str = "rolling") -> FilterConfig:
    return FilterConfig(noise=cfg.filter, legs=cfg.legs.build(),
                        contact_normal=tuple(BodyPath(cfg).normal), model=model)


def initial_state(truth, k: int = 0) -> RobotState:
    return RobotState(truth.p[k].copy(), truth.v[k].copy(), truth.G[k].copy(),
                      truth.f[k].copy(), truth.vf[k].copy())


class SingleEstimator:
    """Standalone error-state filter behind the common stepping interface."""

    def __init__(self, state, P, config: FilterConfig, alpha: float = 1.0):
        self.filter = ModeFilter(state, P, config, alpha)
        self.mu = None

    def step(self, imu_window, leg_sample, gyro, prev_flags):
        f = self.filter
        for sample, dt in imu_window:
            f.predict(sample, dt)
        f.contact_transition(prev_flags, leg_sample)
        res = f.correct(leg_sample, gyro)
        return f.state, f.P, res

    @property
    def state(self):
        return self.filter.state

    @property
    def P(self):
        return self.filter.P


class ImmEstimator:
    def __init__(self, bank: imm.ModeBank):
        self.bank = bank
        self.state = bank.modes[0].state
        self.P = bank.modes[0].P
        self.mu = bank.mu.copy()

    def step(self, imu_window, leg_sample, gyro, prev_flags):
        out = imm.imm_step(self.bank, imu_window, leg_sample, gyro, prev_flags)
        self.state, self.P, self.mu = out.state, out.P, out.mu
        ok = all(u.ok for u in out.updates)
        return out.state, out.P, _ImmUpdate(out.updates[0].residual, ok)


@dataclass
class _ImmUpdate:
    residual: object
    ok: bool


def make_estimator(name: str, state: RobotState, P, cfg: ScenarioConfig,
                   options: EstimatorOptions | None = None):
    opts = options or EstimatorOptions()
    if name not in ESTIMATORS:
        raise UnknownEstimator(name)
    if name == "eskf-pc":
        return SingleEstimator(state, P, filter_config(cfg, "point"))
    fc = filter_config(cfg)
    if name == "eskf-r":
        return SingleEstimator(state, P, fc)
    if name == "eskf-l":
        # slip-mode noise level used permanently
        alpha = opts.alpha if opts.alpha is not None else imm.DEFAULT_ALPHA[opts.modes or 2]
        return SingleEstimator(state, P, fc, alpha=max(alpha))
    modes = opts.modes or (3 if name == "imm-t" else 2)
    bank = imm.build_bank(state, P, fc, modes=modes, alpha=opts.alpha,
                          transition=opts.transition,
                          interaction=(name != "imm-no-interaction"))
    return ImmEstimator(bank)


@dataclass
class EstimateResult:
    name: str
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    G: np.ndarray
    trace_P: np.ndarray
    innovation_norm: np.ndarray
    update_ok: np.ndarray
    mu: np.ndarray | None = None
    step_time: np.ndarray = field(default_factory=lambda: np.zeros(0))
    flags: list = field(default_factory=list)
    invariants: dict | None = None

    def mean_step_time(self, warmup: int = WARMUP_STEPS) -> float:
        return self.median_step_time(self.step_time, warmup)

    @staticmethod
    def median_step_time(st, warmup: int = WARMUP_STEPS) -> float:
        skip = warmup if len(st) > 2 * warmup else len(st) // 2
        return float(np.median(st[skip:])) if len(st) else 0.0


class InvariantTracker:
    """Worst-case probability-sum and covariance symmetry/PSD deviations."""

    def __init__(self):
        self.mu_sum_err = 0.0
        self.P_asym = 0.0
        self.P_min_eig = np.inf

    def check_P(self, P):
        scale = max(np.abs(P).max(), 1e-300)
        self.P_asym = max(self.P_asym, float(np.abs(P - P.T).max() / scale))
        self.P_min_eig = min(self.P_min_eig, float(np.linalg.eigvalsh(0.5 * (P + P.T))[0] / scale))

    def check(self, est, P):
        self.check_P(P)
        if isinstance(est, ImmEstimator):
            self.mu_sum_err = max(self.mu_sum_err, abs(float(est.mu.sum()) - 1.0))
            for m in est.bank.modes:
                self.check_P(m.P)

    def to_dict(self) -> dict:
        return {"mu_sum_err": self.mu_sum_err, "P_asym": self.P_asym, "P_min_eig": self.P_min_eig}


def run_estimator(name: str, imu_log, leg_log, truth, cfg: ScenarioConfig,
                  options: EstimatorOptions | None = None, P0=None, observer=None,
                  check_invariants: bool = False) -> EstimateResult:
    """Runs ``name`` over the streams; initialized from the first truth sample.

    ``observer(k, t, state, P, mu)`` is called after every leg step. With
    ``check_invariants`` the result carries the worst |sum(mu) - 1|, relative
    covariance asymmetry and smallest relative covariance eigenvalue seen.
    """
    ipl = cfg.imu_per_leg
    M = len(leg_log)
    P0 = default_initial_covariance() if P0 is None else P0
    est = make_estimator(name, initial_state(truth, 0), P0.copy(), cfg, options)
    n_modes = None if est.mu is None else len(est.mu)
    out_p = np.zeros((M, 3))
    out_v = np.zeros((M, 3))
    out_G = np.zeros((M, 3, 3))
    tr = np.zeros(M)
    innov = np.zeros(M)
    ok = np.ones(M, bool)
    mu = None if n_modes is None else np.zeros((M, n_modes))
    times = np.zeros(M)
    tracker = InvariantTracker() if check_invariants else None
    for j, (state, P, res), dt in drive(est, imu_log, leg_log, ipl):
        times[j] = dt
        if not (state.is_finite() and np.isfinite(P).all()):
            raise FilterError(f"{name}: non-finite estimate at t={leg_log.t[j]:.6f} s",
                              t=float(leg_log.t[j]))
        if tracker is not None:
            tracker.check(est, P)
        out_p[j], out_v[j], out_G[j] = state.p, state.v, state.G
        tr[j] = np.trace(P)
        innov[j] = 0.0 if res.residual is None else float(np.linalg.norm(res.residual))
        ok[j] = res.ok
        if mu is not None:
            mu[j] = est.mu
        if observer is not None:
            observer(j, leg_log.t[j], state, P, est.mu)
    flags = list(est.bank.flags) if isinstance(est, ImmEstimator) else []
    return EstimateResult(name, leg_log.t.copy(), out_p, out_v, out_G, tr, innov, ok, mu, times, flags,
                          None if tracker is None else tracker.to_dict())


def drive(est, imu_log, leg_log, ipl: int):
    """Steps ``est`` through the log, yielding ``(j, (state, P, update), wall_time)``."""
    imu_t, gyro = imu_log.t, imu_log.gyro
    prev_flags = leg_log.contact[0] if len(leg_log) else None
    for j in range(len(leg_log)):
        k = j * ipl
        if k >= len(imu_t) or abs(imu_t[k] - leg_log.t[j]) > 1e-9:
            raise FilterError(f"leg sample {j} at t={leg_log.t[j]} has no matching IMU sample")
        window = imu_window(imu_log, k, ipl) if j else []
        sample = LegSample(leg_log.t[j], leg_log.q[j], leg_log.dq[j], leg_log.contact[j])
        t0 = time.perf_counter()
        out = est.step(window, sample, gyro[k], prev_flags)
        dt = time.perf_counter() - t0
        prev_flags = leg_log.contact[j]
        yield j, out, dt


def lockstep_step_times(names, imu_log, leg_log, truth, cfg: ScenarioConfig, options=None) -> dict:
    """Median per-step wall time of several estimators advanced together.

    Every leg step is run for each estimator in turn, so a change in the
    machine's speed during the run hits all of them alike. ``options`` maps
    names to ``EstimatorOptions``. The first ``WARMUP_STEPS`` are excluded.
    """
    options = options or {}
    P0 = default_initial_covariance()
    ests = [make_estimator(n, initial_state(truth, 0), P0.copy(), cfg, options.get(n)) for n in names]
    times = np.zeros((len(names), len(leg_log)))
    drivers = [drive(e, imu_log, leg_log, cfg.imu_per_leg) for e in ests]
    for steps in zip(*drivers):
        for i, (j, _, dt) in enumerate(steps):
            times[i, j] = dt
    return {n: EstimateResult.median_step_time(times[i]) for i, n in enumerate(names)}


def imu_window(imu_log, k: int, ipl: int):
    return [(ImuSample(imu_log.t[i], imu_log.gyro[i], imu_log.accel[i]),
             imu_log.t[i + 1] - imu_log.t[i]) for i in range(k - ipl, k)]


def final_step_linearization(imu_log, leg_log, truth, cfg: ScenarioConfig, P0=None):
    """``(F, H, K)`` of ESKF-R's last leg step, linearized at the filter's
    posterior from the step before. Touchdowns on that last step are ignored."""
    M = len(leg_log)
    if M < 2:
        raise FilterError("need at least two leg samples")
    held = {}

    def keep(j, t, state, P, mu):
        if j == M - 2:
            held["state"], held["P"] = state.copy(), P.copy()

    run_estimator("eskf-r", imu_log, leg_log, truth, cfg, P0=P0, observer=keep)
    ipl = cfg.imu_per_leg
    k = (M - 1) * ipl
    j = M - 1
    sample = LegSample(leg_log.t[j], leg_log.q[j], leg_log.dq[j], leg_log.contact[j])
    return step_linearization(held["state"], held["P"], imu_window(imu_log, k, ipl), sample,
                              imu_log.gyro[k], filter_config(cfg))
