"""Interacting multiple model wrapper around :class:`ModeFilter`.

Modes differ only in the foot-velocity noise scale ``alpha``. Mixing and
fusion average the Euclidean parts linearly and the rotation through
error rotations about the most probable mode's attitude.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .eskf import DIM, FilterConfig, ModeFilter, RobotState, log_gaussian
from .so3 import boxplus, boxminus

LOG_LIKELIHOOD_FLOOR = -690.0    # ~ log(1e-300)
MU_FLOOR = 1e-6

DEFAULT_ALPHA = {2: (1.0, 100.0), 3: (1.0, 10.0, 100.0)}
DEFAULT_TRANSITION = {
    2: ((0.99, 0.01),
        (0.02, 0.98)),
    3: ((0.98, 0.01, 0.01),
        (0.02, 0.97, 0.01),
        (0.02, 0.01, 0.97)),
}


class ConfigurationError(ValueError):
    pass


def validate_transition(Pi, M: int) -> np.ndarray:
    Pi = np.asarray(Pi, dtype=float)
    if Pi.shape != (M, M):
        raise ConfigurationError(f"transition matrix must be {M}x{M}, got {Pi.shape}")
    if (Pi < 0).any():
        raise ConfigurationError("transition matrix entries must be non-negative")
    sums = Pi.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-12)
    if bad.size:
        raise ConfigurationError(f"transition matrix row {int(bad[0])} sums to {sums[bad[0]]:.6g}, not 1")
    return Pi


def validate_alpha(alpha) -> tuple:
    alpha = tuple(float(a) for a in alpha)
    if alpha[0] != 1.0:
        raise ConfigurationError("the first (nominal rolling) mode must have alpha = 1")
    if any(a < 1.0 for a in alpha):
        raise ConfigurationError("all alpha must be >= 1")
    if any(b < a for a, b in zip(alpha, alpha[1:])):
        raise ConfigurationError("alpha must be non-decreasing")
    return alpha


@dataclass
class ModeBank:
    modes: list
    mu: np.ndarray
    Pi: np.ndarray
    interaction: bool = True
    flags: list = field(default_factory=list)   # per-step anomaly notes

    @property
    def M(self) -> int:
        return len(self.modes)

    @property
    def alphas(self) -> tuple:
        return tuple(m.alpha for m in self.modes)


def build_bank(state: RobotState, P: np.ndarray, config: FilterConfig, modes: int = 2,
               alpha=None, transition=None, mu0=None, interaction: bool = True) -> ModeBank:
    """Mode bank with identical initial state and covariance in every mode.

    ``interaction=False`` gives the no-interaction ablation: identity
    transition and fixed equal-weight fusion.
    """
    if modes < 1:
        raise ConfigurationError("need at least one mode")
    alpha = validate_alpha(alpha if alpha is not None else DEFAULT_ALPHA.get(modes, (1.0,) * modes))
    if len(alpha) != modes:
        raise ConfigurationError(f"got {len(alpha)} alpha values for {modes} modes")
    if not interaction:
        Pi = np.eye(modes)
    elif transition is None:
        if modes not in DEFAULT_TRANSITION:
            raise ConfigurationError(f"no default transition matrix for {modes} modes")
        Pi = np.array(DEFAULT_TRANSITION[modes])
    else:
        Pi = transition
    Pi = validate_transition(Pi, modes)
    mu = np.full(modes, 1.0 / modes) if mu0 is None else np.asarray(mu0, dtype=float)
    if abs(mu.sum() - 1.0) > 1e-12 or (mu < 0).any():
        raise ConfigurationError("initial mode probabilities must be a distribution")
    filters = [ModeFilter(state.copy(), P.copy(), config, a) for a in alpha]
    return ModeBank(filters, mu, Pi, interaction)


def weighted_state_mean(states, weights, X=None):
    """Weighted mean of states and each state's 39-dim spread from it.

    The rotation is averaged as error rotations about the state with the
    largest weight. ``X`` optionally holds the stacked ``vector_part`` of
    the states. Spreads are returned as an ``(M, 39)`` array.
    """
    weights = np.asarray(weights, dtype=float)
    if X is None:
        X = np.array([s.vector_part() for s in states])
    ref = int(np.argmax(weights))
    if weights[ref] == 1.0:
        mean = states[ref].copy()
        x = X[ref]
    else:
        x = weights @ X
        G_ref = states[ref].G
        dtheta = np.zeros(3)
        for k, (w, s) in enumerate(zip(weights, states)):
            if k != ref and w != 0.0:
                dtheta += w * boxminus(s.G, G_ref)
        mean = RobotState.from_vector_part(x, boxplus(G_ref, dtheta))
    D = X - x
    for k, s in enumerate(states):
        D[k, 6:9] = boxminus(s.G, mean.G)
    return mean, D


def moment_match(states, covariances, weights, X=None):
    """Gaussian-mixture collapse: mean state and covariance with spread terms."""
    weights = np.asarray(weights, dtype=float)
    mean, D = weighted_state_mean(states, weights, X)
    P = np.zeros((DIM, DIM))
    for w, Pj in zip(weights, covariances):
        if w != 0.0:
            P += w * Pj
    P += (D.T * weights) @ D
    return mean, 0.5 * (P + P.T)


def predicted_mode_probs(mu, Pi) -> np.ndarray:
    return np.asarray(Pi).T @ np.asarray(mu)


def mix(bank: ModeBank):
    """Mixed initial conditions for every mode.

    Returns ``(initial, mu_bar)`` where ``initial[i] = (state, P)``. A mode
    whose predicted probability is zero keeps its own posterior.
    """
    mu, Pi = bank.mu, bank.Pi
    mu_bar = predicted_mode_probs(mu, Pi)
    states = [m.state for m in bank.modes]
    covs = [m.P for m in bank.modes]
    X = np.array([st.vector_part() for st in states])
    initial = []
    for i in range(bank.M):
        if mu_bar[i] <= 0.0:
            bank.flags.append(f"mode {i} has zero predicted probability; mixing skipped")
            initial.append((states[i], covs[i]))
            continue
        w = Pi[:, i] * mu / mu_bar[i]
        initial.append(moment_match(states, covs, w, X))
    return initial, mu_bar


def mode_log_likelihood(residual, S) -> float:
    if residual is None or len(residual) == 0:
        return 0.0
    ll = log_gaussian(residual, S)
    return max(ll, LOG_LIKELIHOOD_FLOOR)


def mode_likelihood(residual, S) -> float:
    """Gaussian innovation likelihood ``N(r; 0, S)``, floored at 1e-300."""
    return math.exp(mode_log_likelihood(np.atleast_1d(residual), np.atleast_2d(S)))


def update_mode_probs(likelihoods, mu_bar, log: bool = False, floor: float = MU_FLOOR):
    """Posterior mode probabilities from likelihoods and predicted probabilities.

    With ``log=True`` the first argument holds log-likelihoods; the
    normalization is done after subtracting the maximum, so a common factor
    on all likelihoods cancels exactly.
    """
    mu_bar = np.asarray(mu_bar, dtype=float)
    if log:
        ll = np.maximum(np.asarray(likelihoods, dtype=float), LOG_LIKELIHOOD_FLOOR)
    else:
        ll = np.log(np.maximum(np.asarray(likelihoods, dtype=float), 1e-300))
    with np.errstate(divide="ignore"):
        logw = ll + np.log(mu_bar)
    logw -= logw.max()
    w = np.exp(logw)
    mu = w / w.sum()
    if floor > 0.0:
        mu = np.clip(mu, floor, 1.0)
        mu = mu / mu.sum()
    return mu


def fuse(states, covariances, mu):
    """Probability-weighted fused state and covariance."""
    return moment_match(states, covariances, mu)


@dataclass
class ImmStepResult:
    state: RobotState
    P: np.ndarray
    mu: np.ndarray
    log_likelihoods: np.ndarray
    updates: list


def imm_step(bank: ModeBank, imu_window, leg_sample, gyro_at_leg, prev_flags) -> ImmStepResult:
    """One IMM cycle ending at a leg-sample timestamp.

    ``imu_window`` is a sequence of ``(ImuSample, dt)`` covering the interval
    since the previous cycle.
    """
    if bank.interaction:
        initial, mu_bar = mix(bank)
        for mode, (s, P) in zip(bank.modes, initial):
            mode.state, mode.P = s, P
    else:
        mu_bar = bank.mu.copy()
    lls = np.empty(bank.M)
    updates = []
    for i, mode in enumerate(bank.modes):
        for imu, dt in imu_window:
            mode.predict(imu, dt)
        mode.contact_transition(prev_flags, leg_sample)
        res = mode.correct(leg_sample, gyro_at_leg)
        updates.append(res)
        if not res.ok:
            bank.flags.append(f"t={leg_sample.t}: mode {i} update skipped (ill-conditioned S)")
            lls[i] = LOG_LIKELIHOOD_FLOOR
        else:
            lls[i] = mode_log_likelihood(res.residual, res.S)
    bank.mu = update_mode_probs(lls, mu_bar, log=True)
    weights = bank.mu if bank.interaction else np.full(bank.M, 1.0 / bank.M)
    state, P = fuse([m.state for m in bank.modes], [m.P for m in bank.modes], weights)
    return ImmStepResult(state, P, bank.mu.copy(), lls, updates)


__all__ = [
    "ConfigurationError", "DEFAULT_ALPHA", "DEFAULT_TRANSITION", "ImmStepResult", "LOG_LIKELIHOOD_FLOOR",
    "MU_FLOOR", "ModeBank", "build_bank", "fuse", "imm_step", "mix", "mode_likelihood",
    "mode_log_likelihood", "moment_match", "predicted_mode_probs", "update_mode_probs",
    "validate_transition", "weighted_state_mean",
]
