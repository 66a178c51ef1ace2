"""Trajectory metrics, mode-timeline statistics and the closed-loop diagnostic."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .so3 import cross, exp_so3, log_so3

ASSOC_TOL = 1e-3          # s
DEFAULT_RPE_DISTANCE = 1.0
DWELL_BINS = (0.0, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, math.inf)


class EvaluationError(ValueError):
    pass


@dataclass
class Trajectory:
    t: np.ndarray
    p: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, 3, 3)
        if not (len(self.t) == len(self.p) == len(self.G)):
            raise EvaluationError("trajectory arrays differ in length")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise EvaluationError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)


def associate(est: Trajectory, truth: Trajectory, tol: float = ASSOC_TOL):
    """Index pairs ``(i_est, i_truth)`` matched by nearest timestamp within ``tol``."""
    if len(est) == 0 or len(truth) == 0:
        raise EvaluationError("empty trajectory")
    j = np.searchsorted(truth.t, est.t)
    lo = np.clip(j - 1, 0, len(truth) - 1)
    hi = np.clip(j, 0, len(truth) - 1)
    pick = np.where(np.abs(truth.t[lo] - est.t) <= np.abs(truth.t[hi] - est.t), lo, hi)
    ok = np.abs(truth.t[pick] - est.t) <= tol
    if not ok.any():
        raise EvaluationError(f"no overlapping samples within {tol * 1e3:g} ms")
    return np.flatnonzero(ok), pick[ok]


def rigid_alignment(src: np.ndarray, dst: np.ndarray, degenerate_tol: float = 1e-9):
    """Least-squares ``(R, t)`` minimizing ``sum |R src_i + t - dst_i|^2``.

    When ``dst`` is collinear (straight paths) the rotation about the line
    is not determined by the positions; the smallest rotation achieving the
    optimum is returned instead of an arbitrary one.
    """
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - md).T @ (src - ms)
    U, sv, Vt = np.linalg.svd(C)
    if sv[0] == 0.0:
        R = np.eye(3)
    elif sv[1] <= degenerate_tol * sv[0]:
        R = _min_rotation(Vt[0], U[:, 0])
    else:
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
        R = U @ D @ Vt
    return R, md - R @ ms


def _min_rotation(a, b) -> np.ndarray:
    """Smallest rotation taking unit vector ``a`` to unit vector ``b``."""
    axis = cross(a, b)
    s, c = np.linalg.norm(axis), float(a @ b)
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        # antiparallel: half turn about any axis normal to a
        e = np.eye(3)[int(np.argmin(np.abs(a)))]
        axis = cross(a, e)
        return exp_so3(np.pi * axis / np.linalg.norm(axis))
    return exp_so3(math.atan2(s, c) * axis / s)


def _rot_angle(R) -> float:
    return float(np.linalg.norm(log_so3(R)))


def _rmse(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(math.sqrt((x * x).mean()))


def ate(est: Trajectory, truth: Trajectory, align: str = "rigid", tol: float = ASSOC_TOL):
    """``(ate_pos, ate_att, n)``: RMSE of position and geodesic attitude errors."""
    if align not in ("none", "rigid"):
        raise EvaluationError(f"unknown alignment {align!r}; use 'none' or 'rigid'")
    ie, it = associate(est, truth, tol)
    pe, Ge = est.p[ie], est.G[ie]
    pt, Gt = truth.p[it], truth.G[it]
    if align == "rigid":
        R, t = rigid_alignment(pe, pt)
        pe = pe @ R.T + t
        Ge = np.einsum("ij,njk->nik", R, Ge)
    dp = np.linalg.norm(pe - pt, axis=1)
    da = [_rot_angle(Gt[k].T @ Ge[k]) for k in range(len(ie))]
    return _rmse(dp), _rmse(da), len(ie)


def arc_length(p: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def rpe(est: Trajectory, truth: Trajectory, distance: float = DEFAULT_RPE_DISTANCE,
        tol: float = ASSOC_TOL):
    """``(rpe_pos, rpe_att, n)`` over segments of ``distance`` metres of true travel.

    Each segment error is scaled by ``distance / true segment length`` so that
    discretization of the segment end does not bias the per-distance value.
    """
    if distance <= 0:
        raise EvaluationError("RPE distance must be positive")
    ie, it = associate(est, truth, tol)
    pe, Ge = est.p[ie], est.G[ie]
    pt, Gt = truth.p[it], truth.G[it]
    s = arc_length(pt)
    if s[-1] <= distance:
        raise EvaluationError(f"trajectory length {s[-1]:.3f} m is shorter than the RPE "
                              f"distance {distance:g} m")
    ends = np.searchsorted(s, s + distance, side="right")
    ep, ea = [], []
    for i, j in enumerate(ends):
        if j >= len(s):
            break
        dpt = Gt[i].T @ (pt[j] - pt[i])
        dpe = Ge[i].T @ (pe[j] - pe[i])
        dRt = Gt[i].T @ Gt[j]
        dRe = Ge[i].T @ Ge[j]
        scale = distance / (s[j] - s[i])
        ep.append(np.linalg.norm(dpe - dpt) * scale)
        ea.append(_rot_angle(dRt.T @ dRe) * scale)
    return _rmse(ep), _rmse(ea), len(ep)


@dataclass
class MetricReport:
    ate_pos: float
    ate_att: float
    rpe_pos: float
    rpe_att: float
    n_ate: int
    n_rpe: int
    align: str = "rigid"
    rpe_distance: float = DEFAULT_RPE_DISTANCE

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self, label: str = "estimate") -> str:
        head = f"{'':<20}{'ATE_pos[m]':>14}{'ATE_att[rad]':>14}{'RPE_pos[m]':>14}{'RPE_att[rad]':>14}"
        row = (f"{label:<20}{self.ate_pos:>14.6f}{self.ate_att:>14.6f}"
               f"{self.rpe_pos:>14.6f}{self.rpe_att:>14.6f}")
        return head + "\n" + row + "\n"


def evaluate(est: Trajectory, truth: Trajectory, align: str = "rigid",
             rpe_distance: float = DEFAULT_RPE_DISTANCE) -> MetricReport:
    ap, aa, na = ate(est, truth, align)
    rp, ra, nr = rpe(est, truth, rpe_distance)
    return MetricReport(ap, aa, rp, ra, na, nr, align, rpe_distance)


def closed_loop_matrix(F, H, K) -> np.ndarray:
    """``(I - K H) F``."""
    F, H, K = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (F, H, K))
    n = F.shape[0]
    if F.shape != (n, n) or H.shape[1] != n or K.shape != (n, H.shape[0]):
        raise EvaluationError(f"dimension mismatch: F {F.shape}, H {H.shape}, K {K.shape}")
    return (np.eye(n) - K @ H) @ F


@dataclass
class SpectralRadius:
    value: float
    converged: bool = True

    def __float__(self):
        return self.value


def spectral_radius(A, max_iter: int = 10000, tol: float = 1e-12, seed: int = 0) -> SpectralRadius:
    """Largest eigenvalue magnitude.

    Uses the dense eigensolver; if that fails, falls back to power iteration
    with random restarts and sets ``converged=False`` when it hits ``max_iter``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise EvaluationError(f"spectral radius needs a square matrix, got {A.shape}")
    if not np.isfinite(A).all():
        raise EvaluationError("matrix has non-finite entries")
    try:
        return SpectralRadius(float(np.abs(np.linalg.eigvals(A)).max()))
    except np.linalg.LinAlgError:
        return _power_iteration(A, max_iter, tol, seed)


def _power_iteration(A, max_iter, tol, seed, restarts: int = 3) -> SpectralRadius:
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(restarts):
        x = rng.standard_normal(A.shape[0])
        x /= np.linalg.norm(x)
        prev = 0.0
        for _ in range(max_iter):
            # two steps per iteration copes with +-lambda pairs
            y = A @ (A @ x)
            ny = np.linalg.norm(y)
            if ny == 0.0:
                break
            est = math.sqrt(ny)
            x = y / ny
            if abs(est - prev) <= tol * max(est, 1.0):
                return SpectralRadius(max(best, est))
            prev = est
        best = max(best, prev)
    return SpectralRadius(best, converged=False)


def unobservable_subspace(F, H, rcond: float = 1e-9) -> np.ndarray:
    """Orthonormal basis of the null space of ``[H; HF; HF^2; ...]``."""
    F = np.asarray(F, dtype=float)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = F.shape[0]
    blocks = [H]
    for _ in range(n - 1):
        blocks.append(blocks[-1] @ F)
    O = np.vstack(blocks)
    _, s, Vt = np.linalg.svd(O)
    rank = int((s > rcond * s[0]).sum()) if s.size and s[0] > 0 else 0
    return Vt[rank:].T


def observable_spectral_radius(A_cl, F, H, rcond: float = 1e-9):
    """``(rho, k)``: spectral radius of ``A_cl`` on the quotient by the
    ``k``-dimensional unobservable subspace of ``(F, H)``.

    The unobservable subspace is invariant under ``F`` and annihilated by
    ``H F``, so it is invariant under ``A_cl`` too and the quotient map is
    ``Q^T A_cl Q`` for an orthonormal complement ``Q``.
    """
    U = unobservable_subspace(F, H, rcond)
    A_cl = np.asarray(A_cl, dtype=float)
    if U.shape[1] == 0:
        return spectral_radius(A_cl), 0
    _, _, Vt = np.linalg.svd(U.T)
    Q = Vt[U.shape[1]:].T
    return spectral_radius(Q.T @ A_cl @ Q), U.shape[1]


@dataclass
class ModeTimelineStats:
    inside_mean: float
    outside_mean: float
    ratio: float
    switch_count: int
    dwell_bins: tuple
    dwell_counts: list
    n_inside: int
    n_outside: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dwell_bins"] = [b if math.isfinite(b) else "inf" for b in self.dwell_bins]
        d["ratio"] = self.ratio if math.isfinite(self.ratio) else "inf"
        return d


def window_mask(t, slip_windows) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    inside = np.zeros(len(t), bool)
    for w in slip_windows:
        t0, t1 = (w.t_start, w.t_end) if hasattr(w, "t_start") else (w[0], w[1])
        inside |= (t >= t0) & (t < t1)
    return inside


def mode_timeline_stats(t, mu, slip_windows, slip_mode: int = -1) -> ModeTimelineStats:
    """Slip-mode probability inside vs outside the windows and mode dwell times.

    ``mu`` is ``(N, M)`` mode probabilities or ``(N,)`` slip probabilities (two
    modes implied). A switch is a change of the most probable mode.
    """
    t = np.asarray(t, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if len(t) == 0 or mu.size == 0:
        raise EvaluationError("empty mode-probability history")
    if mu.ndim == 1:
        mu = np.column_stack([1.0 - mu, mu])
    if len(mu) != len(t):
        raise EvaluationError("mode history and timestamps differ in length")
    slip = mu[:, slip_mode]
    inside = window_mask(t, slip_windows)
    m_in = float(slip[inside].mean()) if inside.any() else math.nan
    m_out = float(slip[~inside].mean()) if (~inside).any() else math.nan
    if m_out == 0.0:
        ratio = math.inf if m_in > 0 else math.nan
    else:
        ratio = m_in / m_out
    dominant = np.argmax(mu, axis=1)
    change = np.flatnonzero(np.diff(dominant) != 0) + 1
    starts = np.concatenate([[0], change])
    stops = np.concatenate([change, [len(t) - 1]])
    dwell = t[stops] - t[starts]
    counts, _ = np.histogram(dwell, bins=np.array(DWELL_BINS[:-1] + (1e300,)))
    return ModeTimelineStats(m_in, m_out, ratio, len(change), DWELL_BINS,
                             [int(c) for c in counts], int(inside.sum()), int((~inside).sum()))
