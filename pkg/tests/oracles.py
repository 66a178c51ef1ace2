"""Independent reference computations used by the tests.

Nothing here imports the package's rotation or kinematics code: rotations
come from scipy's Rotation class or a plain power series, kinematics from
4x4 homogeneous transforms.
"""
import numpy as np
import scipy.linalg
from scipy.spatial.transform import Rotation


def hat(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def series_exp(M, terms=20):
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms + 1):
        term = term @ M / k
        out = out + term
    return out


def rot_exp(theta):
    return Rotation.from_rotvec(np.asarray(theta, dtype=float)).as_matrix()


def rot_log(R):
    return Rotation.from_matrix(R).as_rotvec()


def _tf(R=None, t=None):
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def fk_chain(phi, hip, side, l1=0.083, l2=0.25, l3=0.25):
    """Foot-sphere centre by chaining homogeneous transforms."""
    T = (_tf(t=hip) @ _tf(R=_rx(phi[0])) @ _tf(t=[0, side * l1, 0]) @ _tf(R=_ry(phi[1]))
         @ _tf(t=[0, 0, -l2]) @ _tf(R=_ry(phi[2])) @ _tf(t=[0, 0, -l3]))
    return T[:3, 3]


def foot_rotation_chain(phi):
    return _rx(phi[0]) @ _ry(phi[1]) @ _ry(phi[2])


def central_jacobian(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    J = np.zeros((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h)
    return J


def vanloan(A, B, Q, dt):
    """Discrete transition and noise by the Van Loan block exponential."""
    n = A.shape[0]
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = -A
    M[:n, n:] = B @ Q @ B.T
    M[n:, n:] = A.T
    E = scipy.linalg.expm(M * dt)
    Phi = E[n:, n:].T
    return Phi, Phi @ E[:n, n:]


# error-state retraction written independently of the package -----------

def perturb(state, dx):
    """``state (+) dx`` with the right-side rotation perturbation."""
    s = state.copy()
    s.p = state.p + dx[0:3]
    s.v = state.v + dx[3:6]
    s.G = state.G @ rot_exp(dx[6:9])
    s.f = state.f + dx[9:21].reshape(4, 3)
    s.vf = state.vf + dx[21:33].reshape(4, 3)
    s.ba = state.ba + dx[33:36]
    s.bw = state.bw + dx[36:39]
    return s


def difference(a, b):
    """``a (-) b``."""
    dx = np.zeros(39)
    dx[0:3] = a.p - b.p
    dx[3:6] = a.v - b.v
    dx[6:9] = rot_log(b.G.T @ a.G)
    dx[9:21] = (a.f - b.f).ravel()
    dx[21:33] = (a.vf - b.vf).ravel()
    dx[33:36] = a.ba - b.ba
    dx[36:39] = a.bw - b.bw
    return dx


def error_rate(state, gyro, accel, dx, gravity=np.array([0.0, 0.0, -9.81]), tau=1e-3):
    """Time derivative at t=0 of ``x(t) (-) x_hat(t)`` with ``x(0) = x_hat (+) dx``.

    Euclidean parts differentiate the nominal ODE directly; the rotation
    part differentiates the exact constant-rate flow by Richardson-extrapolated
    central differences.
    """
    x = perturb(state, dx)

    def f(s):
        a = accel - s.ba
        return np.concatenate([s.v, s.G @ a + gravity, np.zeros(3), s.vf.ravel(), np.zeros(12),
                               np.zeros(6)])

    rate = f(x) - f(state)
    w_hat = gyro - state.bw
    w = gyro - x.bw

    def rot_err(t):
        Gh = state.G @ rot_exp(w_hat * t)
        Gx = x.G @ rot_exp(w * t)
        return rot_log(Gh.T @ Gx)

    def d(h):
        return (rot_err(h) - rot_err(-h)) / (2 * h)

    rate[6:9] = (4 * d(tau / 2) - d(tau)) / 3
    return rate


def random_state(rng, RobotState):
    return RobotState(rng.normal(size=3), rng.normal(size=3), rot_exp(rng.normal(size=3)),
                      rng.normal(size=(4, 3)), 0.1 * rng.normal(size=(4, 3)),
                      0.05 * rng.normal(size=3), 0.01 * rng.normal(size=3))


def contact_measurement(state, zeta, y_vel, u, r, leg, rolling=True):
    """Predicted stance-foot measurement ``h(x)`` and the observed ``y``
    (position, relative velocity and, for rolling, the zero constraint)."""
    G = state.G
    h = [G.T @ (state.f[leg] - state.p)]
    y = [zeta, y_vel]
    if rolling:
        h.append(G.T @ (state.v - state.vf[leg]))
        h.append(state.vf[leg] - np.cross(G @ u, r))
        y.append(np.zeros(3))
    else:
        h.append(G.T @ state.v)
    return np.concatenate(y), np.concatenate(h)
