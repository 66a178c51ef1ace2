"""Closed-form kinematics of a 3-DoF quadruped leg with a spherical foot.

Joint chain (body frame): hip offset, abduction about x, abduction link of
length ``l1`` along ``side * y``, hip pitch about y, thigh ``l2`` down, knee
pitch about y, shank ``l3`` down to the foot-sphere center.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .so3 import cross, rot_x, rot_y, skew

LEG_NAMES = ("LF", "RF", "LH", "RH")
E_X = np.array([1.0, 0.0, 0.0])
E_Y = np.array([0.0, 1.0, 0.0])


class WorkspaceError(ValueError):
    """Requested foot position is outside a leg's reachable set."""

    def __init__(self, message, leg=None, t=None):
        super().__init__(message)
        self.leg = leg
        self.t = t


@dataclass
class LegParams:
    hip_offset: np.ndarray
    side: float
    l1: float = 0.083
    l2: float = 0.25
    l3: float = 0.25
    foot_radius: float = 0.02
    index: int = 0

    def __post_init__(self):
        self.hip_offset = np.asarray(self.hip_offset, dtype=float)
        if min(self.l1, self.l2, self.l3, self.foot_radius) <= 0:
            raise ValueError("leg link lengths and foot radius must be positive")
        if self.side not in (1, -1, 1.0, -1.0):
            raise ValueError("side must be +1 (left) or -1 (right)")

    @property
    def name(self) -> str:
        return LEG_NAMES[self.index]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hip_offset"] = [float(x) for x in self.hip_offset]
        del d["index"]
        return d


def default_legs(hip_x=0.24, hip_y=0.05, l1=0.083, l2=0.25, l3=0.25, foot_radius=0.02):
    """LF, RF, LH, RH legs with mirrored geometry."""
    legs = []
    for i, (sx, sy) in enumerate([(1, 1), (1, -1), (-1, 1), (-1, -1)]):
        legs.append(LegParams(hip_offset=np.array([sx * hip_x, sy * hip_y, 0.0]),
                              side=float(sy), l1=l1, l2=l2, l3=l3,
                              foot_radius=foot_radius, index=i))
    return legs


def _sagittal(phi2, phi3, leg):
    """Thigh+shank vector in the abduction frame as ``(x, z)``; its y is zero."""
    a, b = phi2, phi2 + phi3
    return (-leg.l2 * math.sin(a) - leg.l3 * math.sin(b),
            -leg.l2 * math.cos(a) - leg.l3 * math.cos(b))


def forward_kinematics(phi, leg: LegParams) -> np.ndarray:
    c1, s1 = math.cos(phi[0]), math.sin(phi[0])
    qx, qz = _sagittal(phi[1], phi[2], leg)
    y = leg.side * leg.l1
    h = leg.hip_offset
    return np.array([h[0] + qx, h[1] + c1 * y - s1 * qz, h[2] + s1 * y + c1 * qz])


def jacobian(phi, leg: LegParams) -> np.ndarray:
    """Analytic ``d forward_kinematics / d phi`` (columns per joint)."""
    c1, s1 = math.cos(phi[0]), math.sin(phi[0])
    qx, qz = _sagittal(phi[1], phi[2], leg)
    b = phi[1] + phi[2]
    sx, sz = -leg.l3 * math.sin(b), -leg.l3 * math.cos(b)
    y = leg.side * leg.l1
    # abduction: e_x x (foot - hip); pitch joints: e_y x (sagittal chain), rotated by Rx
    return np.array([[0.0, qz, sz],
                     [-(s1 * y + c1 * qz), s1 * qx, s1 * sx],
                     [c1 * y - s1 * qz, -c1 * qx, -c1 * sx]])


def rotational_jacobian(phi) -> np.ndarray:
    """Joint axes in the body frame; maps joint rates to foot angular velocity."""
    c1, s1 = math.cos(phi[0]), math.sin(phi[0])
    return np.array([[1.0, 0.0, 0.0],
                     [0.0, c1, c1],
                     [0.0, s1, s1]])


def foot_orientation(phi) -> np.ndarray:
    return rot_x(phi[0]) @ rot_y(phi[1]) @ rot_y(phi[2])


def foot_angular_velocity(phi, dphi, body_omega, R_body) -> np.ndarray:
    """World-frame angular velocity of the foot link."""
    return R_body @ (np.asarray(body_omega, dtype=float) + rotational_jacobian(phi) @ dphi)


def rolling_velocity(omega_f, r) -> np.ndarray:
    """Contact velocity of a rolling foot, ``omega_f x r``."""
    return cross(omega_f, r)


def contact_radius(foot_radius: float, normal=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Vector from the foot-sphere center to the contact point."""
    n = np.asarray(normal, dtype=float)
    return -foot_radius * n / np.linalg.norm(n)


def inverse_kinematics(foot, leg: LegParams, t=None) -> np.ndarray:
    """Joint angles reaching ``foot`` (body frame) on the knee-backward branch.

    Raises
    ------
    WorkspaceError
        When the target is outside the leg's reach.
    """
    h = leg.hip_offset
    rx, ry, rz = foot[0] - h[0], foot[1] - h[1], foot[2] - h[2]
    yz2 = ry * ry + rz * rz
    if yz2 < leg.l1 ** 2:
        raise WorkspaceError(f"foot target out of workspace for {_where(leg, t)}: "
                             "inside the abduction radius", leg=leg.index, t=t)
    qz = -math.sqrt(yz2 - leg.l1 ** 2)
    phi1 = math.atan2(rz, ry) - math.atan2(qz, leg.side * leg.l1)
    phi1 = (phi1 + math.pi) % (2.0 * math.pi) - math.pi
    X, Z = -rx, -qz
    D = (X * X + Z * Z - leg.l2 ** 2 - leg.l3 ** 2) / (2.0 * leg.l2 * leg.l3)
    if D > 1.0 + 1e-9 or D < -1.0 - 1e-9:
        raise WorkspaceError(f"foot target out of workspace for {_where(leg, t)}: "
                             f"distance {math.hypot(X, Z):.4f} m not reachable",
                             leg=leg.index, t=t)
    phi3 = -math.acos(min(1.0, max(-1.0, D)))
    phi2 = math.atan2(X, Z) - math.atan2(leg.l3 * math.sin(phi3), leg.l2 + leg.l3 * math.cos(phi3))
    return np.array([phi1, phi2, phi3])


def _where(leg, t):
    return f"leg {leg.index + 1} ({leg.name})" + ("" if t is None else f" at t={t:.6f} s")


def joint_rates(phi, foot_velocity_body, leg: LegParams) -> np.ndarray:
    """Joint rates producing a body-frame foot velocity."""
    return np.linalg.solve(jacobian(phi, leg), foot_velocity_body)


__all__ = [
    "LEG_NAMES", "LegParams", "WorkspaceError", "default_legs", "forward_kinematics",
    "jacobian", "rotational_jacobian", "foot_orientation", "foot_angular_velocity",
    "rolling_velocity", "contact_radius", "inverse_kinematics", "joint_rates", "skew",
]
