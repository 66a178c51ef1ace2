"""CSV serialization of simulated logs and estimator outputs.

Every file starts with one header row of ``name[unit]`` columns. Numbers are
written with 17 significant digits so a write/read round trip is exact.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ScenarioConfig, save_scenario, load_scenario
from .kinematics import LEG_NAMES
from .sim import GroundTruth, ImuLog, LegLog, SimulatedLog
from .so3 import from_quaternion, to_quaternion

FMT = "%.17g"
N_LEGS = len(LEG_NAMES)

IMU_COLUMNS = ["t[s]", "wx[rad/s]", "wy[rad/s]", "wz[rad/s]",
               "ax[m/s^2]", "ay[m/s^2]", "az[m/s^2]"]
LEG_COLUMNS = ["t[s]"] + [f"{leg}_{c}" for leg in LEG_NAMES for c in
                          ("q1[rad]", "q2[rad]", "q3[rad]", "dq1[rad/s]", "dq2[rad/s]",
                           "dq3[rad/s]", "contact[0/1]")]
POSE_COLUMNS = ["t[s]", "px[m]", "py[m]", "pz[m]", "qw[-]", "qx[-]", "qy[-]", "qz[-]",
                "vx[m/s]", "vy[m/s]", "vz[m/s]"]
TRUTH_COLUMNS = POSE_COLUMNS + [f"{leg}_{c}" for leg in LEG_NAMES for c in
                                ("fx[m]", "fy[m]", "fz[m]", "vfx[m/s]", "vfy[m/s]",
                                 "vfz[m/s]", "slip[0/1]")]

IMU_FILE, LEGS_FILE, TRUTH_FILE = "imu.csv", "legs.csv", "truth.csv"
SCENARIO_FILE, SLIP_FILE = "scenario.json", "slip_windows.json"


class LogFormatError(ValueError):
    pass


def write_table(path, columns, data):
    path = Path(path)
    data = np.asarray(data, dtype=float).reshape(-1, len(columns))
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(columns) + "\n")
            if len(data):
                np.savetxt(fh, data, fmt=FMT, delimiter=",")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_table(path, columns=None):
    """Returns ``(header, data)``; checks the header when ``columns`` is given."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split(",")
            body = fh.read()
        if body.strip():
            data = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)
        else:
            data = np.zeros((0, len(header)))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise LogFormatError(f"{path}: {exc}") from exc
    if columns is not None and header != list(columns):
        raise LogFormatError(f"{path}: unexpected header {header[:4]}...")
    if data.shape[1] != len(header):
        raise LogFormatError(f"{path}: {data.shape[1]} columns, header has {len(header)}")
    return header, data


def _quats(G):
    return np.array([to_quaternion(R) for R in G]).reshape(-1, 4)


def _rotations(q):
    return np.array([from_quaternion(x) for x in q]).reshape(-1, 3, 3)


def pose_table(t, p, G, v):
    return np.column_stack([t, p, _quats(G), v]) if len(t) else np.zeros((0, len(POSE_COLUMNS)))


def imu_table(imu: ImuLog):
    return np.column_stack([imu.t, imu.gyro, imu.accel]) if len(imu) else np.zeros((0, 7))


def legs_table(legs: LegLog):
    M = len(legs)
    block = np.concatenate([legs.q, legs.dq, legs.contact[:, :, None].astype(float)], axis=2)
    return np.column_stack([legs.t, block.reshape(M, -1)]) if M else np.zeros((0, len(LEG_COLUMNS)))


def truth_table(truth: GroundTruth):
    N = len(truth)
    if N == 0:
        return np.zeros((0, len(TRUTH_COLUMNS)))
    feet = np.concatenate([truth.f, truth.vf, truth.slip[:, :, None].astype(float)], axis=2)
    return np.column_stack([pose_table(truth.t, truth.p, truth.G, truth.v), feet.reshape(N, -1)])


def write_log(log: SimulatedLog, out_dir) -> dict:
    """Writes the three CSVs, the scenario echo and the slip-window sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in (IMU_FILE, LEGS_FILE, TRUTH_FILE, SCENARIO_FILE, SLIP_FILE)}
    write_table(paths[IMU_FILE], IMU_COLUMNS, imu_table(log.imu))
    write_table(paths[LEGS_FILE], LEG_COLUMNS, legs_table(log.legs))
    write_table(paths[TRUTH_FILE], TRUTH_COLUMNS, truth_table(log.truth))
    save_scenario(log.config, paths[SCENARIO_FILE])
    windows = [{"t_start": w.t_start, "t_end": w.t_end, "legs": list(w.legs)}
               for w in log.config.slip_windows]
    paths[SLIP_FILE].write_text(json.dumps({"slip_windows": windows}, indent=2) + "\n", encoding="utf-8")
    return paths


@dataclass
class LoadedLog:
    config: ScenarioConfig | None
    imu: ImuLog
    legs: LegLog
    truth: GroundTruth | None


def read_imu(path) -> ImuLog:
    _, d = read_table(path, IMU_COLUMNS)
    return ImuLog(d[:, 0].copy(), d[:, 1:4].copy(), d[:, 4:7].copy())


def read_legs(path) -> LegLog:
    _, d = read_table(path, LEG_COLUMNS)
    block = d[:, 1:].reshape(len(d), N_LEGS, 7)
    return LegLog(d[:, 0].copy(), block[:, :, 0:3].copy(), block[:, :, 3:6].copy(),
                  block[:, :, 6] > 0.5)


def read_pose(path):
    """``(t, p, G, v)`` from a truth or estimate CSV (first pose columns)."""
    header, d = read_table(path)
    if header[:len(POSE_COLUMNS)] != POSE_COLUMNS:
        raise LogFormatError(f"{path}: not a pose table")
    return d[:, 0].copy(), d[:, 1:4].copy(), _rotations(d[:, 4:8]), d[:, 8:11].copy()


def read_truth(path) -> GroundTruth:
    _, d = read_table(path, TRUTH_COLUMNS)
    N = len(d)
    feet = d[:, len(POSE_COLUMNS):].reshape(N, N_LEGS, 7)
    nan3 = np.full((N, 3), np.nan)
    return GroundTruth(d[:, 0].copy(), d[:, 1:4].copy(), d[:, 8:11].copy(), nan3,
                       _rotations(d[:, 4:8]), nan3.copy(), feet[:, :, 0:3].copy(),
                       feet[:, :, 3:6].copy(), np.zeros((N, N_LEGS), bool), feet[:, :, 6] > 0.5)


def read_log(log_dir, need_truth: bool = True) -> LoadedLog:
    d = Path(log_dir)
    for name in (IMU_FILE, LEGS_FILE) + ((TRUTH_FILE,) if need_truth else ()):
        if not (d / name).is_file():
            raise FileNotFoundError(f"missing log file {d / name}")
    cfg = load_scenario(d / SCENARIO_FILE) if (d / SCENARIO_FILE).is_file() else None
    truth = read_truth(d / TRUTH_FILE) if (d / TRUTH_FILE).is_file() else None
    legs = read_legs(d / LEGS_FILE)
    if truth is not None and len(truth):
        # truth.csv holds no contact column; rebuild it from the leg stream
        contact = np.zeros((len(truth), N_LEGS), bool)
        k = np.searchsorted(legs.t, truth.t, side="right") - 1
        ok = k >= 0
        contact[ok] = legs.contact[k[ok]]
        truth.contact = contact
    return LoadedLog(cfg, read_imu(d / IMU_FILE), legs, truth)
