"""Dataset interchange format, persistence of run outputs, and the readers
and writers behind the CLI.

A dataset directory contains a manifest.json naming the streams:

    manifest.json        required keys: frame_convention ("body"|"radar"),
                         frames_index, imu, initial_trajectory, ego_velocity,
                         extrinsics; optional: loop_candidates, name
    frames.csv           frame_id,timestamp,points_path   (one row per frame)
    points/<...>.ply     per-frame point clouds (ascii PLY, x y z)
    imu.csv              t,gx,gy,gz,ax,ay,az
    ego.csv              t,vx,vy,vz,cxx,cyy,czz,cxy,cxz,cyz,wx,wy,wz
    trajectory_init.txt  "timestamp tx ty tz qx qy qz qw" per line
    loops.txt            "query_id match_id score" per line
    extrinsics.json      radar_in_body {translation, quaternion_xyzw}, gravity_w

Units are seconds, meters, radians throughout; quaternions are x,y,z,w.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .core import Extrinsics, Pose, PoseTrajectory, RadarFrame, Rotation
from .errors import DataError

REQUIRED_MANIFEST_KEYS = (
    "frame_convention",
    "frames_index",
    "imu",
    "initial_trajectory",
    "ego_velocity",
    "extrinsics",
)


@dataclass
class Dataset:
    """Validated in-memory dataset; initial poses are body-in-world."""

    root: Path
    name: str
    frames: list[RadarFrame]
    imu_times: np.ndarray
    imu_gyro: np.ndarray
    imu_accel: np.ndarray
    initial: PoseTrajectory
    loop_candidates: list[tuple[int, int, float]]
    ext: Extrinsics
    warnings: list[str] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return len(self.frames)


# ----------------------------- point clouds ------------------------------ #


def write_ply(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property double x\nproperty double y\nproperty double z\n")
        f.write("end_header\n")
        for p in points:
            f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def read_ply(path) -> np.ndarray:
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise DataError(f"{path}: not a PLY file (first line {line!r})")
        n = None
        props = []
        while True:
            line = f.readline()
            if not line:
                raise DataError(f"{path}: unexpected end of PLY header")
            line = line.strip()
            if line.startswith("format"):
                if "ascii" not in line:
                    raise DataError(f"{path}: only ascii PLY is supported")
            elif line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("element") and "vertex" not in line:
                raise DataError(f"{path}: unsupported PLY element '{line}'")
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        if n is None:
            raise DataError(f"{path}: PLY header missing vertex count")
        for axis in ("x", "y", "z"):
            if axis not in props:
                raise DataError(f"{path}: PLY missing '{axis}' property")
        cols = [props.index(a) for a in ("x", "y", "z")]
        data = np.loadtxt(f, dtype=np.float64, max_rows=n, ndmin=2) if n else np.zeros((0, len(props)))
        if data.shape[0] != n:
            raise DataError(f"{path}: expected {n} vertices, found {data.shape[0]}")
        return data[:, cols] if n else np.zeros((0, 3))


# ----------------------------- trajectories ------------------------------ #


def write_trajectory(path, trajectory: PoseTrajectory) -> None:
    """One line per pose: timestamp tx ty tz qx qy qz qw (full precision)."""
    from .core import quat_xyzw_from_matrix_batch

    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        if len(trajectory):
            quats = quat_xyzw_from_matrix_batch(trajectory.rotations)
            for t, p, q in zip(trajectory.times, trajectory.positions, quats):
                f.write(
                    f"{t:.17g} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g} "
                    f"{q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g}\n"
                )


def read_trajectory(path) -> PoseTrajectory:
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DataError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            try:
                rows.append([float(x) for x in parts])
            except ValueError as e:
                raise DataError(f"{path}:{ln}: {e}") from e
    if not rows:
        raise DataError(f"{path}: empty trajectory")
    arr = np.asarray(rows)
    times = arr[:, 0]
    if np.any(np.diff(times) <= 0):
        bad = int(np.argmax(np.diff(times) <= 0))
        raise DataError(f"{path}: timestamps not strictly increasing near row {bad + 2}")
    poses = [Pose(Rotation(arr[i, 4:8]), arr[i, 1:4]) for i in range(len(arr))]
    return PoseTrajectory.from_poses(times, poses)


# ----------------------------- extrinsics -------------------------------- #


def write_extrinsics(path, ext: Extrinsics) -> None:
    d = {
        "radar_in_body": {
            "translation": ext.radar_in_body.translation.tolist(),
            "quaternion_xyzw": ext.radar_in_body.rotation.quat_xyzw.tolist(),
        },
        "gravity_w": ext.gravity_w.tolist(),
    }
    with open(path, "w") as f:
        json.dump(d, f, indent=2)
        f.write("\n")


def read_extrinsics(path) -> Extrinsics:
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}") from e
    try:
        rib = d["radar_in_body"]
        pose = Pose(Rotation(np.asarray(rib["quaternion_xyzw"], dtype=np.float64)),
                    np.asarray(rib["translation"], dtype=np.float64))
        gravity = np.asarray(d.get("gravity_w", [0.0, 0.0, -9.81]), dtype=np.float64)
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: missing or malformed field: {e}") from e
    return Extrinsics(pose, gravity)


# ----------------------------- dataset load ------------------------------ #


def _load_csv(path, expected_cols: int, what: str) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as e:
        raise DataError(f"{path}: cannot parse {what}: {e}") from e
    if data.size == 0:
        raise DataError(f"{path}: {what} is empty")
    if data.shape[1] != expected_cols:
        raise DataError(f"{path}: {what} needs {expected_cols} columns, found {data.shape[1]}")
    return data


def load_dataset(path) -> Dataset:
    """Parse and validate a dataset directory; raises DataError with an
    itemized message on any schema violation."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{root}: manifest.json not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest_path}: invalid JSON: {e}") from e

    missing = [k for k in REQUIRED_MANIFEST_KEYS if k not in manifest]
    if missing:
        raise DataError(f"{manifest_path}: missing required keys: {missing}")
    convention = manifest["frame_convention"]
    if convention not in ("body", "radar"):
        raise DataError(f"{manifest_path}: frame_convention must be 'body' or 'radar', got {convention!r}")

    warnings: list[str] = []
    ext = read_extrinsics(root / manifest["extrinsics"])

    # frame index
    index_path = root / manifest["frames_index"]
    if not index_path.exists():
        raise DataError(f"{index_path}: frames index not found")
    frame_rows = []
    with open(index_path) as f:
        header = f.readline()
        if "frame_id" not in header:
            raise DataError(f"{index_path}:1: expected header with frame_id,timestamp,points_path")
        for ln, line in enumerate(f, 2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise DataError(f"{index_path}:{ln}: expected 3 fields, got {len(parts)}")
            frame_rows.append((int(parts[0]), float(parts[1]), parts[2].strip()))
    if not frame_rows:
        raise DataError(f"{index_path}: no frames listed")
    t_prev = -np.inf
    prev_id = None
    for fid, ts, _ in frame_rows:
        if prev_id is not None and fid <= prev_id:
            raise DataError(f"{index_path}: frame ids not strictly increasing at id {fid}")
        if ts <= t_prev:
            raise DataError(f"{index_path}: timestamps not strictly increasing at frame {fid}")
        prev_id, t_prev = fid, ts

    missing_files = [fid for fid, _, rel in frame_rows if not (root / rel).exists()]
    if missing_files:
        raise DataError(f"{root}: point files missing for frame ids {missing_files[:20]}")

    # ego stream
    ego = _load_csv(root / manifest["ego_velocity"], 13, "ego-velocity stream")
    if np.any(np.diff(ego[:, 0]) <= 0):
        raise DataError(f"{root / manifest['ego_velocity']}: timestamps not strictly increasing")

    # imu stream
    imu = _load_csv(root / manifest["imu"], 7, "IMU stream")
    if np.any(np.diff(imu[:, 0]) <= 0):
        raise DataError(f"{root / manifest['imu']}: timestamps not strictly increasing")

    # frames + per-frame ego association
    frames = []
    ego_times = ego[:, 0]
    for fid, ts, rel in frame_rows:
        pts = read_ply(root / rel)
        k = int(np.argmin(np.abs(ego_times - ts)))
        if abs(ego_times[k] - ts) < 0.01:
            row = ego[k]
            cov = np.array(
                [
                    [row[4], row[7], row[8]],
                    [row[7], row[5], row[9]],
                    [row[8], row[9], row[6]],
                ]
            )
            frames.append(RadarFrame(fid, ts, pts, row[1:4], cov, row[10:13]))
        else:
            warnings.append(f"frame {fid}: no ego-velocity sample within tolerance; factor skipped")
            frames.append(RadarFrame(fid, ts, pts))

    # initial trajectory
    initial = read_trajectory(root / manifest["initial_trajectory"])
    if len(initial) != len(frames):
        raise DataError(
            f"{root}: initial trajectory has {len(initial)} poses for {len(frames)} frames"
        )
    frame_times = np.array([f.timestamp for f in frames])
    if np.max(np.abs(initial.times - frame_times)) > 1e-6:
        raise DataError(f"{root}: initial trajectory timestamps do not match the frame index")
    if convention == "radar":
        inv = ext.radar_in_body.inverse()
        poses = [initial.pose(i).compose(inv) for i in range(len(initial))]
        initial = PoseTrajectory.from_poses(initial.times, poses)

    # loop candidates (optional)
    loop_candidates: list[tuple[int, int, float]] = []
    if manifest.get("loop_candidates"):
        lc_path = root / manifest["loop_candidates"]
        if not lc_path.exists():
            raise DataError(f"{lc_path}: loop candidate file named in manifest but missing")
        loop_candidates = read_loop_candidates(lc_path)
        ids = {f.frame_id for f in frames}
        for q, m, _ in loop_candidates:
            if q == m:
                raise DataError(f"{lc_path}: loop candidate pairs a frame with itself ({q})")
            if q not in ids or m not in ids:
                raise DataError(f"{lc_path}: loop candidate ({q},{m}) references unknown frames")

    return Dataset(
        root,
        manifest.get("name", root.name),
        frames,
        imu[:, 0],
        imu[:, 1:4],
        imu[:, 4:7],
        initial,
        loop_candidates,
        ext,
        warnings,
    )


def read_loop_candidates(path) -> list[tuple[int, int, float]]:
    out = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{ln}: expected 'query_id match_id score'")
            out.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return out


# ----------------------------- dataset write ----------------------------- #


def write_dataset(out_dir, sim_dataset) -> Path:
    """Serialize a simulated dataset (sim.SimDataset) in the interchange
    layout; also writes the ground-truth trajectory alongside for evaluation."""
    root = Path(out_dir)
    (root / "points").mkdir(parents=True, exist_ok=True)

    with open(root / "frames.csv", "w") as f:
        f.write("frame_id,timestamp,points_path\n")
        for fr in sim_dataset.frames:
            rel = f"points/{fr.frame_id:06d}.ply"
            write_ply(root / rel, fr.points)
            f.write(f"{fr.frame_id},{fr.timestamp:.17g},{rel}\n")

    with open(root / "imu.csv", "w") as f:
        f.write("t,gx,gy,gz,ax,ay,az\n")
        for s in sim_dataset.imu:
            g, a = s.gyro, s.accel
            f.write(
                f"{s.t:.17g},{g[0]:.17g},{g[1]:.17g},{g[2]:.17g},"
                f"{a[0]:.17g},{a[1]:.17g},{a[2]:.17g}\n"
            )

    with open(root / "ego.csv", "w") as f:
        f.write("t,vx,vy,vz,cxx,cyy,czz,cxy,cxz,cyz,wx,wy,wz\n")
        for fr in sim_dataset.frames:
            if fr.ego_velocity is None:
                continue
            v, c, w = fr.ego_velocity, fr.ego_covariance, fr.omega_body_raw
            f.write(
                f"{fr.timestamp:.17g},{v[0]:.17g},{v[1]:.17g},{v[2]:.17g},"
                f"{c[0, 0]:.17g},{c[1, 1]:.17g},{c[2, 2]:.17g},"
                f"{c[0, 1]:.17g},{c[0, 2]:.17g},{c[1, 2]:.17g},"
                f"{w[0]:.17g},{w[1]:.17g},{w[2]:.17g}\n"
            )

    write_trajectory(root / "trajectory_init.txt", sim_dataset.init_trajectory())
    write_trajectory(root / "trajectory_gt.txt", sim_dataset.gt_trajectory())
    write_extrinsics(root / "extrinsics.json", sim_dataset.ext)

    manifest = {
        "name": f"sim-{sim_dataset.scenario.kind}-seed{sim_dataset.scenario.seed}",
        "frame_convention": "body",
        "frames_index": "frames.csv",
        "imu": "imu.csv",
        "initial_trajectory": "trajectory_init.txt",
        "ego_velocity": "ego.csv",
        "extrinsics": "extrinsics.json",
    }
    if sim_dataset.loop_candidates:
        with open(root / "loops.txt", "w") as f:
            f.write("# query_id match_id score\n")
            for q, m, s in sim_dataset.loop_candidates:
                f.write(f"{q} {m} {s:.6g}\n")
        manifest["loop_candidates"] = "loops.txt"
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return root


# ----------------------------- run outputs ------------------------------- #


def write_keyframe_states(path, states) -> None:
    with open(path, "w") as f:
        f.write("# frame_id timestamp tx ty tz qx qy qz qw vx vy vz bgx bgy bgz bax bay baz\n")
        for s in states:
            p = s.pose.translation
            q = s.pose.rotation.quat_xyzw
            v, bg, ba = s.velocity_w, s.bias_gyro, s.bias_accel
            vals = [s.timestamp, *p, *q, *v, *bg, *ba]
            f.write(f"{s.frame_id} " + " ".join(f"{x:.17g}" for x in vals) + "\n")


def write_outputs(out_dir, trajectory: PoseTrajectory, keyframe_states, map_points, reports: dict,
                  config: RunConfig | None = None) -> Path:
    """Persist the standard artifact set of a pipeline run."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    write_trajectory(root / "trajectory.txt", trajectory)
    write_keyframe_states(root / "keyframes.txt", keyframe_states)
    write_ply(root / "map.ply", map_points)
    with open(root / "report.json", "w") as f:
        json.dump(reports, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    if config is not None:
        config.save(root / "config.json")
    return root


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_metric_report(path, report) -> None:
    with open(path, "w") as f:
        json.dump(report.as_dict(), f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
