"""On-disk dataset layout.

::

    <scene>/rig.json
    <scene>/trajectory.csv            t,tx,ty,tz,qw,qx,qy,qz (17 significant digits)
    <scene>/tracks.csv                track,sensor,t,u,v (optional keypoint tracks)
    <scene>/frames/<sensor>/<t>.ppm   P6 8-bit camera image
    <scene>/frames/<sensor>/<t>.mask.pgm   P5 0/255 dynamic mask (optional)
    <scene>/frames/<sensor>/<t>.lpc   "LPC1", u32 count, count*3 float32 (little endian)
    <scene>/gt/rig.json, gt/trajectory.csv, gt/noise.json   (synthetic only)

A collection is a directory whose immediate subdirectories are scenes.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..geometry import Pose, Trajectory
from ..rig import CameraIntrinsics, RigCalibration, Sensor
from .types import GroundTruthRecord, KeypointTrack, SceneDataset, SensorFrame

FORMAT_VERSION = 1
LPC_MAGIC = b"LPC1"
TRAJ_HEADER = ["t", "tx", "ty", "tz", "qw", "qx", "qy", "qz"]


def _g17(x: float) -> str:
    return format(float(x), ".17g")


def time_key(t: float) -> str:
    """File stem for a timestamp; parses back to the identical float."""
    return repr(float(t))


# --------------------------------------------------------------------------
# images and scans
# --------------------------------------------------------------------------


def quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    img = quantize(image)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    m = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = m.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(m.tobytes())


def _read_netpbm(path, magic: bytes) -> tuple[np.ndarray, int, int]:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} netpbm file")
    w, h, maxval = (int(x) for x in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    return np.frombuffer(data, dtype=np.uint8, offset=pos + 1), w, h


def read_ppm(path) -> np.ndarray:
    raw, w, h = _read_netpbm(path, b"P6")
    return (raw[: w * h * 3].reshape(h, w, 3).astype(np.float32)) / np.float32(255.0)


def read_pgm(path) -> np.ndarray:
    raw, w, h = _read_netpbm(path, b"P5")
    return raw[: w * h].reshape(h, w) > 127


def write_lpc(path, points: np.ndarray) -> None:
    pts = np.ascontiguousarray(np.asarray(points).astype("<f4").reshape(-1, 3))
    with open(path, "wb") as f:
        f.write(LPC_MAGIC)
        f.write(struct.pack("<I", pts.shape[0]))
        f.write(pts.tobytes())


def read_lpc(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != LPC_MAGIC:
        raise ValueError(f"{path}: bad LPC magic")
    (n,) = struct.unpack("<I", data[4:8])
    if len(data) != 8 + 12 * n:
        raise ValueError(f"{path}: truncated point cloud")
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(n, 3).astype(np.float32)


# --------------------------------------------------------------------------
# rig / trajectory / tracks
# --------------------------------------------------------------------------


def _pose_dict(p: Pose) -> dict:
    return {"q": [float(x) for x in p.rotation], "t": [float(x) for x in p.translation]}


def _pose_from(d: dict) -> Pose:
    return Pose(d["q"], d["t"])


def rig_to_dict(rig: RigCalibration) -> dict:
    sensors = []
    for s in rig.sensors:
        e = {"id": s.id, "kind": s.kind, "extrinsic": _pose_dict(s.extrinsic)}
        if s.intrinsics is not None:
            i = s.intrinsics
            e["intrinsics"] = {"fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy, "width": i.width, "height": i.height}
        sensors.append(e)
    return {"version": FORMAT_VERSION, "reference": rig.reference, "sensors": sensors}


def rig_from_dict(d: dict) -> RigCalibration:
    sensors = []
    for e in d["sensors"]:
        intr = None
        if e.get("intrinsics") is not None:
            i = e["intrinsics"]
            intr = CameraIntrinsics(float(i["fx"]), float(i["fy"]), float(i["cx"]), float(i["cy"]),
                                    int(i["width"]), int(i["height"]))
        sensors.append(Sensor(e["id"], e["kind"], _pose_from(e["extrinsic"]), intr))
    return RigCalibration(tuple(sensors), d["reference"])


def write_rig(path, rig: RigCalibration, extra: dict | None = None) -> None:
    d = rig_to_dict(rig)
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2) + "\n")


def read_rig(path) -> tuple[RigCalibration, dict]:
    d = json.loads(Path(path).read_text())
    return rig_from_dict(d), d


def write_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRAJ_HEADER)
        for t, p, q in zip(traj.times, traj.translations, traj.rotations):
            w.writerow([_g17(t), *map(_g17, p), *map(_g17, q)])


def read_trajectory(path, reference: str) -> Trajectory:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != TRAJ_HEADER:
        raise ValueError(f"{path}: expected header {','.join(TRAJ_HEADER)}")
    arr = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(-1, 8)
    return Trajectory(arr[:, 0], arr[:, 4:8], arr[:, 1:4], reference)


def write_tracks(path, tracks) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["track", "sensor", "t", "u", "v"])
        for tr in tracks:
            for sid, t, u, v in tr.observations:
                w.writerow([tr.track_id, sid, _g17(t), _g17(u), _g17(v)])


def read_tracks(path) -> list[KeypointTrack]:
    groups: dict[int, list] = {}
    with open(path, newline="") as f:
        r = csv.reader(f)
        next(r)
        for tid, sid, t, u, v in r:
            groups.setdefault(int(tid), []).append((sid, float(t), float(u), float(v)))
    return [KeypointTrack(k, tuple(v)) for k, v in groups.items() if len(v) >= 2]


def write_noise(path, rec: GroundTruthRecord) -> None:
    d = {
        "version": FORMAT_VERSION,
        "ext_noise": {s: _pose_dict(p) for s, p in rec.ext_noise.items()},
        "traj_noise": [_pose_dict(p) for p in rec.traj_noise],
    }
    Path(path).write_text(json.dumps(d, indent=2) + "\n")


# --------------------------------------------------------------------------
# whole scenes
# --------------------------------------------------------------------------


def write_poses(path, rig: RigCalibration, traj: Trajectory, extra: dict | None = None) -> None:
    """Only ``rig.json`` and ``trajectory.csv`` (a candidate pose set)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_rig(path / "rig.json", rig, extra)
    write_trajectory(path / "trajectory.csv", traj)


def write_dataset(ds: SceneDataset, path, gt: GroundTruthRecord | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_poses(path, ds.rig, ds.trajectory, {"provenance": ds.provenance, "name": ds.name})
    if ds.tracks:
        write_tracks(path / "tracks.csv", ds.tracks)
    for sid, lst in ds.frames.items():
        d = path / "frames" / sid
        d.mkdir(parents=True, exist_ok=True)
        for f in lst:
            stem = time_key(f.timestamp)
            if f.kind == "camera":
                write_ppm(d / f"{stem}.ppm", f.image)
                if f.mask is not None:
                    write_pgm(d / f"{stem}.mask.pgm", f.mask)
            else:
                write_lpc(d / f"{stem}.lpc", f.points)
    if gt is not None:
        g = path / "gt"
        write_poses(g, gt.rig, gt.trajectory)
        write_noise(g / "noise.json", gt)
    elif ds.provenance == "synthetic-gt":
        write_poses(path / "gt", ds.rig, ds.trajectory)
    return path


def read_poses(path) -> tuple[RigCalibration, Trajectory]:
    path = Path(path)
    rig, _ = read_rig(path / "rig.json")
    return rig, read_trajectory(path / "trajectory.csv", rig.reference)


def read_dataset(path, name: str | None = None) -> SceneDataset:
    path = Path(path)
    rig, meta = read_rig(path / "rig.json")
    traj = read_trajectory(path / "trajectory.csv", rig.reference)
    frames: dict[str, list[SensorFrame]] = {}
    fdir = path / "frames"
    for sid in rig.ids:
        d = fdir / sid
        if not d.is_dir():
            continue
        lst = []
        kind = rig.sensor(sid).kind
        for entry in sorted(os.listdir(d)):
            if kind == "camera" and entry.endswith(".ppm"):
                stem = entry[: -len(".ppm")]
                mask_path = d / f"{stem}.mask.pgm"
                mask = read_pgm(mask_path) if mask_path.exists() else None
                lst.append(SensorFrame(sid, float(stem), image=read_ppm(d / entry), mask=mask))
            elif kind == "lidar" and entry.endswith(".lpc"):
                lst.append(SensorFrame(sid, float(entry[: -len(".lpc")]), points=read_lpc(d / entry)))
        frames[sid] = lst
    tracks = read_tracks(path / "tracks.csv") if (path / "tracks.csv").exists() else []
    return SceneDataset(rig, traj, frames, meta.get("provenance", "external"),
                        name or meta.get("name") or path.name, tracks)


def read_ground_truth(path) -> GroundTruthRecord | None:
    """The ``gt/`` record of a scene directory, or None when absent."""
    g = Path(path) / "gt"
    if not (g / "rig.json").exists():
        return None
    rig, traj = read_poses(g)
    rec = GroundTruthRecord(rig, traj)
    if (g / "noise.json").exists():
        d = json.loads((g / "noise.json").read_text())
        rec.ext_noise = {s: _pose_from(p) for s, p in d["ext_noise"].items()}
        rec.traj_noise = [_pose_from(p) for p in d["traj_noise"]]
    return rec


def is_scene_dir(path) -> bool:
    return (Path(path) / "rig.json").is_file()


def scene_dirs(path) -> list[Path]:
    """The scene itself, or the sorted scene subdirectories of a collection."""
    path = Path(path)
    if is_scene_dir(path):
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f"{path} is not a directory")
    subs = sorted(p for p in path.iterdir() if p.is_dir() and is_scene_dir(p))
    if not subs:
        raise FileNotFoundError(f"{path} holds no scene (rig.json) directories")
    return subs


def read_collection(path) -> list[SceneDataset]:
    return [read_dataset(p) for p in scene_dirs(path)]
