"""True pose errors against a ground-truth record (synthetic data only)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import NoGroundTruth
from ..geometry import distance


@dataclass
class PoseErrors:
    extrinsic: dict  # sensor -> (translation m, rotation deg)
    ate_rms_m: float
    rotation_rms_deg: float

    @property
    def mean_extrinsic_m(self) -> float:
        vals = [v[0] for v in self.extrinsic.values()]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def mean_extrinsic_deg(self) -> float:
        vals = [v[1] for v in self.extrinsic.values()]
        return float(np.mean(vals)) if vals else 0.0

    def as_dict(self) -> dict:
        return {
            "extrinsic": {s: {"translation_m": t, "rotation_deg": r} for s, (t, r) in self.extrinsic.items()},
            "ate_rms_m": self.ate_rms_m,
            "rotation_rms_deg": self.rotation_rms_deg,
        }


def umeyama(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation (no scale) minimizing ``sum |R src + t - dst|^2``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / src.shape[0]
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    return r, mu_d - r @ mu_s


def true_pose_errors(rig, trajectory, gt) -> PoseErrors:
    """Extrinsic errors per non-reference sensor and trajectory errors after rigid alignment.

    Extrinsics are expressed relative to the reference sensor on both sides, so
    the gauge is already fixed. The candidate trajectory is evaluated at the
    ground-truth knot times.
    """
    if gt is None:
        raise NoGroundTruth("no ground-truth record available")
    ext = {}
    for s in gt.rig.ids:
        if s == gt.rig.reference:
            continue
        dt, dr = distance(rig.extrinsic(s), gt.rig.extrinsic(s))
        ext[s] = (float(dt), float(np.degrees(dr)))
    times = gt.trajectory.times
    cand = trajectory.matrices(times)
    ref = gt.trajectory.matrices(times)
    r, t = umeyama(cand[:, :3, 3], ref[:, :3, 3])
    aligned_t = cand[:, :3, 3] @ r.T + t
    ate = float(np.sqrt(np.mean(np.sum((aligned_t - ref[:, :3, 3]) ** 2, axis=1))))
    rel = np.einsum("nji,jk,nkl->nil", ref[:, :3, :3], r, cand[:, :3, :3])
    ang = Rotation.from_matrix(rel).magnitude()
    rot = float(np.degrees(np.sqrt(np.mean(ang**2))))
    return PoseErrors(ext, ate, rot)
