"""Learnable pose corrections.

Two kinds of parameters refine a rig:

* an extrinsic correction per sensor, a 6-vector ``(tx, ty, tz, rx, ry, rz)``
  decoded to a rigid transform via the exponential map and right-composed onto
  the sensor extrinsic;
* a trajectory correction per scene, a small MLP of time whose 6-vector
  output is decoded the same way and right-composed onto the reference pose.

Gradients are analytic. The upstream gradient of a world pose is the 3x4
matrix ``dL/d[R | t]`` of ``T_world<-sensor``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyList, TimeOutOfRange
from .geometry import Pose, quat_to_matrix, rodrigues_exp, rodrigues_exp_batch

N_FREQS = 6
HIDDEN = (64, 64)


def decode_correction(v) -> Pose:
    """6-vector (translation m, axis-angle rad) to a Pose."""
    v = np.asarray(v, dtype=float).reshape(6)
    return Pose(rodrigues_exp(v[3:]), v[:3])


def decode_matrices(v) -> np.ndarray:
    """Batched :func:`decode_correction` returning (N, 4, 4) matrices."""
    v = np.asarray(v, dtype=float).reshape(-1, 6)
    m = np.zeros((v.shape[0], 4, 4))
    m[:, :3, :3] = quat_to_matrix(rodrigues_exp_batch(v[:, 3:]))
    m[:, :3, 3] = v[:, :3]
    m[:, 3, 3] = 1.0
    return m


def _quat_jacobian(omega: np.ndarray) -> np.ndarray:
    """d q / d omega for q = exp(omega), shape (N, 4, 3)."""
    theta2 = np.sum(omega * omega, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < 1e-2
    safe = np.where(small, 1.0, theta)
    half = 0.5 * safe
    s = np.where(small, 0.5 - theta2 / 48.0 + theta2 * theta2 / 3840.0, np.sin(half) / safe)
    # k = (ds/dtheta) / theta
    k = np.where(small, -1.0 / 24.0 + theta2 / 960.0, (half * np.cos(half) - np.sin(half)) / safe**3)
    n = omega.shape[0]
    jac = np.empty((n, 4, 3))
    jac[:, 0, :] = -0.5 * s[:, None] * omega
    jac[:, 1:, :] = s[:, None, None] * np.eye(3) + k[:, None, None] * omega[:, :, None] * omega[:, None, :]
    return jac


def _matrix_quat_grad(q: np.ndarray, g_r: np.ndarray) -> np.ndarray:
    """Contract dL/dR (N,3,3) with dR/dq to get dL/dq (N,4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    o = np.zeros_like(w)
    dw = np.stack([o, -z, y, z, o, -x, -y, x, o], -1)
    dx = np.stack([o, y, z, y, -2 * x, -w, z, w, -2 * x], -1)
    dy = np.stack([-2 * y, x, w, x, o, z, -w, z, -2 * y], -1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, o], -1)
    g = g_r.reshape(-1, 9)
    return 2.0 * np.stack([np.sum(g * d, -1) for d in (dw, dx, dy, dz)], -1)


def rotation_vector_grad(omega, g_r) -> np.ndarray:
    """Chain dL/dR(omega) back to dL/domega for a batch of axis-angle vectors."""
    omega = np.asarray(omega, dtype=float).reshape(-1, 3)
    g_r = np.asarray(g_r, dtype=float).reshape(-1, 3, 3)
    q = rodrigues_exp_batch(omega)
    gq = _matrix_quat_grad(q, g_r)
    return np.einsum("nij,ni->nj", _quat_jacobian(omega), gq)


def decode_grad(v, g_m) -> np.ndarray:
    """Chain dL/dM (N, 3 or 4, 4) of decoded matrices back to dL/dv (N, 6)."""
    v = np.asarray(v, dtype=float).reshape(-1, 6)
    g_m = np.asarray(g_m, dtype=float)
    out = np.empty((v.shape[0], 6))
    out[:, :3] = g_m[:, :3, 3]
    out[:, 3:] = rotation_vector_grad(v[:, 3:], g_m[:, :3, :3])
    return out


# --------------------------------------------------------------------------
# extrinsic correction
# --------------------------------------------------------------------------


@dataclass
class ExtrinsicCorrection:
    vector: np.ndarray = field(default_factory=lambda: np.zeros(6))
    shared: bool = True

    def __post_init__(self):
        self.vector = np.array(self.vector, dtype=float).reshape(6)
        if not np.linalg.norm(self.vector[3:]) < math.pi:
            raise ValueError("rotation part of an extrinsic correction must be below pi")

    def pose(self) -> Pose:
        return decode_correction(self.vector)


# --------------------------------------------------------------------------
# trajectory correction network
# --------------------------------------------------------------------------


class TrajectoryCorrectionNet:
    """Time -> 6-vector MLP with Fourier time features.

    Input features are ``[tau, sin(2^k pi tau), cos(2^k pi tau)]`` for
    ``k < n_freqs`` with ``tau`` the time mapped onto [-1, 1]. The raw ``tau``
    term keeps the two ends of the interval distinguishable; the sinusoids
    alone are periodic over it. Hidden layers use tanh. The output layer starts
    at exactly zero so the correction is the identity until trained.
    """

    def __init__(self, t_min: float, t_max: float, n_freqs: int = N_FREQS, hidden=HIDDEN, seed: int = 0):
        if not t_max > t_min:
            raise ValueError("t_max must exceed t_min")
        self.t_min = float(t_min)
        self.t_max = float(t_max)
        self.n_freqs = int(n_freqs)
        self.hidden = tuple(int(h) for h in hidden)
        sizes = [1 + 2 * self.n_freqs, *self.hidden, 6]
        self.shapes = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.shapes.append((fan_out, fan_in))
            self.shapes.append((fan_out,))
        self.params = np.zeros(sum(int(np.prod(s)) for s in self.shapes))
        rng = np.random.default_rng(seed)
        views = self.layers()
        for li in range(len(sizes) - 2):
            w = views[2 * li]
            std = math.sqrt(2.0 / (w.shape[0] + w.shape[1]))
            w[...] = rng.normal(0.0, std, size=w.shape)
        # output layer (weights and bias) stays zero

    @property
    def n_params(self) -> int:
        return self.params.size

    def layers(self, flat: np.ndarray | None = None) -> list[np.ndarray]:
        """Views of ``flat`` (default: the parameters) as [W1, b1, W2, b2, ...]."""
        flat = self.params if flat is None else flat
        out, i = [], 0
        for s in self.shapes:
            n = int(np.prod(s))
            out.append(flat[i : i + n].reshape(s))
            i += n
        return out

    def normalize_time(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(~((t >= self.t_min) & (t <= self.t_max))):
            raise TimeOutOfRange(f"time outside [{self.t_min}, {self.t_max}]")
        return 2.0 * (t - self.t_min) / (self.t_max - self.t_min) - 1.0

    def encode(self, t) -> np.ndarray:
        tau = self.normalize_time(np.atleast_1d(t))
        freqs = (2.0 ** np.arange(self.n_freqs)) * math.pi
        arg = tau[:, None] * freqs
        return np.concatenate([tau[:, None], np.sin(arg), np.cos(arg)], axis=1)

    def forward(self, t) -> tuple[np.ndarray, list[np.ndarray]]:
        """Raw 6-vectors for times ``t`` plus the activations needed by :meth:`backward`."""
        x = self.encode(t)
        acts = [x]
        layers = self.layers()
        n_layers = len(layers) // 2
        h = x
        for li in range(n_layers):
            w, b = layers[2 * li], layers[2 * li + 1]
            h = h @ w.T + b
            if li < n_layers - 1:
                h = np.tanh(h)
                acts.append(h)
        return h, acts

    def __call__(self, t) -> np.ndarray:
        return self.forward(t)[0]

    def backward(self, acts: list[np.ndarray], g_out: np.ndarray) -> np.ndarray:
        """Flat parameter gradient given dL/d(output) for the batch in ``acts``."""
        grad = np.zeros_like(self.params)
        g_layers = self.layers(grad)
        layers = self.layers()
        n_layers = len(layers) // 2
        g = np.asarray(g_out, dtype=float).reshape(-1, 6)
        for li in reversed(range(n_layers)):
            h_in = acts[li]
            g_layers[2 * li][...] = g.T @ h_in
            g_layers[2 * li + 1][...] = g.sum(axis=0)
            if li > 0:
                g = (g @ layers[2 * li]) * (1.0 - h_in * h_in)
        return grad

    def pose(self, t: float) -> Pose:
        return decode_correction(self(t)[0])


def trajectory_correction(net: TrajectoryCorrectionNet, t: float) -> Pose:
    return net.pose(t)


# --------------------------------------------------------------------------
# correction set
# --------------------------------------------------------------------------


class CorrectionSet:
    """Extrinsic corrections per sensor and trajectory networks per scene.

    The reference sensor's extrinsic correction is pinned at zero.
    """

    def __init__(self, sensors, reference: str, scenes: dict | None = None):
        self.reference = reference
        self.extrinsic: dict[str, ExtrinsicCorrection] = {s: ExtrinsicCorrection() for s in sensors}
        self.trajectory: dict[str, TrajectoryCorrectionNet] = dict(scenes or {})

    @property
    def sensors(self) -> list[str]:
        return list(self.extrinsic)

    def extrinsic_pose(self, sensor: str) -> Pose:
        if sensor == self.reference or sensor not in self.extrinsic:
            return Pose.identity()
        return self.extrinsic[sensor].pose()

    def trajectory_pose(self, scene: str | None, t: float) -> Pose:
        net = self._net(scene)
        if net is None:
            return Pose.identity()
        return net.pose(t)

    def _net(self, scene):
        if scene is None:
            if len(self.trajectory) == 1:
                return next(iter(self.trajectory.values()))
            if not self.trajectory:
                return None
            raise KeyError("scene id required when several trajectory corrections exist")
        return self.trajectory[scene]

    def extrinsic_matrix(self) -> np.ndarray:
        """(n_sensors, 6) correction vectors in sensor order."""
        return np.stack([self.extrinsic[s].vector for s in self.sensors])

    def set_extrinsic_vector(self, sensor: str, v) -> None:
        if sensor == self.reference:
            return
        self.extrinsic[sensor].vector[...] = v

    def blocks(self) -> dict[str, np.ndarray]:
        out = {f"ext/{s}": self.extrinsic[s].vector for s in self.sensors}
        for scene, net in sorted(self.trajectory.items()):
            out[f"traj/{scene}/params"] = net.params
            out[f"traj/{scene}/meta"] = np.array([net.t_min, net.t_max, net.n_freqs, *net.hidden], dtype=float)
        return out

    @classmethod
    def from_blocks(cls, blocks: dict[str, np.ndarray], reference: str) -> "CorrectionSet":
        sensors = [k[4:] for k in blocks if k.startswith("ext/")]
        corr = cls(sensors, reference)
        for s in sensors:
            corr.extrinsic[s].vector[...] = blocks[f"ext/{s}"]
        for k, meta in blocks.items():
            if k.startswith("traj/") and k.endswith("/meta"):
                scene = k[len("traj/") : -len("/meta")]
                net = TrajectoryCorrectionNet(meta[0], meta[1], int(meta[2]), tuple(int(h) for h in meta[3:]))
                net.params[...] = blocks[f"traj/{scene}/params"]
                corr.trajectory[scene] = net
        return corr


# --------------------------------------------------------------------------
# pose chain with gradients
# --------------------------------------------------------------------------


def chain_matrices(ref, d_traj, extr, d_ext) -> np.ndarray:
    """Batched ``ref @ d_traj @ extr @ d_ext``."""
    return ref @ d_traj @ extr @ d_ext


def chain_backward(ref, d_traj, extr, d_ext, g_pose) -> tuple[np.ndarray, np.ndarray]:
    """Matrix gradients of the chain w.r.t. ``d_traj`` and ``d_ext``.

    ``g_pose`` is dL/d[R|t] (N, 3, 4) of the composed pose; returns (N, 4, 4)
    gradients for the two correction matrices.
    """
    g4 = np.zeros(g_pose.shape[:-2] + (4, 4))
    g4[..., :3, :] = g_pose
    left_ext = ref @ d_traj @ extr
    g_ext = np.swapaxes(left_ext, -1, -2) @ g4
    right_traj = extr @ d_ext
    g_traj = np.swapaxes(ref, -1, -2) @ g4 @ np.swapaxes(right_traj, -1, -2)
    return g_traj, g_ext


def correction_gradients(corr: CorrectionSet, upstream, calib, traj, sensor: str, t: float, scene: str | None = None) -> dict[str, np.ndarray]:
    """Gradients of all correction parameters given dL/d[R|t] of one corrected sensor pose.

    Returns a dict with ``"ext/<sensor>"`` (6,) for every sensor (zero except
    ``sensor``, always zero for the reference) and ``"traj/<scene>"`` (flat
    network parameters) when a trajectory network applies.
    """
    g = np.asarray(upstream, dtype=float).reshape(1, 3, 4)
    ref = traj.matrices([t])
    extr = calib.extrinsic(sensor).matrix()[None]
    v_ext = corr.extrinsic[sensor].vector[None] if sensor in corr.extrinsic else np.zeros((1, 6))
    if sensor == corr.reference:
        v_ext = np.zeros((1, 6))
    d_ext = decode_matrices(v_ext)
    net = corr._net(scene)
    if net is not None:
        v_traj, acts = net.forward([t])
    else:
        v_traj, acts = np.zeros((1, 6)), None
    d_traj = decode_matrices(v_traj)
    g_traj4, g_ext4 = chain_backward(ref, d_traj, extr, d_ext, g)
    out = {f"ext/{s}": np.zeros(6) for s in corr.sensors}
    if sensor != corr.reference and sensor in corr.extrinsic:
        out[f"ext/{sensor}"] = decode_grad(v_ext, g_ext4)[0]
    if net is not None:
        g_v = decode_grad(v_traj, g_traj4)
        key = scene if scene is not None else next(iter(corr.trajectory))
        out[f"traj/{key}"] = net.backward(acts, g_v)
    return out


def aggregate_shared_gradients(per_scene_grads):
    """Arithmetic mean of gradient blocks (arrays or dicts of arrays) in the given order."""
    blocks = list(per_scene_grads)
    if not blocks:
        raise EmptyList("no gradient blocks to aggregate")
    if isinstance(blocks[0], dict):
        return {k: aggregate_shared_gradients([b[k] for b in blocks]) for k in blocks[0]}
    acc = np.zeros_like(np.asarray(blocks[0], dtype=float))
    for b in blocks:
        acc = acc + np.asarray(b, dtype=float)
    return acc / len(blocks)


def apply_corrections(calib, traj, corr: CorrectionSet, scene: str | None = None):
    """Bake corrections into a new (rig, trajectory) pair.

    Extrinsics become ``X @ d_ext``; every trajectory knot becomes
    ``T_k @ d_traj(t_k)``. Poses between knots are interpolated from the
    corrected knots.
    """
    new_ext = {s: calib.extrinsic(s) @ corr.extrinsic_pose(s) for s in calib.ids if s != calib.reference}
    rig = calib.with_extrinsics(new_ext)
    net = corr._net(scene) if corr.trajectory else None
    if net is None:
        return rig, traj
    v = net(traj.times)
    return rig, traj.map_poses(lambda k, p: p @ decode_correction(v[k]))
