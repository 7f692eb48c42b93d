import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import axis_angle_hom, central_difference, gradient_close, mlp_forward, quat_exp_series

from rigrefine import checkpoint
from rigrefine.corrections import (
    CorrectionSet,
    ExtrinsicCorrection,
    TrajectoryCorrectionNet,
    aggregate_shared_gradients,
    correction_gradients,
    decode_correction,
    trajectory_correction,
)
from rigrefine.errors import AngleOutOfRange, CheckpointFormatError, EmptyList, TimeOutOfRange
from rigrefine.geometry import Pose, Trajectory, corrected_sensor_pose, sensor_pose
from rigrefine.rig import CameraIntrinsics, RigCalibration, Sensor


def small_setup(rng, hidden=(8, 8)):
    intr = CameraIntrinsics(40.0, 40.0, 15.5, 15.5, 32, 32)
    sensors = [Sensor("ref", "lidar", Pose.identity())]
    for i in range(2):
        sensors.append(Sensor(f"cam{i}", "camera",
                              Pose.from_axis_angle(rng.normal(scale=0.5, size=3), rng.normal(size=3)), intr))
    rig = RigCalibration(tuple(sensors), "ref")
    times = np.cumsum(rng.uniform(0.2, 0.4, 5))
    poses = [Pose.from_axis_angle(rng.normal(scale=0.5, size=3), rng.normal(scale=3.0, size=3)) for _ in times]
    traj = Trajectory.from_poses(times, poses, "ref")
    net = TrajectoryCorrectionNet(traj.t_min, traj.t_max, hidden=hidden, seed=int(rng.integers(1 << 30)))
    net.params[...] += rng.normal(scale=0.1, size=net.n_params)
    corr = CorrectionSet(rig.ids, "ref", {"s": net})
    for s in rig.ids:
        corr.set_extrinsic_vector(s, rng.normal(scale=0.1, size=6))
    return rig, traj, corr


# -- decode_correction ---------------------------------------------------------


def test_decode_zero_is_identity():
    p = decode_correction(np.zeros(6))
    assert np.array_equal(p.rotation, [1, 0, 0, 0]) and np.array_equal(p.translation, np.zeros(3))


def test_decode_pure_translation():
    p = decode_correction([0.5, 0, 0, 0, 0, 0])
    assert np.array_equal(p.translation, [0.5, 0, 0]) and np.array_equal(p.rotation, [1, 0, 0, 0])


def test_decode_pure_yaw():
    p = decode_correction([0, 0, 0, 0, 0, 0.1])
    np.testing.assert_allclose(p.rotation, quat_exp_series([0, 0, 0.1]), atol=1e-15)
    np.testing.assert_allclose(p.matrix(), axis_angle_hom([0, 0, 0, 0, 0, 0.1]), atol=1e-15)


def test_decode_rejects_large_rotation():
    with pytest.raises(AngleOutOfRange):
        decode_correction([0, 0, 0, 4.0, 0, 0])
    with pytest.raises(ValueError):
        ExtrinsicCorrection([0, 0, 0, 0, 0, 3.2])


# -- trajectory network ----------------------------------------------------------


def test_fresh_net_is_identity():
    net = TrajectoryCorrectionNet(0.0, 3.0, seed=7)
    for t in np.linspace(0.0, 3.0, 11):
        p = trajectory_correction(net, float(t))
        assert np.array_equal(p.rotation, [1, 0, 0, 0]) and np.array_equal(p.translation, np.zeros(3))
    layers = net.layers()
    assert not layers[-1].any() and not layers[-2].any()


def test_time_normalization_endpoints():
    net = TrajectoryCorrectionNet(2.0, 5.0)
    assert net.normalize_time(2.0) == -1.0
    assert net.normalize_time(5.0) == 1.0
    with pytest.raises(TimeOutOfRange):
        net.normalize_time(5.0 + 1e-9)
    with pytest.raises(TimeOutOfRange):
        trajectory_correction(net, 1.0)


def test_forward_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    net = TrajectoryCorrectionNet(1.0, 4.0, seed=3)
    net.params[...] = rng.normal(scale=0.3, size=net.n_params)
    for t in rng.uniform(1.0, 4.0, 10):
        np.testing.assert_allclose(net(float(t))[0], mlp_forward(net, float(t)), atol=1e-12, rtol=0)


def test_net_output_is_lipschitz():
    rng = np.random.default_rng(1)
    net = TrajectoryCorrectionNet(0.0, 1.0)
    net.params[...] = rng.normal(scale=0.2, size=net.n_params)
    ts = np.linspace(0.0, 1.0, 20001)
    out = net(ts)
    slope = np.max(np.abs(np.diff(out, axis=0))) / (ts[1] - ts[0])
    assert np.isfinite(slope) and slope < 1e4


# -- correction_gradients ------------------------------------------------------------


def test_zero_upstream_gives_zero_gradients():
    rig, traj, corr = small_setup(np.random.default_rng(2))
    g = correction_gradients(corr, np.zeros((3, 4)), rig, traj, "cam0", float(traj.times[1]), "s")
    assert all(not v.any() for v in g.values())


def test_reference_sensor_gradient_is_zero():
    rng = np.random.default_rng(3)
    rig, traj, corr = small_setup(rng)
    g = correction_gradients(corr, rng.normal(size=(3, 4)), rig, traj, "ref", float(traj.times[2]), "s")
    assert not g["ext/ref"].any()
    assert g["traj/s"].any()


def _fd_check(rng, rig, traj, corr, sensor, t, upstream, param_indices=None):
    def objective():
        return float(np.sum(upstream * corrected_sensor_pose(corr, rig, traj, sensor, t, "s").matrix()[:3]))

    g = correction_gradients(corr, upstream, rig, traj, sensor, t, "s")
    bad = []
    for s in rig.ids:
        vec = corr.extrinsic[s].vector
        for i in range(6):
            num = 0.0 if s == rig.reference else central_difference(objective, vec, i)
            if not gradient_close(g[f"ext/{s}"][i], num):
                bad.append((s, i, g[f"ext/{s}"][i], num))
    params = corr.trajectory["s"].params
    idx = range(params.size) if param_indices is None else param_indices
    for i in idx:
        num = central_difference(objective, params, i)
        if not gradient_close(g["traj/s"][i], num):
            bad.append(("net", i, g["traj/s"][i], num))
    return bad


def test_gradients_match_finite_differences_100_configs():
    """Every parameter of 100 random configurations (small network so all of it is checked)."""
    rng = np.random.default_rng(4)
    failures = []
    for _ in range(100):
        rig, traj, corr = small_setup(rng)
        sensor = rig.ids[int(rng.integers(len(rig.ids)))]
        t = float(rng.uniform(traj.t_min, traj.t_max))
        failures += _fd_check(rng, rig, traj, corr, sensor, t, rng.normal(size=(3, 4)))
    assert not failures, failures[:5]


def test_gradients_match_finite_differences_default_network():
    rng = np.random.default_rng(5)
    rig, traj, corr = small_setup(rng, hidden=(64, 64))
    t = float(rng.uniform(traj.t_min, traj.t_max))
    picks = rng.choice(corr.trajectory["s"].n_params, 300, replace=False)
    assert not _fd_check(rng, rig, traj, corr, "cam1", t, rng.normal(size=(3, 4)), picks)


# -- aggregation -------------------------------------------------------------------------


def test_aggregate_single_block_unchanged():
    g = np.random.default_rng(6).normal(size=(5, 6))
    np.testing.assert_array_equal(aggregate_shared_gradients([g]), g)


def test_aggregate_cancellation():
    g = np.random.default_rng(7).normal(size=(5, 6))
    assert not aggregate_shared_gradients([g, -g]).any()


@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_aggregate_is_arithmetic_mean(n, seed):
    blocks = list(np.random.default_rng(seed).normal(size=(n, 4, 6)))
    expect = np.zeros((4, 6))
    for i in range(4):
        for j in range(6):
            expect[i, j] = math.fsum(b[i, j] for b in blocks) / n
    np.testing.assert_allclose(aggregate_shared_gradients(blocks), expect, atol=1e-15, rtol=0)


def test_aggregate_dict_blocks_and_empty():
    a = {"x": np.ones(3), "y": np.zeros(2)}
    b = {"x": 3 * np.ones(3), "y": np.ones(2)}
    out = aggregate_shared_gradients([a, b])
    np.testing.assert_array_equal(out["x"], 2 * np.ones(3))
    np.testing.assert_array_equal(out["y"], 0.5 * np.ones(2))
    with pytest.raises(EmptyList):
        aggregate_shared_gradients([])


# -- correction set -----------------------------------------------------------------------


def test_reference_correction_is_pinned():
    rig, traj, corr = small_setup(np.random.default_rng(8))
    corr.set_extrinsic_vector("ref", np.ones(6))
    assert not corr.extrinsic["ref"].vector.any()
    assert np.array_equal(corr.extrinsic_pose("ref").rotation, [1, 0, 0, 0])


def test_initial_corrections_are_identity():
    rng = np.random.default_rng(9)
    rig, traj, _ = small_setup(rng)
    corr = CorrectionSet(rig.ids, rig.reference, {"s": TrajectoryCorrectionNet(traj.t_min, traj.t_max, seed=4)})
    for s in rig.ids:
        for t in rng.uniform(traj.t_min, traj.t_max, 5):
            a = corrected_sensor_pose(corr, rig, traj, s, float(t), "s")
            b = sensor_pose(rig, traj, s, float(t))
            assert np.array_equal(a.matrix(), b.matrix())


# -- checkpoint container -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rig, traj, corr = small_setup(np.random.default_rng(10))
    path = tmp_path / "c.rrck"
    checkpoint.save(path, corr.blocks())
    back = CorrectionSet.from_blocks(checkpoint.load(path), "ref")
    for s in rig.ids:
        assert np.array_equal(back.extrinsic[s].vector, corr.extrinsic[s].vector)
    a, b = corr.trajectory["s"], back.trajectory["s"]
    assert np.array_equal(a.params, b.params) and (a.t_min, a.t_max, a.hidden) == (b.t_min, b.t_max, b.hidden)


def test_checkpoint_byte_layout():
    data = checkpoint.encode({"ab": np.array([1.5, -2.0])})
    assert data[:4] == b"RRCK"
    assert struct.unpack("<I", data[4:8]) == (1,)
    assert struct.unpack("<I", data[8:12]) == (2,)
    assert data[12:14] == b"ab"
    assert struct.unpack("<I", data[14:18]) == (2,)
    assert struct.unpack("<2d", data[18:]) == (1.5, -2.0)


def test_checkpoint_rejects_garbage():
    with pytest.raises(CheckpointFormatError):
        checkpoint.decode(b"NOPE\x01\x00\x00\x00")
    good = checkpoint.encode({"x": np.arange(4.0)})
    with pytest.raises(CheckpointFormatError):
        checkpoint.decode(good[:-3])
