import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import axis_angle_hom, pose_hom, quat_exp_series, rotation_angle_of, traj_hom

from rigrefine.corrections import CorrectionSet, TrajectoryCorrectionNet
from rigrefine.errors import AngleOutOfRange, TimeOutOfRange, UnknownSensor
from rigrefine.geometry import (
    Pose,
    Trajectory,
    corrected_sensor_pose,
    distance,
    interpolate_pose,
    quat_log,
    rodrigues_exp,
    rotation_angle,
    sensor_pose,
    slerp,
)
from rigrefine.rig import CameraIntrinsics, RigCalibration, Sensor

finite = st.floats(-1.0, 1.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


def random_pose(rng, t_scale=2.0, max_angle=math.pi * 0.95):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose.from_axis_angle(axis * rng.uniform(0, max_angle), rng.normal(scale=t_scale, size=3))


def random_traj(rng, n=6):
    times = np.cumsum(rng.uniform(0.1, 0.5, n))
    poses = [random_pose(rng, max_angle=1.0) for _ in range(n)]
    return Trajectory.from_poses(times, poses, "ref")


def random_rig(rng):
    intr = CameraIntrinsics(50.0, 50.0, 15.5, 15.5, 32, 32)
    sensors = [Sensor("ref", "lidar", Pose.identity())]
    sensors += [Sensor(f"cam{i}", "camera", random_pose(rng, 0.5), intr) for i in range(3)]
    return RigCalibration(tuple(sensors), "ref")


def rot_z(deg):
    return rodrigues_exp([0.0, 0.0, math.radians(deg)])


# -- rodrigues_exp -----------------------------------------------------------


def test_rodrigues_zero_is_identity():
    assert np.array_equal(rodrigues_exp([0.0, 0.0, 0.0]), [1.0, 0.0, 0.0, 0.0])


def test_rodrigues_quarter_turn_maps_x_to_y():
    p = Pose(rodrigues_exp([0.0, 0.0, math.pi / 2]), np.zeros(3))
    np.testing.assert_allclose(p.apply([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-15)


def test_rodrigues_matches_quaternion_exponential():
    w = np.array([0.1, -0.2, 0.3])
    np.testing.assert_allclose(rodrigues_exp(w), quat_exp_series(w), atol=1e-12)


def test_rodrigues_rejects_large_angles():
    with pytest.raises(AngleOutOfRange):
        rodrigues_exp([math.pi, 0.0, 0.0])
    with pytest.raises(AngleOutOfRange):
        rodrigues_exp([3.0, 2.0, 0.0])


def test_rodrigues_small_angle_series_is_continuous():
    axis = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
    for theta in (0.999e-8, 1.001e-8, 1e-12):
        np.testing.assert_allclose(rodrigues_exp(axis * theta), quat_exp_series(axis * theta), rtol=1e-14, atol=0)


@given(vec3, st.floats(1e-6, math.pi - 1e-3))
def test_exp_log_round_trip(direction, angle):
    n = np.linalg.norm(direction)
    if n < 1e-3:
        return
    w = direction / n * angle
    np.testing.assert_allclose(quat_log(rodrigues_exp(w)), w, atol=1e-9)


# -- slerp -------------------------------------------------------------------


def test_slerp_endpoints():
    q0, q1 = rot_z(10), rodrigues_exp([0.2, -0.4, 0.1])
    assert np.array_equal(slerp(q0, q1, 0.0), q0)
    q = slerp(q0, q1, 1.0)
    assert np.allclose(q, q1, atol=1e-15) or np.allclose(q, -q1, atol=1e-15)


def test_slerp_half_of_quarter_turn():
    np.testing.assert_allclose(slerp(rot_z(0), rot_z(90), 0.5), rot_z(45), atol=1e-15)


def test_slerp_takes_short_path():
    q1 = rot_z(90)
    np.testing.assert_allclose(slerp(rot_z(0), -q1, 0.5), rot_z(45), atol=1e-15)


def test_slerp_nearly_parallel_falls_back_to_lerp():
    q0 = rot_z(0)
    q1 = rodrigues_exp([0.0, 0.0, 1e-7])
    q = slerp(q0, q1, 0.25)
    assert abs(np.linalg.norm(q) - 1.0) < 1e-15
    assert abs(rotation_angle(q) - 0.25e-7) < 1e-15


@given(st.floats(0.0, 0.9), vec3)
def test_slerp_constant_angular_velocity(u, direction):
    n = np.linalg.norm(direction)
    if n < 1e-3:
        return
    q0 = rodrigues_exp([0.1, 0.2, -0.3])
    q1 = rodrigues_exp(direction / n * 2.0)
    a = slerp(q0, q1, u)
    angles = []
    for delta in (0.01, 0.02, 0.04):
        b = slerp(q0, q1, u + delta)
        angles.append(2 * math.atan2(np.linalg.norm(
            (Pose(a, np.zeros(3)).inverse() @ Pose(b, np.zeros(3))).rotation[1:]), abs(float(a @ b))))
    assert abs(angles[1] - 2 * angles[0]) < 1e-8
    assert abs(angles[2] - 4 * angles[0]) < 1e-8


# -- Pose invariants ---------------------------------------------------------


@given(st.integers(0, 2**32 - 1))
def test_pose_compose_inverse_is_identity(seed):
    rng = np.random.default_rng(seed)
    p, q = random_pose(rng), random_pose(rng)
    pq = p @ q
    assert abs(np.linalg.norm(pq.rotation) - 1.0) < 1e-9
    d = p @ p.inverse()
    assert d.angle() < 1e-9
    assert np.linalg.norm(d.translation) < 1e-9


# -- trajectory interpolation -------------------------------------------------


def test_interpolate_knot_is_bit_exact():
    traj = random_traj(np.random.default_rng(0))
    for k in range(len(traj)):
        p = interpolate_pose(traj, float(traj.times[k]))
        assert np.array_equal(p.rotation, traj.rotations[k])
        assert np.array_equal(p.translation, traj.translations[k])


def test_interpolate_translation_midpoint():
    traj = Trajectory([0.0, 2.0], [[1, 0, 0, 0]] * 2, [[0, 0, 0], [2, 0, 0]], "ref")
    np.testing.assert_allclose(interpolate_pose(traj, 1.0).translation, [1.0, 0.0, 0.0], atol=1e-15)


def test_interpolate_rotation_midpoint():
    qy = rodrigues_exp([0.0, math.pi / 2, 0.0])
    traj = Trajectory([0.0, 1.0], [[1, 0, 0, 0], qy], np.zeros((2, 3)), "ref")
    p = interpolate_pose(traj, 0.5)
    np.testing.assert_allclose(p.rotation, rodrigues_exp([0.0, math.pi / 4, 0.0]), atol=1e-15)


def test_interpolate_out_of_range():
    traj = random_traj(np.random.default_rng(1))
    with pytest.raises(TimeOutOfRange):
        interpolate_pose(traj, traj.t_min - 1e-9)
    with pytest.raises(TimeOutOfRange):
        interpolate_pose(traj, traj.t_max + 1e-9)


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory([0.0], [[1, 0, 0, 0]], [[0, 0, 0]], "ref")
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], [[1, 0, 0, 0]] * 2, np.zeros((2, 3)), "ref")


def test_batch_interpolation_matches_scalar():
    rng = np.random.default_rng(3)
    traj = random_traj(rng)
    ts = np.concatenate([traj.times, rng.uniform(traj.t_min, traj.t_max, 50)])
    mats = traj.matrices(ts)
    for t, m in zip(ts, mats):
        np.testing.assert_allclose(m, traj.interpolate(float(t)).matrix(), atol=1e-13)


# -- sensor pose chain ---------------------------------------------------------


def test_sensor_pose_reference_is_trajectory():
    rng = np.random.default_rng(4)
    rig, traj = random_rig(rng), random_traj(rng)
    t = 0.5 * (traj.t_min + traj.t_max)
    a, b = sensor_pose(rig, traj, "ref", t), interpolate_pose(traj, t)
    assert np.array_equal(a.rotation, b.rotation) and np.array_equal(a.translation, b.translation)


def test_sensor_pose_offset_extrinsic():
    intr = CameraIntrinsics(10, 10, 5, 5, 10, 10)
    rig = RigCalibration((Sensor("ref", "lidar", Pose.identity()),
                          Sensor("cam", "camera", Pose(np.array([1.0, 0, 0, 0]), [1.0, 0, 0]), intr)), "ref")
    traj = Trajectory([0.0, 1.0], [[1, 0, 0, 0]] * 2, np.zeros((2, 3)), "ref")
    np.testing.assert_array_equal(sensor_pose(rig, traj, "cam", 0.3).translation, [1.0, 0.0, 0.0])


def test_sensor_pose_unknown_sensor():
    rng = np.random.default_rng(5)
    rig, traj = random_rig(rng), random_traj(rng)
    with pytest.raises(UnknownSensor):
        sensor_pose(rig, traj, "nope", traj.t_min)


def test_sensor_pose_matches_matrix_oracle():
    rng = np.random.default_rng(6)
    for _ in range(50):
        rig, traj = random_rig(rng), random_traj(rng)
        s = rig.ids[int(rng.integers(len(rig.ids)))]
        t = float(rng.uniform(traj.t_min, traj.t_max))
        expect = traj_hom(traj, t) @ pose_hom(rig.extrinsic(s))
        np.testing.assert_allclose(sensor_pose(rig, traj, s, t).matrix(), expect, atol=1e-10)


def random_corrections(rng, rig, traj, scale=0.1):
    corr = CorrectionSet(rig.ids, rig.reference, {"s": TrajectoryCorrectionNet(traj.t_min, traj.t_max, seed=1)})
    for s in rig.ids:
        corr.set_extrinsic_vector(s, rng.normal(scale=scale, size=6))
    net = corr.trajectory["s"]
    net.params[...] = rng.normal(scale=0.05, size=net.n_params)
    return corr


def test_corrected_pose_identity_corrections_bit_exact():
    rng = np.random.default_rng(7)
    rig, traj = random_rig(rng), random_traj(rng)
    corr = CorrectionSet(rig.ids, rig.reference, {"s": TrajectoryCorrectionNet(traj.t_min, traj.t_max)})
    for s in rig.ids:
        for t in np.linspace(traj.t_min, traj.t_max, 7):
            a = corrected_sensor_pose(corr, rig, traj, s, float(t), "s")
            b = sensor_pose(rig, traj, s, float(t))
            assert np.array_equal(a.rotation, b.rotation) and np.array_equal(a.translation, b.translation)


def test_corrected_pose_local_offset():
    rng = np.random.default_rng(8)
    rig, traj = random_rig(rng), random_traj(rng)
    corr = CorrectionSet(rig.ids, rig.reference)
    corr.set_extrinsic_vector("cam1", [0.10, 0, 0, 0, 0, 0])
    t = float(traj.times[2])
    base = sensor_pose(rig, traj, "cam1", t)
    moved = corrected_sensor_pose(corr, rig, traj, "cam1", t)
    np.testing.assert_allclose(moved.translation - base.translation, 0.10 * base.rotation_matrix[:, 0], atol=1e-12)
    np.testing.assert_allclose(moved.rotation, base.rotation, atol=1e-15)


def test_corrected_pose_matches_matrix_oracle():
    rng = np.random.default_rng(9)
    for _ in range(50):
        rig, traj = random_rig(rng), random_traj(rng)
        corr = random_corrections(rng, rig, traj)
        s = rig.ids[int(rng.integers(len(rig.ids)))]
        t = float(rng.uniform(traj.t_min, traj.t_max))
        v_traj = corr.trajectory["s"](t)[0]
        v_ext = np.zeros(6) if s == rig.reference else corr.extrinsic[s].vector
        expect = traj_hom(traj, t) @ axis_angle_hom(v_traj) @ pose_hom(rig.extrinsic(s)) @ axis_angle_hom(v_ext)
        np.testing.assert_allclose(corrected_sensor_pose(corr, rig, traj, s, t, "s").matrix(), expect, atol=1e-10)


def test_corrected_pose_continuous_in_time():
    rng = np.random.default_rng(10)
    rig, traj = random_rig(rng), random_traj(rng)
    corr = random_corrections(rng, rig, traj)
    for t in rng.uniform(traj.t_min, traj.t_max - 1e-5, 30):
        a = corrected_sensor_pose(corr, rig, traj, "cam0", float(t), "s")
        b = corrected_sensor_pose(corr, rig, traj, "cam0", float(t) + 1e-6, "s")
        d = a.inverse() @ b
        assert np.linalg.norm(a.translation - b.translation) < 1e-4
        assert d.angle() < 1e-4


def test_composition_associativity_against_matrix_oracle():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
        expect = pose_hom(a) @ pose_hom(b) @ pose_hom(c)
        np.testing.assert_allclose(((a @ b) @ c).matrix(), expect, atol=1e-10)
        np.testing.assert_allclose((a @ (b @ c)).matrix(), expect, atol=1e-10)


def test_distance_of_known_offset():
    a = Pose.from_axis_angle([0.0, 0.0, 0.2], [1.0, 2.0, 3.0])
    b = a @ Pose.from_axis_angle([0.05, 0.0, 0.0], [0.03, 0.0, 0.04])
    dt, dr = distance(a, b)
    assert abs(dt - 0.05) < 1e-12
    assert abs(dr - 0.05) < 1e-12
    assert abs(rotation_angle_of(np.linalg.inv(pose_hom(a)) @ pose_hom(b)) - 0.05) < 1e-7
