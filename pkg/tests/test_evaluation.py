import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import agreement_count, hom, rotation_angle_of, ssim_bruteforce
from scipy.spatial.transform import Rotation

from rigrefine.dataset import KeypointTrack, NoiseSpec, SceneDataset, SensorFrame, generate_tracks, perturb
from rigrefine.errors import DimensionMismatch, EmptyMesh, NoGroundTruth, NoLidar
from rigrefine.evaluation import (
    METRICS,
    ORIENTATION,
    P2M_THRESHOLD,
    PSNR_CAP,
    geometric_consistency,
    nvs_metrics,
    point_to_mesh_stats,
    psnr,
    select_poses,
    sign_agreement,
    ssim,
    triangulate_tracks,
    true_pose_errors,
)
from rigrefine.geometry import Pose, Trajectory
from rigrefine.mesh import Mesh, point_mesh_distances, point_mesh_distances_exhaustive
from rigrefine.rig import CameraIntrinsics, RigCalibration, Sensor

# -- image metrics ------------------------------------------------------------------------------------


def test_psnr_examples():
    rng = np.random.default_rng(0)
    img = rng.random((16, 16, 3))
    assert psnr(img, img) == PSNR_CAP == 99.0
    assert psnr(np.zeros((8, 8, 3)), np.ones((8, 8, 3))) == 0.0
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-12)


def test_ssim_identical_is_one():
    img = np.random.default_rng(1).random((32, 40, 3))
    assert abs(ssim(img, img) - 1.0) <= 1e-12
    assert nvs_metrics(img, img) == (PSNR_CAP, pytest.approx(1.0, abs=1e-12))


@pytest.mark.parametrize("seed", [2, 3, 4])
def test_ssim_matches_bruteforce_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((23, 27, 3))
    b = np.clip(a + rng.normal(scale=0.2, size=a.shape), 0, 1)
    assert abs(ssim(a, b) - ssim_bruteforce(a, b)) <= 1e-10
    g = rng.random((15, 15))
    assert abs(ssim(g, 1 - g) - ssim_bruteforce(g, 1 - g)) <= 1e-10


def test_metrics_reject_mismatched_images():
    with pytest.raises(DimensionMismatch):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(DimensionMismatch):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))  # smaller than the window


def test_orientation_flags():
    assert ORIENTATION == {"reproj_error": -1, "track_length": 1, "psnr": 1, "ssim": 1, "p2m_precision": 1,
                           "p2m_mean": -1}
    assert METRICS == tuple(ORIENTATION)


# -- sign agreement and selection -------------------------------------------------------------------------


def test_agreement_examples():
    d = np.array([[0.3, -0.3], [-1.0, 1.0], [2.0, -2.0]])
    a = sign_agreement(d, ["x", "y"])
    assert a.entry("x", "x") == 1.0 and a.entry("x", "y") == 0.0
    zero = sign_agreement(np.array([[0.0, 1.0]]))
    assert zero.values[0, 1] == 1.0  # zero counts as no regression


@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(1, 7))
def test_agreement_matches_direct_count(seed, n, m):
    rng = np.random.default_rng(seed)
    d = rng.choice([-1.0, 1.0], size=(n, m)) * rng.integers(0, 3, (n, m))
    a = sign_agreement(d).values
    assert np.array_equal(a, agreement_count(d))
    assert np.array_equal(a, a.T) and np.all(np.diag(a) == 1.0)
    assert np.all((a >= 0) & (a <= 1))


def test_agreement_from_dicts_skips_missing():
    rows = [{"a": 1.0, "b": float("nan")}, {"a": -1.0, "b": -2.0}]
    a = sign_agreement(rows)
    assert a.labels == ["a", "b"] and a.entry("a", "b") == 1.0


def test_select_poses_examples():
    o = [-1, 1, 1, 1]
    assert select_poses([[-1.0, 2.0, 3.0, 0.1]], o) == ["optimized"]
    assert select_poses([[1.0, -2.0, -3.0, -0.1]], o) == ["original"]
    assert select_poses([[-1.0, 2.0, -3.0, -0.1]], o) == ["original"]  # tie
    assert select_poses([[0.0, 0.0, 0.0, 0.0]], o) == ["original"]


@given(st.integers(0, 2**32 - 1), st.sampled_from(["exp", "cube", "affine"]))
def test_select_poses_invariant_to_monotone_rescaling(seed, kind):
    f = {"exp": np.exp, "cube": lambda x: x**3, "affine": lambda x: 3.0 * x + 7.0}[kind]
    rng = np.random.default_rng(seed)
    orig, opt = rng.normal(size=(12, 6)), rng.normal(size=(12, 6))
    o = [ORIENTATION[m] for m in METRICS]
    assert select_poses(opt - orig, o) == select_poses(f(opt) - f(orig), o)


# -- triangulation -------------------------------------------------------------------------------------------

INTR = CameraIntrinsics(300.0, 300.0, 320.0, 240.0, 640, 480)
CAM_X = (-1.5, -0.5, 0.5, 1.5)


def line_of_cameras():
    rig = RigCalibration((Sensor("cam", "camera", Pose.identity(), INTR),), "cam")
    poses = [Pose(np.array([1.0, 0, 0, 0]), [x, 0.0, 0.0]) for x in CAM_X]
    return rig, Trajectory.from_poses([0.0, 1.0, 2.0, 3.0], poses, "cam")


def project(points, cam_x):
    p = points - [cam_x, 0.0, 0.0]
    return np.stack([INTR.fx * p[:, 0] / p[:, 2] + INTR.cx, INTR.fy * p[:, 1] / p[:, 2] + INTR.cy], axis=1)


def make_tracks(points, noise=None):
    uv = [project(points, x) for x in CAM_X]
    if noise is not None:
        uv = [u + n for u, n in zip(uv, noise)]
    return [KeypointTrack(i, tuple(("cam", float(k), *uv[k][i]) for k in range(4))) for i in range(len(points))]


def landmarks(rng, n):
    return np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n), rng.uniform(4, 8, n)])


def test_noise_free_tracks_are_exact():
    rig, traj = line_of_cameras()
    res = triangulate_tracks(make_tracks(landmarks(np.random.default_rng(5), 200)), rig, traj)
    assert res.reproj_error < 1e-6
    assert res.track_length == 4.0 and res.n_tracks == 200


def test_generated_tracks_with_gt_poses(world, tiny_scene):
    tracks = generate_tracks(world, tiny_scene, n_landmarks=60, seed=1)
    res = triangulate_tracks(tracks, tiny_scene.rig, tiny_scene.trajectory)
    assert res.reproj_error < 1e-6
    assert res.track_length == pytest.approx(np.mean([len(t.observations) for t in tracks]))


def _gauss_newton_mean_error(points0, uv, iters=15):
    """Maximum-likelihood triangulation of all tracks at once; returns the mean observation residual."""
    x = points0.copy()
    for _ in range(iters):
        jtj = np.zeros((len(x), 3, 3))
        jtr = np.zeros((len(x), 3))
        for k, cx in enumerate(CAM_X):
            p = x - [cx, 0.0, 0.0]
            z = p[:, 2]
            r = project(x, cx) - uv[k]
            j = np.zeros((len(x), 2, 3))
            j[:, 0, 0] = INTR.fx / z
            j[:, 0, 2] = -INTR.fx * p[:, 0] / z**2
            j[:, 1, 1] = INTR.fy / z
            j[:, 1, 2] = -INTR.fy * p[:, 1] / z**2
            jtj += np.einsum("nki,nkj->nij", j, j)
            jtr += np.einsum("nki,nk->ni", j, r)
        x = x - np.linalg.solve(jtj, jtr[..., None])[..., 0]
    res = np.stack([np.linalg.norm(project(x, cx) - uv[k], axis=1) for k, cx in enumerate(CAM_X)])
    return float(res.mean())


def test_pixel_noise_matches_monte_carlo_expectation():
    rng = np.random.default_rng(6)
    n = 10000
    pts = landmarks(rng, n)
    noise = [rng.normal(0.0, 0.5, (n, 2)) for _ in CAM_X]
    rig, traj = line_of_cameras()
    res = triangulate_tracks(make_tracks(pts, noise), rig, traj)
    uv = [project(pts, x) + e for x, e in zip(CAM_X, noise)]
    expect = _gauss_newton_mean_error(pts, uv)
    assert res.n_tracks == n
    assert abs(res.reproj_error - expect) <= 0.2 * expect


def test_perturbed_poses_increase_error():
    rig, traj = line_of_cameras()
    tracks = make_tracks(landmarks(np.random.default_rng(7), 300))
    base = triangulate_tracks(tracks, rig, traj).reproj_error
    rng = np.random.default_rng(8)
    offsets = rng.normal(size=(4, 3))
    offsets = 0.02 * offsets / np.linalg.norm(offsets, axis=1, keepdims=True)
    bad = traj.map_poses(lambda k, p: Pose(p.rotation, p.translation + offsets[k]))
    assert triangulate_tracks(tracks, rig, bad).reproj_error > base


def test_degenerate_tracks_are_counted():
    rig, traj = line_of_cameras()
    same = KeypointTrack(0, (("cam", 0.0, 320.0, 240.0), ("cam", 0.0, 320.0, 240.0)))
    good = make_tracks(landmarks(np.random.default_rng(9), 3))
    res = triangulate_tracks([same, *good], rig, traj)
    assert res.n_degenerate == 1 and res.n_tracks == 3


def test_outlier_observation_is_dropped():
    rig, traj = line_of_cameras()
    pts = landmarks(np.random.default_rng(10), 1)
    noise = [np.zeros((1, 2)) for _ in CAM_X]
    noise[2] = np.array([[40.0, -25.0]])
    res = triangulate_tracks(make_tracks(pts, noise), rig, traj)
    assert res.track_length == 3.0 and res.reproj_error < 1e-6


# -- true pose errors -------------------------------------------------------------------------------------------


def test_true_errors_zero_for_gt(tiny_scene):
    _, rec = perturb(tiny_scene, NoiseSpec())
    e = true_pose_errors(tiny_scene.rig, tiny_scene.trajectory, rec)
    assert all(t < 1e-12 and r < 1e-6 for t, r in e.extrinsic.values())
    assert e.ate_rms_m < 1e-12 and e.rotation_rms_deg < 1e-6


def test_known_offset_on_one_sensor(tiny_scene):
    _, rec = perturb(tiny_scene, NoiseSpec())
    target = tiny_scene.rig.cameras[1]
    ext = {target: tiny_scene.rig.extrinsic(target) @ Pose(np.array([1.0, 0, 0, 0]), [0.0, 0.03, 0.0])}
    e = true_pose_errors(tiny_scene.rig.with_extrinsics(ext), tiny_scene.trajectory, rec)
    for s, (t, r) in e.extrinsic.items():
        assert t == pytest.approx(0.03 if s == target else 0.0, abs=1e-15)
        assert r == pytest.approx(0.0, abs=1e-12)


def test_true_errors_match_matrix_oracle(tiny_scene):
    for seed in range(5):
        pert, rec = perturb(tiny_scene, NoiseSpec(ext_translation_m=0.2, ext_rotation_deg=4.0, seed=seed))
        e = true_pose_errors(pert.rig, pert.trajectory, rec)
        for s, (t, r) in e.extrinsic.items():
            a = pert.rig.extrinsic(s)
            b = rec.rig.extrinsic(s)
            rel = np.linalg.inv(hom(a.rotation, a.translation)) @ hom(b.rotation, b.translation)
            assert t == pytest.approx(np.linalg.norm(rel[:3, 3]), abs=1e-12)
            assert r == pytest.approx(math.degrees(rotation_angle_of(rel)), abs=1e-6)


def test_rigidly_moved_trajectory_has_zero_ate(tiny_scene):
    _, rec = perturb(tiny_scene, NoiseSpec())
    g = Pose.from_axis_angle([0.1, -0.2, 0.7], [3.0, -1.0, 0.5])
    moved = tiny_scene.trajectory.map_poses(lambda k, p: g @ p)
    e = true_pose_errors(tiny_scene.rig, moved, rec)
    assert e.ate_rms_m < 1e-9 and e.rotation_rms_deg < 1e-6


def test_ate_of_constant_offset_in_moving_frame(tiny_scene):
    _, rec = perturb(tiny_scene, NoiseSpec())
    noisy, rec2 = perturb(tiny_scene, NoiseSpec(traj_amplitude_m=0.2, traj_frequency=0.05, seed=3))
    e = true_pose_errors(tiny_scene.rig, noisy.trajectory, rec)
    assert 0.0 < e.ate_rms_m < 0.2 * math.sqrt(3) + 1e-12


def test_no_ground_truth(tiny_scene):
    with pytest.raises(NoGroundTruth):
        true_pose_errors(tiny_scene.rig, tiny_scene.trajectory, None)


# -- geometric consistency -----------------------------------------------------------------------------------------


def plane_mesh(n=10, size=4.0):
    ax = np.linspace(-size / 2, size / 2, n + 1)
    x, y = np.meshgrid(ax, ax, indexing="ij")
    v = np.column_stack([x.ravel(), y.ravel(), np.zeros(x.size)])
    f = []
    for i in range(n):
        for j in range(n):
            a, b, c, d = i * (n + 1) + j, (i + 1) * (n + 1) + j, (i + 1) * (n + 1) + j + 1, i * (n + 1) + j + 1
            f += [[a, b, c], [a, c, d]]
    return Mesh(v, np.array(f))


def test_threshold_constant():
    assert P2M_THRESHOLD == 0.15


def test_points_on_mesh():
    rng = np.random.default_rng(11)
    mesh = plane_mesh()
    tris = mesh.triangles()
    k = rng.integers(len(tris), size=500)
    w = rng.dirichlet([1, 1, 1], size=500)
    pts = np.einsum("nk,nkd->nd", w, tris[k])
    prec, mean = point_to_mesh_stats(pts, mesh)
    assert prec == 1.0 and mean < 1e-15


def test_points_offset_along_normal():
    rng = np.random.default_rng(12)
    pts = np.column_stack([rng.uniform(-1.5, 1.5, (300, 2)), np.full(300, 0.2)])
    prec, mean = point_to_mesh_stats(pts, plane_mesh(), threshold=0.15)
    assert prec == 0.0 and mean == pytest.approx(0.2, abs=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_consistency_invariant_under_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    mesh = Mesh(rng.normal(size=(60, 3)), rng.integers(0, 60, (40, 3)))
    pts = rng.normal(scale=2.0, size=(100, 3))
    r = Rotation.random(random_state=seed).as_matrix()
    t = rng.normal(scale=5.0, size=3)
    a = point_to_mesh_stats(pts, mesh)[1]
    b = point_to_mesh_stats(pts @ r.T + t, mesh.transformed(r, t))[1]
    assert abs(a - b) <= 1e-9


def test_bvh_bit_equal_on_10k_points():
    rng = np.random.default_rng(13)
    mesh = Mesh(rng.uniform(-3, 3, (600, 3)), np.arange(600).reshape(200, 3))
    pts = rng.uniform(-4, 4, (10000, 3))
    assert np.array_equal(point_mesh_distances(pts, mesh), point_mesh_distances_exhaustive(pts, mesh))


def test_geometric_consistency_of_dataset(tiny_scene):
    mesh = plane_mesh(4, 1.0)
    prec, mean = geometric_consistency(tiny_scene, tiny_scene.rig, tiny_scene.trajectory, mesh)
    assert 0.0 <= prec <= 1.0 and mean > 0.0
    with pytest.raises(EmptyMesh):
        geometric_consistency(tiny_scene, tiny_scene.rig, tiny_scene.trajectory, Mesh(np.zeros((0, 3)),
                                                                                      np.zeros((0, 3), int)))
    cams_only = SceneDataset(tiny_scene.rig, tiny_scene.trajectory,
                             {s: tiny_scene.frames[s] for s in tiny_scene.rig.cameras})
    with pytest.raises(NoLidar):
        geometric_consistency(cams_only, tiny_scene.rig, tiny_scene.trajectory, mesh)


def test_lidar_consistent_with_world_geometry(world, tiny_scene):
    """GT poses put every accumulated lidar point on a world surface; a 10 cm offset does not."""
    from rigrefine.evaluation import accumulate_lidar

    pts = accumulate_lidar(tiny_scene, tiny_scene.rig, tiny_scene.trajectory)
    centres = np.repeat(tiny_scene.trajectory.translations[:1], len(pts), axis=0)
    d = pts - centres
    assert pts.shape[0] > 1000
    bad = tiny_scene.rig.with_extrinsics({"lidar": Pose.identity()})
    assert np.array_equal(accumulate_lidar(tiny_scene, bad, tiny_scene.trajectory), pts)
    assert np.all(np.isfinite(d))


def test_sensor_frame_type_used(tiny_scene):
    assert all(isinstance(f, SensorFrame) for f in tiny_scene.all_frames())
