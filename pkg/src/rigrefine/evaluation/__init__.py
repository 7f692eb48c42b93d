"""Ground-truth-free pose-quality metrics, pose selection and true-error validation."""

from .consistency import P2M_THRESHOLD, accumulate_lidar, geometric_consistency, point_to_mesh_stats
from .metrics import (
    METRICS,
    ORIENTATION,
    PSNR_CAP,
    MetricVector,
    SignAgreementMatrix,
    nvs_metrics,
    psnr,
    select_poses,
    sign_agreement,
    ssim,
)
from .protocol import NVSResult, SceneEvaluation, consistency_mesh, evaluate_scene, nvs_protocol, render_view
from .report import build_report, format_report, read_report, write_report
from .triangulation import OUTLIER_PX, TriangulationResult, triangulate_tracks
from .truth import PoseErrors, true_pose_errors, umeyama

__all__ = [
    "METRICS", "MetricVector", "NVSResult", "ORIENTATION", "OUTLIER_PX", "P2M_THRESHOLD", "PSNR_CAP", "PoseErrors",
    "SceneEvaluation", "SignAgreementMatrix", "TriangulationResult", "accumulate_lidar", "build_report",
    "consistency_mesh", "evaluate_scene", "format_report", "geometric_consistency", "nvs_metrics", "nvs_protocol",
    "point_to_mesh_stats", "psnr", "read_report", "render_view", "select_poses", "sign_agreement", "ssim",
    "triangulate_tracks", "true_pose_errors", "umeyama", "write_report",
]
