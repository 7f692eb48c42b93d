"""Evaluation reports: per-scene metrics, deltas, selection and the agreement matrix."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .metrics import METRICS, ORIENTATION, select_poses, sign_agreement

TRUE_ERROR = "true_error"  # mean extrinsic translation error + RMS ATE, m; lower is better


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def true_error_value(errors) -> float:
    return errors.mean_extrinsic_m + errors.ate_rms_m


def build_report(entries) -> dict:
    """``entries``: dicts with keys scene, original, optimized (SceneEvaluation) in any order."""
    entries = sorted(entries, key=lambda e: e["scene"])
    labels = list(METRICS)
    has_truth = bool(entries) and all(e["original"].true_errors is not None and e["optimized"].true_errors is not None
                                      for e in entries)
    if has_truth:
        labels.append(TRUE_ERROR)
    orient = {**ORIENTATION, TRUE_ERROR: -1}
    scenes, raw, oriented = [], [], []
    for e in entries:
        a = e["original"].metrics.as_dict()
        b = e["optimized"].metrics.as_dict()
        if has_truth:
            a[TRUE_ERROR] = true_error_value(e["original"].true_errors)
            b[TRUE_ERROR] = true_error_value(e["optimized"].true_errors)
        d = {m: b[m] - a[m] for m in labels}
        raw.append([d[m] for m in METRICS])
        oriented.append([orient[m] * d[m] for m in labels])
        rec = {
            "scene": e["scene"],
            "original": {m: _clean(a[m]) for m in labels},
            "optimized": {m: _clean(b[m]) for m in labels},
            "delta": {m: _clean(d[m]) for m in labels},
            "improved": {m: bool(orient[m] * d[m] > 0) for m in labels},
        }
        for key in ("original", "optimized"):
            ev = e[key]
            if ev.true_errors is not None:
                rec.setdefault("true_errors", {})[key] = ev.true_errors.as_dict()
            if ev.nvs is not None:
                rec.setdefault("nvs_per_camera", {})[key] = {c: list(v) for c, v in ev.nvs.per_camera.items()}
            if ev.notes:
                rec.setdefault("notes", {})[key] = list(ev.notes)
        scenes.append(rec)
    selection = select_poses(raw, [ORIENTATION[m] for m in METRICS]) if raw else []
    for rec, sel in zip(scenes, selection):
        rec["selection"] = sel
    report = {"version": 1, "metrics": labels, "orientation": {m: orient[m] for m in labels}, "scenes": scenes}
    if oriented:
        mat = sign_agreement(np.array(oriented), labels)
        report["agreement"] = {"labels": labels, "values": [[_clean(float(v)) for v in row] for row in mat.values]}
    return report


def write_report(report: dict, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jp = out_dir / "report.json"
    with open(jp, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    cp = out_dir / "report.csv"
    with open(cp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scene", "metric", "original", "optimized", "delta", "improved"])
        for rec in report["scenes"]:
            for m in report["metrics"]:
                w.writerow([rec["scene"], m, _fmt(rec["original"][m]), _fmt(rec["optimized"][m]), _fmt(rec["delta"][m]),
                            int(rec["improved"][m])])
    return jp, cp


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def read_report(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    with open(p) as f:
        return json.load(f)


def format_report(report: dict) -> str:
    """Human-readable table of a report."""
    lines = []
    for rec in report["scenes"]:
        lines.append(f"{rec['scene']}: selection={rec['selection']}")
        for m in report["metrics"]:
            a, b = rec["original"][m], rec["optimized"][m]
            fa = "n/a" if a is None else f"{a:.6g}"
            fb = "n/a" if b is None else f"{b:.6g}"
            lines.append(f"  {m:<14} {fa:>12} -> {fb:<12} {'improved' if rec['improved'][m] else ''}")
    if "agreement" in report:
        labels = report["agreement"]["labels"]
        lines.append("agreement:")
        lines.append(" " * 15 + " ".join(f"{m[:8]:>8}" for m in labels))
        for m, row in zip(labels, report["agreement"]["values"]):
            lines.append(f"  {m:<13}" + " ".join("     n/a" if v is None else f"{v:8.3f}" for v in row))
    return "\n".join(lines)
