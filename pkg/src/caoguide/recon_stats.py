"""Reconstruction quality statistics for a sparse bundle.

The five reported quantities are the usual SfM comparison columns:
registered-image percentage, point count, mean track length, mean
observations per registered image and mean reprojection error. Runtime is
carried through from the caller; it is a property of the external SfM run.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .camera_models import project_points, qvec_to_rotmat, rigid_apply
from .colmap_model import SENTINEL_NONE, ReconstructionBundle
from .errors import (
    EmptyImageSet,
    EmptyPointSet,
    NoProjectableObservations,
    ZeroTotalImages,
)


@dataclass(frozen=True)
class ReconReport:
    reconstructed_pct: float
    n_points: int
    mean_track_length: float
    mean_observations_per_image: float
    mean_reprojection_error: float
    stored_error_mean: float
    n_observations: int
    n_behind_camera: int
    runtime_minutes: float | None = None


def reconstruction_percentage(bundle: ReconstructionBundle) -> float:
    if bundle.total_input_images < 1:
        raise ZeroTotalImages("total_input_images must be at least 1")
    return 100.0 * len(bundle.images) / bundle.total_input_images


def _total_observations(bundle: ReconstructionBundle) -> int:
    return sum(len(bundle.points[pid].track) for pid in sorted(bundle.points))


def mean_track_length(bundle: ReconstructionBundle) -> float:
    if not bundle.points:
        raise EmptyPointSet("bundle has no 3D points")
    return _total_observations(bundle) / len(bundle.points)


def mean_observations_per_image(bundle: ReconstructionBundle) -> float:
    if not bundle.images:
        raise EmptyImageSet("bundle has no registered images")
    return _total_observations(bundle) / len(bundle.images)


def reprojection_errors(bundle: ReconstructionBundle) -> tuple[np.ndarray, int]:
    """Per-observation pixel errors ordered by (point id, track position).

    Returns the errors of projectable observations and the number of
    observations skipped because the point was behind the camera.
    """
    chunks_err = []
    chunks_key = []
    n_behind = 0
    for iid in sorted(bundle.images):
        img = bundle.images[iid]
        cam = bundle.cameras[img.camera_id]
        k = np.flatnonzero(img.point3d_ids != SENTINEL_NONE)
        if len(k) == 0:
            continue
        pids = img.point3d_ids[k]
        xyz = bundle.point_xyz[bundle.point_index(pids)]
        p_cam = rigid_apply(qvec_to_rotmat(img.qvec), img.tvec, xyz)
        uv, valid = project_points(cam, p_cam)
        n_behind += int(np.count_nonzero(~valid))
        diff = uv[valid] - img.xys[k[valid]]
        chunks_err.append(np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]))
        chunks_key.append(np.stack([pids[valid], np.full(int(valid.sum()), iid), k[valid]], axis=1))
    if not chunks_err:
        return np.zeros(0), n_behind
    err = np.concatenate(chunks_err)
    key = np.concatenate(chunks_key)
    order = np.lexsort((key[:, 2], key[:, 1], key[:, 0]))
    return err[order], n_behind


def mean_reprojection_error(bundle: ReconstructionBundle) -> float:
    err, _ = reprojection_errors(bundle)
    if len(err) == 0:
        raise NoProjectableObservations("no observation projects in front of its camera")
    return math.fsum(err) / len(err)


def compute_report(bundle: ReconstructionBundle, runtime_minutes: float | None = None) -> ReconReport:
    err, n_behind = reprojection_errors(bundle)
    if len(err) == 0:
        raise NoProjectableObservations("no observation projects in front of its camera")
    stored = [bundle.points[pid].error for pid in sorted(bundle.points)]
    return ReconReport(
        reconstructed_pct=reconstruction_percentage(bundle),
        n_points=len(bundle.points),
        mean_track_length=mean_track_length(bundle),
        mean_observations_per_image=mean_observations_per_image(bundle),
        mean_reprojection_error=math.fsum(err) / len(err),
        stored_error_mean=math.fsum(stored) / len(stored),
        n_observations=_total_observations(bundle),
        n_behind_camera=n_behind,
        runtime_minutes=runtime_minutes,
    )


CSV_COLUMNS = [
    "bundle",
    "reconstructed_pct",
    "n_points",
    "mean_track_length",
    "mean_observations_per_image",
    "mean_reprojection_error_px",
    "stored_error_mean_px",
    "n_observations",
    "n_behind_camera",
    "runtime_minutes",
]

CSV_PREAMBLE = (
    "# reconstructed_pct = 100 * registered images / input images; "
    "mean_observations_per_image = sum of track lengths / registered images; "
    "reprojection error recomputed from geometry (pixels)\n"
)


def report_rows(reports: dict[str, ReconReport]) -> str:
    buf = io.StringIO()
    buf.write(CSV_PREAMBLE)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for name, r in reports.items():
        d = asdict(r)
        w.writerow([
            name,
            repr(d["reconstructed_pct"]),
            d["n_points"],
            repr(d["mean_track_length"]),
            repr(d["mean_observations_per_image"]),
            repr(d["mean_reprojection_error"]),
            repr(d["stored_error_mean"]),
            d["n_observations"],
            d["n_behind_camera"],
            "" if r.runtime_minutes is None else repr(r.runtime_minutes),
        ])
    return buf.getvalue()


def format_table(name: str, r: ReconReport) -> str:
    rows = [
        ("Reconst. %", f"{r.reconstructed_pct:.2f}"),
        ("# Points", f"{r.n_points}"),
        ("Track Length", f"{r.mean_track_length:.2f}"),
        ("Observations / image", f"{r.mean_observations_per_image:.2f}"),
        ("Reprojection Error (px)", f"{r.mean_reprojection_error:.4f}"),
        ("Stored error mean (px)", f"{r.stored_error_mean:.4f}"),
        ("Runtime (min)", "-" if r.runtime_minutes is None else f"{r.runtime_minutes:.2f}"),
    ]
    width = max(len(k) for k, _ in rows)
    lines = [name] + [f"  {k:<{width}}  {v}" for k, v in rows]
    if r.n_behind_camera:
        lines.append(f"  ({r.n_behind_camera} observations behind camera skipped)")
    return "\n".join(lines)
