"""Similarity registration of reconstructed fiducials to robot touchpoints.

Correspondences are not recorded during the procedure, so both point sets
are put in the same order by sorting on distance to their own centroid. The
closed-form least-squares similarity (Umeyama) then maps the reconstruction
frame to the robot frame, which also fixes the metric scale.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .colmap_model import LabeledCloud
from .errors import DegenerateConfiguration

log = logging.getLogger(__name__)

TIE_RTOL = 1e-9
NEAR_TIE_RTOL = 1e-6


class AmbiguousOrderingWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def __call__(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * p @ self.rotation.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ other``: apply ``other`` first."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(d["scale"], np.reshape(d["rotation"], (3, 3)), d["translation"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SimilarityTransform":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def order_by_centroid_distance(points) -> np.ndarray:
    """Permutation sorting points by distance to their centroid.

    Distances equal within a relative 1e-9 are ties and fall back to
    lexicographic (x, y, z). Distinct distances within 1e-6 relative emit an
    `AmbiguousOrderingWarning`: the correspondence may then be wrong.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = np.linalg.norm(p - p.mean(axis=0), axis=1)
    order = list(np.argsort(d, kind="stable"))
    scale = float(d.max()) if len(d) else 0.0
    out = []
    i = 0
    while i < len(order):
        j = i + 1
        while j < len(order) and d[order[j]] - d[order[i]] <= TIE_RTOL * scale:
            j += 1
        group = sorted(order[i:j], key=lambda k: (p[k, 0], p[k, 1], p[k, 2]))
        out.extend(group)
        i = j
    out = np.array(out, dtype=np.intp)
    gaps = np.diff(d[out])
    if np.any((gaps > TIE_RTOL * scale) & (gaps <= NEAR_TIE_RTOL * scale)):
        warnings.warn(
            "centroid distances nearly tie; ordering-based correspondence may mismatch",
            AmbiguousOrderingWarning,
            stacklevel=2,
        )
    return out


def umeyama(source, target, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity with ``target ≈ s R source + t``."""
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("source and target must have the same shape")
    n = len(src)
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 correspondences, got {n}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("source points are collinear or coincident")
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    var_s = float((xs * xs).sum()) / n
    s = float((D * S).sum() / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return SimilarityTransform(s, R, t)


@dataclass(frozen=True, eq=False)
class AccuracyReport:
    per_point: np.ndarray
    mean: float
    std: float

    def to_dict(self) -> dict:
        return {
            "per_point_mm": [float(v) for v in self.per_point],
            "mean_mm": self.mean,
            "std_mm": self.std,
            "std_kind": "population",
        }


def registration_accuracy(xform: SimilarityTransform, source, target) -> AccuracyReport:
    """Per-point L2 residuals after mapping source onto target; population std."""
    r = np.linalg.norm(np.asarray(target, dtype=np.float64) - xform(source), axis=1)
    return AccuracyReport(r, float(r.mean()), float(r.std()))


def summarize_models(reports: list[AccuracyReport]) -> dict:
    """Across-model breakdown: mean and population std of per-model mean residuals,
    alongside the pooled per-point statistics."""
    means = np.array([r.mean for r in reports])
    pooled = np.concatenate([r.per_point for r in reports])
    return {
        "n_models": len(reports),
        "across_models_mean_mm": float(means.mean()),
        "across_models_std_mm": float(means.std()),
        "pooled_points_mean_mm": float(pooled.mean()),
        "pooled_points_std_mm": float(pooled.std()),
    }


def register_ordered(source, target, with_scale: bool = True):
    """Order both sets by centroid distance, fit, and score. Returns
    ``(xform, report, source_sorted, target_sorted)``."""
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if len(src) != len(dst):
        raise DegenerateConfiguration(
            f"{len(src)} reconstructed fiducials but {len(dst)} touchpoints"
        )
    src_s = src[order_by_centroid_distance(src)]
    dst_s = dst[order_by_centroid_distance(dst)]
    xf = umeyama(src_s, dst_s, with_scale)
    return xf, registration_accuracy(xf, src_s, dst_s), src_s, dst_s


def apply(xform: SimilarityTransform, cloud: LabeledCloud) -> LabeledCloud:
    return LabeledCloud(xform(cloud.positions), cloud.labels, cloud.confidence, cloud.source_ids)
