"""Incremental cut trajectories over the fitted trachea surface.

The cut line runs along the tumor footprint's principal axis, extended by a
margin past both ends. Each pass is lifted onto the surface and offset along
the local normal by the clearance; successive passes step laterally across
the footprint by the depth increment until the line leaves the footprint.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyPlan, TooFewTumorPoints, UnsupportedOption
from .surface_fit import PolySurface

MIN_TUMOR_POINTS = 10
_EXTENT_TOL = 1e-9
_SPACING_RTOL = 1e-12   # absorbs rounding when the line length is a multiple of step_ds


@dataclass(frozen=True)
class PlanConfig:
    clearance: float = 1.0
    depth_increment: float = 4.0
    step_ds: float = 0.5
    margin_mm: float = 2.0
    n_passes_max: int = 50
    advance_mode: str = "lateral"

    def __post_init__(self):
        if self.clearance < 0 or self.depth_increment <= 0 or self.step_ds <= 0:
            raise ValueError("clearance must be >= 0; depth_increment and step_ds > 0")
        if self.margin_mm < 0:
            raise ValueError("margin_mm must be >= 0")


@dataclass(frozen=True, eq=False)
class TumorExtent:
    axis: np.ndarray         # unit (2,), sign toward +x
    lateral: np.ndarray      # unit (2,), axis rotated +90 degrees
    origin: np.ndarray       # (2,) footprint centroid
    along: tuple[float, float]    # tumor extent along the axis, relative to origin
    across: tuple[float, float]   # tumor extent along the lateral direction
    start: np.ndarray        # (3,) margin-inflated cut start
    end: np.ndarray          # (3,) margin-inflated cut end
    width: float
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)  # x_min, x_max, y_min, y_max

    def xy(self, s, w) -> np.ndarray:
        """Footprint coordinates (along, lateral) back to world xy."""
        s = np.asarray(s, dtype=np.float64)[..., None]
        w = np.asarray(w, dtype=np.float64)[..., None]
        return self.origin + s * self.axis + w * self.lateral

    def to_dict(self) -> dict:
        return {
            "axis": [float(v) for v in self.axis],
            "origin": [float(v) for v in self.origin],
            "along_mm": list(self.along),
            "across_mm": list(self.across),
            "start": [float(v) for v in self.start],
            "end": [float(v) for v in self.end],
            "width_mm": self.width,
            "tumor_bbox_mm": list(self.bbox),
        }


def tumor_extent(tumor_points, margin_mm: float = 2.0) -> TumorExtent:
    p = np.asarray(tumor_points, dtype=np.float64).reshape(-1, 3)
    if len(p) < MIN_TUMOR_POINTS:
        raise TooFewTumorPoints(f"need at least {MIN_TUMOR_POINTS} tumor points, got {len(p)}")
    xy = p[:, :2]
    origin = xy.mean(axis=0)
    d = xy - origin
    vals, vecs = np.linalg.eigh(d.T @ d / len(d))
    axis = vecs[:, np.argmax(vals)]
    if axis[0] < -_EXTENT_TOL or (abs(axis[0]) <= _EXTENT_TOL and axis[1] < 0):
        axis = -axis
    lateral = np.array([-axis[1], axis[0]])
    s = d @ axis
    w = d @ lateral
    i0, i1 = int(np.argmin(s)), int(np.argmax(s))
    start = p[i0] - margin_mm * np.append(axis, 0.0)
    end = p[i1] + margin_mm * np.append(axis, 0.0)
    return TumorExtent(axis, lateral, origin, (float(s[i0]), float(s[i1])),
                       (float(w.min()), float(w.max())), start, end, float(w.max() - w.min()),
                       (float(xy[:, 0].min()), float(xy[:, 0].max()),
                        float(xy[:, 1].min()), float(xy[:, 1].max())))


@dataclass(frozen=True, eq=False)
class CutPass:
    waypoints: np.ndarray
    pass_index: int
    depth_offset: float


@dataclass(frozen=True, eq=False)
class CutPlan:
    passes: list[CutPass]
    clearance: float
    depth_increment: float
    step_ds: float
    extent: TumorExtent | None = None
    config: PlanConfig = field(default_factory=PlanConfig)

    def to_dict(self) -> dict:
        return {
            "units": "mm, robot frame",
            "clearance_mm": self.clearance,
            "depth_increment_mm": self.depth_increment,
            "step_ds_mm": self.step_ds,
            "advance_mode": self.config.advance_mode,
            "tumor_extent": None if self.extent is None else self.extent.to_dict(),
            "passes": [
                {
                    "pass_index": p.pass_index,
                    "depth_offset_mm": p.depth_offset,
                    "waypoints": [[float(c) for c in w] for w in p.waypoints],
                }
                for p in self.passes
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    def save_pass_csvs(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for p in self.passes:
            path = out_dir / f"pass_{p.pass_index:02d}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                fh.write(f"# pass {p.pass_index}, depth offset {p.depth_offset!r} mm, robot frame\n")
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["idx", "x_mm", "y_mm", "z_mm"])
                for i, wp in enumerate(p.waypoints):
                    w.writerow([i] + [repr(float(c)) for c in wp])
            paths.append(path)
        return paths


def lift(surface: PolySurface, xy: np.ndarray, clearance: float) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    z = np.atleast_1d(surface.eval(xy[:, 0], xy[:, 1]))
    n = surface.normal(xy[:, 0], xy[:, 1]).reshape(-1, 3)
    return np.column_stack([xy, z]) + clearance * n


def _sample_pass(surface, a_xy, b_xy, clearance, step_ds) -> np.ndarray:
    length = float(np.linalg.norm(b_xy - a_xy))
    n = max(1, math.ceil(length / step_ds))
    while True:
        t = np.linspace(0.0, 1.0, n + 1)[:, None]
        wps = lift(surface, a_xy + t * (b_xy - a_xy), clearance)
        gap = float(np.linalg.norm(np.diff(wps, axis=0), axis=1).max()) if n else 0.0
        if gap <= step_ds * (1 + _SPACING_RTOL):
            return wps
        n = math.ceil(n * gap / step_ds) + 1


def plan_cuts(surface: PolySurface, tumor_points, config: PlanConfig = PlanConfig()) -> CutPlan:
    if config.advance_mode == "deepen":
        raise UnsupportedOption("advance-mode 'deepen' is not implemented; use 'lateral'")
    if config.advance_mode != "lateral":
        raise UnsupportedOption(f"unknown advance-mode {config.advance_mode!r}")
    ext = tumor_extent(tumor_points, config.margin_mm)
    s0 = ext.along[0] - config.margin_mm
    s1 = ext.along[1] + config.margin_mm
    if config.n_passes_max < 1 or s1 - s0 <= 0:
        raise EmptyPlan("tumor footprint yields no cut line")
    passes = []
    k = 0
    while k < config.n_passes_max:
        offset = k * config.depth_increment
        if offset > ext.width + _EXTENT_TOL:
            break
        w = ext.across[0] + offset
        a, b = ext.xy(s0, w), ext.xy(s1, w)
        passes.append(CutPass(_sample_pass(surface, a, b, config.clearance, config.step_ds),
                              k, offset))
        k += 1
    return CutPlan(passes, config.clearance, config.depth_increment, config.step_ds, ext, config)


@dataclass(frozen=True)
class Violation:
    pass_index: int
    waypoint_index: int
    kind: str
    value: float


def normal_distance(surface: PolySurface, pts, iters: int = 50) -> np.ndarray:
    """Signed distance of points above the surface, measured along the normal at its foot."""
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    foot = p[:, :2].copy()
    d = np.zeros(len(p))
    for _ in range(iters):
        s = np.column_stack([foot, np.atleast_1d(surface.eval(foot[:, 0], foot[:, 1]))])
        n = surface.normal(foot[:, 0], foot[:, 1]).reshape(-1, 3)
        d = np.einsum("ij,ij->i", p - s, n)
        new_foot = (p - d[:, None] * n)[:, :2]
        if np.abs(new_foot - foot).max(initial=0.0) < 1e-13:
            foot = new_foot
            break
        foot = new_foot
    return d


def validate_plan(plan: CutPlan, surface: PolySurface, trachea_points,
                  tol: float = 0.1, xy_radius: float = 0.5) -> list[Violation]:
    """Clearance and below-tissue checks for every waypoint; empty list means clean."""
    out: list[Violation] = []
    tp = np.asarray(trachea_points, dtype=np.float64).reshape(-1, 3)
    tree = cKDTree(tp[:, :2]) if len(tp) else None
    for p in plan.passes:
        d = normal_distance(surface, p.waypoints)
        for i in np.flatnonzero(np.abs(d - plan.clearance) > tol):
            out.append(Violation(p.pass_index, int(i), "clearance", float(d[i])))
        if tree is None:
            continue
        for i, nbrs in enumerate(tree.query_ball_point(p.waypoints[:, :2], xy_radius)):
            if nbrs:
                zmax = float(tp[nbrs, 2].max())
                if p.waypoints[i, 2] < zmax:
                    out.append(Violation(p.pass_index, i, "below_tissue", zmax - float(p.waypoints[i, 2])))
    return out
