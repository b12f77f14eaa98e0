"""Fuse per-image segmentation masks into per-point labels.

Each observation of a point casts a vote for the mask label under its
projection, weighted by ``1 / (1 + d)`` where ``d`` is the pixel distance
from the projection to the image center: labels near the center suffer less
from occlusion, lighting falloff and distortion error.

Sparse fusion votes only through a point's track. Dense fusion projects every
point into every image, which is what a dense cloud without pixel
correspondences needs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .camera_models import center_distance, project_points, qvec_to_rotmat, rigid_apply
from .colmap_model import SENTINEL_NONE, Label, LabeledCloud, ReconstructionBundle
from .errors import MaskDimensionMismatch, MissingMask, NegativeDistance, NoTumorPoints
from .pgm import read_manifest, read_pgm


class MaskCode(enum.IntEnum):
    BACKGROUND = 0
    TRACHEA = 1
    TUMOR = 2
    FIDUCIAL = 3


N_CODES = len(MaskCode)

# argmax ties resolve toward the earliest entry
_TIE_PRIORITY = (MaskCode.TUMOR, MaskCode.FIDUCIAL, MaskCode.TRACHEA, MaskCode.BACKGROUND)

_CODE_TO_LABEL = np.array(
    [Label.UNKNOWN, Label.TRACHEA, Label.TUMOR, Label.FIDUCIAL], dtype=np.uint8
)


@dataclass(frozen=True, eq=False)
class MaskImage:
    labels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.labels, dtype=np.uint8)
        if arr.ndim != 2:
            raise ValueError("mask must be 2-D")
        if arr.size and arr.max() >= N_CODES:
            raise ValueError(f"mask codes must be in 0..{N_CODES - 1}")
        arr.flags.writeable = False
        object.__setattr__(self, "labels", arr)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]


def vote_weight(d):
    """Center-distance vote weight ``1 / (1 + d)``."""
    d_arr = np.asarray(d, dtype=np.float64)
    if np.any(d_arr < 0):
        raise NegativeDistance(f"distance must be non-negative, got {d}")
    w = 1.0 / (1.0 + d_arr)
    return float(w) if w.ndim == 0 else w


def load_masks(manifest_path, bundle: ReconstructionBundle) -> dict[int, MaskImage]:
    """Masks for every bundle image named in the manifest."""
    entries = read_manifest(manifest_path)
    by_name = {img.name: iid for iid, img in bundle.images.items()}
    return {by_name[n]: MaskImage(read_pgm(p)) for n, p in entries.items() if n in by_name}


def _checked_mask(bundle, masks, image_id) -> MaskImage:
    mask = masks.get(image_id)
    if mask is None:
        raise MissingMask(image_id)
    cam = bundle.cameras[bundle.images[image_id].camera_id]
    if (mask.width, mask.height) != (cam.width, cam.height):
        raise MaskDimensionMismatch(image_id, (cam.width, cam.height), (mask.width, mask.height))
    return mask


def lookup(mask: MaskImage, uv: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mask codes at the nearest pixel; returns ``(codes, inside)``.

    ``inside`` is False for invalid projections and rounded pixels outside
    the grid; their code is 0.
    """
    col = np.floor(np.where(valid, uv[:, 0], -1.0) + 0.5)
    row = np.floor(np.where(valid, uv[:, 1], -1.0) + 0.5)
    inside = valid & (col >= 0) & (col < mask.width) & (row >= 0) & (row < mask.height)
    codes = np.zeros(len(uv), dtype=np.intp)
    codes[inside] = mask.labels[row[inside].astype(np.intp), col[inside].astype(np.intp)]
    return codes, inside


def _vote(tally, rows, uv, valid, mask, cam, background_votes):
    codes, inside = lookup(mask, uv, valid)
    if not background_votes:
        inside &= codes != MaskCode.BACKGROUND
    w = vote_weight(center_distance(cam, uv[inside]))
    np.add.at(tally, (rows[inside], codes[inside]), w)


def labels_from_tally(tally: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Winning label and its weight share for each row of an (N, 4) tally.

    A background win and an empty tally both give UNKNOWN with confidence 0.
    """
    tally = np.asarray(tally, dtype=np.float64)
    ordered = tally[:, list(_TIE_PRIORITY)]
    winner = np.array(_TIE_PRIORITY)[np.argmax(ordered, axis=1)]
    total = tally.sum(axis=1)
    labels = _CODE_TO_LABEL[winner]
    labels[total <= 0] = Label.UNKNOWN
    conf = np.zeros(len(tally))
    known = labels != Label.UNKNOWN
    conf[known] = tally[known, winner[known]] / total[known]
    return labels, conf


def sparse_tally(bundle: ReconstructionBundle, masks: Mapping[int, MaskImage],
                 background_votes: bool = True) -> np.ndarray:
    """Vote tally (rows follow ``bundle.point_ids``) through each point's track."""
    tally = np.zeros((len(bundle.point_ids), N_CODES))
    for iid in sorted(bundle.images):
        img = bundle.images[iid]
        k = np.flatnonzero(img.point3d_ids != SENTINEL_NONE)
        if len(k) == 0:
            continue
        mask = _checked_mask(bundle, masks, iid)
        cam = bundle.cameras[img.camera_id]
        rows = bundle.point_index(img.point3d_ids[k])
        p_cam = rigid_apply(qvec_to_rotmat(img.qvec), img.tvec, bundle.point_xyz[rows])
        uv, valid = project_points(cam, p_cam)
        _vote(tally, rows, uv, valid, mask, cam, background_votes)
    return tally


def fuse_sparse(bundle: ReconstructionBundle, masks: Mapping[int, MaskImage],
                background_votes: bool = True) -> LabeledCloud:
    tally = sparse_tally(bundle, masks, background_votes)
    labels, conf = labels_from_tally(tally)
    return LabeledCloud(bundle.point_xyz, labels, conf, bundle.point_ids)


def dense_tally(positions, bundle: ReconstructionBundle, masks: Mapping[int, MaskImage],
                background_votes: bool = True) -> np.ndarray:
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    tally = np.zeros((len(pts), N_CODES))
    rows = np.arange(len(pts))
    for iid in sorted(bundle.images):
        img = bundle.images[iid]
        mask = _checked_mask(bundle, masks, iid)
        cam = bundle.cameras[img.camera_id]
        p_cam = rigid_apply(qvec_to_rotmat(img.qvec), img.tvec, pts)
        uv, valid = project_points(cam, p_cam)
        _vote(tally, rows, uv, valid, mask, cam, background_votes)
    return tally


def fuse_dense(positions, bundle: ReconstructionBundle, masks: Mapping[int, MaskImage],
               background_votes: bool = True) -> LabeledCloud:
    """Label arbitrary points by voting across every image of the bundle."""
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    labels, conf = labels_from_tally(dense_tally(pts, bundle, masks, background_votes))
    return LabeledCloud(pts, labels, conf, np.full(len(pts), SENTINEL_NONE))


@dataclass(frozen=True)
class PrecisionReport:
    overall_pct: float
    per_image_mean_pct: float
    per_image_std_pct: float
    per_image_pct: dict[int, float]
    n_projected: int


def projection_precision(cloud: LabeledCloud, reference_masks: Mapping[int, MaskImage],
                         bundle: ReconstructionBundle) -> PrecisionReport:
    """Share of tumor-labeled points that project onto tumor pixels of reference masks.

    Projections behind the camera or off the image are not counted.
    """
    tumor = cloud.select(Label.TUMOR)
    if len(tumor) == 0:
        raise NoTumorPoints("cloud has no tumor-labeled points")
    hits = total = 0
    per_image: dict[int, float] = {}
    for iid in sorted(reference_masks):
        if iid not in bundle.images:
            continue
        img = bundle.images[iid]
        mask = _checked_mask(bundle, reference_masks, iid)
        cam = bundle.cameras[img.camera_id]
        uv, valid = project_points(cam, rigid_apply(qvec_to_rotmat(img.qvec), img.tvec, tumor))
        codes, inside = lookup(mask, uv, valid)
        n_in = int(inside.sum())
        if n_in == 0:
            continue
        h = int(np.count_nonzero(codes[inside] == MaskCode.TUMOR))
        per_image[iid] = 100.0 * h / n_in
        hits += h
        total += n_in
    if total == 0:
        raise NoTumorPoints("no tumor point projects into any reference image")
    vals = np.array(list(per_image.values()))
    return PrecisionReport(
        overall_pct=100.0 * hits / total,
        per_image_mean_pct=float(vals.mean()),
        per_image_std_pct=float(vals.std()),
        per_image_pct=per_image,
        n_projected=total,
    )
