"""Sparse reconstruction data model, COLMAP text I/O and labeled-cloud PLY files.

The three COLMAP text files are read into an immutable `ReconstructionBundle`
and checked for referential integrity on every load. Floats are written with
``repr`` so a write/read cycle reproduces every value bit for bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    BrokenReference,
    InputFormatError,
    MalformedLine,
    MissingFile,
    UnknownCameraModel,
)

#: On-disk marker for a keypoint without a triangulated point.
SENTINEL_NONE = -1

_QUAT_TOL = 1e-9


class CameraModel(str, enum.Enum):
    PINHOLE = "PINHOLE"
    SIMPLE_RADIAL = "SIMPLE_RADIAL"
    RADIAL = "RADIAL"

    @property
    def num_params(self) -> int:
        return _NUM_PARAMS[self]


_NUM_PARAMS = {
    CameraModel.PINHOLE: 4,
    CameraModel.SIMPLE_RADIAL: 4,
    CameraModel.RADIAL: 5,
}


class Label(enum.IntEnum):
    UNKNOWN = 0
    TRACHEA = 1
    TUMOR = 2
    FIDUCIAL = 3
    CHAR = 4


PALETTE = {
    Label.UNKNOWN: (128, 128, 128),
    Label.TRACHEA: (255, 170, 190),
    Label.TUMOR: (0, 200, 0),
    Label.FIDUCIAL: (0, 0, 255),
    Label.CHAR: (0, 0, 0),
}


@dataclass(frozen=True)
class CameraIntrinsics:
    camera_id: int
    model: CameraModel
    width: int
    height: int
    params: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "model", CameraModel(self.model))
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera width and height must be positive")
        if len(self.params) != self.model.num_params:
            raise ValueError(
                f"{self.model.value} takes {self.model.num_params} params, got {len(self.params)}"
            )
        focal = self.params[:2] if self.model is CameraModel.PINHOLE else self.params[:1]
        if any(not f > 0 for f in focal):
            raise ValueError("focal length must be positive")


def _frozen_array(values, dtype, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PosedImage:
    """A registered image. Pose maps world to camera: ``p_cam = R(q) p + t``.

    Keypoints are stored column-wise: ``xys`` is (N, 2) and ``point3d_ids``
    is (N,) using ``SENTINEL_NONE`` for untriangulated keypoints. The
    ``keypoints`` property gives the row view with ``None`` for the sentinel.
    """

    image_id: int
    qvec: np.ndarray
    tvec: np.ndarray
    camera_id: int
    name: str
    xys: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    point3d_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        object.__setattr__(self, "qvec", _frozen_array(self.qvec, np.float64, (4,)))
        object.__setattr__(self, "tvec", _frozen_array(self.tvec, np.float64, (3,)))
        object.__setattr__(self, "xys", _frozen_array(self.xys, np.float64, (-1, 2)))
        object.__setattr__(self, "point3d_ids", _frozen_array(self.point3d_ids, np.int64, (-1,)))
        if len(self.xys) != len(self.point3d_ids):
            raise ValueError("xys and point3d_ids must have equal length")
        if abs(float(np.linalg.norm(self.qvec)) - 1.0) > _QUAT_TOL:
            raise ValueError("quaternion must have unit norm")

    @property
    def keypoints(self) -> list[tuple[float, float, int | None]]:
        return [
            (float(x), float(y), None if pid == SENTINEL_NONE else int(pid))
            for (x, y), pid in zip(self.xys, self.point3d_ids)
        ]

    def __eq__(self, other):
        if not isinstance(other, PosedImage):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.camera_id == other.camera_id
            and self.name == other.name
            and np.array_equal(self.qvec, other.qvec)
            and np.array_equal(self.tvec, other.tvec)
            and np.array_equal(self.xys, other.xys)
            and np.array_equal(self.point3d_ids, other.point3d_ids)
        )


@dataclass(frozen=True, eq=False)
class ScenePoint:
    point3d_id: int
    xyz: np.ndarray
    rgb: tuple[int, int, int]
    error: float
    track: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "xyz", _frozen_array(self.xyz, np.float64, (3,)))
        object.__setattr__(self, "rgb", tuple(int(c) for c in self.rgb))
        object.__setattr__(self, "error", float(self.error))
        object.__setattr__(self, "track", tuple((int(i), int(k)) for i, k in self.track))

    def __eq__(self, other):
        if not isinstance(other, ScenePoint):
            return NotImplemented
        return (
            self.point3d_id == other.point3d_id
            and np.array_equal(self.xyz, other.xyz)
            and self.rgb == other.rgb
            and (self.error == other.error or (math.isnan(self.error) and math.isnan(other.error)))
            and self.track == other.track
        )


@dataclass(frozen=True, eq=False)
class ReconstructionBundle:
    cameras: Mapping[int, CameraIntrinsics]
    images: Mapping[int, PosedImage]
    points: Mapping[int, ScenePoint]
    total_input_images: int

    def __post_init__(self):
        if self.total_input_images < len(self.images):
            raise ValueError(
                f"total_input_images={self.total_input_images} is less than the "
                f"{len(self.images)} registered images"
            )

    def __eq__(self, other):
        if not isinstance(other, ReconstructionBundle):
            return NotImplemented
        return (
            self.total_input_images == other.total_input_images
            and dict(self.cameras) == dict(other.cameras)
            and dict(self.images) == dict(other.images)
            and dict(self.points) == dict(other.points)
        )

    @cached_property
    def point_ids(self) -> np.ndarray:
        """Point IDs in ascending order; row order of `point_xyz`."""
        return np.array(sorted(self.points), dtype=np.int64)

    @cached_property
    def point_xyz(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, 3))
        return np.stack([self.points[int(i)].xyz for i in self.point_ids])

    def point_index(self, ids: np.ndarray) -> np.ndarray:
        """Map point IDs to row indices of `point_xyz`."""
        return np.searchsorted(self.point_ids, ids)

    def validate(self) -> None:
        check_integrity(self.cameras, self.images, self.points)


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    """Points with a semantic label, a confidence weight and an optional source ID.

    ``source_ids`` uses ``SENTINEL_NONE`` for points not derived from a bundle point.
    """

    positions: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray
    source_ids: np.ndarray

    def __post_init__(self):
        pos = _frozen_array(self.positions, np.float64, (-1, 3))
        n = len(pos)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "labels", _frozen_array(self.labels, np.uint8, (n,)))
        object.__setattr__(self, "confidence", _frozen_array(self.confidence, np.float64, (n,)))
        object.__setattr__(self, "source_ids", _frozen_array(self.source_ids, np.int64, (n,)))
        if np.any(self.confidence < 0):
            raise ValueError("confidence must be non-negative")
        if np.any((self.labels == Label.UNKNOWN) != (self.confidence == 0)):
            raise ValueError("label must be UNKNOWN exactly when confidence is 0")

    @classmethod
    def from_labels(cls, positions, labels, source_ids=None) -> "LabeledCloud":
        """Cloud with confidence 1 for every labeled point and 0 for UNKNOWN."""
        labels = np.asarray(labels, dtype=np.uint8)
        if source_ids is None:
            source_ids = np.full(len(labels), SENTINEL_NONE)
        conf = (labels != Label.UNKNOWN).astype(np.float64)
        return cls(positions, labels, conf, source_ids)

    @classmethod
    def unlabeled(cls, positions) -> "LabeledCloud":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        return cls.from_labels(positions, np.zeros(len(positions), dtype=np.uint8))

    def __len__(self) -> int:
        return len(self.positions)

    def __eq__(self, other):
        if not isinstance(other, LabeledCloud):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("positions", "labels", "confidence", "source_ids")
        )

    def select(self, label: Label) -> np.ndarray:
        return self.positions[self.labels == label]

    def subset(self, keep: np.ndarray) -> "LabeledCloud":
        return LabeledCloud(
            self.positions[keep], self.labels[keep], self.confidence[keep], self.source_ids[keep]
        )


def check_integrity(cameras, images, points) -> None:
    """Raise `BrokenReference` unless tracks and keypoints agree in both directions."""
    for img in images.values():
        if img.camera_id not in cameras:
            raise BrokenReference("camera", img.camera_id, f"image {img.image_id}")
    for pt in points.values():
        for image_id, kp_idx in pt.track:
            img = images.get(image_id)
            if img is None:
                raise BrokenReference("image", image_id, f"track of point {pt.point3d_id}")
            if not 0 <= kp_idx < len(img.point3d_ids):
                raise BrokenReference(
                    "keypoint", (image_id, kp_idx), f"track of point {pt.point3d_id}"
                )
            if img.point3d_ids[kp_idx] != pt.point3d_id:
                raise BrokenReference(
                    "track", pt.point3d_id,
                    f"keypoint {kp_idx} of image {image_id} points to {img.point3d_ids[kp_idx]}",
                )
    n_track = sum(len(p.track) for p in points.values())
    n_kp = 0
    for img in images.values():
        for pid in img.point3d_ids[img.point3d_ids != SENTINEL_NONE]:
            if int(pid) not in points:
                raise BrokenReference("point3d", int(pid), f"keypoint of image {img.image_id}")
        n_kp += int(np.count_nonzero(img.point3d_ids != SENTINEL_NONE))
    if n_kp != n_track:
        # every track entry matched its keypoint above, so the surplus is on the keypoint side
        track_set = {(i, k) for p in points.values() for i, k in p.track}
        for img in images.values():
            for k in np.flatnonzero(img.point3d_ids != SENTINEL_NONE):
                if (img.image_id, int(k)) not in track_set:
                    raise BrokenReference(
                        "track", int(img.point3d_ids[k]),
                        f"keypoint {int(k)} of image {img.image_id} missing from the point's track",
                    )


# --- reading ---------------------------------------------------------------


def _data_lines(path: Path) -> Iterable[tuple[int, str]]:
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield line_no, line


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingFile(path)
    return path


def read_cameras(path) -> dict[int, CameraIntrinsics]:
    path = _require(Path(path))
    cameras: dict[int, CameraIntrinsics] = {}
    for line_no, line in _data_lines(path):
        elems = line.split()
        if len(elems) < 4:
            raise MalformedLine(path, line_no, "expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS...")
        try:
            model = CameraModel(elems[1])
        except ValueError:
            raise UnknownCameraModel(elems[1], path, line_no) from None
        try:
            camera_id, width, height = int(elems[0]), int(elems[2]), int(elems[3])
            params = tuple(float(v) for v in elems[4:])
            cam = CameraIntrinsics(camera_id, model, width, height, params)
        except ValueError as exc:
            raise MalformedLine(path, line_no, str(exc)) from None
        if camera_id in cameras:
            raise MalformedLine(path, line_no, f"duplicate camera id {camera_id}")
        cameras[camera_id] = cam
    return cameras


def read_images(path) -> dict[int, PosedImage]:
    path = _require(Path(path))
    images: dict[int, PosedImage] = {}
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        line_no = i + 1
        i += 1
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        if len(elems) < 10:
            raise MalformedLine(path, line_no, "expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME")
        if i >= len(lines) or lines[i].lstrip().startswith("#"):
            raise MalformedLine(path, line_no, "missing keypoint line")
        kp_elems = lines[i].split()
        kp_line_no = i + 1
        i += 1
        try:
            image_id = int(elems[0])
            qvec = [float(v) for v in elems[1:5]]
            tvec = [float(v) for v in elems[5:8]]
            camera_id = int(elems[8])
        except ValueError as exc:
            raise MalformedLine(path, line_no, str(exc)) from None
        name = " ".join(elems[9:])
        if len(kp_elems) % 3:
            raise MalformedLine(path, kp_line_no, "keypoints must be X Y POINT3D_ID triples")
        try:
            xys = np.array([float(v) for i3, v in enumerate(kp_elems) if i3 % 3 != 2]).reshape(-1, 2)
            pids = np.array([int(v) for v in kp_elems[2::3]], dtype=np.int64)
        except ValueError as exc:
            raise MalformedLine(path, kp_line_no, str(exc)) from None
        if np.any((pids < 0) & (pids != SENTINEL_NONE)):
            raise MalformedLine(path, kp_line_no, "negative POINT3D_ID other than -1")
        try:
            img = PosedImage(image_id, qvec, tvec, camera_id, name, xys, pids)
        except ValueError as exc:
            raise MalformedLine(path, line_no, str(exc)) from None
        if image_id in images:
            raise MalformedLine(path, line_no, f"duplicate image id {image_id}")
        images[image_id] = img
    return images


def read_points3d(path) -> dict[int, ScenePoint]:
    path = _require(Path(path))
    points: dict[int, ScenePoint] = {}
    for line_no, line in _data_lines(path):
        elems = line.split()
        if len(elems) < 8 or (len(elems) - 8) % 2:
            raise MalformedLine(path, line_no, "expected POINT3D_ID X Y Z R G B ERROR (IMAGE_ID POINT2D_IDX)...")
        try:
            pid = int(elems[0])
            xyz = [float(v) for v in elems[1:4]]
            rgb = tuple(int(v) for v in elems[4:7])
            error = float(elems[7])
            track = tuple(
                (int(elems[k]), int(elems[k + 1])) for k in range(8, len(elems), 2)
            )
        except ValueError as exc:
            raise MalformedLine(path, line_no, str(exc)) from None
        if pid < 0:
            raise MalformedLine(path, line_no, "POINT3D_ID must be non-negative")
        if any(not 0 <= c <= 255 for c in rgb):
            raise MalformedLine(path, line_no, "color components must be in 0..255")
        if len(track) < 2:
            raise MalformedLine(path, line_no, "track must have at least 2 observations")
        if pid in points:
            raise MalformedLine(path, line_no, f"duplicate point id {pid}")
        points[pid] = ScenePoint(pid, xyz, rgb, error, track)
    return points


def read_bundle(dir_path, total_input_images: int | None = None) -> ReconstructionBundle:
    """Load ``cameras.txt``, ``images.txt`` and ``points3D.txt`` from a directory.

    ``total_input_images`` counts every image offered to SfM, registered or
    not; COLMAP does not record unregistered images, so it must come from
    the caller. ``None`` means "all offered images were registered".
    """
    d = Path(dir_path)
    for fname in ("cameras.txt", "images.txt", "points3D.txt"):
        _require(d / fname)
    cameras = read_cameras(d / "cameras.txt")
    images = read_images(d / "images.txt")
    points = read_points3d(d / "points3D.txt")
    check_integrity(cameras, images, points)
    total = len(images) if total_input_images is None else int(total_input_images)
    if total < len(images):
        raise InputFormatError(
            f"total input images ({total}) is smaller than the {len(images)} registered images"
        )
    return ReconstructionBundle(cameras, images, points, total)


def read_image_list(path) -> list[str]:
    """Names of all images offered to SfM, one per line."""
    path = _require(Path(path))
    return [line for _, line in _data_lines(path)]


# --- writing ---------------------------------------------------------------


def _f(x: float) -> str:
    return repr(float(x))


def write_bundle(bundle: ReconstructionBundle, dir_path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)

    lines = [
        "# Camera list with one line of data per camera:",
        "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]",
        f"# Number of cameras: {len(bundle.cameras)}",
    ]
    for cid in sorted(bundle.cameras):
        cam = bundle.cameras[cid]
        lines.append(
            " ".join([str(cid), cam.model.value, str(cam.width), str(cam.height)]
                     + [_f(p) for p in cam.params])
        )
    (d / "cameras.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    n_obs = sum(len(p.track) for p in bundle.points.values())
    mean_obs = n_obs / len(bundle.images) if bundle.images else 0.0
    lines = [
        "# Image list with two lines of data per image:",
        "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
        "#   POINTS2D[] as (X, Y, POINT3D_ID)",
        f"# Number of images: {len(bundle.images)}, mean observations per image: {mean_obs!r}",
    ]
    for iid in sorted(bundle.images):
        img = bundle.images[iid]
        lines.append(
            " ".join([str(iid)] + [_f(v) for v in img.qvec] + [_f(v) for v in img.tvec]
                     + [str(img.camera_id), img.name])
        )
        lines.append(
            " ".join(f"{_f(x)} {_f(y)} {int(p)}" for (x, y), p in zip(img.xys, img.point3d_ids))
        )
    (d / "images.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    mean_track = n_obs / len(bundle.points) if bundle.points else 0.0
    lines = [
        "# 3D point list with one line of data per point:",
        "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)",
        f"# Number of points: {len(bundle.points)}, mean track length: {mean_track!r}",
    ]
    for pid in sorted(bundle.points):
        pt = bundle.points[pid]
        parts = [str(pid)] + [_f(v) for v in pt.xyz] + [str(c) for c in pt.rgb] + [_f(pt.error)]
        for image_id, kp in pt.track:
            parts += [str(image_id), str(kp)]
        lines.append(" ".join(parts))
    (d / "points3D.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- PLY -------------------------------------------------------------------


def export_ply(cloud: LabeledCloud, path) -> None:
    """ASCII PLY with x y z, palette color per label and the label code."""
    out = [
        "ply",
        "format ascii 1.0",
        "comment labels: 0 unknown, 1 trachea, 2 tumor, 3 fiducial, 4 char",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property uchar label",
        "end_header",
    ]
    for p, lab in zip(cloud.positions, cloud.labels):
        r, g, b = PALETTE[Label(int(lab))]
        out.append(f"{_f(p[0])} {_f(p[1])} {_f(p[2])} {r} {g} {b} {int(lab)}")
    Path(path).write_text("\n".join(out) + "\n", encoding="ascii")


def read_ply(path) -> LabeledCloud:
    """Read an ASCII PLY vertex list; a ``label`` property is optional.

    Confidence is not stored in the file, so it comes back as 1 for labeled
    vertices and 0 for UNKNOWN ones.
    """
    path = _require(Path(path))
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read().split("\n")
    if not text or text[0].strip() != "ply":
        raise MalformedLine(path, 1, "not a PLY file")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    header_end = None
    for i, line in enumerate(text[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1:2] != ["ascii"]:
            raise MalformedLine(path, i, "only ASCII PLY is supported")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            header_end = i
            break
    if header_end is None or n_vertex is None:
        raise MalformedLine(path, len(text), "incomplete PLY header")
    try:
        ix, iy, iz = props.index("x"), props.index("y"), props.index("z")
    except ValueError:
        raise MalformedLine(path, header_end, "vertex element lacks x/y/z") from None
    il = props.index("label") if "label" in props else None
    body = text[header_end:header_end + n_vertex]
    if len(body) < n_vertex:
        raise MalformedLine(path, header_end + len(body), "fewer vertex lines than declared")
    pos = np.empty((n_vertex, 3))
    labels = np.zeros(n_vertex, dtype=np.uint8)
    for k, line in enumerate(body):
        tok = line.split()
        if len(tok) != len(props):
            raise MalformedLine(path, header_end + k + 1, "vertex property count mismatch")
        try:
            pos[k] = (float(tok[ix]), float(tok[iy]), float(tok[iz]))
            if il is not None:
                labels[k] = Label(int(tok[il]))
        except ValueError as exc:
            raise MalformedLine(path, header_end + k + 1, str(exc)) from None
    return LabeledCloud.from_labels(pos, labels)
