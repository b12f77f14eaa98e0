"""Synthetic half-pipe trachea scenes with known answers for every stage.

All geometry is defined in the robot frame (mm). The trachea is the lower
half of a cylinder along x, opening upward, truncated at ``half_angle_deg``
on each side; the tumor is a smooth bump with an elliptical footprint; five
dark fiducial dots sit on the trachea. Cameras sit on a ring above the
scene looking down. The reconstruction frame is the robot frame under a
random similarity, so registration always has work to do.

Slopes are kept below the camera ray angles, so nothing in the scene is
occluded and every pixel sees exactly one surface point. Sampled cloud
points keep a guard distance from every label boundary, which makes the
noiseless masks unambiguous at the rounded projection of any point.

`seed` drives the reconstruction-frame similarity and all noise.
`layout_seed` drives point sampling and track dropout; with a fixed layout
seed the noiseless geometry does not depend on `seed`.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .camera_models import project_points, qvec_to_rotmat, rigid_apply, rotmat_to_qvec
from .colmap_model import (
    SENTINEL_NONE,
    CameraIntrinsics,
    CameraModel,
    Label,
    LabeledCloud,
    PosedImage,
    ReconstructionBundle,
    ScenePoint,
    export_ply,
    write_bundle,
)
from .errors import InvalidSpec
from .label_fusion import MaskCode, MaskImage
from .pgm import write_manifest, write_pgm
from .registration import SimilarityTransform

DEFAULT_FIDUCIALS = ((-20.0, 3.0), (-12.0, -4.0), (11.0, 4.5), (17.0, -3.5), (23.0, 2.0))

GRAY_LEVELS = {"background": 25, "trachea": 190, "tumor": 140, "fiducial": 45}


@dataclass(frozen=True)
class TracheaSpec:
    radius: float = 10.0
    length: float = 50.0
    half_angle_deg: float = 50.0


@dataclass(frozen=True)
class TumorSpec:
    center: tuple[float, float] = (0.0, 0.0)
    semi_axes: tuple[float, float, float] = (8.0, 4.5, 5.0)  # footprint x, footprint y, height
    yaw_deg: float = 0.0


@dataclass(frozen=True)
class CameraRig:
    count: int = 20
    radius: float = 30.0
    height: float = 100.0
    look_at: tuple[float, float, float] = (0.0, 0.0, 2.0)
    width: int = 545
    height_px: int = 545
    focal: float = 800.0
    model: str = "RADIAL"
    k1: float = -0.02
    k2: float = 0.005


@dataclass(frozen=True)
class NoiseSpec:
    pixel_sigma: float = 0.0
    point_sigma: float = 0.0   # robot touchpoint noise, mm
    mask_flip_rate: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    trachea: TracheaSpec = field(default_factory=TracheaSpec)
    tumor: TumorSpec | None = field(default_factory=TumorSpec)
    fiducials: tuple[tuple[float, float], ...] = DEFAULT_FIDUCIALS
    cameras: CameraRig = field(default_factory=CameraRig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    layout_seed: int = 0
    n_sparse_points: int = 2000
    dense_spacing: float = 0.25
    drop_images: int = 0
    guard_mm: float = 0.75
    fiducial_radius: float = 0.6
    scale_range: tuple[float, float] = (0.5, 2.0)
    track_keep_prob: float = 0.85

    def validate(self) -> None:
        t = self.trachea
        if not (t.radius > 0 and t.length > 0 and 0 < t.half_angle_deg < 90):
            raise InvalidSpec("trachea radius, length must be > 0 and half angle in (0, 90)")
        if self.tumor is not None and any(not a > 0 for a in self.tumor.semi_axes):
            raise InvalidSpec("tumor semi-axes must be positive")
        if self.cameras.count < 2:
            raise InvalidSpec("need at least 2 cameras")
        n = self.noise
        if n.pixel_sigma < 0 or n.point_sigma < 0 or not 0 <= n.mask_flip_rate < 1:
            raise InvalidSpec("noise sigmas must be >= 0 and flip rate in [0, 1)")
        if not 0 <= self.drop_images <= self.cameras.count - 2:
            raise InvalidSpec("drop_images must leave at least 2 registered images")
        if len(self.fiducials) < 3:
            raise InvalidSpec("need at least 3 fiducials")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise InvalidSpec("scale range must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        tumor = d.pop("tumor", None)
        return cls(
            trachea=TracheaSpec(**d.pop("trachea", {})),
            tumor=None if tumor is None else TumorSpec(
                tuple(tumor["center"]), tuple(tumor["semi_axes"]), tumor.get("yaw_deg", 0.0)),
            fiducials=tuple(tuple(f) for f in d.pop("fiducials", DEFAULT_FIDUCIALS)),
            cameras=CameraRig(**{k: tuple(v) if isinstance(v, list) else v
                                 for k, v in d.pop("cameras", {}).items()}),
            noise=NoiseSpec(**d.pop("noise", {})),
            scale_range=tuple(d.pop("scale_range", (0.5, 2.0))),
            **d,
        )


def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(stream.encode())])


class SceneGeometry:
    """Robot-frame height field ``z = h(x, y)`` with labels."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        t = spec.trachea
        self.R = t.radius
        self.half_len = t.length / 2.0
        self.y_max = t.radius * math.sin(math.radians(t.half_angle_deg))
        self.wall_slope = math.tan(math.radians(t.half_angle_deg))
        self.z_edge = t.radius - math.sqrt(t.radius ** 2 - self.y_max ** 2)
        fids = np.array(spec.fiducials, dtype=np.float64)
        self.fiducials = np.column_stack([fids, self.height(fids[:, 0], fids[:, 1])])

    # trachea -----------------------------------------------------------------
    def trachea_z(self, y):
        y = np.asarray(y, dtype=np.float64)
        ay = np.abs(y)
        inner = np.minimum(ay, self.y_max)
        z = self.R - np.sqrt(self.R ** 2 - inner ** 2)
        return z + np.maximum(ay - self.y_max, 0.0) * self.wall_slope

    def trachea_dzdy(self, y):
        y = np.asarray(y, dtype=np.float64)
        inner = np.clip(y, -self.y_max, self.y_max)
        return inner / np.sqrt(self.R ** 2 - inner ** 2)

    # tumor -------------------------------------------------------------------
    def _tumor_uv(self, x, y):
        tm = self.spec.tumor
        c, s = math.cos(math.radians(tm.yaw_deg)), math.sin(math.radians(tm.yaw_deg))
        dx, dy = np.asarray(x) - tm.center[0], np.asarray(y) - tm.center[1]
        return c * dx + s * dy, -s * dx + c * dy, c, s

    def tumor_q(self, x, y):
        if self.spec.tumor is None:
            return np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape, np.inf)
        a, b, _ = self.spec.tumor.semi_axes
        u, v, _, _ = self._tumor_uv(x, y)
        return (u / a) ** 2 + (v / b) ** 2

    def bump(self, x, y):
        if self.spec.tumor is None:
            return np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
        q = self.tumor_q(x, y)
        c = self.spec.tumor.semi_axes[2]
        return np.where(q < 1, c * (1 - np.minimum(q, 1)) ** 2, 0.0)

    def bump_grad(self, x, y):
        if self.spec.tumor is None:
            z = np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
            return z, z
        a, b, hgt = self.spec.tumor.semi_axes
        u, v, c, s = self._tumor_uv(x, y)
        q = (u / a) ** 2 + (v / b) ** 2
        dbdq = np.where(q < 1, -2 * hgt * (1 - np.minimum(q, 1)), 0.0)
        dqdu, dqdv = 2 * u / a ** 2, 2 * v / b ** 2
        return dbdq * (dqdu * c - dqdv * s), dbdq * (dqdu * s + dqdv * c)

    # combined ------------------------------------------------------------------
    def height(self, x, y):
        return self.trachea_z(y) + self.bump(x, y)

    def gradient(self, x, y):
        bx, by = self.bump_grad(x, y)
        return bx, self.trachea_dzdy(y) + by

    def normal(self, x, y):
        gx, gy = self.gradient(x, y)
        n = np.stack(np.broadcast_arrays(-gx, -gy, 1.0), axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def labels(self, x, y) -> np.ndarray:
        """Segmentation code at surface points above (x, y)."""
        x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
        out = np.full(x.shape, MaskCode.TRACHEA, dtype=np.uint8)
        out[self.tumor_q(x, y) < 1] = MaskCode.TUMOR
        out[(np.abs(x) > self.half_len) | (np.abs(y) > self.y_max)] = MaskCode.BACKGROUND
        return out

    def interior(self, x, y, guard: float) -> np.ndarray:
        """Points at least `guard` (in xy) from every label boundary."""
        x, y = np.asarray(x), np.asarray(y)
        ok = (np.abs(x) <= self.half_len - guard) & (np.abs(y) <= self.y_max - guard)
        if self.spec.tumor is not None:
            a, b, _ = self.spec.tumor.semi_axes
            ok &= np.abs(np.sqrt(self.tumor_q(x, y)) - 1.0) * min(a, b) >= guard
        return ok

    def on_fiducial(self, pts: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(pts[:, None, :] - self.fiducials[None, :, :], axis=2)
        return d.min(axis=1) < self.spec.fiducial_radius

    # cameras -------------------------------------------------------------------
    def camera(self) -> CameraIntrinsics:
        rig = self.spec.cameras
        cx, cy = rig.width / 2.0, rig.height_px / 2.0
        model = CameraModel(rig.model)
        params = {
            CameraModel.PINHOLE: (rig.focal, rig.focal, cx, cy),
            CameraModel.SIMPLE_RADIAL: (rig.focal, cx, cy, rig.k1),
            CameraModel.RADIAL: (rig.focal, cx, cy, rig.k1, rig.k2),
        }[model]
        return CameraIntrinsics(1, model, rig.width, rig.height_px, params)

    def camera_poses(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Robot-frame world-to-camera (R, t) for each ring position."""
        rig = self.spec.cameras
        target = np.array(rig.look_at, dtype=np.float64)
        poses = []
        for i in range(rig.count):
            th = 2 * math.pi * i / rig.count
            C = target + np.array([rig.radius * math.cos(th), rig.radius * math.sin(th), rig.height])
            z = target - C
            z /= np.linalg.norm(z)
            hint = np.array([0.0, 1.0, 0.0])
            yv = hint - (hint @ z) * z
            yv /= np.linalg.norm(yv)
            xv = np.cross(yv, z)
            R = np.stack([xv, yv, z])
            poses.append((R, -R @ C))
        return poses

    # rendering -----------------------------------------------------------------
    def pixel_rays(self, cam: CameraIntrinsics, R: np.ndarray) -> np.ndarray:
        """World-frame ray directions through every pixel centre (row-major)."""
        from .camera_models import _focal_center, distortion_factor

        fx, fy, cx, cy = _focal_center(cam)
        vv, uu = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
        xd, yd = (uu.ravel() - cx) / fx, (vv.ravel() - cy) / fy
        xu, yu = xd.copy(), yd.copy()
        for _ in range(50):
            g = distortion_factor(cam, xu * xu + yu * yu)
            nx, ny = xd / g, yd / g
            done = max(np.abs(nx - xu).max(), np.abs(ny - yu).max()) < 1e-15
            xu, yu = nx, ny
            if done:
                break
        d_cam = np.column_stack([xu, yu, np.ones_like(xu)])
        return d_cam @ R  # R^T applied to each row

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """First hit of rays with the height field (safeguarded Newton)."""
        ox, oy, oz = origin
        dz = dirs[:, 2]
        if np.any(dz >= 0):
            raise InvalidSpec("camera rays must point downward")
        lo = np.zeros(len(dirs))
        hi = oz / -dz
        t = hi.copy()
        active = np.arange(len(dirs))
        for _ in range(100):
            ta, da = t[active], dirs[active]
            x, y = ox + ta * da[:, 0], oy + ta * da[:, 1]
            f = oz + ta * da[:, 2] - self.height(x, y)
            gx, gy = self.gradient(x, y)
            fp = da[:, 2] - gx * da[:, 0] - gy * da[:, 1]
            la = np.where(f > 0, ta, lo[active])
            ha = np.where(f <= 0, ta, hi[active])
            tn = ta - f / fp
            bad = ~np.isfinite(tn) | (tn < la) | (tn > ha)
            tn = np.where(bad, 0.5 * (la + ha), tn)
            lo[active], hi[active], t[active] = la, ha, tn
            moving = np.abs(tn - ta) > 1e-12 * ha
            active = active[moving]
            if not len(active):
                break
        return origin + t[:, None] * dirs

    def render(self, cam: CameraIntrinsics, R: np.ndarray, t: np.ndarray):
        """Segmentation codes and grayscale image for one camera."""
        C = -R.T @ t
        hits = self.intersect(C, self.pixel_rays(cam, R))
        codes = self.labels(hits[:, 0], hits[:, 1])
        n = self.normal(hits[:, 0], hits[:, 1])
        shade = 0.8 + 0.2 * n[:, 2]
        gray = np.empty(len(hits))
        gray[codes == MaskCode.BACKGROUND] = GRAY_LEVELS["background"]
        gray[codes == MaskCode.TRACHEA] = GRAY_LEVELS["trachea"]
        gray[codes == MaskCode.TUMOR] = GRAY_LEVELS["tumor"]
        gray = gray * np.where(codes == MaskCode.BACKGROUND, 1.0, shade)
        dots = (codes == MaskCode.TRACHEA) & self.on_fiducial(hits)
        gray[dots] = GRAY_LEVELS["fiducial"]
        shape = (cam.height, cam.width)
        return codes.reshape(shape), np.rint(gray).astype(np.uint8).reshape(shape)

    # sampling ------------------------------------------------------------------
    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        g = self.spec.guard_mm
        out = []
        total = 0
        while total < n:
            m = 2 * (n - total) + 16
            x = rng.uniform(-self.half_len + g, self.half_len - g, m)
            y = rng.uniform(-self.y_max + g, self.y_max - g, m)
            keep = self.interior(x, y, g)
            x, y = x[keep], y[keep]
            out.append(np.column_stack([x, y, self.height(x, y)]))
            total += len(x)
        return np.concatenate(out)[:n]

    def dense_grid(self, spacing: float) -> np.ndarray:
        g = self.spec.guard_mm
        xs = np.arange(-self.half_len + g, self.half_len - g + 1e-9, spacing)
        ys = np.arange(-self.y_max + g, self.y_max - g + 1e-9, spacing)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        X, Y = X.ravel(), Y.ravel()
        keep = self.interior(X, Y, g)
        X, Y = X[keep], Y[keep]
        return np.column_stack([X, Y, self.height(X, Y)])


@dataclass(frozen=True, eq=False)
class GroundTruth:
    recon_to_robot: SimilarityTransform
    fiducials_robot: np.ndarray
    fiducials_recon: np.ndarray
    sparse_labels: dict[int, int]
    dense_labels: np.ndarray
    dense_robot: np.ndarray
    tumor_footprint: dict | None
    spec: SceneSpec

    def to_dict(self) -> dict:
        return {
            "recon_to_robot": self.recon_to_robot.to_dict(),
            "fiducials_robot_mm": self.fiducials_robot.tolist(),
            "fiducials_recon": self.fiducials_recon.tolist(),
            "sparse_labels": {str(k): int(v) for k, v in sorted(self.sparse_labels.items())},
            "dense_labels": [int(v) for v in self.dense_labels],
            "tumor_footprint": self.tumor_footprint,
            "surface": {
                "kind": "half-pipe plus elliptical bump",
                "trachea": asdict(self.spec.trachea),
            },
            "spec": self.spec.to_dict(),
        }


@dataclass(frozen=True, eq=False)
class SceneArtifacts:
    bundle: ReconstructionBundle
    image_names: list[str]
    masks: dict[int, MaskImage]
    reference_masks: dict[int, MaskImage]
    grays: dict[int, np.ndarray]
    dense: np.ndarray
    touchpoints: np.ndarray
    truth: GroundTruth


def random_similarity(spec: SceneSpec) -> SimilarityTransform:
    rng = _rng(spec.seed, "similarity")
    lo, hi = spec.scale_range
    s = float(rng.uniform(lo, hi))
    R = Rotation.random(random_state=rng).as_matrix()
    # keep the rotation exactly orthonormal after the scipy round trip
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    t = rng.normal(0.0, 20.0, 3)
    return SimilarityTransform(s, R, t)


def touchpoints_for(spec: SceneSpec, geom: SceneGeometry | None = None) -> np.ndarray:
    """Noisy robot-frame fiducial touchpoints in recording (shuffled) order."""
    geom = geom or SceneGeometry(spec)
    rng = _rng(spec.seed, "touchpoints")
    pts = geom.fiducials + rng.normal(0.0, spec.noise.point_sigma, geom.fiducials.shape) \
        if spec.noise.point_sigma > 0 else geom.fiducials.copy()
    return pts[rng.permutation(len(pts))]


def fiducial_correspondences(spec: SceneSpec):
    """``(fiducials_recon, touchpoints_robot, recon_to_robot)`` without rendering."""
    spec.validate()
    geom = SceneGeometry(spec)
    T = random_similarity(spec)
    return T.inverse()(geom.fiducials), touchpoints_for(spec, geom), T


def _flip(codes: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate <= 0:
        return codes
    out = codes.copy()
    flip = rng.random(codes.shape) < rate
    shift = rng.integers(1, 3, size=codes.shape).astype(np.uint8)  # to one of the other two codes
    out[flip] = (codes[flip] + shift[flip]) % 3
    return out


_POINT_COLORS = {
    MaskCode.TRACHEA: (205, 130, 140),
    MaskCode.TUMOR: (225, 190, 160),
}


def generate(spec: SceneSpec = SceneSpec(), render: bool = True) -> SceneArtifacts:
    """Build every artifact for one scene; ``render=False`` skips masks and images."""
    spec.validate()
    geom = SceneGeometry(spec)
    T = random_similarity(spec)
    T_inv = T.inverse()
    cam = geom.camera()
    poses_robot = geom.camera_poses()
    n_cam = len(poses_robot)
    layout = _rng(spec.layout_seed, "layout")
    pixel_rng = _rng(spec.seed, "pixels")

    dropped = set(layout.choice(n_cam, size=spec.drop_images, replace=False).tolist()) \
        if spec.drop_images else set()
    registered = [i for i in range(n_cam) if i not in dropped]
    names = [f"img_{i:03d}.pgm" for i in range(n_cam)]

    pts_robot = geom.sample_surface(spec.n_sparse_points, layout)
    codes = geom.labels(pts_robot[:, 0], pts_robot[:, 1])

    # observations: visible in registered cameras, thinned, at least two per point
    # keypoints are projected from the stored recon-frame values, so a
    # noiseless bundle reprojects with exactly zero error
    pts_recon = T_inv(pts_robot)
    qvecs, tvecs = {}, {}
    for i in registered:
        R, t = poses_robot[i]
        qvecs[i] = rotmat_to_qvec(R @ T.rotation)
        tvecs[i] = (R @ T.translation + t) / T.scale
    obs_uv = np.full((n_cam, len(pts_robot), 2), np.nan)
    obs_ok = np.zeros((n_cam, len(pts_robot)), dtype=bool)
    for i in registered:
        uv, valid = project_points(cam, rigid_apply(qvec_to_rotmat(qvecs[i]), tvecs[i], pts_recon))
        inb = valid & (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width - 1) \
            & (uv[:, 1] >= 0) & (uv[:, 1] <= cam.height - 1)
        obs_uv[i] = uv
        obs_ok[i] = inb
    keep_draw = layout.random(obs_ok.shape) < spec.track_keep_prob
    thinned = obs_ok & keep_draw
    short = thinned.sum(axis=0) < 2
    thinned[:, short] = obs_ok[:, short]
    alive = np.flatnonzero(thinned.sum(axis=0) >= 2)

    point_ids = {int(j): k + 1 for k, j in enumerate(alive)}
    tracks: dict[int, list[tuple[int, int]]] = {pid: [] for pid in point_ids.values()}
    noisy_uv = obs_uv + (pixel_rng.normal(0.0, spec.noise.pixel_sigma, obs_uv.shape)
                         if spec.noise.pixel_sigma > 0 else 0.0)
    images: dict[int, PosedImage] = {}
    for i in registered:
        image_id = i + 1
        js = [j for j in alive if thinned[i, j]]
        n_extra = len(js) // 10
        extra = np.column_stack([layout.uniform(0, cam.width - 1, n_extra),
                                 layout.uniform(0, cam.height - 1, n_extra)])
        xys = np.concatenate([noisy_uv[i, js].reshape(-1, 2), extra])
        pids = np.concatenate([[point_ids[int(j)] for j in js],
                               np.full(n_extra, SENTINEL_NONE)]).astype(np.int64)
        order = layout.permutation(len(xys))
        xys, pids = xys[order], pids[order]
        for k, pid in enumerate(pids):
            if pid != SENTINEL_NONE:
                tracks[int(pid)].append((image_id, k))
        images[image_id] = PosedImage(image_id, qvecs[i], tvecs[i], cam.camera_id,
                                      names[i], xys, pids)

    points: dict[int, ScenePoint] = {}
    for j in alive:
        j = int(j)
        pid = point_ids[j]
        cams = [iid - 1 for iid, _ in tracks[pid]]
        err = float(np.mean(np.linalg.norm(noisy_uv[cams, j] - obs_uv[cams, j], axis=1)))
        points[pid] = ScenePoint(pid, pts_recon[j], _POINT_COLORS[MaskCode(int(codes[j]))],
                                 err, sorted(tracks[pid]))
    bundle = ReconstructionBundle({cam.camera_id: cam}, images, points, n_cam)
    sparse_labels = {point_ids[int(j)]: int(codes[j]) for j in alive}

    masks, ref_masks, grays = {}, {}, {}
    if render:
        flip_rng = _rng(spec.seed, "mask-flips")
        for i in range(n_cam):
            R, t = poses_robot[i]
            seg, gray = geom.render(cam, R, t)
            ref_masks[i + 1] = MaskImage(seg)
            masks[i + 1] = MaskImage(_flip(seg, spec.noise.mask_flip_rate, flip_rng))
            grays[i + 1] = gray

    dense_robot = geom.dense_grid(spec.dense_spacing)
    dense_codes = geom.labels(dense_robot[:, 0], dense_robot[:, 1])
    footprint = None
    if spec.tumor is not None:
        footprint = {"center": list(spec.tumor.center), "semi_axes_xy": list(spec.tumor.semi_axes[:2]),
                     "height": spec.tumor.semi_axes[2], "yaw_deg": spec.tumor.yaw_deg}
    truth = GroundTruth(T, geom.fiducials, T_inv(geom.fiducials), sparse_labels,
                        dense_codes, dense_robot, footprint, spec)
    return SceneArtifacts(bundle, names, masks, ref_masks, grays, T_inv(dense_robot),
                          touchpoints_for(spec, geom), truth)


def write_touchpoints(path, pts: np.ndarray) -> None:
    lines = ["idx,x_mm,y_mm,z_mm"] + [
        f"{i},{p[0]!r},{p[1]!r},{p[2]!r}" for i, p in enumerate(pts.tolist())
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_scene(art: SceneArtifacts, out_dir) -> Path:
    """Write a scene directory in the formats the pipeline consumes."""
    out = Path(out_dir)
    write_bundle(art.bundle, out / "sparse")
    (out / "image_list.txt").write_text("\n".join(art.image_names) + "\n", encoding="utf-8")
    for sub, source in (("masks", art.masks), ("reference_masks", art.reference_masks),
                        ("images", art.grays)):
        if not source:
            continue
        d = out / sub
        d.mkdir(parents=True, exist_ok=True)
        entries = {}
        for iid, item in sorted(source.items()):
            name = art.image_names[iid - 1]
            write_pgm(d / name, item.labels if isinstance(item, MaskImage) else item)
            entries[name] = name
        write_manifest(d / "manifest.txt", entries)
    export_ply(LabeledCloud.unlabeled(art.dense), out / "dense.ply")
    write_touchpoints(out / "touchpoints.csv", art.touchpoints)
    (out / "ground_truth.json").write_text(
        json.dumps(art.truth.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    return out


def generate_post_procedure(spec: SceneSpec, cut_depth_error: float,
                            spacing: float = 0.5) -> LabeledCloud:
    """Robot-frame post-resection cloud: healthy trachea plus a char patch.

    The char patch replaces the tumor footprint and sits `cut_depth_error`
    above the true trachea surface.
    """
    spec.validate()
    geom = SceneGeometry(spec)
    xs = np.arange(-geom.half_len, geom.half_len + 1e-9, spacing)
    ys = np.arange(-geom.y_max, geom.y_max + 1e-9, spacing)
    X, Y = (a.ravel() for a in np.meshgrid(xs, ys, indexing="ij"))
    Z = geom.trachea_z(Y)
    char = geom.tumor_q(X, Y) < 1
    Z = np.where(char, Z + cut_depth_error, Z)
    labels = np.where(char, Label.CHAR, Label.TRACHEA).astype(np.uint8)
    return LabeledCloud.from_labels(np.column_stack([X, Y, Z]), labels)


def render_post_image(spec: SceneSpec, px_mm: float = 0.25, char_overshoot_mm: float = 0.5):
    """Top-down image of the resected specimen.

    Returns ``(gray, tissue_mask, tumor_area_px)``: the char region is the
    tumor footprint grown by `char_overshoot_mm`.
    """
    spec.validate()
    geom = SceneGeometry(spec)
    xs = np.arange(-geom.half_len, geom.half_len + 1e-9, px_mm)
    ys = np.arange(-geom.y_max, geom.y_max + 1e-9, px_mm)
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    q = geom.tumor_q(X, Y)
    tumor = q < 1
    if spec.tumor is not None:
        a, b, _ = spec.tumor.semi_axes
        grown = np.sqrt(q) < 1 + char_overshoot_mm / min(a, b)
    else:
        grown = tumor
    n_z = geom.normal(X, np.clip(Y, -geom.y_max, geom.y_max))[..., 2]
    gray = GRAY_LEVELS["trachea"] * (0.8 + 0.2 * n_z)
    gray = np.where(grown, 35.0, gray)
    return np.rint(gray).astype(np.uint8), np.ones(gray.shape, dtype=bool), int(tumor.sum())


def default_spec(**overrides) -> SceneSpec:
    return replace(SceneSpec(), **overrides)
