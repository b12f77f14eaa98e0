"""Forward projection for PINHOLE, SIMPLE_RADIAL and RADIAL cameras.

Image coordinates follow COLMAP: ``u`` to the right, ``v`` down, ``+z`` in
front of the camera. Points with ``z <= EPS_Z`` are behind the camera; the
scalar `project` returns ``None`` for them and the array form reports them
through its validity mask.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .colmap_model import CameraIntrinsics, CameraModel, PosedImage

EPS_Z = 1e-9


class Pixel(NamedTuple):
    u: float
    v: float


def qvec_to_rotmat(qvec) -> np.ndarray:
    w, x, y, z = qvec
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def rotmat_to_qvec(R) -> np.ndarray:
    """Unit quaternion (scalar first, w >= 0) for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    # largest-eigenvector form is stable for every rotation angle
    Rxx, Ryx, Rzx, Rxy, Ryy, Rzy, Rxz, Ryz, Rzz = R.flat
    K = np.array([
        [Rxx - Ryy - Rzz, 0, 0, 0],
        [Ryx + Rxy, Ryy - Rxx - Rzz, 0, 0],
        [Rzx + Rxz, Rzy + Ryz, Rzz - Rxx - Ryy, 0],
        [Ryz - Rzy, Rzx - Rxz, Rxy - Ryx, Rxx + Ryy + Rzz],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(K)
    q = vecs[[3, 0, 1, 2], np.argmax(vals)]
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rigid_apply(R: np.ndarray, t: np.ndarray, p) -> np.ndarray:
    """``R p + t`` row-wise, summed left to right per component.

    Written out element by element (no BLAS) so the result is bitwise
    reproducible by a scalar loop.
    """
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    return np.stack([R[i, 0] * x + R[i, 1] * y + R[i, 2] * z + t[i] for i in range(3)], axis=-1)


def world_to_camera(pose: PosedImage, p_world) -> np.ndarray:
    """``R(q) p + t`` for a single point (3,) or a batch (N, 3)."""
    return rigid_apply(qvec_to_rotmat(pose.qvec), pose.tvec, p_world)


def _focal_center(cam: CameraIntrinsics):
    p = cam.params
    if cam.model is CameraModel.PINHOLE:
        return p[0], p[1], p[2], p[3]
    return p[0], p[0], p[1], p[2]


def distortion_factor(cam: CameraIntrinsics, r2):
    p = cam.params
    if cam.model is CameraModel.SIMPLE_RADIAL:
        return 1.0 + p[3] * r2
    if cam.model is CameraModel.RADIAL:
        return 1.0 + p[3] * r2 + p[4] * r2 * r2
    return np.ones_like(r2) if isinstance(r2, np.ndarray) else 1.0


def project_points(cam: CameraIntrinsics, p_cam) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points (N, 3).

    Returns ``(uv, valid)`` where ``valid`` is False for points with
    ``z <= EPS_Z``; their ``uv`` rows are NaN.
    """
    p = np.asarray(p_cam, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    valid = z > EPS_Z
    uv = np.full((len(p), 2), np.nan)
    if not np.any(valid):
        return uv, valid
    zv = z[valid]
    x = p[valid, 0] / zv
    y = p[valid, 1] / zv
    g = distortion_factor(cam, x * x + y * y)
    fx, fy, cx, cy = _focal_center(cam)
    uv[valid, 0] = fx * g * x + cx
    uv[valid, 1] = fy * g * y + cy
    return uv, valid


def project(cam: CameraIntrinsics, p_cam) -> Pixel | None:
    """Project one camera-frame point; ``None`` when it is behind the camera."""
    x, y, z = (float(c) for c in p_cam)
    if z <= EPS_Z:
        return None
    x, y = x / z, y / z
    g = distortion_factor(cam, x * x + y * y)
    fx, fy, cx, cy = _focal_center(cam)
    return Pixel(fx * g * x + cx, fy * g * y + cy)


def image_center(cam: CameraIntrinsics) -> tuple[float, float]:
    return cam.width / 2.0, cam.height / 2.0


def center_distance(cam: CameraIntrinsics, px) -> float | np.ndarray:
    """Euclidean distance from a pixel (or (N, 2) pixels) to the image center."""
    cu, cv = image_center(cam)
    px = np.asarray(px, dtype=np.float64)
    d = np.hypot(px[..., 0] - cu, px[..., 1] - cv)
    return float(d) if d.ndim == 0 else d
