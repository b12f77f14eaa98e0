import numpy as np
import pytest

from caoguide import synth_scene
from caoguide.camera_models import project_points, rotmat_to_qvec
from caoguide.colmap_model import (
    SENTINEL_NONE,
    CameraIntrinsics,
    PosedImage,
    ReconstructionBundle,
    ScenePoint,
)
from scipy.spatial.transform import Rotation


def random_bundle(rng: np.random.Generator, n_points: int = 100, n_images: int = 6,
                  noise: float = 0.0, extra_kp: int = 3) -> ReconstructionBundle:
    """Random consistent bundle: cameras on a sphere looking at points near the origin."""
    cams = {
        1: CameraIntrinsics(1, "PINHOLE", 640, 480, (500.0 + rng.random(), 510.0, 320.0, 240.0)),
        2: CameraIntrinsics(2, "SIMPLE_RADIAL", 800, 600, (600.0, 400.0, 300.0, -0.01)),
        3: CameraIntrinsics(3, "RADIAL", 545, 545, (700.0, 272.5, 272.5, -0.02, 0.003)),
    }
    pts = rng.uniform(-1, 1, (n_points, 3))
    obs = {pid: [] for pid in range(1, n_points + 1)}
    images = {}
    for image_id in range(1, n_images + 1):
        cam = cams[1 + (image_id - 1) % 3]
        R = Rotation.random(random_state=rng).as_matrix()
        t = np.array([0.0, 0.0, 6.0]) + rng.normal(0, 0.2, 3)
        uv, valid = project_points(cam, pts @ R.T + t)
        assert valid.all()
        uv = uv + rng.normal(0, noise, uv.shape) if noise else uv
        ids = np.arange(1, n_points + 1)
        xys = np.concatenate([uv, rng.uniform(0, 100, (extra_kp, 2))])
        pids = np.concatenate([ids, np.full(extra_kp, SENTINEL_NONE)])
        order = rng.permutation(len(xys))
        xys, pids = xys[order], pids[order]
        for k, pid in enumerate(pids):
            if pid != SENTINEL_NONE:
                obs[int(pid)].append((image_id, k))
        images[image_id] = PosedImage(image_id, rotmat_to_qvec(R), t, cam.camera_id,
                                      f"im_{image_id:03d}.png", xys, pids)
    points = {
        pid: ScenePoint(pid, pts[pid - 1], tuple(int(c) for c in rng.integers(0, 256, 3)),
                        float(rng.random()), sorted(obs[pid]))
        for pid in obs
    }
    return ReconstructionBundle(cams, images, points, n_images + int(rng.integers(0, 3)))


@pytest.fixture(scope="session")
def scene():
    """Default noiseless 20-camera scene."""
    return synth_scene.generate(synth_scene.SceneSpec())


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory, scene):
    return synth_scene.write_scene(scene, tmp_path_factory.mktemp("scene"))
