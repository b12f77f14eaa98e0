"""A valid minimal sparse model and a curated set of broken variants."""

from pathlib import Path

from caoguide.errors import BrokenReference, MalformedLine, MissingFile, UnknownCameraModel

VALID = {
    "cameras.txt": "# cam\n1 PINHOLE 100 100 50 50 50 50\n",
    "images.txt": (
        "# images\n"
        "1 1 0 0 0 0 0 0 1 a.png\n10 20 7 30 40 -1\n"
        "2 1 0 0 0 0 0 1 1 b.png\n11 21 7\n"
    ),
    "points3D.txt": "# points\n7 0.5 0.5 3 10 20 30 0.1 1 0 2 0\n",
}

# name -> (file, replacement content or None to delete, expected error)
CASES = {
    "missing_points_file": ("points3D.txt", None, MissingFile),
    "unknown_camera_model": ("cameras.txt", "1 FISHEYE 100 100 50 50 50 50\n", UnknownCameraModel),
    "wrong_param_count": ("cameras.txt", "1 RADIAL 100 100 50 50 50\n", MalformedLine),
    "non_numeric_width": ("cameras.txt", "1 PINHOLE wide 100 50 50 50 50\n", MalformedLine),
    "duplicate_camera": ("cameras.txt", "1 PINHOLE 100 100 50 50 50 50\n1 PINHOLE 9 9 1 1 1 1\n",
                         MalformedLine),
    "non_unit_quaternion": ("images.txt",
                            "1 2 0 0 0 0 0 0 1 a.png\n10 20 7\n2 1 0 0 0 0 0 1 1 b.png\n11 21 7\n",
                            MalformedLine),
    "ragged_keypoints": ("images.txt",
                         "1 1 0 0 0 0 0 0 1 a.png\n10 20 7 30\n2 1 0 0 0 0 0 1 1 b.png\n11 21 7\n",
                         MalformedLine),
    "missing_keypoint_line": ("images.txt", "1 1 0 0 0 0 0 0 1 a.png", MalformedLine),
    "unknown_camera_ref": ("images.txt",
                           "1 1 0 0 0 0 0 0 9 a.png\n10 20 7\n2 1 0 0 0 0 0 1 1 b.png\n11 21 7\n",
                           BrokenReference),
    "track_unknown_image": ("points3D.txt", "7 0.5 0.5 3 10 20 30 0.1 1 0 5 0\n", BrokenReference),
    "track_keypoint_out_of_range": ("points3D.txt", "7 0.5 0.5 3 10 20 30 0.1 1 0 2 4\n",
                                    BrokenReference),
    "keypoint_unknown_point": ("images.txt",
                               "1 1 0 0 0 0 0 0 1 a.png\n10 20 8\n2 1 0 0 0 0 0 1 1 b.png\n11 21 7\n",
                               BrokenReference),
    "short_track": ("points3D.txt", "7 0.5 0.5 3 10 20 30 0.1 1 0\n", MalformedLine),
    "color_out_of_range": ("points3D.txt", "7 0.5 0.5 3 300 20 30 0.1 1 0 2 0\n", MalformedLine),
}


def write_valid(d: Path) -> Path:
    d.mkdir(parents=True, exist_ok=True)
    for name, text in VALID.items():
        (d / name).write_text(text)
    return d


def write_case(d: Path, name: str) -> Path:
    write_valid(d)
    fname, content, _ = CASES[name]
    if content is None:
        (d / fname).unlink()
    else:
        (d / fname).write_text(content)
    return d
