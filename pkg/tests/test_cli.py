import csv
import io
import json
import shutil

import numpy as np
import pytest

from caoguide.cli import main
from caoguide.colmap_model import read_ply


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["synth", "--seed", "7", "--point-sigma", "0.1", "--cut-depth-error", "2.2",
                 "--out", str(out)]) == 0
    return out


def run(argv, capsys):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_synth_outputs(synth_dir):
    for rel in ("sparse/cameras.txt", "sparse/images.txt", "sparse/points3D.txt", "image_list.txt",
                "masks/manifest.txt", "images/manifest.txt", "dense.ply", "touchpoints.csv",
                "ground_truth.json", "post/post_cloud.ply", "post/post_image.pgm",
                "post/post_meta.json", "run_log_synth.json"):
        assert (synth_dir / rel).is_file(), rel


def test_pipeline_end_to_end(synth_dir, tmp_path, capsys):
    code, out, _ = run(["pipeline", synth_dir, "--out", tmp_path / "o"], capsys)
    assert code == 0
    summary = json.loads(out)
    assert summary["passes"] >= 1 and summary["violations"] == 0
    reg = json.loads((tmp_path / "o" / "registration.json").read_text())
    assert reg["residuals"]["mean_mm"] < 0.6
    plan = json.loads((tmp_path / "o" / "plan.json").read_text())
    assert plan["units"] == "mm, robot frame" and len(plan["passes"]) == summary["passes"]
    log = json.loads((tmp_path / "o" / "run_log_pipeline.json").read_text())
    assert len(log["config_sha256"]) == 64 and "numpy" in log["versions"] and "total" in log["timing_s"]


def test_pipeline_byte_identical(synth_dir, tmp_path, capsys):
    for d in ("a", "b"):
        assert run(["pipeline", synth_dir, "--out", tmp_path / d], capsys)[0] == 0
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and "run_log" not in p.name)
    assert len(files) > 5
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_individual_stages_match_pipeline(synth_dir, tmp_path, capsys):
    o = tmp_path
    assert run(["pipeline", synth_dir, "--out", o / "pipe"], capsys)[0] == 0
    assert run(["fuse", synth_dir, "--out", o / "cloud.ply"], capsys)[0] == 0
    assert run(["fiducials", synth_dir, "--out", o / "fid.json"], capsys)[0] == 0
    assert run(["register", o / "fid.json", synth_dir / "touchpoints.csv", "--out", o / "reg.json"], capsys)[0] == 0
    assert run(["fit-surface", o / "cloud.ply", o / "reg.json", "--out", o / "surf.json"], capsys)[0] == 0
    assert run(["plan", o / "surf.json", o / "cloud.ply", o / "reg.json", "--out", o / "plan"], capsys)[0] == 0
    pairs = [("cloud.ply", "pipe/labeled_cloud.ply"), ("fid.json", "pipe/fiducials.json"),
             ("fid.csv", "pipe/fiducials.csv"), ("reg.json", "pipe/registration.json"),
             ("surf.json", "pipe/surface.json"), ("plan/plan.json", "pipe/plan.json")]
    for x, y in pairs:
        assert (o / x).read_bytes() == (o / y).read_bytes(), x
    assert (o / "fid.csv").read_text().splitlines()[0] == "idx,x,y,z"


def test_stats_csv(synth_dir, capsys):
    code, out, err = run(["stats", synth_dir / "sparse", "--total-images", 20], capsys)
    assert code == 0
    rows = list(csv.reader(ln for ln in io.StringIO(out) if not ln.startswith("#")))
    header = rows[0]
    for col in ("reconstructed_pct", "n_points", "mean_track_length",
                "mean_observations_per_image", "mean_reprojection_error_px"):
        assert col in header, col
    row = dict(zip(header, rows[1]))
    assert float(row["reconstructed_pct"]) == 100.0 and err


def test_missing_points_file(synth_dir, tmp_path, capsys):
    sparse = tmp_path / "sparse"
    shutil.copytree(synth_dir / "sparse", sparse)
    (sparse / "points3D.txt").unlink()
    code, _, err = run(["stats", sparse], capsys)
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "MissingFile"


def test_usage_errors(synth_dir, tmp_path, capsys):
    assert run(["pipeline", synth_dir, "--no-such-flag"], capsys)[0] == 1
    assert run(["frobnicate"], capsys)[0] == 1
    code, _, err = run(["pipeline", synth_dir, "--out", tmp_path, "--advance-mode", "deepen"], capsys)
    assert code == 1 and "UnsupportedOption" in err
    (tmp_path / "bad.cfg").write_text("colour = red\n")
    code, _, err = run(["pipeline", synth_dir, "--config", tmp_path / "bad.cfg"], capsys)
    assert code == 1 and "ConfigError" in err


def test_config_file_and_flag_override(synth_dir, tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("clearance = 2.0\ndepth-increment = 3\n")
    assert run(["pipeline", synth_dir, "--out", tmp_path / "a", "--config", tmp_path / "c.cfg"], capsys)[0] == 0
    assert run(["pipeline", synth_dir, "--out", tmp_path / "b", "--config", tmp_path / "c.cfg",
                "--clearance", "1.5"], capsys)[0] == 0
    pa = json.loads((tmp_path / "a" / "plan.json").read_text())
    pb = json.loads((tmp_path / "b" / "plan.json").read_text())
    assert pa["clearance_mm"] == 2.0 and pa["depth_increment_mm"] == 3.0
    assert pb["clearance_mm"] == 1.5 and pb["depth_increment_mm"] == 3.0
    log = json.loads((tmp_path / "b" / "run_log_pipeline.json").read_text())
    assert log["config"]["clearance"] == 1.5


def test_numerical_failure_exit_3(tmp_path, capsys):
    line = [[float(i), 2.0 * i, 0.0] for i in range(5)]
    (tmp_path / "fid.json").write_text(json.dumps({"points": line}))
    (tmp_path / "touch.csv").write_text("idx,x_mm,y_mm,z_mm\n" + "".join(
        f"{i},{p[0]},{p[1]},{p[2]}\n" for i, p in enumerate(line)))
    code, _, err = run(["register", tmp_path / "fid.json", tmp_path / "touch.csv",
                        "--out", tmp_path / "r.json"], capsys)
    assert code == 3 and "error" in json.loads(err.strip().splitlines()[-1])


def test_malformed_touchpoints(tmp_path, capsys):
    (tmp_path / "fid.json").write_text(json.dumps({"points": np.eye(5, 3).tolist()}))
    (tmp_path / "touch.csv").write_text("a,b\n1,2\n")
    code, _, err = run(["register", tmp_path / "fid.json", tmp_path / "touch.csv",
                        "--out", tmp_path / "r.json"], capsys)
    assert code == 2 and "MalformedCsv" in err


def test_score(synth_dir, tmp_path, capsys):
    meta = json.loads((synth_dir / "post" / "post_meta.json").read_text())
    code, out, _ = run(["score", "--post-cloud", synth_dir / "post" / "post_cloud.ply",
                        "--post-image", synth_dir / "post" / "post_image.pgm",
                        "--tumor-area", meta["tumor_area"], "--tumor-area-source", "synthetic footprint",
                        "--out", tmp_path / "score.json"], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "score.json").read_text())
    assert abs(rep["cut_surface"]["rmse"] - 2.2) < 0.05
    assert rep["char"]["am"] > 0 and rep["char"]["tumor_area_source"] == "synthetic footprint"
    code, _, err = run(["score", "--post-cloud", synth_dir / "post" / "post_cloud.ply",
                        "--post-image", synth_dir / "post" / "post_image.pgm", "--tumor-area", 10,
                        "--tumor-area-domain", "points", "--out", tmp_path / "s2.json"], capsys)
    assert code == 1 and "DomainMismatch" in err
    assert run(["score", "--out", tmp_path / "s3.json"], capsys)[0] == 1


def test_fuse_sparse_labels(synth_dir, tmp_path, capsys):
    assert run(["fuse", synth_dir, "--sparse", "--out", tmp_path / "s.ply"], capsys)[0] == 0
    cloud = read_ply(tmp_path / "s.ply")
    truth = json.loads((synth_dir / "ground_truth.json").read_text())
    assert len(cloud) == len(truth["sparse_labels"])
