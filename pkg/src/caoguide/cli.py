"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 ok, 1 usage, 2 input format, 3 numerical failure. Errors are
reported on stderr as a JSON payload. Every subcommand writes a run log
(inputs, config hash, versions, timing) next to its primary output; the
primary outputs themselves contain no timestamps.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .colmap_model import Label, LabeledCloud, export_ply, read_bundle, read_image_list, read_ply
from .config import PipelineConfig, load_config
from .errors import CaoGuideError, MalformedCsv, MissingFile, NoTumorPoints, UsageError
from .fiducial_extract import FiducialSet, fiducial_masks, lift_fiducials
from .label_fusion import MaskImage, fuse_dense, fuse_sparse, load_masks
from .outcome_metrics import char_report, cut_surface_rmse, save_report
from .pgm import read_manifest, read_pgm, write_pgm
from .recon_stats import compute_report, format_table, report_rows
from .registration import SimilarityTransform, register_ordered
from .resect_plan import PlanConfig, plan_cuts, validate_plan
from .surface_fit import PolySurface, fit_poly55
from . import synth_scene


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        raise SystemExit(1)


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _run_log(path: Path, command: str, inputs: dict, cfg: PipelineConfig, elapsed: float,
             extra: dict | None = None) -> None:
    log = {
        "command": command,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "versions": {"caoguide": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "elapsed_s": elapsed,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        log.update(extra)
    _dump(path, log)


def _config(args) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None))
    overrides = {k: getattr(args, k, None) for k in cfg.to_dict()}
    return cfg.merged(overrides)


# --- file helpers ------------------------------------------------------------


def read_touchpoints(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    need = ("x_mm", "y_mm", "z_mm")
    if reader.fieldnames is None or any(k not in reader.fieldnames for k in need):
        raise MalformedCsv(f"{path}: expected columns idx,x_mm,y_mm,z_mm")
    for n, row in enumerate(reader, 2):
        try:
            rows.append([float(row[k]) for k in need])
        except (TypeError, ValueError):
            raise MalformedCsv(f"{path}:{n}: non-numeric coordinate") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def load_grays(manifest_path, bundle) -> dict[int, np.ndarray]:
    entries = read_manifest(manifest_path)
    by_name = {img.name: iid for iid, img in bundle.images.items()}
    return {by_name[n]: read_pgm(p) for n, p in entries.items() if n in by_name}


def _total_images(scene: Path, explicit: int | None) -> int | None:
    if explicit is not None:
        return explicit
    lst = scene / "image_list.txt"
    return len(read_image_list(lst)) if lst.is_file() else None


def save_fiducials(path: Path, fs: FiducialSet) -> None:
    _dump(path, {
        "units": "reconstruction",
        "order": "ascending distance to the 5-point centroid",
        "points": fs.points.tolist(),
        "centroid_distance": fs.ordering_key.tolist(),
        "cluster_sizes": [int(v) for v in fs.cluster_sizes],
    })
    rows = ["idx,x,y,z"] + [f"{i},{p[0]!r},{p[1]!r},{p[2]!r}" for i, p in enumerate(fs.points.tolist())]
    path.with_suffix(".csv").write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_fiducials(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    return np.array(json.loads(path.read_text(encoding="utf-8"))["points"], dtype=np.float64)


def _load_transform(path) -> SimilarityTransform:
    if not Path(path).is_file():
        raise MissingFile(path)
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return SimilarityTransform.from_dict(d.get("recon_to_robot", d))


def _load_surface(path) -> PolySurface:
    if not Path(path).is_file():
        raise MissingFile(path)
    return PolySurface.load(path)


# --- stage functions (shared by the subcommands and `pipeline`) ---------------


def stage_fuse(scene: Path, cfg: PipelineConfig, dense: bool, total: int | None = None) -> LabeledCloud:
    bundle = read_bundle(scene / "sparse", _total_images(scene, total))
    masks = load_masks(scene / "masks" / "manifest.txt", bundle)
    if dense:
        return fuse_dense(read_ply(scene / "dense.ply").positions, bundle, masks, cfg.background_votes)
    return fuse_sparse(bundle, masks, cfg.background_votes)


def stage_fiducials(scene: Path, cfg: PipelineConfig, threads: int = 1) -> FiducialSet:
    bundle = read_bundle(scene / "sparse", _total_images(scene, None))
    seg = load_masks(scene / "masks" / "manifest.txt", bundle)
    grays = load_grays(scene / "images" / "manifest.txt", bundle)
    fmasks = fiducial_masks(grays, seg, cfg.block, cfg.c, threads)
    dense = read_ply(scene / "dense.ply").positions
    return lift_fiducials(fmasks, bundle, dense, cfg.eps_c, cfg.background_votes)


def stage_register(fiducials: np.ndarray, touch: np.ndarray):
    xf, report, src, dst = register_ordered(fiducials, touch)
    doc = {
        "recon_to_robot": xf.to_dict(),
        "units": "robot frame mm; source in reconstruction units",
        "residuals": report.to_dict(),
        "source_sorted": src.tolist(),
        "target_sorted_mm": dst.tolist(),
    }
    return xf, doc


def stage_fit(cloud: LabeledCloud, xf: SimilarityTransform) -> PolySurface:
    robot = xf(cloud.positions)
    return fit_poly55(robot[cloud.labels == Label.TRACHEA])


def stage_plan(surface: PolySurface, cloud: LabeledCloud, xf: SimilarityTransform,
               cfg: PipelineConfig):
    robot = xf(cloud.positions)
    pc = PlanConfig(cfg.clearance, cfg.depth_increment, cfg.step_ds, cfg.margin_mm,
                    cfg.n_passes_max, cfg.advance_mode)
    tumor = robot[cloud.labels == Label.TUMOR]
    if len(tumor) == 0:
        raise NoTumorPoints("labeled cloud has no tumor points")
    plan = plan_cuts(surface, tumor, pc)
    violations = validate_plan(plan, surface, robot[cloud.labels == Label.TRACHEA])
    return plan, violations


def _write_plan(out: Path, plan, violations) -> None:
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "plan.json")
    plan.save_pass_csvs(out / "passes")
    _dump(out / "plan_validation.json", {
        "n_violations": len(violations),
        "violations": [vars(v) for v in violations],
    })


# --- subcommands ----------------------------------------------------------------


def cmd_synth(args) -> dict:
    spec = synth_scene.SceneSpec(
        tumor=None if args.no_tumor else synth_scene.TumorSpec(yaw_deg=args.tumor_yaw),
        cameras=synth_scene.CameraRig(count=args.cameras),
        noise=synth_scene.NoiseSpec(args.pixel_sigma, args.point_sigma, args.mask_flip_rate),
        seed=args.seed, layout_seed=args.layout_seed, drop_images=args.drop_images,
    )
    out = Path(args.out)
    art = synth_scene.generate(spec)
    synth_scene.write_scene(art, out)
    post = out / "post"
    post.mkdir(parents=True, exist_ok=True)
    export_ply(synth_scene.generate_post_procedure(spec, args.cut_depth_error), post / "post_cloud.ply")
    img, _, tumor_px = synth_scene.render_post_image(spec)
    write_pgm(post / "post_image.pgm", img)
    _dump(post / "post_meta.json", {"tumor_area": tumor_px, "tumor_area_domain": "pixels",
                                    "cut_depth_error_mm": args.cut_depth_error})
    print(f"wrote scene to {out}: {len(art.bundle.images)} images, {len(art.bundle.points)} points")
    return {"log": out / "run_log_synth.json", "inputs": {"seed": args.seed}}


def cmd_stats(args) -> dict:
    sparse = Path(args.sparse)
    total = args.total_images
    if total is None and args.image_list:
        total = len(read_image_list(args.image_list))
    bundle = read_bundle(sparse, total)
    rep = compute_report(bundle, args.runtime_minutes)
    text = report_rows({args.name or sparse.name: rep})
    print(format_table(args.name or sparse.name, rep), file=sys.stderr)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        log = Path(args.out).with_suffix(".run_log.json")
    else:
        sys.stdout.write(text)
        log = None
    return {"log": log, "inputs": {"sparse": sparse}}


def cmd_fuse(args, cfg) -> dict:
    scene = Path(args.scene)
    cloud = stage_fuse(scene, cfg, not args.sparse, args.total_images)
    out = Path(args.out or scene / "out" / "labeled_cloud.ply")
    out.parent.mkdir(parents=True, exist_ok=True)
    export_ply(cloud, out)
    counts = {Label(k).name.lower(): int(v) for k, v in enumerate(np.bincount(cloud.labels, minlength=5))}
    print(json.dumps({"points": len(cloud), "labels": counts}))
    return {"log": out.parent / "run_log_fuse.json", "inputs": {"scene": scene}}


def cmd_fiducials(args, cfg) -> dict:
    scene = Path(args.scene)
    fs = stage_fiducials(scene, cfg, args.threads)
    out = Path(args.out or scene / "out" / "fiducials.json")
    save_fiducials(out, fs)
    print(json.dumps({"fiducials": fs.points.tolist()}))
    return {"log": out.parent / "run_log_fiducials.json", "inputs": {"scene": scene}}


def cmd_register(args, cfg) -> dict:
    xf, doc = stage_register(load_fiducials(args.fiducials), read_touchpoints(args.touchpoints))
    out = Path(args.out)
    _dump(out, doc)
    print(json.dumps({"mean_mm": doc["residuals"]["mean_mm"], "std_mm": doc["residuals"]["std_mm"],
                      "scale": xf.scale}))
    return {"log": out.with_suffix(".run_log.json"),
            "inputs": {"fiducials": args.fiducials, "touchpoints": args.touchpoints}}


def cmd_fit_surface(args, cfg) -> dict:
    surf = stage_fit(read_ply(args.cloud), _load_transform(args.transform))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    surf.save(out)
    print(f"poly55 surface written to {out}")
    return {"log": out.with_suffix(".run_log.json"),
            "inputs": {"cloud": args.cloud, "transform": args.transform}}


def cmd_plan(args, cfg) -> dict:
    plan, violations = stage_plan(_load_surface(args.surface), read_ply(args.cloud),
                                  _load_transform(args.transform), cfg)
    out = Path(args.out)
    _write_plan(out, plan, violations)
    print(json.dumps({"passes": len(plan.passes), "violations": len(violations)}))
    return {"log": out / "run_log_plan.json",
            "inputs": {"surface": args.surface, "cloud": args.cloud, "transform": args.transform}}


def cmd_score(args, cfg) -> dict:
    report: dict = {"units": "mm for rmse; pixels for areas"}
    if args.post_cloud:
        report["cut_surface"] = cut_surface_rmse(read_ply(args.post_cloud)).to_dict()
    if args.post_image:
        if args.tumor_area is None:
            raise UsageError("--tumor-area is required with --post-image")
        tissue = read_pgm(args.tissue_mask) > 0 if args.tissue_mask else None
        report["char"] = char_report(read_pgm(args.post_image), args.tumor_area,
                                     args.tumor_area_domain, tissue, cfg.tau,
                                     args.tumor_area_source).to_dict()
    if len(report) == 1:
        raise UsageError("score needs --post-cloud and/or --post-image")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_report(out, report)
    print(json.dumps(report, sort_keys=True))
    return {"log": out.with_suffix(".run_log.json"), "inputs": {"post_cloud": args.post_cloud,
                                                               "post_image": args.post_image}}


def cmd_pipeline(args, cfg) -> dict:
    scene = Path(args.scene)
    out = Path(args.out or scene / "out")
    out.mkdir(parents=True, exist_ok=True)
    timing = {}

    t = time.perf_counter()
    cloud = stage_fuse(scene, cfg, dense=True, total=args.total_images)
    export_ply(cloud, out / "labeled_cloud.ply")
    timing["fuse"] = time.perf_counter() - t

    t = time.perf_counter()
    fs = stage_fiducials(scene, cfg, args.threads)
    save_fiducials(out / "fiducials.json", fs)
    timing["fiducials"] = time.perf_counter() - t

    t = time.perf_counter()
    xf, doc = stage_register(fs.points, read_touchpoints(scene / "touchpoints.csv"))
    _dump(out / "registration.json", doc)
    timing["register"] = time.perf_counter() - t

    t = time.perf_counter()
    surf = stage_fit(cloud, xf)
    surf.save(out / "surface.json")
    timing["fit_surface"] = time.perf_counter() - t

    t = time.perf_counter()
    plan, violations = stage_plan(surf, cloud, xf, cfg)
    _write_plan(out, plan, violations)
    timing["plan"] = time.perf_counter() - t

    summary = {
        "registration_mean_mm": doc["residuals"]["mean_mm"],
        "registration_std_mm": doc["residuals"]["std_mm"],
        "passes": len(plan.passes),
        "violations": len(violations),
    }
    _dump(out / "pipeline_report.json", summary)
    timing["total"] = sum(timing.values())
    print(json.dumps({**summary, "timing_s": timing}))
    return {"log": out / "run_log_pipeline.json", "inputs": {"scene": scene}, "extra": {"timing_s": timing}}


# --- parser ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-image work")
    g = p.add_argument_group("config overrides")
    g.add_argument("--block", type=int)
    g.add_argument("--c", type=float)
    g.add_argument("--eps-c", dest="eps_c", type=float)
    g.add_argument("--tau", type=int)
    g.add_argument("--clearance", type=float)
    g.add_argument("--depth-increment", dest="depth_increment", type=float)
    g.add_argument("--step-ds", dest="step_ds", type=float)
    g.add_argument("--margin-mm", dest="margin_mm", type=float)
    g.add_argument("--n-passes-max", dest="n_passes_max", type=int)
    g.add_argument("--background-votes", dest="background_votes",
                   type=lambda s: s.lower() in ("1", "true", "yes", "on"))
    g.add_argument("--advance-mode", dest="advance_mode", choices=["lateral", "deepen"])


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="caoguide", description="Tumor resection planning from multi-view reconstructions")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic scene with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layout-seed", type=int, default=0)
    p.add_argument("--cameras", type=int, default=20)
    p.add_argument("--pixel-sigma", type=float, default=0.0)
    p.add_argument("--point-sigma", type=float, default=0.0)
    p.add_argument("--mask-flip-rate", type=float, default=0.0)
    p.add_argument("--drop-images", type=int, default=0)
    p.add_argument("--tumor-yaw", type=float, default=0.0)
    p.add_argument("--no-tumor", action="store_true")
    p.add_argument("--cut-depth-error", type=float, default=0.0)

    p = sub.add_parser("stats", help="reconstruction statistics as CSV")
    p.add_argument("sparse", help="directory with cameras.txt, images.txt, points3D.txt")
    p.add_argument("--total-images", type=int)
    p.add_argument("--image-list")
    p.add_argument("--runtime-minutes", type=float)
    p.add_argument("--name")
    p.add_argument("--out")

    p = sub.add_parser("fuse", help="multi-view label fusion")
    p.add_argument("scene")
    p.add_argument("--sparse", action="store_true", help="label sparse points instead of dense.ply")
    p.add_argument("--total-images", type=int)
    p.add_argument("--out")
    _add_config_flags(p)

    p = sub.add_parser("fiducials", help="extract the five registration fiducials")
    p.add_argument("scene")
    p.add_argument("--out")
    _add_config_flags(p)

    p = sub.add_parser("register", help="similarity registration to robot touchpoints")
    p.add_argument("fiducials")
    p.add_argument("touchpoints")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("fit-surface", help="poly55 fit to registered trachea points")
    p.add_argument("cloud")
    p.add_argument("transform")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("plan", help="cut trajectories over the fitted surface")
    p.add_argument("surface")
    p.add_argument("cloud")
    p.add_argument("transform")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)

    p = sub.add_parser("score", help="post-procedure outcome metrics")
    p.add_argument("--post-cloud")
    p.add_argument("--post-image")
    p.add_argument("--tissue-mask")
    p.add_argument("--tumor-area", type=float)
    p.add_argument("--tumor-area-domain", default="pixels")
    p.add_argument("--tumor-area-source", default="unspecified")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("pipeline", help="fuse, fiducials, register, fit-surface and plan in one go")
    p.add_argument("scene")
    p.add_argument("--out")
    p.add_argument("--total-images", type=int)
    _add_config_flags(p)
    return ap


_COMMANDS = {
    "fuse": cmd_fuse, "fiducials": cmd_fiducials, "register": cmd_register,
    "fit-surface": cmd_fit_surface, "plan": cmd_plan, "score": cmd_score, "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # usage errors and --help/--version
        return e.code if isinstance(e.code, int) else 1
    t0 = time.perf_counter()
    try:
        if args.command == "synth":
            cfg, res = PipelineConfig(), cmd_synth(args)
        elif args.command == "stats":
            cfg, res = PipelineConfig(), cmd_stats(args)
        else:
            cfg = _config(args)
            res = _COMMANDS[args.command](args, cfg)
    except CaoGuideError as e:
        print(json.dumps(e.payload()), file=sys.stderr)
        return e.exit_code
    if res.get("log") is not None:
        _run_log(Path(res["log"]), args.command, res["inputs"], cfg,
                 time.perf_counter() - t0, res.get("extra"))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
