"""Command-line entry point: synth, train, render, extract, eval, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 I/O or parse error,
4 numeric failure (divergence, failed gradient check).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as config_mod
from . import formats
from . import tensor as T
from .config import Config, ConfigError
from .encoder import EncoderConfig
from .field import AnalyticField, FieldConfig, RayBatch, extract_sdf_grid, render_rays
from .losses import LossWeights
from .metrics import (
    TriangleMesh,
    VoxelGrid,
    evaluate_meshes,
    iou,
    marching_cubes,
    psnr,
    vertex_normals,
    voxelize_mesh,
)
from .scene import (
    Camera,
    CameraError,
    SceneBundle,
    canonical_camera,
    default_camera,
    default_scene,
    render_ground_truth,
    sdf_eval,
    unit_sphere,
)
from .training import DivergenceError, Model, ParameterMismatchError, Trainer, TrainConfig, load_params

log = logging.getLogger("svrecon")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
RENDER_CHUNK = 1024


class LockError(OSError):
    pass


@contextlib.contextmanager
def run_lock(directory: Path):
    """Exclusive lockfile in ``directory``; a second writer fails instead of interleaving."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / ".lock"
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"run directory {directory} is locked by another process ({path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            path.unlink()


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# config -> objects ---------------------------------------------------------


def scene_sdf(cfg: Config):
    kind = cfg["scene.kind"]
    if kind == "default":
        return default_scene()
    if kind == "sphere":
        return unit_sphere()
    raise ConfigError(f"scene.kind: unknown scene {kind!r} (expected 'default' or 'sphere')")


def scene_camera(cfg: Config) -> Camera:
    size = cfg["scene.resolution"]
    if size < 4:
        raise ConfigError("scene.resolution must be at least 4")
    kind = cfg["scene.camera"]
    if kind == "default":
        return default_camera(size)
    if kind == "canonical":
        return canonical_camera(size)
    raise ConfigError(f"scene.camera: unknown camera {kind!r} (expected 'default' or 'canonical')")


def load_scene_dir(directory, sdf) -> SceneBundle:
    d = Path(directory)
    cam = formats.read_camera(d / "camera.txt")
    rgb = formats.read_ppm(d / "rgb.ppm")
    depth = formats.read_pfm(d / "depth.pfm").astype(np.float64)
    normal = formats.read_pfm(d / "normal.pfm").astype(np.float64)
    mask = formats.read_pfm(d / "mask.pfm") > 0.5
    if rgb.shape[:2] != (cam.height, cam.width):
        raise formats.ParseError(f"rgb.ppm is {rgb.shape[1]}x{rgb.shape[0]}, camera says {cam.width}x{cam.height}")
    return SceneBundle(rgb=rgb, depth=depth, normal=normal, mask=mask, camera=cam, sdf=sdf)


def build_scene(cfg: Config) -> SceneBundle:
    sdf = scene_sdf(cfg)
    if cfg["scene.dir"]:
        return load_scene_dir(cfg["scene.dir"], sdf)
    return render_ground_truth(sdf, scene_camera(cfg))


def encoder_config(cfg: Config) -> EncoderConfig:
    e = cfg.section("encoder")
    return EncoderConfig(image_size=cfg["scene.resolution"], shallow_channels=e["shallow_channels"],
                         roi_channels=e["roi_channels"], heads=e["heads"], n1=e["n1"], n2=e["n2"],
                         fusion_width=e["fusion_width"], pe_freqs=e["pe_freqs"], state_dim=e["state_dim"])


def field_config(cfg: Config) -> FieldConfig:
    f = cfg.section("field")
    if f["density_sign"] not in (-1, 1):
        raise ConfigError("field.density_sign must be -1 or +1")
    return FieldConfig(hidden=f["hidden"], n_hidden=f["n_hidden"], geo_feat=f["geo_feat"],
                       color_hidden=f["color_hidden"], pe_freqs=f["pe_freqs"], beta_init=f["beta_init"],
                       density_sign=f["density_sign"], view_dependent=f["view_dependent"],
                       init_radius=f["init_radius"])


def train_config(cfg: Config) -> TrainConfig:
    t = cfg.section("train")
    if t["epochs"] < 1 or t["steps_per_epoch"] < 1 or t["batch_rays"] < 1:
        raise ConfigError("train.epochs, train.steps_per_epoch and train.batch_rays must be positive")
    if t["lr"] <= 0:
        raise ConfigError("train.lr must be positive")
    if not 0.0 <= t["stage2_start"] <= 1.0:
        raise ConfigError("train.stage2_start must lie in [0, 1]")
    try:
        weights = LossWeights(t["w_3d"], t["w_rgb"], t["w_depth"], t["w_normal"])
    except T.ContractError as e:
        raise ConfigError(str(e)) from None
    return TrainConfig(
        epochs=t["epochs"], steps_per_epoch=t["steps_per_epoch"], batch_rays=t["batch_rays"], lr=t["lr"],
        lr_step_frac=t["lr_step_frac"], lr_gamma=t["lr_gamma"], stage2_start=t["stage2_start"], weights=weights,
        m_uniform=t["m_uniform"], m_near=t["m_near"], sigma_near=t["sigma_near"], n_samples=t["n_samples"],
        val_rays=t["val_rays"], near=cfg["field.near"], far=cfg["field.far"], seed=cfg["run.seed"],
        max_epochs_run=t["max_epochs"] or None,
    )


def build_model(cfg: Config) -> Model:
    return Model(encoder_config(cfg), field_config(cfg), seed=cfg["run.seed"])


def _field_and_features(cfg: Config, checkpoint: str | None, scene: SceneBundle):
    """(field, point-feature function) for render/extract, from a checkpoint or the analytic SDF."""
    if cfg["field.analytic"]:
        return AnalyticField(scene.sdf, beta=cfg["field.analytic_beta"], density_sign=cfg["field.density_sign"]), None
    if not checkpoint:
        raise ConfigError("a --checkpoint is required unless field.analytic = true")
    model = build_model(cfg)
    arrays, _ = ckpt.load(checkpoint)
    load_params(model, arrays)
    return model.field, model.point_fn(scene)


# subcommands ----------------------------------------------------------------


def write_scene(out: Path, scene: SceneBundle) -> None:
    out.mkdir(parents=True, exist_ok=True)
    formats.write_ppm(out / "rgb.ppm", scene.rgb)
    formats.write_pfm(out / "depth.pfm", scene.depth)
    formats.write_pfm(out / "normal.pfm", scene.normal)
    formats.write_pfm(out / "mask.pfm", scene.mask.astype(np.float32))
    formats.write_camera(out / "camera.txt", scene.camera)


def cmd_synth(cfg: Config, args) -> int:
    out = Path(args.out)
    with run_lock(out):
        scene = render_ground_truth(scene_sdf(cfg), scene_camera(cfg))
        write_scene(out, scene)
        cfg.dump(out / "config.txt")
    print(f"wrote scene ({scene.camera.width}x{scene.camera.height}, {int(scene.mask.sum())} hit pixels) to {out}")
    return EXIT_OK


def cmd_train(cfg: Config, args) -> int:
    out = Path(args.out)
    tcfg = train_config(cfg)
    scene = build_scene(cfg)
    model = build_model(cfg)
    with run_lock(out):
        cfg.dump(out / "config.txt")
        if not cfg["train.resume"]:
            with contextlib.suppress(FileNotFoundError):
                (out / "metrics.csv").unlink()
        trainer = Trainer(model, tcfg, [scene], run_dir=out)
        if cfg["train.resume"]:
            trainer.load(cfg["train.resume"])
        try:
            trainer.fit()
        except DivergenceError as e:
            print(f"error: {e}; diagnostics in {out / 'divergence.json'}", file=sys.stderr)
            return EXIT_NUMERIC
    print(f"trained {trainer.epoch} epochs; best val {trainer.best_val:.6g} at epoch {trainer.best_epoch}; run in {out}")
    return EXIT_OK


def render_view(fld, pf, camera: Camera, cfg: Config, deterministic: bool) -> dict[str, np.ndarray]:
    o, d = camera.rays()
    rng = None if deterministic else np.random.default_rng([cfg["run.seed"], 17])
    parts = {"rgb": [], "depth": [], "normal": [], "opacity": []}
    with T.no_grad(), T.default_dtype(np.float64):
        for start in range(0, len(o), RENDER_CHUNK):
            sl = slice(start, start + RENDER_CHUNK)
            rays = RayBatch(o[sl], d[sl], cfg["field.near"], cfg["field.far"])
            r = render_rays(fld, pf, rays, cfg["field.n_samples"], stratified=rng is not None, rng=rng)
            parts["rgb"].append(r.color.data)
            parts["depth"].append(r.depth.data)
            parts["normal"].append(camera.to_camera(r.normal.data))
            parts["opacity"].append(r.opacity.data)
    h, w = camera.height, camera.width
    return {
        "rgb": np.concatenate(parts["rgb"]).reshape(h, w, 3),
        "depth": np.concatenate(parts["depth"]).reshape(h, w),
        "normal": np.concatenate(parts["normal"]).reshape(h, w, 3),
        "opacity": np.concatenate(parts["opacity"]).reshape(h, w),
    }


def cmd_render(cfg: Config, args) -> int:
    out = Path(args.out)
    scene = build_scene(cfg)
    camera = formats.read_camera(args.camera) if args.camera else scene.camera
    fld, pf = _field_and_features(cfg, args.checkpoint, scene)
    with run_lock(out):
        img = render_view(fld, pf, camera, cfg, cfg["run.deterministic"])
        formats.write_ppm(out / "render_rgb.ppm", img["rgb"])
        formats.write_pfm(out / "render_depth.pfm", img["depth"])
        formats.write_pfm(out / "render_normal.pfm", img["normal"])
        formats.write_pfm(out / "render_opacity.pfm", img["opacity"])
        cfg.dump(out / "config.txt")
    print(f"rendered {camera.width}x{camera.height} to {out}")
    return EXIT_OK


def cmd_extract(cfg: Config, args) -> int:
    out = Path(args.out)
    scene = build_scene(cfg)
    fld, pf = _field_and_features(cfg, args.checkpoint, scene)
    res = cfg["extract.resolution"]
    if res < 8:
        raise ConfigError("extract.resolution must be at least 8")
    b = cfg["extract.bbox"]
    bbox = ((-b, -b, -b), (b, b, b))
    with run_lock(out):
        with T.default_dtype(np.float64):
            grid = extract_sdf_grid(fld, pf, bbox, res)
        mesh = marching_cubes(grid, bbox)
        formats.write_obj(out / "mesh.obj", mesh.vertices, mesh.faces, mesh.normals)
        cfg.dump(out / "config.txt")
    if mesh.empty:
        print(f"empty mesh: SDF grid has no zero crossing (range {grid.min():.4g} .. {grid.max():.4g}); wrote {out / 'mesh.obj'}")
    else:
        print(f"extracted {len(mesh.vertices)} vertices, {len(mesh.faces)} faces, "
              f"watertight={mesh.is_watertight()} to {out / 'mesh.obj'}")
    return EXIT_OK


def read_mesh(path) -> TriangleMesh:
    v, f, n = formats.read_obj(path)
    mesh = TriangleMesh(v, f, None)
    if n is None or len(n) != len(v):
        n = vertex_normals(mesh)
    return TriangleMesh(v, f, n)


def reference_mesh(cfg: Config) -> TriangleMesh:
    sdf = scene_sdf(cfg)
    res = cfg["eval.reference_resolution"]
    b = cfg["extract.bbox"]
    bbox = ((-b, -b, -b), (b, b, b))
    g = np.linspace(-b, b, res + 1)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    return marching_cubes(sdf_eval(sdf, pts).reshape((res + 1,) * 3), bbox)


def cmd_eval(cfg: Config, args) -> int:
    pred = read_mesh(args.prediction)
    ref = read_mesh(args.reference) if args.reference else reference_mesh(cfg)
    rng = np.random.default_rng([cfg["run.seed"], 23])
    m = evaluate_meshes(pred, ref, n_points=cfg["eval.n_points"], tau=cfg["eval.fscore_tau"], rng=rng,
                        normalize=cfg["eval.normalize"])
    report = {"cd": m["cd"], "cd_x1000": m["cd_x1000"], "fscore": 100.0 * m["fscore"], "nc": m["nc"]}
    if args.images:
        a, b = (formats.read_ppm(p) for p in args.images)
        report["psnr"] = psnr(a, b)
    if args.grids:
        a, b = (np.load(p) for p in args.grids)
        report["iou"] = iou(VoxelGrid.from_occupancy(a), VoxelGrid.from_occupancy(b))
    elif args.voxel_iou:
        lo = np.minimum(pred.vertices.min(0) if not pred.empty else ref.vertices.min(0), ref.vertices.min(0))
        hi = np.maximum(pred.vertices.max(0) if not pred.empty else ref.vertices.max(0), ref.vertices.max(0))
        pad = 0.05 * (hi - lo).max()
        bbox = (tuple(lo - pad), tuple(hi + pad))
        r = cfg["eval.iou_resolution"]
        report["iou"] = iou(voxelize_mesh(pred, bbox, r), voxelize_mesh(ref, bbox, r))
    print(json.dumps(report, sort_keys=True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval.csv"
    cols = ["prediction", "reference", "cd", "cd_x1000", "fscore", "nc", "psnr", "iou"]
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(cols)
        row = {"prediction": args.prediction, "reference": args.reference or f"analytic:{cfg['scene.kind']}", **report}
        w.writerow([repr(row[c]) if isinstance(row.get(c), float) else row.get(c, "") for c in cols])
    return EXIT_OK


def cmd_gradcheck(cfg: Config, args) -> int:
    from .gradsuite import SUITE, run_suite

    tol = cfg["gradcheck.tolerance"]
    fault = cfg["gradcheck.inject_fault"] or None
    if fault is not None and fault not in SUITE:
        raise ConfigError(f"gradcheck.inject_fault: unknown case {fault!r}")
    names = args.only or None
    if names and any(n not in SUITE for n in names):
        raise ConfigError(f"unknown gradcheck case(s): {[n for n in names if n not in SUITE]}")
    results = run_suite(names, tol=tol, inject_fault=fault, seed=cfg["run.seed"])
    for r in results:
        worst = "" if r.report.worst_index is None else f" worst input {r.report.worst_index[0]} elem {r.report.worst_index[1]}"
        print(f"{r.name:<20} max_rel_err {r.report.max_rel_err:.3e} {'PASS' if r.passed else 'FAIL'}{worst}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_NUMERIC if failed else EXIT_OK


# parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable, applied last)")
    common.add_argument("--out", default=".", help="output / run directory")
    common.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    common.add_argument("--deterministic", action="store_true", help="shorthand for --set run.deterministic=true")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="svrecon", description="Single-view implicit surface reconstruction.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="render the analytic scene to PPM/PFM + camera.txt")
    sub.add_parser("train", parents=[common], help="two-stage training into a run directory")
    r = sub.add_parser("render", parents=[common], help="volume-render a view from a checkpoint")
    r.add_argument("--checkpoint")
    r.add_argument("--camera", help="camera.txt for the rendered view (default: the input camera)")
    e = sub.add_parser("extract", parents=[common], help="marching-cubes mesh from a checkpoint")
    e.add_argument("--checkpoint")
    v = sub.add_parser("eval", parents=[common], help="mesh metrics against a reference")
    v.add_argument("prediction", help="predicted mesh (OBJ)")
    v.add_argument("--reference", help="reference mesh (OBJ); default: the analytic scene")
    v.add_argument("--images", nargs=2, metavar=("PRED_PPM", "REF_PPM"), help="add PSNR")
    v.add_argument("--grids", nargs=2, metavar=("PRED_NPY", "REF_NPY"), help="add IoU of boolean occupancy grids")
    v.add_argument("--voxel-iou", action="store_true", help="add IoU of the voxelised meshes")
    g = sub.add_parser("gradcheck", parents=[common], help="run the gradient-check suite")
    g.add_argument("--only", action="append", help="run only this case (repeatable)")
    sub.add_parser("config", parents=[common], help="print the effective config, or every key with --describe")\
        .add_argument("--describe", action="store_true")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "extract": cmd_extract,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def effective_config(args) -> Config:
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg["run.seed"] = args.seed
    if args.deterministic:
        cfg["run.deterministic"] = True
    cfg.apply_overrides(args.set)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = effective_config(args)
        if args.command == "config":
            sys.stdout.write(config_mod.describe() if args.describe else cfg.dumps())
            return EXIT_OK
        with deterministic_mode(cfg["run.deterministic"]):
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, T.ConfigError, ParameterMismatchError, CameraError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, formats.ParseError, ckpt.CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
