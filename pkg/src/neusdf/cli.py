"""Command-line entry point: ``neusdf <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 assertion failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from importlib import metadata, resources
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import biaslab, surface, trainer
from .field import Scene, SceneError, ray_sphere_clip, sphere_trace_batch
from .neural import PRESETS, load_checkpoint, save_checkpoint, geometric_init
from .renderer import render_rays
from .scenegen import (Camera, DatasetError, HeadlightModel, default_intrinsics, load_dataset,
                       look_at_rotation, multi_ring, quantize, render_ground_truth, save_dataset,
                       trace_image, write_ppm)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ASSERT = 0, 1, 2, 3
BUNDLED_SCENES = ("sphere", "box_hole")
DEFAULT_S_GRID = tuple(float(s) for s in np.logspace(2, 4, 9))
RENDER_CHUNK = 2048

log = logging.getLogger("neusdf")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class AssertionFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------


def version_string() -> str:
    try:
        v = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        v = "0+unknown"
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{v}+g{rev}" if rev else v


class Manifest:
    """JSON record of one command, written before work starts and on completion."""

    def __init__(self, path: Path, command: str, args: argparse.Namespace, outputs: dict):
        self.path = Path(path)
        self.data = {
            "command": command,
            "argv": sys.argv[1:],
            "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                       if k != "func"},
            "seed": getattr(args, "seed", None),
            "version": version_string(),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "status": "running",
            "outputs": {k: str(v) for k, v in outputs.items()},
        }
        self._write()

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, default=str) + "\n")

    def finish(self, status: str = "ok", **extra):
        self.data.update(extra)
        self.data["status"] = status
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self._write()


def sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


# --------------------------------------------------------------------------
# loaders
# --------------------------------------------------------------------------


def resolve_scene_path(spec: str) -> Path:
    """A scene file path, or the name of a bundled scene."""
    p = Path(spec)
    if p.is_file():
        return p
    if spec in BUNDLED_SCENES:
        return Path(str(resources.files("neusdf") / "scenes" / f"{spec}.json"))
    raise DataError(f"scene file not found: {spec}")


def load_scene(spec: str) -> tuple[Scene, Path]:
    path = resolve_scene_path(spec)
    try:
        return Scene.load(path), path
    except (SceneError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"invalid scene {path}: {e}") from e


def load_net(path):
    try:
        net, iteration, _, meta = load_checkpoint(path)
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    return net, iteration


def load_source(spec: str):
    """A checkpoint (``.npz``) or a scene; returns ``(field, kind)``."""
    if spec.endswith(".npz"):
        return load_net(spec)[0], "net"
    return load_scene(spec)[0], "scene"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    scene, path = load_scene(args.scene)
    out = Path(args.out_dir)
    man = Manifest(out / "manifest.json", "gen-data", args, {"dataset": out})
    intr = default_intrinsics(args.res, args.res, args.fov)
    try:
        cams = multi_ring(args.views, args.distance, args.elevation, intrinsics=intr,
                          bounding_radius=scene.bounding_radius)
    except ValueError as e:
        raise UsageError(str(e)) from e
    ds = render_ground_truth(scene, cams, seed=args.seed, scene_path=str(path))
    if not args.masks:
        ds.masks = None
    save_dataset(ds, out, {"fov_deg": args.fov, "distance": args.distance,
                           "elevations": list(args.elevation)})
    man.finish(views=len(ds))
    log.info("wrote %d views to %s", len(ds), out)
    return EXIT_OK


def _latest_checkpoint(out: Path) -> Path:
    cks = sorted((out / "checkpoints").glob("iter_*.npz"))
    if not cks:
        raise DataError(f"no checkpoint to resume from in {out / 'checkpoints'}")
    return cks[-1]


def cmd_train(args) -> int:
    try:
        ds = load_dataset(args.dataset)
    except DatasetError as e:
        raise DataError(str(e)) from e
    use_mask = ds.has_masks if args.mask is None else args.mask
    if use_mask and not ds.has_masks:
        raise DataError(f"--mask requested but {args.dataset} has no masks")
    overrides = {"seed": args.seed, "use_mask": use_mask}
    for name, key in (("iters", "iterations"), ("lambda_eikonal", "lambda_eikonal"),
                      ("beta", "beta_mask"), ("batch_rays", "batch_rays"),
                      ("warmup", "warmup_iters"), ("checkpoint_every", "checkpoint_every"),
                      ("s_lr_scale", "s_lr_scale")):
        if getattr(args, name) is not None:
            overrides[key] = getattr(args, name)
    try:
        config = trainer.config_from_preset(args.preset, **overrides)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = Path(args.out_dir)
    resume = None
    if args.resume is not None:
        resume = _latest_checkpoint(out) if args.resume == "latest" else Path(args.resume)
        if not resume.exists():
            raise DataError(f"checkpoint not found: {resume}")
    man = Manifest(out / "manifest.json", "train", args,
                   {"run_dir": out, "final": out / "final.npz", "log": out / "loss.csv"})
    man.data["train_config"] = trainer.asdict(config)
    man.data["mlp_config"] = trainer.asdict(PRESETS[args.preset])
    man._write()
    result = trainer.train(ds, config, PRESETS[args.preset], out_dir=out, resume=resume,
                           log=log.info)
    last = result.history[-1] if result.history else {}
    man.finish(final_s=result.net.s, final_loss=last.get("total"),
               resumed_from=str(resume) if resume else None)
    return EXIT_OK


def cmd_extract(args) -> int:
    net, iteration = load_net(args.checkpoint)
    out = Path(args.out)
    man = Manifest(sidecar(out), "extract", args, {"mesh": out})
    mesh = surface.marching_cubes(net, args.res)
    surface.write_obj(out, mesh)
    if mesh.is_empty:
        log.warning("no zero crossing found; wrote an empty mesh")
    man.finish(vertices=len(mesh.vertices), triangles=len(mesh.triangles), iteration=iteration)
    log.info("mesh: %d vertices, %d triangles -> %s", len(mesh.vertices), len(mesh.triangles), out)
    return EXIT_OK


def cmd_eval(args) -> int:
    scene, scene_path = load_scene(args.scene)
    try:
        mesh = surface.read_obj(args.mesh)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read mesh {args.mesh}: {e}") from e
    if mesh.is_empty:
        raise DataError(f"mesh {args.mesh} is empty")
    out = Path(args.csv) if args.csv else Path(args.mesh).with_suffix(".chamfer.csv")
    man = Manifest(sidecar(out), "eval", args, {"report": out})
    gt = surface.marching_cubes(scene, args.gt_res)
    # same stream for both meshes, so identical meshes give identical samples
    a = surface.sample_surface(mesh, args.samples, np.random.default_rng(args.seed))
    b = surface.sample_surface(gt, args.samples, np.random.default_rng(args.seed))
    rep = surface.chamfer_report(a, b)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mesh_to_gt", "gt_to_mesh", "chamfer"])
        w.writerow([repr(rep.a_to_b), repr(rep.b_to_a), repr(rep.symmetric)])
    print(f"mesh_to_gt {rep.a_to_b:.6f}\ngt_to_mesh {rep.b_to_a:.6f}\nchamfer {rep.symmetric:.6f}")
    man.finish(mesh_to_gt=rep.a_to_b, gt_to_mesh=rep.b_to_a, chamfer=rep.symmetric)
    if args.assert_max is not None and not rep.symmetric < args.assert_max:
        raise AssertionFailure(f"chamfer {rep.symmetric:.6f} >= {args.assert_max}")
    return EXIT_OK


def _bias_paths(out: Path, pairs) -> list[Path]:
    if len(pairs) == 1:
        return [out]
    return [out.with_name(f"{out.stem}_mu{mu:g}_tau{tau:g}{out.suffix}") for mu, tau in pairs]


def cmd_bias_report(args) -> int:
    pairs = [(mu, tau) for mu in args.mu_grid for tau in args.tau_grid]
    out = Path(args.out)
    paths = _bias_paths(out, pairs)
    summary = out.with_name(f"{out.stem}_slopes{out.suffix}")
    man = Manifest(sidecar(out), "bias-report", args,
                   {"tables": ",".join(str(p) for p in paths), "slopes": summary})
    failures = []
    rows = []
    for (mu, tau), path in zip(pairs, paths):
        try:
            rep = biaslab.convergence_report(mu, tau, args.s_grid)
        except (ValueError, biaslab.BracketError) as e:
            raise DataError(str(e)) from e
        rep.write_csv(path)
        rows.append((mu, tau, rep.slope_ours, rep.slope_naive))
        print(f"mu={mu:g} tau={tau:g} slope_ours={rep.slope_ours:.4f} "
              f"slope_naive={rep.slope_naive:.4f} -> {path}")
        max_res = max(max(r[3], r[4]) for r in rep.rows)
        if args.check:
            if tau != 0 and not -2.2 <= rep.slope_ours <= -1.8:
                failures.append(f"slope_ours {rep.slope_ours:.4f} (mu={mu}, tau={tau})")
            if not -1.2 <= rep.slope_naive <= -0.8:
                failures.append(f"slope_naive {rep.slope_naive:.4f} (mu={mu}, tau={tau})")
            if not max_res < biaslab.RESIDUAL_TOL:
                failures.append(f"residual {max_res:.3e} (mu={mu}, tau={tau})")
    with summary.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mu", "tau", "slope_ours", "slope_naive"])
        w.writerows([[repr(float(v)) for v in r] for r in rows])
    man.finish(slopes=[dict(zip(("mu", "tau", "slope_ours", "slope_naive"), r)) for r in rows],
               failures=failures)
    if failures:
        raise AssertionFailure("slope bands violated: " + "; ".join(failures))
    return EXIT_OK


def _render_camera(args) -> Camera:
    if args.dataset is not None:
        try:
            ds = load_dataset(args.dataset)
        except DatasetError as e:
            raise DataError(str(e)) from e
        if not 0 <= args.view < len(ds):
            raise UsageError(f"--view must lie in [0, {len(ds) - 1}]")
        return ds.cameras[args.view]
    az, el = np.radians(args.azimuth), np.radians(args.elevation)
    eye = args.distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    intr = default_intrinsics(args.res, args.res, args.fov)
    return Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"], args.res, args.res,
                  look_at_rotation(eye, np.zeros(3)), eye)


def render_image(field, kind: str, cam: Camera, mode: str, s: float | None, seed: int):
    """RGB in [0,1] (HxWx3) and depth normalised over the bounding sphere."""
    color_fn = field.color_fn if kind == "net" else HeadlightModel(field)
    r = field.bounding_radius
    near_plane = np.linalg.norm(cam.center) - r
    if mode == "sphere-trace":
        rgb, mask, depth = trace_image(field, color_fn, cam)
    else:
        s = s if s is not None else (field.s if kind == "net" else 1000.0)
        o, d = cam.pixel_rays()
        rng = np.random.default_rng(seed)
        rgb = np.zeros((len(o), 3))
        depth = np.zeros(len(o))
        mask = np.zeros(len(o), dtype=bool)
        for i in range(0, len(o), RENDER_CHUNK):
            sl = slice(i, i + RENDER_CHUNK)
            c, acc, dep, _, _ = render_rays(field, color_fn, o[sl], d[sl], s, rng)
            rgb[sl], depth[sl], mask[sl] = c, dep, acc > 0.5
        rgb = rgb.reshape(cam.height, cam.width, 3)
        depth = depth.reshape(cam.height, cam.width)
        mask = mask.reshape(cam.height, cam.width)
    depth_n = np.where(mask, np.clip((depth - near_plane) / (2.0 * r), 0.0, 1.0), 0.0)
    return rgb, depth_n


def cmd_render(args) -> int:
    field, kind = load_source(args.source)
    cam = _render_camera(args)
    out = Path(args.out)
    outputs = {"image": out}
    if args.depth:
        outputs["depth"] = args.depth
    man = Manifest(sidecar(out), "render", args, outputs)
    rgb, depth = render_image(field, kind, cam, args.mode, args.s, args.seed)
    write_ppm(out, quantize(rgb))
    if args.depth:
        write_ppm(args.depth, quantize(depth))
    man.finish()
    return EXIT_OK


def cmd_init(args) -> int:
    """Write an untrained, sphere-initialised checkpoint."""
    out = Path(args.out)
    man = Manifest(sidecar(out), "init", args, {"checkpoint": out})
    net = geometric_init(PRESETS[args.preset], trainer.init_rng(args.seed), scale=args.scale)
    save_checkpoint(out, net, 0)
    man.finish()
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="BLAS threads (1 = deterministic mode of record)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="neusdf", description="Neural SDF reconstruction toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    g.add_argument("scene", help="scene JSON path or bundled name (sphere, box_hole)")
    g.add_argument("out_dir")
    g.add_argument("--views", type=int, default=16)
    g.add_argument("--res", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--distance", type=float, default=3.0, help="camera ring radius")
    g.add_argument("--elevation", type=float, nargs="+", default=[0.0, 30.0],
                   help="ring elevations in degrees; views are split across them")
    g.add_argument("--fov", type=float, default=50.0, help="horizontal field of view (deg)")
    g.add_argument("--masks", action=argparse.BooleanOptionalAction, default=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="fit a neural SDF to a dataset")
    t.add_argument("dataset")
    t.add_argument("out_dir")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--iters", type=int)
    t.add_argument("--lambda", dest="lambda_eikonal", type=float, help="Eikonal weight")
    t.add_argument("--beta", type=float, help="mask weight")
    t.add_argument("--mask", action=argparse.BooleanOptionalAction, default=None,
                   help="mask supervision (default: on when the dataset has masks)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-rays", type=int)
    t.add_argument("--warmup", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--s-lr-scale", type=float, help="learning-rate multiplier for raw s")
    t.add_argument("--resume", nargs="?", const="latest",
                   help="continue from a checkpoint (default: latest in OUT_DIR)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", parents=[common], help="marching cubes on a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("out")
    e.add_argument("--res", type=int, default=128)
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", parents=[common], help="Chamfer distance against a scene")
    v.add_argument("mesh")
    v.add_argument("scene")
    v.add_argument("--samples", type=int, default=100_000)
    v.add_argument("--gt-res", type=int, default=256)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--csv")
    v.add_argument("--assert-max", type=float, help="exit 3 unless chamfer is below this")
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("bias-report", parents=[common], help="peak offset versus s tables")
    b.add_argument("out", nargs="?", default="bias_report.csv")
    b.add_argument("--mu-grid", type=float, nargs="+", default=[-1.0, -0.5])
    b.add_argument("--tau-grid", type=float, nargs="+", default=[0.25, 0.5, 1.0])
    b.add_argument("--s-grid", type=float, nargs="+", default=list(DEFAULT_S_GRID))
    b.add_argument("--assert", dest="check", action="store_true",
                   help="exit 3 when a fitted slope leaves its band")
    b.set_defaults(func=cmd_bias_report)

    r = sub.add_parser("render", parents=[common], help="render a checkpoint or scene")
    r.add_argument("source", help="checkpoint (.npz) or scene JSON / bundled name")
    r.add_argument("out")
    r.add_argument("--mode", choices=("volume", "sphere-trace"), default="volume")
    r.add_argument("--depth", help="also write normalised expected depth to this PPM")
    r.add_argument("--dataset", help="take the camera from this dataset")
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--azimuth", type=float, default=0.0)
    r.add_argument("--elevation", type=float, default=20.0)
    r.add_argument("--distance", type=float, default=3.0)
    r.add_argument("--res", type=int, default=128)
    r.add_argument("--fov", type=float, default=50.0)
    r.add_argument("--s", type=float, help="inverse standard deviation for scenes")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_render)

    i = sub.add_parser("init", parents=[common], help="write a sphere-initialised checkpoint")
    i.add_argument("out")
    i.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    i.add_argument("--scale", type=float, default=1.5, help="bounding radius")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_init)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("neusdf: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(args.threads):
            return args.func(args)
    except UsageError as e:
        print(f"neusdf: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SceneError, DatasetError, FileNotFoundError) as e:
        print(f"neusdf: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except AssertionFailure as e:
        print(f"neusdf: assertion failed: {e}", file=sys.stderr)
        return EXIT_ASSERT


if __name__ == "__main__":
    sys.exit(main())
