"""Command-line surface: render, drr, fit, anchors, metrics, gradcheck, bench, info.

Every command resolves its configuration up front, writes outputs through an
atomic tracker (a failure removes whatever was already written), and finishes
by writing a run manifest with sha256 hashes of the inputs. Worker count comes
from --workers, else the SPLAT360_WORKERS environment variable, else 1.

Exit codes: 0 success, 2 argument error, 3 input-format error, 4 numeric
failure, 5 check failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .anchors import (DEFAULT_BETA, DEFAULT_K, DEFAULT_SUPPRESSION_RADIUS,
                      anchor_set_to_json, depth_gradient, select_anchors)
from .ct import DrrConfig, ProjectionGeometry, load_volume, render_drr
from .errors import CheckFailure, FormatError, NumericFailure
from .fitting import (FitConfig, _Appearance, _patch_backward, _patch_forward,
                      _scene_with, composite_loss, fit_scene)
from .fusion import (fuse_backward_batch, fuse_forward_batch, init_mlp,
                     load_mlp, save_mlp)
from .imgfile import load_pfm, load_ppm, save_pfm, save_ppm
from .metrics import SsimConfig, measure_runtime, psnr, ssim
from .renderer import RenderConfig, ScenePrecompute, render
from .scene import (Camera, Scene, load_scene, make_orbit_cameras,
                    make_random_scene, save_scene)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4
EXIT_CHECK = 5


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _vec3_arg(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z - got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _resolve_workers(args) -> int:
    if getattr(args, "workers", None):
        return max(1, args.workers)
    env = os.environ.get("SPLAT360_WORKERS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"SPLAT360_WORKERS must be an integer, got {env!r}")
    return 1


class _Run:
    """Tracks files a command writes so a failure can remove them all."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.written: list[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        p = os.path.join(self.out_dir, name)
        self.written.append(p)
        return p

    def cleanup(self):
        for p in self.written:
            try:
                os.unlink(p)
            except OSError:
                pass

    def manifest(self, command: str, config: dict, inputs: list[str],
                 seed) -> None:
        doc = {
            "command": command,
            "config": config,
            "inputs": {p: _sha256(p) for p in inputs},
            "outputs": sorted(os.path.basename(p) for p in self.written),
            "seed": seed,
            "version": __version__,
        }
        path = self.path("manifest.json")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)


# ---------------------------------------------------------------------------
# camera JSON sidecars

def camera_to_doc(cam: Camera) -> dict:
    return {"position": list(cam.position), "forward": list(cam.forward),
            "up": list(cam.up), "right": list(cam.right), "fov_y": cam.fov_y,
            "width": cam.width, "height": cam.height, "near": cam.near}


def camera_from_doc(doc: dict) -> Camera:
    try:
        return Camera(np.array(doc["position"]), np.array(doc["forward"]),
                      np.array(doc["up"]), np.array(doc["right"]),
                      doc["fov_y"], doc["width"], doc["height"],
                      doc.get("near", 1e-3))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"bad camera JSON: {e}") from e


def load_camera_json(path: str) -> Camera:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise FormatError(f"cannot read camera file: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"camera file is not valid JSON: {e}") from e
    return camera_from_doc(doc)


def _cameras_for(args, scene: Scene) -> list[Camera]:
    if getattr(args, "camera", None):
        return [load_camera_json(args.camera)]
    mode, _, count = args.orbit.partition(":")
    if mode not in ("ring", "fibonacci_sphere") or not count.isdigit():
        raise ValueError(
            f"--orbit must be ring:N or fibonacci_sphere:N, got {args.orbit!r}")
    n = int(count)
    center = args.center if args.center is not None else scene.center
    radius = args.radius
    if radius is None:
        radius = 2.5 * scene.radius if scene.radius > 0 else 1.0
    return make_orbit_cameras(center, radius, n, args.elevation, mode,
                              args.width, args.height, args.fov)


def _render_config(args) -> RenderConfig:
    return RenderConfig(disentangle=not args.no_disentangle,
                        anisotropy_enabled=not args.no_anisotropy)


# ---------------------------------------------------------------------------
# render

def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    cams = _cameras_for(args, scene)
    rcfg = _render_config(args)
    workers = _resolve_workers(args)
    run = _Run(args.out)
    try:
        for i, cam in enumerate(cams):
            color, depth, trans = render(scene, cam, rcfg, workers=workers)
            save_ppm(run.path(f"frame_{i:03d}.ppm"), color.data)
            with open(run.path(f"frame_{i:03d}.camera.json"), "w",
                      encoding="utf-8") as f:
                json.dump(camera_to_doc(cam), f, indent=1)
                f.write("\n")
            if args.float_color:
                save_pfm(run.path(f"frame_{i:03d}.pfm"), color.data)
            if args.depth:
                save_pfm(run.path(f"frame_{i:03d}.depth.pfm"), depth.data)
            if args.transmittance:
                save_pfm(run.path(f"frame_{i:03d}.trans.pfm"), trans.data)
        run.manifest("render", {
            "scene": args.scene, "orbit": args.orbit, "camera": args.camera,
            "width": args.width, "height": args.height, "fov": args.fov,
            "radius": args.radius, "elevation": args.elevation,
            "center": None if args.center is None else list(args.center),
            "disentangle": rcfg.disentangle,
            "anisotropy_enabled": rcfg.anisotropy_enabled,
            "termination_epsilon": rcfg.termination_epsilon,
            "cutoff_sigma": rcfg.cutoff_sigma,
            "depth": args.depth, "transmittance": args.transmittance,
            "float_color": args.float_color, "workers": workers,
        }, [args.scene], args.seed)
    except BaseException:
        run.cleanup()
        raise
    print(f"wrote {len(cams)} frame(s) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# drr

def _default_geometry(vol, args) -> ProjectionGeometry:
    center = vol.center
    ext = float(np.max(vol.box_hi - vol.box_lo))
    w = args.det_width
    h = args.det_height
    source = args.source
    if source is None:
        source = center + np.array([0.0, -3.0 * ext, 0.0])
    det_center = args.detector_center
    if det_center is None:
        det_center = center + np.array([0.0, 3.0 * ext, 0.0])
    du = args.detector_u
    dv = args.detector_v
    if du is None:
        du = np.array([2.0 * ext / w, 0.0, 0.0])
    if dv is None:
        dv = np.array([0.0, 0.0, -2.0 * ext / h])
    return ProjectionGeometry(source, det_center, du, dv, w, h)


def cmd_drr(args) -> int:
    vol = load_volume(args.volume)
    geom = _default_geometry(vol, args)
    cfg = DrrConfig(mu_water=args.mu_water, i0=args.i0, step_mm=args.step,
                    output=args.output)
    workers = _resolve_workers(args)
    run = _Run(args.out)
    try:
        img = render_drr(vol, geom, cfg, workers=workers)
        if args.output == "intensity":
            save_ppm(run.path("drr.ppm"), np.repeat(img.data, 3, axis=2))
        else:
            save_pfm(run.path("drr.pfm"), img.data)
        run.manifest("drr", {
            "volume": args.volume, "mu_water": cfg.mu_water, "i0": cfg.i0,
            "step_mm": cfg.resolved_step(vol), "output": cfg.output,
            "source": list(geom.source),
            "detector_center": list(geom.detector_center),
            "detector_u": list(geom.detector_u),
            "detector_v": list(geom.detector_v),
            "det_width": geom.det_width, "det_height": geom.det_height,
            "workers": workers,
        }, [args.volume, _raw_path_of(args.volume)], args.seed)
    except BaseException:
        run.cleanup()
        raise
    print(f"wrote drr to {args.out}")
    return EXIT_OK


def _raw_path_of(header_path: str) -> str:
    # the header's data= key names the raw payload next to it
    with open(header_path, "r", encoding="utf-8") as f:
        for line in f:
            if line.startswith("data="):
                return os.path.join(os.path.dirname(header_path),
                                    line[len("data="):].strip())
    return header_path


# ---------------------------------------------------------------------------
# fit

def _load_targets(targets_dir: str):
    """(Camera, image) pairs from frame_XXX.camera.json + frame_XXX.pfm/.ppm."""
    names = sorted(n for n in os.listdir(targets_dir)
                   if n.endswith(".camera.json"))
    if not names:
        raise FormatError(f"no frame_*.camera.json files in {targets_dir}")
    pairs = []
    any_pfm = False
    for name in names:
        stem = name[:-len(".camera.json")]
        cam = load_camera_json(os.path.join(targets_dir, name))
        pfm = os.path.join(targets_dir, stem + ".pfm")
        ppm = os.path.join(targets_dir, stem + ".ppm")
        if os.path.exists(pfm):
            img = load_pfm(pfm)
            any_pfm = True
            used = pfm
        elif os.path.exists(ppm):
            img = load_ppm(ppm)
            used = ppm
        else:
            raise FormatError(f"no image for {stem} (need .pfm or .ppm)")
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        pairs.append((cam, img, used))
    return pairs, any_pfm


def cmd_fit(args) -> int:
    scene = load_scene(args.scene)
    pairs, any_pfm = _load_targets(args.targets)
    ablation = frozenset(p for p in (args.ablation or "").split(",") if p)
    cfg = FitConfig(lr=args.lr, iters=args.iters, lambda_mse=args.lambda_mse,
                    lambda_ssim=args.lambda_ssim,
                    optimize_geometry=args.optimize_geometry,
                    ablation=ablation, seed=args.seed,
                    lr_halve_every=args.halve_every,
                    use_lpips=args.use_lpips,
                    target_dtype="float32" if any_pfm else "float64")
    mlp = None
    if args.mlp:
        mlp = load_mlp(args.mlp)
    elif args.mlp_init is not None:
        mlp = init_mlp(d=args.mlp_init, seed=args.seed)
    targets = [(cam, img) for cam, img, _ in pairs]
    run = _Run(args.out)
    config_doc = {
        "scene": args.scene, "targets": [p[2] for p in pairs],
        "lr": cfg.lr, "iters": cfg.iters, "lambda_mse": cfg.lambda_mse,
        "lambda_ssim": cfg.lambda_ssim, "ablation": sorted(cfg.ablation),
        "optimize_geometry": cfg.optimize_geometry,
        "lr_halve_every": cfg.lr_halve_every, "rays_per_step": cfg.rays_per_step,
        "target_dtype": cfg.target_dtype, "mlp": args.mlp,
        "mlp_init": args.mlp_init,
    }
    try:
        fitted, mlp_out, report = fit_scene(scene, targets, cfg, mlp=mlp)
    except NumericFailure as e:
        # keep the trace collected so far, drop nothing else (nothing written yet)
        with open(run.path("fit_report.json"), "w", encoding="utf-8") as f:
            doc = e.report.to_dict() if getattr(e, "report", None) else {}
            doc["error"] = str(e)
            json.dump(doc, f, indent=1)
            f.write("\n")
        print(f"fit aborted: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    try:
        save_scene(run.path("fitted_scene.json"), fitted)
        if mlp_out is not None:
            save_mlp(run.path("mlp.params"), mlp_out)
        with open(run.path("fit_report.json"), "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=1)
            f.write("\n")
        lines = ["view  psnr_db  ssim"]
        for row in report.per_view:
            lines.append(f"{row['view']:4d}  {row['psnr']:7.3f}  {row['ssim']:.6f}")
        with open(run.path("per_view.txt"), "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        inputs = [args.scene] + [p[2] for p in pairs]
        inputs += [os.path.join(args.targets, n) for n in
                   sorted(os.listdir(args.targets)) if n.endswith(".camera.json")]
        if args.mlp:
            inputs.append(args.mlp)
        run.manifest("fit", config_doc, inputs, args.seed)
    except BaseException:
        run.cleanup()
        raise
    print("\n".join(lines))
    print(f"final loss {report.final_loss:.6e} after {report.iterations} iterations "
          f"({report.seconds:.1f}s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# anchors

def cmd_anchors(args) -> int:
    scene = load_scene(args.scene)
    cams = _cameras_for(args, scene)
    cam = cams[0]
    rcfg = _render_config(args)
    workers = _resolve_workers(args)
    run = _Run(args.out)
    try:
        _, depth, _ = render(scene, cam, rcfg, workers=workers)
        grad = depth_gradient(depth)
        aset = select_anchors(grad, k=args.k, suppression_radius=args.radius_px,
                              beta=args.beta)
        with open(run.path("anchors.json"), "w", encoding="utf-8") as f:
            f.write(anchor_set_to_json(aset, seed=args.seed))
        save_pfm(run.path("grad_mag.pfm"), grad.data)
        run.manifest("anchors", {
            "scene": args.scene, "camera": args.camera, "orbit": args.orbit,
            "width": args.width, "height": args.height, "fov": args.fov,
            "k": args.k, "suppression_radius": args.radius_px,
            "beta": args.beta, "workers": workers,
        }, [args.scene], args.seed)
    except BaseException:
        run.cleanup()
        raise
    print(f"wrote {len(aset.anchors)} anchors to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# metrics

def _load_image_any(path: str) -> np.ndarray:
    if path.endswith(".pfm"):
        return load_pfm(path)
    if path.endswith(".ppm"):
        return load_ppm(path)
    raise FormatError(f"unsupported image extension: {path} (need .ppm/.pfm)")


def cmd_metrics(args) -> int:
    a = _load_image_any(args.image_a)
    b = _load_image_any(args.image_b)
    win = min(11, a.shape[0], a.shape[1])
    if win % 2 == 0:
        win -= 1
    result = {"psnr_db": psnr(a, b), "ssim": ssim(a, b, SsimConfig(window_size=win)),
              "image_a": args.image_a, "image_b": args.image_b}
    text = json.dumps(result, indent=1) + "\n"
    sys.stdout.write(text)
    if args.out:
        run = _Run(args.out)
        try:
            with open(run.path("metrics.json"), "w", encoding="utf-8") as f:
                f.write(text)
            run.manifest("metrics", {"image_a": args.image_a,
                                     "image_b": args.image_b},
                         [args.image_a, args.image_b], args.seed)
        except BaseException:
            run.cleanup()
            raise
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def _relerr(analytic: float, fd: float, abs_floor: float = 1e-8) -> float:
    if abs(analytic) < abs_floor and abs(fd) < abs_floor:
        return abs(analytic - fd)
    return abs(analytic - fd) / max(abs(analytic), abs(fd))


def run_gradcheck(seed: int = 0, tol: float = 1e-4, draws: int = 100) -> dict:
    """Finite-difference audit of every analytic gradient path.

    Raises CheckFailure on the first violation; returns worst errors per
    section otherwise. Each draw checks a seeded random subset of coordinates.
    """
    rng = np.random.default_rng(seed)
    h = 1e-5
    worst_mlp = 0.0
    for _ in range(draws):
        d = 16
        params = init_mlp(d=d, seed=int(rng.integers(1 << 31)))
        x = np.concatenate([rng.random(3), rng.random(3),
                            rng.uniform(-1, 1, d), rng.uniform(-1, 1, 3)])
        up = rng.standard_normal(3)
        _, cache = fuse_forward_batch(x[None, :], params, want_cache=True)
        grads, dX = fuse_backward_batch(cache, params, up[None, :])
        flat = params.to_flat()
        gflat = grads.to_flat()
        for idx in rng.integers(0, flat.size, 6):
            fp = flat.copy(); fp[idx] += h
            fm = flat.copy(); fm[idx] -= h
            lo = float(fuse_forward_batch(x[None, :], params.with_flat(fp))[0] @ up)
            hi = float(fuse_forward_batch(x[None, :], params.with_flat(fm))[0] @ up)
            err = _relerr(gflat[idx], (lo - hi) / (2 * h))
            worst_mlp = max(worst_mlp, err)
            if err > tol:
                raise CheckFailure(
                    f"mlp param gradient off by rel {err:.2e} (> {tol:g})")
        for idx in rng.integers(0, x.size, 4):
            xp = x.copy(); xp[idx] += h
            xm = x.copy(); xm[idx] -= h
            lo = float(fuse_forward_batch(xp[None, :], params)[0] @ up)
            hi = float(fuse_forward_batch(xm[None, :], params)[0] @ up)
            err = _relerr(dX[0, idx], (lo - hi) / (2 * h))
            worst_mlp = max(worst_mlp, err)
            if err > tol:
                raise CheckFailure(
                    f"mlp input gradient off by rel {err:.2e} (> {tol:g})")

    worst_loss = 0.0
    pred = rng.random((8, 8, 3))
    tgt = rng.random((8, 8, 3))
    _, grad = composite_loss(pred, tgt)
    for _ in range(40):
        i, j, c = rng.integers(8), rng.integers(8), rng.integers(3)
        pp = pred.copy(); pp[i, j, c] += h
        pm = pred.copy(); pm[i, j, c] -= h
        fd = (composite_loss(pp, tgt)[0] - composite_loss(pm, tgt)[0]) / (2 * h)
        err = _relerr(grad.data[i, j, c], fd)
        worst_loss = max(worst_loss, err)
        if err > tol:
            raise CheckFailure(
                f"composite_loss gradient off by rel {err:.2e} (> {tol:g})")

    worst_app = _appearance_gradcheck(seed, tol=max(tol, 1e-3))
    return {"mlp": worst_mlp, "composite_loss": worst_loss,
            "appearance": worst_app, "tol": tol, "draws": draws}


def _appearance_gradcheck(seed: int, tol: float) -> float:
    """Full-render appearance gradients vs finite differences, 3 splats, 16x16."""
    scene = make_random_scene(3, seed=seed + 1, spread=0.12,
                              sigma_range=(0.05, 0.1))
    cam = make_orbit_cameras(scene.center, 0.8, 1, 0.2, "ring", 16, 16, 1.1)[0]
    rcfg = RenderConfig()
    tgt = np.clip(np.random.default_rng(seed + 2).random((16, 16, 3)), 0, 1)
    rows = np.arange(16, dtype=np.float64)
    cols = np.arange(16, dtype=np.float64)
    app = _Appearance(scene)

    def loss_of(sc):
        pre = ScenePrecompute.from_scene(sc)
        colors, _ = _patch_forward(pre, cam, rcfg, rows, cols, None, None)
        return composite_loss(colors.reshape(16, 16, 3), tgt)[0]

    pre = ScenePrecompute.from_scene(scene)
    colors, work = _patch_forward(pre, cam, rcfg, rows, cols, None, None)
    _, gimg = composite_loss(colors.reshape(16, 16, 3), tgt)
    dalpha, dli, dla, dg, _ = _patch_backward(work, rcfg,
                                              gimg.data.reshape(-1, 3), None)
    h = 1e-5
    worst = 0.0
    for gi in range(3):
        for ch in range(3):
            li = app.l_iso.copy(); li[gi, ch] += h
            lp = loss_of(_scene_with(scene, app.alpha, li, app.l_aniso, app.g))
            li[gi, ch] -= 2 * h
            lm = loss_of(_scene_with(scene, app.alpha, li, app.l_aniso, app.g))
            err = _relerr(dli[gi, ch], (lp - lm) / (2 * h))
            worst = max(worst, err)
            if err > tol:
                raise CheckFailure(
                    f"appearance gradient (splat {gi}) off by rel {err:.2e}")
    return worst


def cmd_gradcheck(args) -> int:
    result = run_gradcheck(seed=args.seed, tol=args.tol, draws=args.draws)
    print(json.dumps(result, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench

def cmd_bench(args) -> int:
    if args.scene:
        scene = load_scene(args.scene)
    else:
        scene = make_random_scene(args.gaussians, seed=args.seed, spread=0.5,
                                  sigma_range=(0.01, 0.04))
    cams = make_orbit_cameras(scene.center, 2.5 * max(scene.radius, 0.1),
                              args.frames, 0.3, "ring", args.res, args.res, 0.9)
    workers = _resolve_workers(args)
    report = measure_runtime(scene, cams, RenderConfig(), workers=workers)
    doc = report.to_dict()
    doc["cpu_count"] = os.cpu_count()
    doc["gaussians"] = len(scene.gaussians)
    text = json.dumps(doc, indent=1) + "\n"
    sys.stdout.write(text)
    if args.out:
        run = _Run(args.out)
        try:
            with open(run.path("bench.json"), "w", encoding="utf-8") as f:
                f.write(text)
            run.manifest("bench", {"scene": args.scene, "res": args.res,
                                   "frames": args.frames, "workers": workers,
                                   "gaussians": len(scene.gaussians)},
                         [args.scene] if args.scene else [], args.seed)
        except BaseException:
            run.cleanup()
            raise
    return EXIT_OK


def cmd_info(args) -> int:
    import scipy
    doc = {
        "version": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "cpu_count": os.cpu_count(),
        "defaults": {
            "render": vars(RenderConfig()),
            "drr": {"mu_water": DrrConfig().mu_water, "i0": DrrConfig().i0,
                    "step_mm": DrrConfig().step_mm, "output": DrrConfig().output},
            "ssim": vars(SsimConfig()),
            "fit": {k: (sorted(v) if isinstance(v, frozenset) else v)
                    for k, v in vars(FitConfig(iters=1)).items()},
        },
    }
    print(json.dumps(doc, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_common(p, out_required=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=0,
                   help="process count; 0 = SPLAT360_WORKERS or 1")
    if out_required:
        p.add_argument("--out", required=True, help="output directory")
    else:
        p.add_argument("--out", default=None, help="output directory")


def _add_camera_flags(p):
    p.add_argument("--camera", default=None, help="camera JSON file")
    p.add_argument("--orbit", default="ring:8",
                   help="ring:N or fibonacci_sphere:N")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--fov", type=float, default=0.9, help="vertical fov, radians")
    p.add_argument("--radius", type=float, default=None, help="orbit radius")
    p.add_argument("--elevation", type=float, default=0.3, help="radians")
    p.add_argument("--center", type=_vec3_arg, default=None)


def _add_render_flags(p):
    p.add_argument("--no-disentangle", action="store_true")
    p.add_argument("--no-anisotropy", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splat360",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a scene to PPM frames")
    p.add_argument("--scene", required=True)
    _add_camera_flags(p)
    _add_render_flags(p)
    p.add_argument("--depth", action="store_true", help="also write depth PFMs")
    p.add_argument("--transmittance", action="store_true")
    p.add_argument("--float-color", action="store_true",
                   help="also write linear color PFMs")
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("drr", help="project a CT volume to a radiograph")
    p.add_argument("--volume", required=True, help="volume header path")
    p.add_argument("--source", type=_vec3_arg, default=None)
    p.add_argument("--detector-center", type=_vec3_arg, default=None)
    p.add_argument("--detector-u", type=_vec3_arg, default=None)
    p.add_argument("--detector-v", type=_vec3_arg, default=None)
    p.add_argument("--det-width", type=int, default=129)
    p.add_argument("--det-height", type=int, default=129)
    p.add_argument("--mu-water", type=float, default=0.02)
    p.add_argument("--i0", type=float, default=1.0)
    p.add_argument("--step", type=float, default=None, help="step in mm")
    p.add_argument("--output", choices=("intensity", "line_integral"),
                   default="intensity")
    _add_common(p)
    p.set_defaults(func=cmd_drr)

    p = sub.add_parser("fit", help="fit appearance parameters to target views")
    p.add_argument("--scene", required=True, help="starting scene JSON")
    p.add_argument("--targets", required=True,
                   help="directory of frame_*.camera.json + frame_*.pfm/.ppm")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.0002)
    p.add_argument("--lambda-mse", type=float, default=1.0)
    p.add_argument("--lambda-ssim", type=float, default=0.2)
    p.add_argument("--halve-every", type=int, default=50000)
    p.add_argument("--ablation", default="",
                   help="comma list: no_anchoring,no_disentangle,"
                        "no_dual_branch,no_anisotropy")
    p.add_argument("--optimize-geometry", action="store_true")
    p.add_argument("--use-lpips", action="store_true",
                   help="not supported; errors out (documented omission)")
    p.add_argument("--mlp", default=None, help="initial MLP params file")
    p.add_argument("--mlp-init", type=int, default=None,
                   help="initialize a fresh MLP with this embedding dim")
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("anchors", help="depth-gradient anchor extraction")
    p.add_argument("--scene", required=True)
    _add_camera_flags(p)
    _add_render_flags(p)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--radius-px", type=float, default=DEFAULT_SUPPRESSION_RADIUS)
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    _add_common(p)
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    _add_common(p, out_required=False)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--draws", type=int, default=100)
    _add_common(p, out_required=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="frame-rate measurement")
    p.add_argument("--scene", default=None)
    p.add_argument("--gaussians", type=int, default=5000)
    p.add_argument("--res", type=int, default=512)
    p.add_argument("--frames", type=int, default=10)
    _add_common(p, out_required=False)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("info", help="build and configuration report")
    _add_common(p, out_required=False)
    p.set_defaults(func=cmd_info)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckFailure as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
