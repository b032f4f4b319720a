"""Command-line entry point: ``triplane-recon <command> ...``.

Exit codes: 0 success, 1 internal error, 2 bad input, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("triplane_recon")

THREADS_ENV = "TRIPLANE_RECON_THREADS"

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_DIVERGED = 3


class InputError(Exception):
    """User-facing input problem (exit code 2)."""


FORMATS_HELP = """file formats:
  meshes        .obj (v/vn/f) or binary little-endian .ply (optional normals, uchar colors)
  SDF grids     .dsdf: b"DSDF", u32 version=1, u32 N, 6 x f64 bbox, N^3 f32 values, x fastest
  checkpoints   .tpln: b"TPLN" triplane + decoder parameters (f64)
  cameras       JSON {camera_to_world: 16 floats row-major, fov_y_deg, width, height, near, far}
  environments  lat-long .hdr/.exr (linear RGB, width = 2 x height) or .npy
  images        8/16-bit PNG; normal maps store (n + 1) / 2; .f32 rasters: b"F32R", u32 H, W, C, f32 HWC
  configs       TOML with [geometry] and [texture] tables
"""


# -- helpers -----------------------------------------------------------------------


def _set_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise InputError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise InputError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _load_mesh(path: str):
    from .meshio import read_mesh

    return read_mesh(_require(path, "mesh"))


def _read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".f32":
        from .raster import read_raw

        return np.asarray(read_raw(path), dtype=np.float64)
    from .raster import read_png16

    try:
        return read_png16(path)
    except OSError as exc:
        raise InputError(str(exc)) from exc


def _write_json(record: dict, path: str | None) -> None:
    if path:
        Path(path).write_text(json.dumps(record, indent=2) + "\n")


def _parse_env(text: str):
    from .shading import EnvironmentMap, read_environment

    if text.startswith("constant:"):
        return EnvironmentMap.constant(float(text.split(":", 1)[1]))
    return read_environment(_require(text, "environment map"))


# -- commands ----------------------------------------------------------------------------


def cmd_extract(args) -> int:
    from .field import Shape, analytic_grid, read_grid
    from .isosurface import extract_mesh
    from .meshio import write_mesh

    if (args.sdf is None) == (args.shape is None):
        raise InputError("give exactly one of --sdf or --shape")
    if args.sdf:
        grid = read_grid(_require(args.sdf, "SDF grid"))
    else:
        grid = analytic_grid(Shape.parse(args.shape), args.res)
    mesh = extract_mesh(grid, args.iso)
    if mesh.is_empty:
        log.warning("no surface crossing at iso %g; writing an empty mesh", args.iso)
    write_mesh(mesh, args.output)
    print(f"vertices {len(mesh.vertices)} faces {len(mesh.faces)}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .raster import rasterize_gbuffer, read_camera, write_gbuffer
    from .shading import Material, render_diffuse, render_specular, write_light_map

    mesh = _load_mesh(args.mesh)
    cam = read_camera(_require(args.camera, "camera"))
    gb = rasterize_gbuffer(mesh, cam)
    out = Path(args.output)
    written = write_gbuffer(gb, out)
    if args.env:
        env = _parse_env(args.env)
        mat = Material(args.metallic, args.roughness)
        spec = render_specular(gb, env, mat, cam, args.seed, args.samples)
        diff = render_diffuse(gb, env, mat, args.seed, args.samples)
        written += list(write_light_map(spec, out / "spec"))
        written += list(write_light_map(diff, out / "diff"))
    for p in written:
        print(p)
    return EXIT_OK


def _geometry_config(args):
    from .fit import GeometryFitConfig, load_config

    data = load_config(_require(args.config, "config"), "geometry") if args.config else {}
    if args.iters is not None:
        data["iterations"] = args.iters
    if args.seed is not None:
        data["seed"] = args.seed
    return GeometryFitConfig.from_dict(data)


def cmd_fit_geometry(args) -> int:
    from .field import Shape, read_grid, write_checkpoint
    from .fit import GeometryTarget, fit_geometry
    from .meshio import write_mesh
    from .metrics import chamfer_distance, sample_surface_points

    cfg = _geometry_config(args)
    if args.shape:
        target = GeometryTarget.from_shape(Shape.parse(args.shape), cfg.grid_resolution)
    else:
        if not (args.mesh and args.sdf):
            raise InputError("give --shape, or both --mesh and --sdf")
        target = GeometryTarget(read_grid(_require(args.sdf, "SDF grid")), _load_mesh(args.mesh))
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    res = fit_geometry(target, cfg, log_every=args.log_every)
    write_checkpoint(res.field, out / "field.tpln")
    write_mesh(res.mesh, out / "mesh.obj")
    res.write_trace(out / "trace.jsonl")
    record = {"iterations": cfg.iterations, "seed": cfg.seed}
    if res.trace:
        record["final_loss"] = res.trace[-1].total
    if not res.mesh.is_empty and not target.mesh.is_empty:
        record["cd"] = chamfer_distance(
            sample_surface_points(res.mesh, 32_000, cfg.seed), sample_surface_points(target.mesh, 32_000, cfg.seed + 1)
        )
    _write_json(record, out / "summary.json")
    print(json.dumps(record))
    return EXIT_OK


def cmd_fit_texture(args) -> int:
    from .field import write_checkpoint
    from .fit import TextureFitConfig, fit_texture, load_config
    from .meshio import write_ply
    from .raster import read_camera
    from .texture import export_vertex_colors

    data = load_config(_require(args.config, "config"), "texture") if args.config else {}
    if args.iters is not None:
        data["iterations"] = args.iters
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = TextureFitConfig.from_dict(data)
    mesh = _load_mesh(args.mesh)
    views = []
    for cam_path, img_path in args.view or []:
        img = _read_image(_require(img_path, "target image"))
        if img.ndim != 3 or img.shape[2] < 3:
            raise InputError(f"{img_path}: expected an RGB image")
        views.append((read_camera(_require(cam_path, "camera")), img[:, :, :3]))
    if not views:
        raise InputError("give at least one --view CAMERA IMAGE pair")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    res = fit_texture(mesh, views, cfg)
    write_checkpoint(res.texture.field, out / "texture.tpln")
    write_ply(export_vertex_colors(mesh, res.texture), out / "textured.ply")
    res.write_trace(out / "trace.jsonl")
    record = {"iterations": cfg.iterations, "final_loss": res.trace[-1]["rgb"] if res.trace else None}
    print(json.dumps(record))
    return EXIT_OK


def cmd_eval_mesh(args) -> int:
    from .metrics import evaluate_meshes, format_table

    pred, gt = _load_mesh(args.pred), _load_mesh(args.gt)
    rec = evaluate_meshes(pred, gt, count=args.count, rng_seed=args.seed, tau=args.tau, icp=args.icp)
    print(format_table(["CD", f"F1@{args.tau:g}"], [[rec["cd"], rec["f1"]]]))
    _write_json(rec, args.json)
    return EXIT_OK


def _pair_files(pred_dir: str, gt_dir: str, extra: str | None = None) -> list[tuple[Path, ...]]:
    dirs = [Path(_require(pred_dir, "prediction directory")), Path(_require(gt_dir, "ground-truth directory"))]
    if extra is not None:
        dirs.append(Path(_require(extra, "mask directory")))
    names = [{p.name for p in d.iterdir() if p.is_file()} for d in dirs]
    common = set.intersection(*names)
    unpaired = sorted(str(d / n) for d, ns in zip(dirs, names) for n in ns - common)
    if unpaired:
        raise InputError("unpaired files:\n  " + "\n  ".join(unpaired))
    if not common:
        raise InputError("no image pairs found")
    return [tuple(d / n for d in dirs) for n in sorted(common)]


def cmd_eval_images(args) -> int:
    from .metrics import format_table, psnr, ssim

    pairs = _pair_files(args.pred, args.gt)
    ps, ss = [], []
    for p, g in pairs:
        a, b = _read_image(p), _read_image(g)
        if a.shape != b.shape:
            raise InputError(f"{p.name}: shape {a.shape} vs {b.shape}")
        ps.append(psnr(a, b))
        ss.append(ssim(a, b))
    rec = {"psnr_mean": float(np.mean(ps)), "ssim_mean": float(np.mean(ss)), "lpips": None, "views": len(pairs)}
    print(format_table(["PSNR", "SSIM", "LPIPS", "views"], [[rec["psnr_mean"], rec["ssim_mean"], "n/a", str(len(pairs))]]))
    _write_json(rec, args.json)
    return EXIT_OK


def cmd_normal_bench(args) -> int:
    from .metrics import format_table, normal_benchmark
    from .raster import decode_normals

    triples = _pair_files(args.pred, args.gt, args.mask)
    preds, gts, masks = [], [], []
    for p, g, m in triples:
        mask = _read_image(m)
        if mask.ndim == 3:
            mask = mask[..., 0]
        pn, gn = _read_image(p), _read_image(g)
        if p.suffix.lower() != ".f32":
            pn = decode_normals(pn)
        if g.suffix.lower() != ".f32":
            gn = decode_normals(gn)
        if pn.shape != gn.shape or pn.shape[:2] != mask.shape:
            raise InputError(f"{p.name}: mismatched shapes {pn.shape}, {gn.shape}, {mask.shape}")
        preds.append(pn)
        gts.append(gn)
        masks.append(mask)
    stats = normal_benchmark(preds, gts, masks)
    rows = [[stats.mean, stats.median, stats.pct_11_25, stats.pct_22_5, stats.pct_30]]
    print(format_table(["mean", "median", "11.25", "22.5", "30"], rows))
    _write_json(stats.as_dict(), args.json)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="triplane-recon",
        description="Triplane SDF/texture fields: extraction, rendering, fitting and evaluation.",
        epilog=FORMATS_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--threads", type=int, default=None, help=f"cap worker threads (default: ${THREADS_ENV} or all)")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=FORMATS_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=fn)
        return p

    p = add("extract", cmd_extract, "Extract a mesh from an SDF grid or analytic shape.")
    p.add_argument("--sdf", help="input .dsdf grid")
    p.add_argument("--shape", help="analytic shape, e.g. sphere:0.5, box:0.4, torus:0.5,0.2")
    p.add_argument("--res", type=int, default=64, help="lattice resolution for --shape (default 64)")
    p.add_argument("--iso", type=float, default=0.0, help="iso level (default 0)")
    p.add_argument("-o", "--output", required=True, help="output .obj or .ply")

    p = add("render", cmd_render, "Render G-buffers and, with --env, specular/diffuse light maps.")
    p.add_argument("--mesh", required=True, help="input mesh")
    p.add_argument("--camera", required=True, help="camera JSON")
    p.add_argument("--env", help="environment map file, or constant:L")
    p.add_argument("--metallic", type=float, default=0.0)
    p.add_argument("--roughness", type=float, default=0.5)
    p.add_argument("--samples", type=int, default=64, help="Monte Carlo samples per pixel (default 64)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True, help="output directory")

    p = add("fit-geometry", cmd_fit_geometry, "Fit a geometry triplane to a target shape.")
    p.add_argument("--config", help="TOML config ([geometry] table)")
    p.add_argument("--shape", help="analytic target, e.g. sphere:0.6")
    p.add_argument("--mesh", help="target mesh (with --sdf)")
    p.add_argument("--sdf", help="target .dsdf grid (with --mesh)")
    p.add_argument("--iters", type=int, help="override iteration count")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--log-every", type=int, default=0, help="log the loss every N iterations")
    p.add_argument("-o", "--output", required=True, help="output directory")

    p = add("fit-texture", cmd_fit_texture, "Fit a texture triplane to RGB views of a fixed mesh.")
    p.add_argument("--config", help="TOML config ([texture] table)")
    p.add_argument("--mesh", required=True, help="frozen mesh")
    p.add_argument("--view", nargs=2, action="append", metavar=("CAMERA", "IMAGE"), help="target view (repeatable)")
    p.add_argument("--iters", type=int, help="override iteration count")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("-o", "--output", required=True, help="output directory")

    p = add("eval-mesh", cmd_eval_mesh, "Chamfer distance and F1 between two meshes after alignment.")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--count", type=int, default=32_000, help="surface samples per mesh (default 32000)")
    p.add_argument("--tau", type=float, default=0.1, help="F1 threshold (default 0.1)")
    p.add_argument("--icp", action="store_true", help="refine alignment with rigid ICP")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="write the record to this file")

    p = add("eval-images", cmd_eval_images, "Mean PSNR/SSIM over same-named images in two directories.")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--json", help="write the record to this file")

    p = add("normal-bench", cmd_normal_bench, "Angular error statistics of normal maps over foreground pixels.")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--json", help="write the record to this file")
    return parser


def main(argv: list[str] | None = None) -> int:
    from .fit import ConfigError, FitDivergence
    from .shading import EnvironmentError_

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), stream=sys.stderr, format="%(levelname)s: %(message)s")
    # library validation errors all derive from ValueError
    input_errors = (InputError, ConfigError, EnvironmentError_, ValueError, OSError)
    try:
        _set_threads(args.threads)
        return args.func(args)
    except FitDivergence as exc:
        print(f"error: {exc} (after {len(exc.trace)} iterations)", file=sys.stderr)
        return EXIT_DIVERGED
    except input_errors as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
