"""
Command line entry point.

Exit status: 0 on success, 1 for data errors (one ``error: <code>: ...``
line on stderr), 2 for usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import BeadStack, FitOptions, detect_beads, fit_psf
from .config import ConfigError, PipelineConfig, load_config, section_from_dict
from .io import (
    FormatError,
    read_psf,
    read_smlf,
    read_table,
    write_psf,
    write_smlf,
    write_table,
    write_truth,
)
from .localizer import localize_stack
from .metrics import evaluate, frc_curve, frc_resolution, split_even_odd_blocks
from .noise import camera_from_dict
from .postprocess import filter_by_sigma, group_localizations
from .render import RenderSpec, max_project, render_2d, render_3d
from .simulator import FrameStack, simulate_stack


class DataError(Exception):
    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


def _config(args):
    return load_config(args.config) if args.config else PipelineConfig()


def _json_out(doc, path):
    text = json.dumps(doc, indent=2, allow_nan=False) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def write_pgm16(image, path):
    """Binary 16-bit PGM of an image scaled to [0, 1]."""
    img = np.clip(np.nan_to_num(np.asarray(image, dtype=float)), 0.0, 1.0)
    data = np.rint(img * 65535).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


# ---------------------------------------------------------------- commands


def cmd_simulate(args):
    cfg = _config(args)
    stack, truth = simulate_stack(cfg.prior, cfg.psf_model(), cfg.camera_model(), seed=args.seed, threads=args.threads)
    write_smlf(stack, args.out)
    if args.truth:
        write_truth(truth, args.truth)


def cmd_calibrate(args):
    cfg = _config(args)
    camera = camera_from_dict(json.loads(Path(args.camera).read_text())) if args.camera else cfg.camera_model()
    init = read_psf(args.init) if args.init else cfg.psf_model()
    stack = read_smlf(args.stack)
    beads = BeadStack(stack, z0=args.z0, dz=args.dz, camera=camera)
    opts = FitOptions(window=args.window, fit_pixmap=args.fit_pixmap, max_iter=args.max_iter)
    xy = detect_beads(beads, threshold=opts.detect_threshold)
    if len(xy) == 0:
        raise DataError("no_beads", f"no beads found in {args.stack}")
    result = fit_psf(beads, init, opts, bead_xys=xy)
    write_psf(result.psf, args.out)
    if args.report:
        _json_out({
            "converged": bool(result.converged),
            "n_iter": int(result.n_iter),
            "nll": float(result.nll),
            "trace": [float(v) for v in result.trace],
            "bead_xy": np.asarray(result.bead_xy).tolist(),
            "residuals": [float(r) for r in np.ravel(result.residuals)],
            "params": {k: float(v) for k, v in dataclasses.asdict(result.psf.parametric).items()},
        }, args.report)


def cmd_localize(args):
    cfg = _config(args)
    psf = read_psf(args.psf) if args.psf else cfg.psf_model()
    camera = camera_from_dict(json.loads(Path(args.camera).read_text())) if args.camera else cfg.camera_model()
    stack = read_smlf(args.stack)
    table = localize_stack(stack, psf, camera, cfg.localizer, threads=args.threads)
    pp = cfg.postprocess
    if pp.sigma_drop_fraction > 0:
        table = filter_by_sigma(table, pp.sigma_drop_fraction)
    if pp.group_radius is not None:
        table = group_localizations(table, pp.group_radius)
    write_table(table, args.out)


def cmd_evaluate(args):
    cfg = _config(args)
    m = cfg.metrics
    radius = args.radius if args.radius is not None else m.match_radius
    report = evaluate(read_table(args.pred), read_table(args.truth), radius, args.use_3d or m.use_3d,
                      m.alpha_lateral, m.alpha_axial)
    _json_out({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in report.items()}, args.out)


def _render_spec(args, cfg):
    if args.spec:
        doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        return section_from_dict(RenderSpec, doc, "render")
    return cfg.render


def cmd_render(args):
    cfg = _config(args)
    spec = _render_spec(args, cfg)
    table = read_table(args.table)
    if args.three_d:
        if spec.sigma is not None and not args.fixed_sigma:
            spec = dataclasses.replace(spec, sigma=None)
        volume, _ = render_3d(table, spec)
        image = max_project(volume, spec)
        if args.volume:
            write_smlf(FrameStack(volume.astype(np.float32), pixel_size=spec.voxel_size[0]), args.volume)
    else:
        raw, _ = render_2d(table, spec)
        image = max_project(raw[None], dataclasses.replace(spec, clip=np.inf))
    write_pgm16(image, args.out)


def cmd_frc(args):
    cfg = _config(args)
    m = cfg.metrics
    table = read_table(args.table)
    if len(table) < 2:
        raise DataError("too_few_rows", "FRC needs at least two localizations")
    block = args.block_size or m.frc_block_size
    a, b = split_even_odd_blocks(table, block)
    if len(a) == 0 or len(b) == 0:
        raise DataError("too_few_rows", f"block size {block} leaves one half empty ({len(table)} rows)")
    sigma = args.sigma or m.frc_sigma
    pad = 4 * sigma
    bounds = (float(table["x"].min() - pad), float(table["x"].max() + pad),
              float(table["y"].min() - pad), float(table["y"].max() + pad))
    spec = RenderSpec(pixel_size=args.pixel_size or m.frc_pixel_size, sigma=sigma, bounds=bounds)
    img_a, _ = render_2d(a, spec)
    img_b, _ = render_2d(b, spec)
    curve = frc_curve(img_a, img_b, spec.pixel_size)
    res = frc_resolution(curve, m.frc_threshold)
    with open(args.curve, "w", encoding="utf-8") as fh:
        fh.write("frequency_per_nm,correlation,n_samples\n")
        for f, c, n in zip(curve.frequencies, curve.correlation, curve.n_samples):
            fh.write(f"{float(f)!r},{float(c)!r},{int(n)}\n")
    resolution = res.resolution if math.isfinite(res.resolution) else None
    _json_out({"resolution_nm": resolution, "frequency_per_nm": res.frequency,
               "crossed": res.crossed, "threshold": m.frc_threshold}, args.out)


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="smlmforge", description="Single-molecule localization microscopy toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline configuration JSON")
    common.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: $SMLMFORGE_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("simulate", parents=[common], help="simulate a frame stack and its ground truth")
    s.add_argument("--out", required=True, help="output SMLF stack")
    s.add_argument("--truth", help="output ground-truth CSV")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("calibrate", parents=[common], help="fit a PSF model to a bead z-stack")
    s.add_argument("--stack", required=True, help="bead stack (SMLF)")
    s.add_argument("--z0", type=float, required=True, help="stage z of the first slice, nm")
    s.add_argument("--dz", type=float, required=True, help="stage step between slices, nm")
    s.add_argument("--init", help="initial PSF JSON (default: the configured PSF)")
    s.add_argument("--camera", help="camera JSON (default: the configured camera)")
    s.add_argument("--window", type=int, default=13, help="fit window side in pixels")
    s.add_argument("--max-iter", type=int, default=5000)
    s.add_argument("--fit-pixmap", action="store_true", help="also fit the pixel-map correction")
    s.add_argument("--out", required=True, help="fitted PSF JSON")
    s.add_argument("--report", help="fit report JSON")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("localize", parents=[common], help="detect and fit emitters in a stack")
    s.add_argument("--stack", required=True)
    s.add_argument("--psf", help="PSF JSON (default: the configured PSF)")
    s.add_argument("--camera", help="camera JSON (default: the configured camera)")
    s.add_argument("--out", required=True, help="localization CSV")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("evaluate", parents=[common], help="score localizations against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--radius", type=float, default=None, help="matching radius, nm (default 250)")
    s.add_argument("--3d", dest="use_3d", action="store_true", help="match within a sphere instead of a circle")
    s.add_argument("--out", help="report JSON (default: stdout)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", parents=[common], help="render a super-resolution image")
    s.add_argument("--table", required=True)
    s.add_argument("--spec", help="render spec JSON (keys as in the config's render section)")
    s.add_argument("--3d", dest="three_d", action="store_true", help="render a volume and max-project it")
    s.add_argument("--fixed-sigma", action="store_true", help="in 3D, use the render sigma instead of per-row sigmas")
    s.add_argument("--volume", help="also write the raw volume as SMLF planes (3D only)")
    s.add_argument("--out", required=True, help="16-bit PGM image")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("frc", parents=[common], help="Fourier ring correlation of a localization table")
    s.add_argument("--table", required=True)
    s.add_argument("--block-size", type=int, default=None, help="rows per alternating block (default 50000)")
    s.add_argument("--pixel-size", type=float, default=None, help="render pixel, nm (default 10)")
    s.add_argument("--sigma", type=float, default=None, help="render sigma, nm (default 8.5)")
    s.add_argument("--curve", required=True, help="output curve CSV")
    s.add_argument("--out", help="resolution JSON (default: stdout)")
    s.set_defaults(func=cmd_frc)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        args.func(args)
    except (FormatError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: bad_json: {exc.msg} at line {exc.lineno}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc.strerror or exc}: {exc.filename}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: invalid: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
