"""Command-line interface: fit, render, eval, gradcheck, selftest."""

import argparse
import os
import sys

import numpy as np

from . import io as ffio
from .camera import PERSPECTIVE, WEAK_PERSPECTIVE, CameraModel
from .errors import FaceFitError
from .evaluation import Mesh, evaluate_reconstruction
from .fitting import FitConfig, fit_coefficients
from .gradcheck_suite import run_gradcheck
from .morphable import synthesize_shape
from .render import render_face
from .selftest import run_selftest


def _camera_for(image_size, mode, focal):
    h, w = image_size
    if focal is None:
        cam = CameraModel.default_perspective((h, w))
        focal = cam.focal_length
    return CameraModel(mode, focal, (w / 2.0, h / 2.0), (h, w))


def _cmd_fit(args):
    image = ffio.read_image(args.image)
    landmarks = ffio.read_landmarks(args.landmarks)
    mask = ffio.read_mask(args.mask)
    basis = ffio.read_basis(args.basis)
    if mask.values.shape != image.shape[:2]:
        raise FaceFitError(f"mask dims {mask.values.shape} do not match image {image.shape[:2]}")
    h, w = image.shape[:2]
    if np.any(landmarks < 0) or np.any(landmarks[:, 0] > w) or np.any(landmarks[:, 1] > h):
        raise FaceFitError("landmarks fall outside the image bounds")
    config = ffio.read_config(args.config) if args.config else FitConfig()
    camera = _camera_for((h, w), args.camera_mode, args.focal)

    coeffs, trace = fit_coefficients(image, landmarks, mask, basis, camera, config)

    os.makedirs(args.out, exist_ok=True)
    ffio.write_coefficients(coeffs, os.path.join(args.out, "coefficients.json"))
    mesh = Mesh(synthesize_shape(basis, coeffs.alpha, coeffs.beta), basis.triangles)
    ffio.write_obj(mesh, os.path.join(args.out, "mesh.obj"))
    fb, _ = render_face(coeffs, basis, camera)
    ffio.write_image(fb.color, os.path.join(args.out, "render.ppm"))
    trace.write_csv(os.path.join(args.out, "trace.csv"))

    from .report import save_render_comparison, save_trace_figure
    save_trace_figure(trace, os.path.join(args.out, "trace.png"))
    save_render_comparison(image, fb.color, os.path.join(args.out, "compare.png"))
    final = trace.records[-1].total if trace.records else float("nan")
    print(f"fit complete: {len(trace.records)} iterations, final loss {final:.6g}")
    print(f"outputs in {args.out}: coefficients.json mesh.obj render.ppm trace.csv trace.png compare.png")
    return 0


def _cmd_render(args):
    coeffs = ffio.read_coefficients(args.coeffs)
    basis = ffio.read_basis(args.basis)
    h = w = args.size
    camera = _camera_for((h, w), args.camera_mode, args.focal)
    fb, _ = render_face(coeffs, basis, camera)
    ffio.write_image(fb.color, args.out)
    if args.depth:
        depth = fb.depth.copy()
        if fb.mask.any():
            dmin, dmax = depth[fb.mask].min(), depth[fb.mask].max()
            span = (dmax - dmin) if dmax > dmin else 1.0
            depth = np.where(fb.mask, (depth - dmin) / span, 0.0)
        ffio.write_pgm16(depth, args.depth)
    if args.mask_out:
        ffio.write_pgm16(fb.mask.astype(np.float64), args.mask_out)
    print(f"rendered {args.out} ({fb.mask.sum()} covered pixels)")
    return 0


def _cmd_eval(args):
    pred = ffio.read_obj(args.pred)
    gt = ffio.read_obj(args.gt)
    rmse, transform, residuals, distances = evaluate_reconstruction(
        pred, gt, crop_radius_mm=args.crop_radius, metric=args.metric,
        nose_index=args.nose_index, return_distances=True)
    print(f"rmse_mm={rmse:.9g}")
    if args.distances_csv:
        with open(args.distances_csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("vertex,distance_mm\n")
            for idx, value in enumerate(distances):
                fh.write(f"{idx},{value:.9g}\n")
    if args.verbose:
        print(f"icp_iterations={len(residuals)} final_residual={residuals[-1]:.6g} "
              f"scale={transform.scale:.6g}", file=sys.stderr)
    return 0


def _cmd_gradcheck(args):
    return run_gradcheck(args.module)


def _cmd_selftest(_args):
    failures = run_selftest()
    return 1 if failures else 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="facefit",
        description="Differentiable morphable-face engine: fitting, rendering, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit coefficients to a single image")
    p.add_argument("--image", required=True, help="target image (PPM or PNG)")
    p.add_argument("--landmarks", required=True, help="68 lines of 'x y' pixel coordinates")
    p.add_argument("--mask", required=True, help="skin mask (PGM or PNG grayscale)")
    p.add_argument("--basis", required=True, help="binary basis file (MFB1)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="FitConfig JSON")
    p.add_argument("--camera-mode", choices=[PERSPECTIVE, WEAK_PERSPECTIVE], default=PERSPECTIVE)
    p.add_argument("--focal", type=float, help="focal length in pixels (default scales 1015 @ 224)")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("render", help="render a coefficient file")
    p.add_argument("--coeffs", required=True, help="coefficients JSON")
    p.add_argument("--basis", required=True, help="binary basis file (MFB1)")
    p.add_argument("--out", required=True, help="output image path (.ppm or .png)")
    p.add_argument("--size", type=int, default=224, help="square image size (default 224)")
    p.add_argument("--camera-mode", choices=[PERSPECTIVE, WEAK_PERSPECTIVE], default=PERSPECTIVE)
    p.add_argument("--focal", type=float)
    p.add_argument("--depth", help="optional 16-bit PGM depth dump")
    p.add_argument("--mask-out", help="optional 16-bit PGM coverage dump")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="score a reconstruction against ground truth")
    p.add_argument("--pred", required=True, help="predicted mesh (OBJ)")
    p.add_argument("--gt", required=True, help="ground-truth mesh (OBJ)")
    p.add_argument("--crop-radius", type=float, default=95.0, help="nose-tip crop radius in mm")
    p.add_argument("--metric", choices=["p2plane", "p2point"], default="p2plane")
    p.add_argument("--nose-index", type=int, help="ground-truth nose vertex (default: min-z vertex)")
    p.add_argument("--distances-csv", help="optional per-vertex distance CSV")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", choices=["all", "tensor", "losses", "network"], default="all")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("selftest", help="run the built-in assertion suite")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FaceFitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
