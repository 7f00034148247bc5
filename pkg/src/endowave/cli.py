"""Command-line entry point: synth, fit, render, eval, wavelet-decompose, flow-check.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import asdict, replace

import numpy as np
import torch

from .camera import Camera
from .datasets import (
    DatasetError, SyntheticSpec, load_dataset, make_synthetic, read_png_rgb, save_dataset,
    write_mask_png, write_pfm, write_png16, write_png_rgb,
)
from .flowsup import FloError, FlowField, consistency_mask, epe, read_flo, write_flo
from .metrics import UndefinedMetricError, psnr, ssim
from .optim import TrainConfig, configure_threads, evaluate, fit
from .rasterizer import render
from .rwavelet import BANDS, ContractViolation, decompose, design_filters
from .scene_io import SceneFormatError, load_scene

log = logging.getLogger("endowave")

DATA_ERRORS = (DatasetError, FloError, SceneFormatError, ContractViolation, UndefinedMetricError,
               FileNotFoundError, IsADirectoryError, json.JSONDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _echo(name, resolved):
    print(f"[{name}] resolved config: {json.dumps(resolved, sort_keys=True, default=str)}",
          file=sys.stderr)


# --- config resolution ------------------------------------------------------

def resolve_train_config(args):
    """Config file first, then flag overrides."""
    cfg = TrainConfig()
    if args.config:
        with open(args.config) as fh:
            try:
                cfg = TrainConfig.from_dict(json.load(fh))
            except (KeyError, TypeError) as exc:
                raise UsageError(f"bad config {args.config}: {exc}") from exc
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.iters is not None:
        cfg = replace(cfg, iterations=args.iters)
    loss = cfg.loss
    if args.q is not None:
        loss = replace(loss, wavelet_q=args.q)
    if args.levels is not None:
        loss = replace(loss, wavelet_levels=args.levels)
    overrides = {k: getattr(args, k) for k in
                 ("lambda_rgb", "lambda_depth", "lambda_flow", "lambda_wavelet")
                 if getattr(args, k) is not None}
    try:
        loss = replace(loss, weights=replace(loss.weights, **overrides))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return replace(cfg, loss=loss)


# --- subcommands ------------------------------------------------------------

def cmd_synth(args):
    spec = SyntheticSpec(width=args.width, height=args.height, n_frames=args.frames,
                         n_blobs=args.blobs, amplitude=args.amplitude)
    _echo("synth", {"seed": args.seed, "out": args.out, **asdict(spec)})
    ds, _ = make_synthetic(args.seed, spec)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} frames to {args.out}")
    return 0


def cmd_fit(args):
    cfg = resolve_train_config(args)
    _echo("fit", {"data": args.data, "out": args.out, **cfg.to_dict()})
    ds = load_dataset(args.data)
    res = fit(ds, cfg, out_dir=args.out)
    f = res.final
    print(f"final: psnr={f['psnr_holdout']:.3f} ssim={f['ssim_holdout']:.4f} "
          f"epe={f['epe_holdout']:.4f} primitives={res.scene.count}")
    return 0


def cmd_render(args):
    _echo("render", vars_of(args))
    scene = load_scene(args.scene)
    with open(args.camera) as fh:
        try:
            cam = Camera.from_dict(json.load(fh))
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"unreadable camera {args.camera}: {exc}") from exc
    flow_pair = None if args.flow_to is None else (args.t, args.flow_to, cam, cam)
    with torch.no_grad():
        out = render(scene, cam, args.t, flow_pair, normalize=args.normalize_composites)
    prefix = args.out
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    write_png_rgb(prefix + ".png", out.rgb.clamp(0, 1).numpy())
    write_pfm(prefix + "_depth.pfm", out.depth.numpy())
    written = [prefix + ".png", prefix + "_depth.pfm"]
    if flow_pair is not None:
        fl = out.flow.numpy()
        write_flo(FlowField(fl[..., 0], fl[..., 1], np.ones(fl.shape[:2], bool)), prefix + ".flo")
        written.append(prefix + ".flo")
    print("wrote " + " ".join(written))
    return 0


def _image_pairs(pred, gt):
    if os.path.isdir(pred) != os.path.isdir(gt):
        raise DatasetError("--pred and --gt must both be files or both be directories")
    if not os.path.isdir(pred):
        return [(os.path.basename(pred), pred, gt)]
    names = sorted(n for n in os.listdir(gt) if n.lower().endswith(".png"))
    if not names:
        raise DatasetError(f"no PNG images in {gt}")
    for n in names:
        if not os.path.exists(os.path.join(pred, n)):
            raise DatasetError(f"missing file: {os.path.join(pred, n)}")
    return [(n, os.path.join(pred, n), os.path.join(gt, n)) for n in names]


def _fmt(x):
    if isinstance(x, float):
        if math.isinf(x):
            return "inf"
        return "nan" if math.isnan(x) else f"{x:.6f}"
    return str(x)


def cmd_eval(args):
    _echo("eval", vars_of(args))
    rows = []
    if args.scene:
        if not args.data:
            raise UsageError("eval --scene needs --data")
        ds = load_dataset(args.data)
        scene = load_scene(args.scene)
        for k in ds.test:
            m = evaluate(scene, ds, [k])
            rows.append({"name": f"frame_{k:04d}", "psnr": m["psnr"], "ssim": m["ssim"], "epe": m["epe"]})
    else:
        if not (args.pred and args.gt):
            raise UsageError("eval needs --pred and --gt, or --scene and --data")
        for name, p, g in _image_pairs(args.pred, args.gt):
            a, b = read_png_rgb(p), read_png_rgb(g)
            if a.shape != b.shape:
                raise DatasetError(f"dimension mismatch: {p} {a.shape} vs {g} {b.shape}")
            row = {"name": name, "psnr": psnr(a, b), "ssim": ssim(a, b), "epe": float("nan")}
            rows.append(row)
        if args.pred_flow and args.gt_flow:
            fa, fb = read_flo(args.pred_flow), read_flo(args.gt_flow)
            rows.append({"name": os.path.basename(args.pred_flow), "psnr": float("nan"),
                         "ssim": float("nan"), "epe": epe(fa, fb, fa.valid & fb.valid)})
    cols = ("name", "psnr", "ssim", "epe")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in cols])
    text = buf.getvalue()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")
    print()
    print(f"{'name':<24} {'PSNR':>10} {'SSIM':>8} {'EPE':>8}")
    for r in rows:
        print(f"{r['name']:<24} {_fmt(r['psnr']):>10} {_fmt(r['ssim']):>8} {_fmt(r['epe']):>8}")
    return 0


def cmd_wavelet(args):
    q = 2 if args.q is None else args.q
    levels = 2 if args.levels is None else args.levels
    _echo("wavelet-decompose", {**vars_of(args), "q": q, "levels": levels})
    img = read_png_rgb(args.image)
    bank = design_filters(q)
    pyr = decompose(torch.as_tensor(img).permute(2, 0, 1), bank, levels)
    os.makedirs(args.out, exist_ok=True)
    ranges = {"q": q, "a": bank.a, "levels": levels, "panels": {}}
    for j, lvl in enumerate(pyr.levels, start=1):
        for band in BANDS:
            data = lvl[band].numpy()
            for c in range(data.shape[0]):
                name = f"level{j}_{band}_c{c}.png"
                lo, hi = float(data[c].min()), float(data[c].max())
                span = hi - lo if hi > lo else 1.0
                write_png16(os.path.join(args.out, name), (data[c] - lo) / span * 65535.0)
                ranges["panels"][name] = {"min": lo, "max": hi, "shape": list(data[c].shape)}
    with open(os.path.join(args.out, "ranges.json"), "w") as fh:
        json.dump(ranges, fh, indent=1, sort_keys=True)
    print(f"wrote {len(ranges['panels'])} panels to {args.out}")
    return 0


def cmd_flow_check(args):
    _echo("flow-check", vars_of(args))
    fwd, bwd = read_flo(args.fwd), read_flo(args.bwd)
    if fwd.shape != bwd.shape:
        raise DatasetError(f"flow dimensions differ: {fwd.shape} vs {bwd.shape}")
    mask = consistency_mask(fwd, bwd, args.alpha, args.beta)
    frac = float(mask.mean())
    if args.out:
        write_mask_png(args.out, mask)
    print(f"valid fraction: {frac:.6f} ({int(mask.sum())}/{mask.size})")
    return 0


def vars_of(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


# --- parser -----------------------------------------------------------------

def build_parser():
    ap = _Parser(prog="endowave", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--blobs", type=int, default=6)
    p.add_argument("--amplitude", type=float, default=8.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="train a scene on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--q", type=int)
    p.add_argument("--levels", type=int)
    for name in ("rgb", "depth", "flow", "wavelet"):
        p.add_argument(f"--lambda-{name}", dest=f"lambda_{name}", type=float)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render color, depth and flow of a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True, help="camera JSON (fx, fy, cx, cy, width, height, R, t)")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--flow-to", dest="flow_to", type=float)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--normalize-composites", action="store_true",
                   help="divide depth and flow by alpha where alpha > 1e-3")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR / SSIM / EPE table")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--pred-flow", dest="pred_flow")
    p.add_argument("--gt-flow", dest="gt_flow")
    p.add_argument("--scene")
    p.add_argument("--data")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("wavelet-decompose", help="write rational-wavelet sub-band panels")
    p.add_argument("--in", "--image", dest="image", required=True)
    p.add_argument("--q", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_wavelet)

    p = sub.add_parser("flow-check", help="forward-backward consistency of two .flo files")
    p.add_argument("--fwd", required=True)
    p.add_argument("--bwd", required=True)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--out", help="optional mask PNG")
    p.set_defaults(func=cmd_flow_check)
    return ap


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            return 1
        configure_threads()
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
