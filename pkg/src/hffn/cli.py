"""Command-line interface.

Subcommands: ``summary`` (parameter/multiply-accumulate report), ``sr``
(super-resolve one PNG), ``eval`` (metrics over a directory of HR images),
``decompose`` (dump a block's frequency maps), ``train-toy`` (small
deterministic training run).

Every command echoes its fully resolved configuration before doing work.
Exit codes: 0 success, 1 usage or config error, 2 unreadable or unusable
data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields

from . import __version__, imaging
from .network import ModelConfig, WeightFileError, build, load_weights, save_weights
from .tensor import NonFiniteError
from .training import TrainConfig, TrainingDiverged, train_toy

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


class _DataError(Exception):
    pass


def _add_model_flags(p):
    p.add_argument("--scale", type=int, default=4, help="upscaling factor (2, 3 or 4)")
    p.add_argument("--channels", type=int, default=48, help="trunk width")
    p.add_argument("--n-groups", type=int, default=6, help="number of block groups")
    p.add_argument("--m-blocks", type=int, default=5, help="feature blocks per group")
    p.add_argument("--cca-reduction", type=int, default=4, help="channel-gate squeeze ratio")
    p.add_argument("--no-hfe", action="store_true", help="replace the high-frequency branch with a 3x3 conv")
    p.add_argument("--no-lfde", action="store_true", help="replace the low-frequency branch with a 3x3 conv")
    p.add_argument("--no-groups", action="store_true", help="run all blocks as one flat chain")
    p.add_argument("--no-dsconv", action="store_true", help="use a dense conv instead of the depth-separable pair")
    p.add_argument("--no-cca", action="store_true", help="drop the contrast gate inside the low-frequency branch")


def _config_from_args(args):
    return ModelConfig(
        scale=args.scale,
        channels=args.channels,
        n_groups=args.n_groups,
        m_blocks=args.m_blocks,
        cca_reduction=args.cca_reduction,
        hfe_enabled=not args.no_hfe,
        lfde_enabled=not args.no_lfde,
        groups_enabled=not args.no_groups,
        dsconv_enabled=not args.no_dsconv,
        cca_enabled=not args.no_cca,
    ).validate()


def _echo_config(command, pairs):
    printed = " ".join(f"{k}={v}" for k, v in pairs)
    print(f"[{command}] config: {printed}")


def _echo_model_config(command, cfg, extra=()):
    pairs = [(f.name, getattr(cfg, f.name)) for f in fields(ModelConfig)]
    _echo_config(command, pairs + list(extra))


def _build_parser():
    parser = _Parser(prog="hffn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("summary", help="parameter and multiply-accumulate report")
    _add_model_flags(p)
    p.add_argument("--out-res", default="1280x720", metavar="WxH",
                   help="output resolution for the MAC count, e.g. 1280x720")

    p = sub.add_parser("sr", help="super-resolve one PNG with saved weights")
    p.add_argument("--weights", required=True, help="weight file written by train-toy")
    p.add_argument("--input", required=True, help="low-resolution PNG")
    p.add_argument("--output", required=True, help="where to write the SR PNG")
    p.add_argument("--self-ensemble", action="store_true",
                   help="average over the 8 flip/rotation variants")

    p = sub.add_parser("eval", help="PSNR/SSIM over a directory of HR images")
    p.add_argument("--hr-dir", required=True, help="directory of ground-truth PNGs")
    p.add_argument("--scale", type=int, default=4, help="upscaling factor; 1 = identity debug mode")
    p.add_argument("--weights", help="weight file (omit only with --scale 1)")
    p.add_argument("--self-ensemble", action="store_true",
                   help="average over the 8 flip/rotation variants")
    p.add_argument("--report", help="also write the results as JSON here")
    p.add_argument("--jobs", type=int, default=1, help="images to process concurrently")

    p = sub.add_parser("decompose", help="write one block's smooth/detail maps as PNGs")
    p.add_argument("--weights", required=True, help="weight file")
    p.add_argument("--input", required=True, help="input PNG")
    p.add_argument("--block", type=int, required=True,
                   help="flat feature-block index (0-based)")
    p.add_argument("--out-prefix", required=True,
                   help="write <prefix>_low.png and <prefix>_high.png")

    p = sub.add_parser("train-toy", help="small deterministic training run")
    _add_model_flags(p)
    p.add_argument("--data-dir", required=True, help="directory of ground-truth PNGs")
    p.add_argument("--out-weights", required=True, help="where to write the trained weights")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--patch", type=int, default=48, help="LR-side crop size (even)")
    p.add_argument("--lr", type=float, default=6e-4, dest="lr_init", help="Adam learning rate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--curve", help="write the loss curve as CSV here")
    p.add_argument("--curve-plot", help="also render the curve as a PNG plot (needs matplotlib)")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_model(path):
    try:
        return load_weights(path)
    except FileNotFoundError as exc:
        raise _DataError(f"weights not found: {path}") from exc
    except WeightFileError as exc:
        raise _DataError(str(exc)) from exc


def _load_image(path):
    try:
        return imaging.load_png(path)
    except FileNotFoundError as exc:
        raise _DataError(f"image not found: {path}") from exc
    except imaging.ImageIOError as exc:
        raise _DataError(str(exc)) from exc


def _list_pngs(data_dir):
    import os

    if not os.path.isdir(data_dir):
        raise _DataError(f"not a directory: {data_dir}")
    names = sorted(n for n in os.listdir(data_dir) if n.lower().endswith(".png"))
    if not names:
        raise _DataError(f"no PNG files in {data_dir}")
    return [(n, os.path.join(data_dir, n)) for n in names]


def _parse_resolution(text):
    parts = text.lower().split("x")
    if len(parts) == 2 and all(p.isdigit() for p in parts):
        w, h = int(parts[0]), int(parts[1])
        if w >= 1 and h >= 1:
            return w, h
    raise _UsageError(f"--out-res expects WxH with positive integers, e.g. 1280x720; got {text!r}")


def _fmt_metric(v):
    return "inf" if math.isinf(v) else f"{v:.4f}"


def _json_metric(v):
    return "inf" if math.isinf(v) else v


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_summary(args):
    cfg = _config_from_args(args)
    out_w, out_h = _parse_resolution(args.out_res)
    _echo_model_config("summary", cfg, extra=[("out_res", f"{out_w}x{out_h}")])
    model = build(cfg, seed=0)
    pc = model.param_count()
    mac = model.multi_adds(out_h, out_w)
    print("parameters:")
    for key, n in pc.by_block.items():
        print(f"  {key:<12} {n:>12,}")
    print(f"  {'total':<12} {pc.total:>12,}  ({pc.total / 1000:.1f}K)")
    print(f"multiply-accumulates for one {out_w}x{out_h} output:")
    for key, n in mac.by_block.items():
        print(f"  {key:<12} {n:>16,}")
    print(f"  {'total':<12} {mac.total:>16,}  ({mac.total / 1e9:.2f}G)")
    print("convention: conv MACs = Hout*Wout*Cout*Cin*k*k at the layer's resolution;")
    print("depthwise counts k*k per channel, the learned upsampler counts every")
    print("scatter multiply, gate convs run on 1x1 summaries; pooling, additions")
    print("and activations are free.")
    return EXIT_OK


def _cmd_sr(args):
    model = _load_model(args.weights)
    _echo_model_config("sr", model.config, extra=[
        ("weights", args.weights), ("input", args.input),
        ("output", args.output), ("self_ensemble", args.self_ensemble),
    ])
    img = imaging.as_rgb(_load_image(args.input))
    x = imaging.to_tensor(img, dtype=model.dtype)
    sr = model.self_ensemble(x) if args.self_ensemble else model.forward(x)
    imaging.save_png(imaging.from_tensor(sr), args.output)
    print(f"wrote {args.output} ({sr.width}x{sr.height})")
    return EXIT_OK


def _eval_one(model, scale, self_ensemble, name, path):
    hr = _load_image(path)
    pair = imaging.make_pair(imaging.as_rgb(hr), scale, name=name)
    if scale == 1:
        sr_img = pair.lr  # identity model: the degraded input is the answer
    else:
        x = imaging.to_tensor(pair.lr, dtype=model.dtype)
        sr = model.self_ensemble(x) if self_ensemble else model.forward(x)
        sr_img = imaging.from_tensor(sr)
    return {
        "name": name,
        "psnr": imaging.psnr(sr_img, pair.hr, shave=scale),
        "ssim": imaging.ssim(sr_img, pair.hr, shave=scale),
    }


def _cmd_eval(args):
    if args.scale == 1:
        model = None
        if args.weights:
            raise _UsageError("--scale 1 is the identity debug mode; drop --weights")
    else:
        if not args.weights:
            raise _UsageError("--weights is required unless --scale 1")
        model = _load_model(args.weights)
        if model.config.scale != args.scale:
            raise _DataError(
                f"weights are for scale {model.config.scale}, requested {args.scale}"
            )
    if args.jobs < 1:
        raise _UsageError(f"--jobs must be >= 1; got {args.jobs}")
    _echo_config("eval", [
        ("hr_dir", args.hr_dir), ("scale", args.scale),
        ("weights", args.weights or "<identity>"),
        ("self_ensemble", args.self_ensemble), ("jobs", args.jobs),
    ])
    entries = _list_pngs(args.hr_dir)

    def run(entry):
        name, path = entry
        try:
            return _eval_one(model, args.scale, args.self_ensemble, name, path)
        except ValueError as exc:
            raise _DataError(f"{name}: {exc}") from exc

    if args.jobs == 1:
        results = [run(e) for e in entries]
    else:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run, entries))
    results.sort(key=lambda r: r["name"])

    for r in results:
        print(f"{r['name']:<32} psnr {_fmt_metric(r['psnr']):>9}  ssim {r['ssim']:.4f}")
    mean_psnr = sum(r["psnr"] for r in results) / len(results)
    mean_ssim = sum(r["ssim"] for r in results) / len(results)
    print(f"{'mean':<32} psnr {_fmt_metric(mean_psnr):>9}  ssim {mean_ssim:.4f}")

    if args.report:
        doc = {
            "dataset": args.hr_dir,
            "scale": args.scale,
            "self_ensemble": bool(args.self_ensemble),
            "per_image": [
                {"name": r["name"], "psnr": _json_metric(r["psnr"]), "ssim": r["ssim"]}
                for r in results
            ],
            "mean_psnr": _json_metric(mean_psnr),
            "mean_ssim": mean_ssim,
        }
        with open(args.report, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {args.report}")
    return EXIT_OK


def _cmd_decompose(args):
    model = _load_model(args.weights)
    _echo_model_config("decompose", model.config, extra=[
        ("weights", args.weights), ("input", args.input),
        ("block", args.block), ("out_prefix", args.out_prefix),
    ])
    img = _load_image(args.input)
    try:
        low, high = imaging.decompose(img, model, args.block)
    except IndexError as exc:
        raise _UsageError(str(exc)) from exc
    out_low = f"{args.out_prefix}_low.png"
    out_high = f"{args.out_prefix}_high.png"
    imaging.save_png(low, out_low)
    imaging.save_png(high, out_high)
    for label, m, path in (("smooth", low, out_low), ("detail", high, out_high)):
        flat = "  (constant map, normalized to zeros)" if not m.pixels.any() else ""
        print(f"wrote {label} map {path} ({m.width}x{m.height}){flat}")
    return EXIT_OK


def _cmd_train_toy(args):
    cfg = _config_from_args(args)
    tc = TrainConfig(
        steps=args.steps, batch=args.batch, patch=args.patch,
        lr_init=args.lr_init, seed=args.seed,
    )
    try:
        tc.validate()
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc
    _echo_model_config("train-toy", cfg, extra=[
        ("data_dir", args.data_dir), ("out_weights", args.out_weights),
        ("steps", tc.steps), ("batch", tc.batch), ("patch", tc.patch),
        ("lr_init", tc.lr_init), ("seed", tc.seed),
    ])
    entries = _list_pngs(args.data_dir)
    pairs = []
    offenders = []
    for name, path in entries:
        hr = imaging.as_rgb(_load_image(path))
        try:
            pair = imaging.make_pair(hr, cfg.scale, name=name)
            if pair.lr.height < tc.patch or pair.lr.width < tc.patch:
                raise ValueError(
                    f"LR side {pair.lr.height}x{pair.lr.width} smaller than patch {tc.patch}"
                )
        except ValueError as exc:
            offenders.append(f"{name}: {exc}")
            continue
        pairs.append(pair)
    if offenders:
        raise _DataError("unusable training images: " + "; ".join(offenders))

    model = build(cfg, seed=tc.seed)
    curve = train_toy(model, pairs, tc)
    save_weights(model, args.out_weights)
    print(f"trained {tc.steps} steps on {len(pairs)} images; "
          f"loss {curve[0]:.6f} -> {curve[-1]:.6f}")
    print(f"wrote {args.out_weights}")

    if args.curve:
        with open(args.curve, "w") as fh:
            fh.write("step,loss\n")
            for i, v in enumerate(curve, start=1):
                fh.write(f"{i},{v:.10g}\n")
        print(f"wrote {args.curve}")
    if args.curve_plot:
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError as exc:
            raise _DataError(f"--curve-plot needs matplotlib: {exc}") from exc
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(range(1, len(curve) + 1), curve, lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("L1 loss")
        ax.set_yscale("log")
        fig.tight_layout()
        fig.savefig(args.curve_plot, dpi=120)
        plt.close(fig)
        print(f"wrote {args.curve_plot}")
    return EXIT_OK


_COMMANDS = {
    "summary": _cmd_summary,
    "sr": _cmd_sr,
    "eval": _cmd_eval,
    "decompose": _cmd_decompose,
    "train-toy": _cmd_train_toy,
}


def main(argv=None):
    parser = _build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
