"""Command-line entry point: ``ecpenet {synth,train,infer,gradcheck,stats}``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data as D
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config, parse_bool, set_value
from .gradcheck import gradcheck_suite
from .metrics import channel_stats, format_db
from .tensor import ShapeError
from .training import NumericalError, Trainer, evaluate_psnr, network_from_checkpoint, predict

logger = logging.getLogger("ecpenet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _on_off(text: str) -> bool:
    try:
        return parse_bool(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected on|off, got {text!r}")


def _odd_window(text: str) -> int:
    value = int(text)
    if value < 1 or value % 2 == 0:
        raise argparse.ArgumentTypeError(f"window must be a positive odd integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ecpenet", description="Extreme-channel-prior deblurring network toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="synthesize a blurred/sharp dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20, help="number of procedural images")
    p.add_argument("--sharp-dir", help="blur these sharp images instead of procedural ones")
    p.add_argument("--size", type=int, default=D.DESK_PATCH)
    p.add_argument("--max-support", type=int, default=15)
    p.add_argument("--kernel", choices=("motion", "delta"), default="motion")
    p.add_argument("--sigma", type=float, default=None, help="noise std (default 0.01; 0 with --kernel delta)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a network on a dataset directory")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory with sharp/ and blur/")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ecp", type=_on_off)
    p.add_argument("--ife", type=_on_off)
    p.add_argument("--scales", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--omega", type=float)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config value")

    p = sub.add_parser("infer", help="deblur one image with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of all backward rules")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--case", action="append", help="run only cases with this name prefix")

    p = sub.add_parser("stats", help="dark/bright channel statistics")
    p.add_argument("path", help="image file, directory of images, or (with --pairs) dataset directory")
    p.add_argument("--window", type=_odd_window, default=15)
    p.add_argument("--pairs", action="store_true", help="compare sharp/ against blur/")
    return parser


# ---------------------------------------------------------------------------


def _stage_dir(final: Path) -> Path:
    final.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))


def _commit_dir(staging: Path, final: Path) -> None:
    # os.replace only swaps onto an empty directory; never clobber user data
    if final.exists() and (not final.is_dir() or any(final.iterdir())):
        raise FileExistsError(f"output {final} already exists and is not empty")
    if final.exists():
        final.rmdir()
    os.replace(staging, final)


def cmd_synth(args) -> int:
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    sigma = args.sigma if args.sigma is not None else (0.0 if args.kernel == "delta" else D.DEFAULT_NOISE)
    if args.sharp_dir:
        files = sorted(p for p in Path(args.sharp_dir).iterdir() if p.suffix.lower() in (".png", ".ppm"))
        if not files:
            raise FileNotFoundError(f"no PNG/PPM images in {args.sharp_dir}")
        sources = [lambda p=p: D.read_image(p) for p in files]
    else:
        if args.count < 1:
            raise UsageError("--count must be positive")
        sources = [None] * args.count

    pairs, kernels = [], []
    for src in sources:
        k = D.delta_kernel() if args.kernel == "delta" else D.synth_kernel(rng, args.max_support)
        kh, kw = k.shape
        sharp = src() if src is not None else D.procedural_image(rng, args.size + kh - 1, args.size + kw - 1)
        pair = D.make_blur_pair(sharp, k, sigma, rng)
        pairs.append(pair)
        kernels.append({"shape": list(k.shape), "sum": float(k.sum()), "values": k.round(12).tolist()})
    manifest = {
        "seed": args.seed,
        "kernel_mode": args.kernel,
        "max_support": args.max_support,
        "sigma": sigma,
        "size": args.size,
        "source": "procedural" if not args.sharp_dir else str(args.sharp_dir),
        "kernels": kernels,
    }
    staging = _stage_dir(out)
    try:
        D.write_dataset(staging, pairs, manifest)
        _commit_dir(staging, out)
    finally:
        if staging.exists():
            shutil.rmtree(staging)
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def resolve_train_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {
        "seed": args.seed, "ecp_enabled": args.ecp, "ife_enabled": args.ife,
        "iterations": args.iters, "lr": args.lr, "lam": args.lam, "omega": args.omega,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg.train, key, value)
    if args.scales is not None and args.scales != cfg.network.scales:
        cfg.network.scales = args.scales
        base = list(cfg.network.windows)
        cfg.network.windows = tuple((base + [base[-1]] * args.scales)[: args.scales])
    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        set_value(cfg, section, key, value)
    if args.data:
        cfg.data["path"] = args.data
    if "path" not in cfg.data:
        raise ConfigError("no dataset given (use --data or [data] path = ...)")
    cfg.sync()
    try:
        cfg.network.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    pairs = D.load_dataset(cfg.data["path"])
    held_out = pairs[-1]
    train_pairs = pairs[:-1] if len(pairs) > 1 else pairs
    out = Path(args.out)
    staging = _stage_dir(out)
    try:
        cfg.train.log_path = str(staging / "train.log")
        trainer = Trainer(cfg.train, train_pairs, cfg.network, extra_config={"data": dict(cfg.data)})
        interval = cfg.train.eval_interval or max(1, cfg.train.iterations // 10)

        def report(t: Trainer, b):
            score = evaluate_psnr(t.params, held_out)
            print(
                f"iter {t.iteration:>7d}  total {b.total_value:.6f}  recon {[round(v, 6) for v in b.recon]}"
                f"  dark {[round(v, 6) for v in b.dark]}  bright {[round(v, 6) for v in b.bright]}"
                f"  psnr {format_db(score)} dB",
                flush=True,
            )

        trainer.config.eval_interval = interval
        trainer.run(on_interval=report)
        (staging / "config.ini").write_text(dump_config(cfg))
        save_checkpoint(trainer.checkpoint(), staging / "final.ecpn")
        _commit_dir(staging, out)
    finally:
        if staging.exists():
            shutil.rmtree(staging)
    print(f"checkpoint: {out / 'final.ecpn'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params = network_from_checkpoint(ckpt)
    img = D.read_image(args.input)
    factor = 2 ** (params.config.scales - 1)
    cropped = D.crop_to_multiple(img, factor)
    if cropped.shape != img.shape:
        logger.warning("cropping %s to %s so every scale halves exactly", img.shape[1:], cropped.shape[1:])
    if min(cropped.shape[1:]) == 0:
        raise ShapeError(f"image {img.shape} too small for {params.config.scales} scales")
    est = predict(params, cropped)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".{out.name}.tmp{out.suffix}")
    D.write_image(tmp, est)
    os.replace(tmp, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck_suite(args.seed, args.case)
    if not report.cases:
        raise UsageError(f"no gradcheck case matches {args.case}")
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _image_files(path: Path) -> List[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".ppm"))
        if files:
            return files
    raise FileNotFoundError(f"no images at {path}")


def cmd_stats(args) -> int:
    path = Path(args.path)
    if args.pairs:
        pairs = D.load_dataset(path)
        agree = 0
        print(f"{'pair':>6} {'dark sharp':>11} {'dark blur':>10} {'bright sharp':>13} {'bright blur':>12}  verdict")
        for i, p in enumerate(pairs):
            s, b = channel_stats(p.sharp, args.window), channel_stats(p.blurred, args.window)
            ok = b.mean_dark >= s.mean_dark and b.mean_bright <= s.mean_bright
            agree += ok
            print(f"{i:>6d} {s.mean_dark:>11.4f} {b.mean_dark:>10.4f} {s.mean_bright:>13.4f} {b.mean_bright:>12.4f}"
                  f"  {'blur lighter-dark/darker-bright' if ok else 'no'}")
        print(f"pairs where blur raised dark and lowered bright: {agree}/{len(pairs)}")
        print(f"verdict: {'consistent' if agree >= 0.9 * len(pairs) else 'inconsistent'} with the extreme channel prior")
        return EXIT_OK
    files = _image_files(path)
    darks, brights = [], []
    print(f"{'image':<30} {'mean dark':>10} {'mean bright':>12}")
    for f in files:
        st = channel_stats(D.read_image(f), args.window)
        darks.append(st.mean_dark)
        brights.append(st.mean_bright)
        print(f"{f.name:<30} {st.mean_dark:>10.4f} {st.mean_bright:>12.4f}")
    print(f"{'aggregate':<30} {np.mean(darks):>10.4f} {np.mean(brights):>12.4f}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "gradcheck": cmd_gradcheck, "stats": cmd_stats}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"ecpenet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"ecpenet {args.command}: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, ShapeError, ValueError) as exc:
        print(f"ecpenet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
