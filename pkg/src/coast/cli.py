"""coast: sampling matrices, training, reconstruction and evaluation for block compressed sensing.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .blocks import ImageFormatError, read_image, to_luminance, write_image
from .ista import IstaConfig
from .network import CheckpointError, CoastConfig, count_params
from .sampling import FormatError, load_matrix, rows_for_ratio, rpa_augment, save_matrix

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _ratio(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"ratio must be in (0, 1], got {text}")
    return v


def _nonneg(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare-data", help="export the bundled sample photographs as train/test PGM sets")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--max-side", type=int, default=256)

    s = sub.add_parser("gen-phi", help="generate orthonormal random Gaussian sampling matrices")
    s.add_argument("--ratio", required=True, type=_ratio)
    s.add_argument("--patch-side", required=True, type=int)
    s.add_argument("--seed", required=True, type=int)
    s.add_argument("--count", type=int, default=1, help="total matrices: the base plus count-1 augmented ones")
    s.add_argument("--rpa-seed", type=int, default=2000, help="master seed for the augmented matrices")
    s.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("train", help="train a model from a key = value configuration file")
    s.add_argument("--config", required=True, type=Path)

    s = sub.add_parser("reconstruct", help="sample an image and reconstruct it")
    s.add_argument("--method", choices=("coast", "ista", "pinv"), default="coast")
    s.add_argument("--phi", required=True, type=Path)
    s.add_argument("--ckpt", type=Path, help="checkpoint (required for coast)")
    s.add_argument("--in", dest="inp", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--sigma", type=_nonneg, default=0.0, help="noise std on the [0, 1] intensity scale")
    s.add_argument("--seed", type=int, default=0, help="noise seed")
    s.add_argument("--no-pnpd", action="store_true", help="disable whole-image deblocking")
    s.add_argument("--ref", type=Path, help="reference image; prints PSNR and SSIM")
    s.add_argument("--lam", type=_nonneg, default=0.01, help="ISTA l1 weight")
    s.add_argument("--iters", type=int, default=400, help="ISTA iteration cap")
    s.add_argument("--transform", choices=("DCT2", "IDENTITY"), default="DCT2", help="ISTA sparsifying transform")

    s = sub.add_parser("eval", help="run an evaluation experiment and write a CSV report")
    ev = s.add_subparsers(dest="experiment", required=True, parser_class=_Parser)
    e = ev.add_parser("seen-unseen", help="seen base matrix versus unseen FRGMs")
    e.add_argument("--run", required=True, type=Path, help="training output directory")
    e.add_argument("--images", required=True, type=Path)
    e.add_argument("--gammas", nargs="+", type=_ratio, default=[0.3])
    e.add_argument("--unseen-seeds", nargs="+", type=int, default=[9001])
    e.add_argument("--sigma", type=_nonneg, default=0.0)
    e.add_argument("--method", choices=("coast", "ista", "pinv"), default="coast")
    e.add_argument("--out", required=True, type=Path)
    e = ev.add_parser("ns-sweep", help="train one model per N_S and compare unseen-matrix PSNR")
    e.add_argument("--config", required=True, type=Path)
    e.add_argument("--ns", nargs="+", type=int, required=True)
    e.add_argument("--gamma", type=_ratio, default=0.3)
    e.add_argument("--images", required=True, type=Path)
    e.add_argument("--unseen-seeds", nargs="+", type=int, default=[9001])
    e.add_argument("--out", required=True, type=Path)
    e = ev.add_parser("noise-sweep", help="evaluate over a sigma x gamma grid")
    e.add_argument("--run", required=True, type=Path)
    e.add_argument("--images", required=True, type=Path)
    e.add_argument("--sigmas", nargs="+", type=_nonneg, required=True)
    e.add_argument("--gammas", nargs="+", type=_ratio, default=[0.1, 0.3, 0.5])
    e.add_argument("--out", required=True, type=Path)
    e = ev.add_parser("ablate", help="train and evaluate ablation settings a-e")
    e.add_argument("--config", required=True, type=Path)
    e.add_argument("--settings", nargs="+", default=["a", "b", "c", "d", "e"])
    e.add_argument("--gammas", nargs="+", type=_ratio, default=[0.1, 0.3, 0.5])
    e.add_argument("--images", required=True, type=Path)
    e.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("count-params", help="print the trainable parameter count")
    s.add_argument("--np", dest="phases", type=int, required=True)
    s.add_argument("--nc", dest="blocks", type=int, required=True)
    s.add_argument("--c", dest="channels", type=int, required=True)
    s.add_argument("--cu", choices=("off", "shared", "unshared"), default="shared")
    return p


# ---------------------------------------------------------------------------
# commands


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise FileNotFoundError(f"{what} {path} does not exist")


def cmd_prepare_data(args) -> int:
    from .datasets import export_sample_images

    if args.max_side < 33:
        raise UsageError("--max-side must be at least 33")
    train_dir, test_dir = export_sample_images(args.out, args.max_side)
    print(train_dir)
    print(test_dir)
    return EXIT_OK


def cmd_gen_phi(args) -> int:
    if args.patch_side < 1:
        raise UsageError("--patch-side must be >= 1")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    n = args.patch_side**2
    m = rows_for_ratio(args.ratio, n)
    if m < 1:
        raise UsageError(f"ratio {args.ratio} gives M=0 rows for N={n}")
    mats = rpa_augment([(m, n, args.seed)], args.count, args.rpa_seed).matrices
    args.out.mkdir(parents=True, exist_ok=True)
    for phi in mats:
        path = args.out / f"{phi.ident}.bin"
        save_matrix(phi, path)
        print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import load_train_config, train

    _require_file(args.config, "config file")
    cfg = load_train_config(args.config)
    state = train(cfg)
    print(f"trained {state.epoch} epochs; final loss {state.loss_history[-1]!r}" if state.loss_history else "trained 0 epochs")
    print(Path(cfg.out_dir) / "final.bin")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .evaluation import SSIM_WINDOW, Model, psnr, reconstruct, ssim

    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    if args.out.suffix.lower() not in (".png", ".pgm"):
        raise UsageError("--out must end in .png or .pgm")
    if args.method == "coast" and args.ckpt is None:
        # no model to run: reported as missing data, like a checkpoint path that does not exist
        raise FileNotFoundError("--method coast needs a checkpoint (--ckpt)")
    _require_file(args.phi, "matrix file")
    _require_file(args.inp, "input image")
    if args.ref is not None:
        _require_file(args.ref, "reference image")
    model = None
    if args.method == "coast":
        _require_file(args.ckpt, "checkpoint")
        model = Model.load(args.ckpt, pnpd=not args.no_pnpd)
    phi = load_matrix(args.phi)
    img = to_luminance(read_image(args.inp))
    ista = IstaConfig(lam=args.lam, max_iters=args.iters, transform=args.transform)
    recon = reconstruct(img, phi, args.method, model, args.sigma, args.seed, None if model is None else not args.no_pnpd, ista)
    if not np.all(np.isfinite(recon)):
        raise FloatingPointError("reconstruction contains non-finite values")
    write_image(recon, args.out)
    if args.ref is not None:
        ref = to_luminance(read_image(args.ref))
        # SSIM needs at least one full 11 x 11 window
        score = f"{ssim(ref, recon):.6f}" if min(ref.shape) >= SSIM_WINDOW else "n/a"
        print(f"psnr_db={psnr(ref, recon):.4f} ssim={score}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import evaluation as ev
    from .training import build_matrix_set, config_from_meta, load_train_config, read_meta

    if args.experiment in ("seen-unseen", "noise-sweep"):
        _require_file(args.run / "meta.json", "run metadata")
        _require_file(args.run / "final.bin", "checkpoint")
    else:
        _require_file(args.config, "config file")
    images = ev.load_images(args.images)
    if not images:
        raise ValueError(f"no images in {args.images}")
    dataset = args.images.name

    if args.experiment == "seen-unseen":
        model = ev.Model.load(args.run)
        seen = build_matrix_set(config_from_meta(read_meta(args.run)))
        report = ev.eval_seen_unseen(model, seen, args.unseen_seeds, images, args.gammas, args.sigma,
                                     args.method, dataset)
        for g in sorted({r.gamma for r in report.rows}):
            print(f"gamma={g:.4f} seen-unseen gap {ev.seen_unseen_gap(report, g):+.4f} dB")
    elif args.experiment == "ns-sweep":
        report = ev.eval_ns_sweep(load_train_config(args.config), args.ns, args.gamma, images, args.unseen_seeds, dataset)
    elif args.experiment == "noise-sweep":
        model = ev.Model.load(args.run)
        seen = build_matrix_set(config_from_meta(model.meta))
        n = seen.matrices[0].cols
        mats = [ev.seen_matrix(seen, rows_for_ratio(g, n)) for g in args.gammas]
        report = ev.noise_sweep(model, args.sigmas, mats, images, dataset)
    else:
        report = ev.eval_ablation(load_train_config(args.config), args.settings, args.gammas, images, dataset)
    report.write_csv(args.out)
    if args.experiment != "seen-unseen":
        for r in report.rows:
            print(f"{r.method} {r.matrix_id} sigma={r.sigma:.4g} psnr_db={r.psnr_db:.4f} ssim={r.ssim:.4f}")
    print(args.out)
    return EXIT_OK


def cmd_count_params(args) -> int:
    if min(args.phases, args.blocks, args.channels) < 1:
        raise UsageError("--np, --nc and --c must be >= 1")
    cfg = CoastConfig(args.phases, args.blocks, args.channels, cu_shared=args.cu != "unshared", cu_enabled=args.cu != "off")
    print(count_params(cfg))
    return EXIT_OK


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "gen-phi": cmd_gen_phi,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "count-params": cmd_count_params,
}


def main(argv=None) -> int:
    from .training import NumericalFailure

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors exit 1, --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"coast {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"coast {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ImageFormatError, CheckpointError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"coast {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
