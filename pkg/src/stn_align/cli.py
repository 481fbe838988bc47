"""Command-line interface for the alignment toolkit.

Exit codes: 0 success, 1 assertion/tolerance failure, 2 usage error,
3 I/O error. Every command prints its resolved flag values (defaults
included) before doing any work, and every run is deterministic given
its --seed in single-threaded mode.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import gradcheck as gc
from . import imageio
from . import landmarks as lm
from . import networks as nw
from . import synthdata as sd
from . import training as tr
from . import transforms as tf
from .exceptions import DegenerateTransformError, NonFiniteError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _default_workers():
    env = os.environ.get("STN_ALIGN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _print_config(args):
    print("resolved configuration:")
    for key in sorted(vars(args)):
        if key == "func":
            continue
        print(f"  {key} = {getattr(args, key)}")


def _ranges_from_args(args):
    return sd.PerturbationRanges(
        alpha=args.alpha_range, scale_lo=args.scale_range[0],
        scale_hi=args.scale_range[1], translate=args.translate_range,
        shear=args.shear_range, perspective=args.perspective_range)


def _load_or_generate_split(args):
    if getattr(args, "data", None):
        return sd.load_dataset(args.data)
    return sd.generate_dataset(
        args.seed, args.identities, args.observations, args.kind,
        _ranges_from_args(args), args.image_size, args.noise, n_pairs=args.pairs)


def _add_dataset_flags(p, with_kind=True):
    p.add_argument("--identities", type=int, default=sd.STANDARD_IDENTITIES,
                   help="number of glyph identities")
    p.add_argument("--observations", type=int, default=sd.STANDARD_OBSERVATIONS,
                   help="observations per identity")
    if with_kind:
        p.add_argument("--kind", choices=tf.KINDS, default="similarity",
                       help="perturbation / transform kind")
    p.add_argument("--image-size", type=int, default=sd.DEFAULT_IMAGE_SIZE,
                   help="observation image size in pixels")
    p.add_argument("--noise", type=float, default=0.02, help="additive noise sigma")
    p.add_argument("--pairs", type=int, default=600, help="verification pair count")
    p.add_argument("--alpha-range", type=float, default=np.pi / 6,
                   help="rotation half-range in radians")
    p.add_argument("--scale-range", type=float, nargs=2, default=(0.8, 1.25),
                   metavar=("LO", "HI"), help="uniform scale range")
    p.add_argument("--translate-range", type=float, default=0.2,
                   help="translation half-range (normalized units)")
    p.add_argument("--shear-range", type=float, default=0.15,
                   help="shear half-range (affine draws)")
    p.add_argument("--perspective-range", type=float, default=0.15,
                   help="perspective half-range (projective draws)")


def _add_train_flags(p, reinit_default=0):
    p.add_argument("--max-iters", type=int, default=3000, help="training iterations")
    p.add_argument("--batch-size", type=int, default=100, help="images per iteration")
    p.add_argument("--base-lr", type=float, default=0.01,
                   help="recognition-net learning rate")
    p.add_argument("--decay-every", type=int, default=1000,
                   help="iterations between learning-rate decays")
    p.add_argument("--decay-factor", type=float, default=0.1,
                   help="multiplicative learning-rate decay")
    p.add_argument("--loc-lr-ratio", type=float, default=0.1,
                   help="localization-net learning rate as a fraction of the base")
    p.add_argument("--center-weight", type=float, default=0.008,
                   help="center-loss weight against the softmax loss")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    p.add_argument("--reinit-at", type=int, default=reinit_default,
                   help="recognition-net reset iteration (0 disables, -1 means max_iters/2)")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32",
                   help="training arithmetic precision")
    p.add_argument("--log-every", type=int, default=1,
                   help="iterations between metrics-log rows")
    p.add_argument("--augment-flip", action="store_true",
                   help="double the training set with mirrored copies")
    p.add_argument("--config", default=None,
                   help="key=value config file; entries override the flags above")


def _train_config(args):
    reinit_at = None if args.reinit_at == -1 else args.reinit_at
    config = tr.TrainConfig(
        batch_size=args.batch_size, base_lr=args.base_lr,
        lr_decay_every=args.decay_every, lr_decay_factor=args.decay_factor,
        loc_lr_ratio=args.loc_lr_ratio, center_loss_weight=args.center_weight,
        momentum=args.momentum, max_iters=args.max_iters,
        reinit_at=reinit_at, seed=args.seed, dtype=args.dtype,
        log_every=args.log_every)
    if getattr(args, "config", None):
        overrides = {}
        with open(args.config) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                overrides[key.strip()] = value.strip()
        merged = {k: v for k, v in config.to_text_dict().items()}
        merged.update(overrides)
        config = tr.TrainConfig.from_mapping(merged)
    return config


# ---------------------------------------------------------------------------
# commands


def cmd_gradcheck(args):
    if args.trials == 0:
        print("warning: --trials 0 requested, all checks pass vacuously")
    results = gc.run_suites(args.module, trials=args.trials,
                            tolerance=args.tolerance, seed=args.seed)
    failed = False
    for r in results:
        print(r.line())
        failed = failed or not r.passed
    print("gradient check:", "FAILED" if failed else "ok")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_gen_data(args):
    split = sd.generate_dataset(
        args.seed, args.identities, args.observations, args.kind,
        _ranges_from_args(args), args.image_size, args.noise, n_pairs=args.pairs)
    os.makedirs(args.out, exist_ok=True)
    sd.save_dataset(split, args.out, image_format=args.format)
    print(f"wrote {len(split.train)} train / {len(split.test)} test observations "
          f"and {len(split.pairs)} pairs to {args.out}")
    return EXIT_OK


def cmd_train(args):
    split = _load_or_generate_split(args)
    if args.augment_flip:
        split = sd.augment_flip(split)
    config = _train_config(args)
    os.makedirs(args.out, exist_ok=True)
    run = tr.train(config, split, args.kind,
                   metrics_path=os.path.join(args.out, "metrics.txt"))
    ckpt.save_checkpoint(os.path.join(args.out, "checkpoint.ckpt"), run.state)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(config.to_text())
    tr.write_manifest(args.out, ["checkpoint.ckpt", "metrics.txt", "config.txt"])
    last = run.metrics[-1] if run.metrics else None
    if last:
        print(f"finished at iter {run.iteration}: softmax={last.loss_softmax:.4f} "
              f"center={last.loss_center:.4f} train_acc={last.train_acc:.3f}")
    print(f"checkpoint written to {os.path.join(args.out, 'checkpoint.ckpt')}")
    return EXIT_OK


def cmd_eval(args):
    state = ckpt.load_checkpoint(args.checkpoint)
    split = _load_or_generate_split(args)
    report = tr.evaluate_verification(state, split.test, split.pairs,
                                      pca_dim=args.pca_dim, folds=args.folds,
                                      mirror_average=args.mirror_average)
    print(f"verification accuracy: {report.accuracy:.4f} "
          f"(pca_dim={report.pca_dim}, folds={args.folds})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report.write(os.path.join(args.out, "report.txt"))
        with open(os.path.join(args.out, "roc.txt"), "w") as fh:
            for fpr, tpr in zip(*report.roc):
                fh.write(f"{fpr:.6f} {tpr:.6f}\n")
        tr.write_manifest(args.out, ["report.txt", "roc.txt"])
    return EXIT_OK


def cmd_sweep_locnet(args):
    split = _load_or_generate_split(args)
    head = tf.head_width(args.kind) or 6
    specs = tr.locnet_sweep_specs(input_size=split.meta["image_size"], head_width=head)
    rows = tr.locnet_regression_sweep(specs, split, iters=args.iters,
                                      seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "locnet_table.txt"), "w") as fh:
        fh.write("# architecture param_count heldout_mse\n")
        for row in rows:
            fh.write(row.line() + "\n")
            print(row.line())
    tr.write_manifest(args.out, ["locnet_table.txt"])
    return EXIT_OK


def cmd_compare_kinds(args):
    split = _load_or_generate_split(args)
    config = _train_config(args)
    kinds = args.kinds.split(",") if args.kinds else list(tf.KINDS)
    for kind in kinds:
        if kind not in tf.KINDS:
            print(f"error: unknown transform kind {kind!r}", file=sys.stderr)
            return EXIT_USAGE
    seeds = tuple(range(args.train_seeds))
    results = tr.compare_transform_kinds(
        config, split, kinds=kinds, seeds=seeds,
        progress=lambda k, s, a: print(f"  {k} seed={s} accuracy={a:.4f}"))
    os.makedirs(args.out, exist_ok=True)
    tr.write_kind_table(os.path.join(args.out, "kinds_table.txt"), results)
    tr.write_manifest(args.out, ["kinds_table.txt"])
    for r in results:
        print(r.line())
    return EXIT_OK


def cmd_warp(args):
    image = imageio.read_image(args.input)
    if args.params:
        with open(args.params) as fh:
            params = tf.parse_record(fh.read())
    else:
        state = ckpt.load_checkpoint(args.checkpoint)
        if state.loc is None:
            print("error: checkpoint has no localization network", file=sys.stderr)
            return EXIT_USAGE
        size = state.spec.loc_input_size
        loc_in = nw.center_resample(
            image[None, None].astype(state.spec.np_dtype()), size, size)
        theta = state.loc.forward(loc_in)[0].astype(np.float64)
        params = tf.from_vector(state.spec.transform_kind, theta)
        params_out = args.params_out or (args.output + ".params")
        with open(params_out, "w") as fh:
            fh.write(tf.to_record(params))
        print(f"predicted parameters written to {params_out}")
    out_size = args.out_size or image.shape[0]
    grid = tf.generate_grid(params, out_size, out_size)
    from .sampler import bilinear_sample
    warped = bilinear_sample(image[None, None], grid)[0, 0]
    imageio.write_image(args.output, warped)
    print(f"warped image written to {args.output}")
    return EXIT_OK


def cmd_relocate(args):
    sets, frame = lm.read_landmarks(args.points)
    if frame != lm.FRAME_ALIGNED:
        print(f"error: input landmarks must be in the {lm.FRAME_ALIGNED!r} frame",
              file=sys.stderr)
        return EXIT_USAGE
    with open(args.params) as fh:
        params = tf.parse_record(fh.read())
    out = {}
    for image_id, pts in sets.items():
        out[image_id] = lm.relocate(lm.LandmarkSet(pts, frame), params).points
    lm.write_landmarks(args.output, out, lm.FRAME_ORIGINAL)
    print(f"relocated {sum(len(v) for v in out.values())} points "
          f"across {len(out)} images to {args.output}")
    return EXIT_OK


def cmd_info(args):
    print(f"stn-align {__version__}")
    print("transform kinds:", ", ".join(tf.KINDS))
    print("image formats: PGM (P5, maxval 255) always; PNG when Pillow is installed;")
    print("               raw tensors (.ten): magic STNTENS1, dtype u8, rank u8, u32 dims, LE data")
    print("checkpoint: magic STNCKPT1, spec blob, sorted named tensors (see checkpoint module)")
    print("default training configuration:")
    for line in tr.TrainConfig().to_text().strip().splitlines():
        print("  " + line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stn-align",
        description="differentiable 2D alignment toolkit: gradient checks, synthetic "
                    "data, end-to-end alignment training, evaluation, warping, and "
                    "landmark relocation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workers", type=int, default=_default_workers(),
                        help="worker count for batch-parallel stages "
                             "(env STN_ALIGN_THREADS overrides the default)")
    common.add_argument("--deterministic", action="store_true",
                        help="force single-threaded execution")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[common],
                              formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                              **kw)

    p = add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--module", choices=gc.MODULES + ("all",), default="all")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=None,
                   help="override the per-suite tolerances")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("pgm", "raw"), default="pgm")
    _add_dataset_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = add_parser("train", help="train the alignment + recognition pipeline")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset directory from gen-data (else generated)")
    p.add_argument("--seed", type=int, default=0)
    _add_dataset_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = add_parser("eval", help="verification evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (else regenerated from flags)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pca-dim", type=int, default=None)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--mirror-average", action="store_true")
    p.add_argument("--out", default=None)
    _add_dataset_flags(p)
    p.set_defaults(func=cmd_eval)

    p = add_parser("sweep-locnet", help="architecture sweep: supervised parameter regression")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset directory (else generated)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=400)
    _add_dataset_flags(p)
    p.set_defaults(func=cmd_sweep_locnet)

    p = add_parser("compare-kinds", help="train one pipeline per transform kind")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset directory (else generated)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kinds", default=None,
                   help="comma-separated subset (default: all four kinds)")
    p.add_argument("--train-seeds", type=int, default=3)
    _add_dataset_flags(p)
    _add_train_flags(p, reinit_default=tr.BENCHMARK_REINIT_AT)
    p.set_defaults(func=cmd_compare_kinds)

    p = add_parser("warp", help="warp an image by explicit or predicted parameters")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--params", help="transform record file")
    group.add_argument("--checkpoint", help="predict parameters with this checkpoint")
    p.add_argument("--params-out", default=None,
                   help="where to write predicted parameters (with --checkpoint)")
    p.add_argument("--out-size", type=int, default=None)
    p.set_defaults(func=cmd_warp)

    p = add_parser("relocate", help="map aligned-frame landmarks to the original frame")
    p.add_argument("--points", required=True, help="landmark CSV (frame header + image_id,x,y)")
    p.add_argument("--params", required=True, help="transform record file")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_relocate)

    p = add_parser("info", help="version, formats, and default configuration")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors and 0 for --help
        return int(exc.code or 0)
    if args.deterministic:
        args.workers = 1
    _print_config(args)
    try:
        return args.func(args)
    except (OSError, IOError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DegenerateTransformError, NonFiniteError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
