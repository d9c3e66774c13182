"""Command-line entry point.

Subcommands: gen-masks, train, inpaint, viz-features, gradcheck.
Exit codes: 0 success, 1 validation failure, 2 usage error.

Training reads an optional plain-text config file (key = value lines,
# comments); command-line flags override file values. Unknown keys
abort the run, listing them.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from .errors import DignError, ShapeError
from .gradcheck import grad_check
from .generator import (GeneratorConfig, build_generator, inpaint,
                        load_checkpoint)
from .imgio import load_image, load_mask_raster, save_image
from .inception import InceptionLayer, default_inception_spec, build_inception
from .losses import (FeatureExtractor, LossWeights, masked_l1,
                     perceptual_loss, style_loss, total_loss)
from .maskgen import write_mask_dataset
from .ops import BatchNormState, Conv2dParams, activation, batch_norm, concat_channels, conv2d, pool2d, upsample_nearest
from .pconv import MaskedActivation, partial_conv2d
from .tensor import add, constant, mul, sum_all, tensor_new
from .trainer import TrainConfig, train, worker_cap

log = logging.getLogger("dign.cli")

_KNOWN_KEYS = {
    "train.images", "train.masks", "train.out", "train.resolution",
    "train.batch_size", "train.iterations", "train.lr", "train.beta1",
    "train.beta2", "train.epsilon", "train.checkpoint_interval",
    "train.seed", "train.channel_scale", "train.precision", "train.fx_seed",
    "loss.hole", "loss.valid", "loss.perceptual", "loss.style",
}


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        w, h = int(w), int(h)
        if w < 1 or h < 1:
            raise ValueError
        return w, h
    except ValueError:
        raise DignError(f"--size wants WxH with positive integers, got {text!r}")


def cmd_gen_masks(args) -> int:
    w, h = _parse_size(args.size)
    rows = write_mask_dataset(args.count, args.out, args.mix, args.seed,
                              w=w, h=h)
    print(f"wrote {len(rows)} masks + manifest.tsv to {args.out}")
    return 0


def _train_config(args) -> tuple[TrainConfig, str | None]:
    cfg = TrainConfig()
    file_cfg: dict[str, str] = {}
    if args.config:
        file_cfg = cfgmod.load_config(args.config)
        cfgmod.check_known_keys(file_cfg, _KNOWN_KEYS, source=args.config)
        cfg.image_dir = file_cfg.get("train.images", cfg.image_dir)
        cfg.mask_dir = file_cfg.get("train.masks", cfg.mask_dir)
        cfg.out_dir = file_cfg.get("train.out", cfg.out_dir)
        cfg.resolution = cfgmod.get_int(file_cfg, "train.resolution", cfg.resolution)
        cfg.batch_size = cfgmod.get_int(file_cfg, "train.batch_size", cfg.batch_size)
        cfg.iterations = cfgmod.get_int(file_cfg, "train.iterations", cfg.iterations)
        cfg.lr = cfgmod.get_float(file_cfg, "train.lr", cfg.lr)
        cfg.beta1 = cfgmod.get_float(file_cfg, "train.beta1", cfg.beta1)
        cfg.beta2 = cfgmod.get_float(file_cfg, "train.beta2", cfg.beta2)
        cfg.epsilon = cfgmod.get_float(file_cfg, "train.epsilon", cfg.epsilon)
        cfg.checkpoint_interval = cfgmod.get_int(
            file_cfg, "train.checkpoint_interval", cfg.checkpoint_interval)
        cfg.seed = cfgmod.get_int(file_cfg, "train.seed", cfg.seed)
        cfg.channel_scale = cfgmod.get_float(file_cfg, "train.channel_scale",
                                             cfg.channel_scale)
        cfg.precision = file_cfg.get("train.precision", cfg.precision)
        cfg.fx_seed = cfgmod.get_int(file_cfg, "train.fx_seed", cfg.fx_seed)
        cfg.weights = LossWeights(
            w_hole=cfgmod.get_float(file_cfg, "loss.hole", cfg.weights.w_hole),
            w_valid=cfgmod.get_float(file_cfg, "loss.valid", cfg.weights.w_valid),
            w_perc=cfgmod.get_float(file_cfg, "loss.perceptual", cfg.weights.w_perc),
            w_style=cfgmod.get_float(file_cfg, "loss.style", cfg.weights.w_style))
    if args.images is not None:
        cfg.image_dir = args.images
    if args.masks is not None:
        cfg.mask_dir = args.masks
    if args.out is not None:
        cfg.out_dir = args.out
    if args.iters is not None:
        cfg.iterations = args.iters
    if args.resolution is not None:
        cfg.resolution = args.resolution
    if args.channel_scale is not None:
        cfg.channel_scale = args.channel_scale
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if args.seed is not None:
        cfg.seed = args.seed
    if args.precision is not None:
        cfg.precision = args.precision
    if not cfg.image_dir or not cfg.mask_dir or not cfg.out_dir:
        raise DignError("train needs --images, --masks and --out "
                        "(flags or config keys)")
    return cfg, args.resume


def cmd_train(args) -> int:
    cfg, resume = _train_config(args)
    summary = train(cfg, resume=resume)
    last = summary["last"]
    if last:
        print(f"iteration {summary['iterations']}: total {last['total']:.6f} "
              f"(hole {last['hole_l1']:.6f}, valid {last['valid_l1']:.6f})")
    print(f"checkpoint: {summary['checkpoint']}")
    print(f"metrics:    {summary['metrics']}")
    return 0


def _load_pair(image_path: str, mask_path: str):
    img = load_image(image_path)
    bits = load_mask_raster(mask_path)
    if img.shape[1:] != bits.shape:
        raise ShapeError(f"image is {img.shape[2]}x{img.shape[1]}, mask is "
                         f"{bits.shape[1]}x{bits.shape[0]}")
    return img, bits


def cmd_inpaint(args) -> int:
    gen, _, _ = load_checkpoint(args.ckpt)
    img, bits = _load_pair(args.image, args.mask)
    result = inpaint(gen, img, bits.astype(np.float32))
    save_image(args.out, result.data[0])
    print(f"wrote {args.out}")
    return 0


def cmd_viz_features(args) -> int:
    gen, _, _ = load_checkpoint(args.ckpt)
    valid = [n for n in gen.layer_names() if isinstance(gen.get_layer(n), InceptionLayer)]
    if args.layer not in valid:
        raise DignError(f"layer {args.layer!r} has no branch outputs; "
                        f"valid layers: {', '.join(valid)}")
    img, bits = _load_pair(args.image, args.mask)
    layer_in = gen.capture_layer_input(args.layer, img, bits.astype(np.float32))
    layer = gen.get_layer(args.layer)
    os.makedirs(args.out, exist_ok=True)
    count = 0
    for bi, (branch, feats) in enumerate(zip(layer.branches,
                                             layer.branch_outputs(layer_in))):
        kind = branch.spec.kind
        tag = f"{kind}{branch.spec.kernel}" if kind == "conv" else "pool"
        for c in range(min(args.channels, feats.shape[1])):
            chan = feats.data[0, c]
            lo, hi = float(chan.min()), float(chan.max())
            norm = (chan - lo) / (hi - lo) if hi > lo else np.zeros_like(chan)
            path = os.path.join(args.out, f"{args.layer}_b{bi}_{tag}_c{c:02d}.png")
            save_image(path, norm[None])
            count += 1
    print(f"wrote {count} channel maps for {args.layer} "
          f"({len(layer.branches)} branches) to {args.out}")
    return 0


def _gradcheck_suite():
    """(name, runner) pairs; each runner returns the max relative error
    for one op family at 64-bit."""
    f64 = np.float64

    def rnd(shape, seed, rg=True):
        return tensor_new(shape, ("gaussian", 0.0, 1.0), seed=seed,
                          requires_grad=rg, dtype=f64)

    def proj(out, seed):
        # fixed random projection to a scalar. Kink-free, unlike an
        # absolute-value reduction, which plants kinks at zero right
        # where normalized outputs cluster; weights in [0.5, 1.5] keep
        # every element's sign and influence.
        w = tensor_new(out.shape, ("uniform", 0.5, 1.5), seed=seed, dtype=f64)
        return sum_all(mul(out, w))

    def conv():
        x = rnd((2, 3, 7, 6), 1)
        p = Conv2dParams(weight=rnd((4, 3, 3, 3), 2), bias=rnd((1, 4, 1, 1), 3),
                         stride=2, padding=1)
        return grad_check(lambda: proj(conv2d(x, p), 31),
                          [x, p.weight, p.bias])

    def pconv():
        x = rnd((1, 2, 8, 8), 4)
        w = rnd((3, 2, 3, 3), 5)
        mask = np.ones((1, 1, 8, 8))
        mask[:, :, 2:6, 3:7] = 0.0
        ma = MaskedActivation(x, constant(mask, dtype=f64))
        p = Conv2dParams(weight=w, bias=rnd((1, 3, 1, 1), 6), padding=1)
        return grad_check(lambda: proj(partial_conv2d(ma, p).features, 32),
                          [x, w, p.bias])

    def pool():
        x = rnd((2, 3, 8, 8), 7)
        e1 = grad_check(lambda: proj(pool2d(x, "max", 3, 2, 1), 33), [x])
        e2 = grad_check(lambda: proj(pool2d(x, "avg", 3, 2, 1), 34), [x])
        return max(e1, e2)

    def bn():
        x = rnd((3, 4, 5, 5), 8)
        s = BatchNormState(4, dtype=f64)
        s.gamma = rnd((1, 4, 1, 1), 9)
        s.beta = rnd((1, 4, 1, 1), 10)
        return grad_check(lambda: proj(batch_norm(x, s, "train"), 35),
                          [x, s.gamma, s.beta])

    def act():
        x = rnd((2, 3, 6, 6), 11)
        e1 = grad_check(lambda: proj(activation(x, "relu"), 36), [x])
        e2 = grad_check(lambda: proj(activation(x, "leaky_relu", 0.2), 37), [x])
        return max(e1, e2)

    def concat():
        a, b = rnd((2, 3, 5, 5), 12), rnd((2, 2, 5, 5), 13)
        return grad_check(lambda: proj(concat_channels([a, b]), 38), [a, b])

    def upsample():
        x = rnd((2, 3, 4, 4), 14)
        return grad_check(lambda: proj(upsample_nearest(x, 2), 39), [x])

    def loss_terms():
        yh, y = rnd((2, 3, 8, 8), 15), rnd((2, 3, 8, 8), 16, rg=False)
        mask = np.ones((2, 1, 8, 8))
        mask[:, :, 2:5, 2:6] = 0.0
        fx = FeatureExtractor.default(seed=23, dtype=f64)

        def build_l1():
            hole, valid = masked_l1(y, yh, mask)
            return add(hole, valid)
        errs = [grad_check(build_l1, [yh]),
                grad_check(lambda: perceptual_loss(yh, y, fx), [yh]),
                grad_check(lambda: style_loss(yh, y, fx), [yh])]

        def build_total():
            comp = add(mul(yh, constant(mask, dtype=f64)),
                       mul(yh, constant(1.0 - mask, dtype=f64)))
            t, _ = total_loss(y, yh, comp, mask, fx, LossWeights())
            return t
        errs.append(grad_check(build_total, [yh]))
        return max(errs)

    def inception():
        spec = default_inception_spec(6, 16, layer_stride=2)
        layer = build_inception(spec, 6, seed=17, dtype=f64)
        x = rnd((1, 6, 8, 8), 18)
        mask = np.ones((1, 1, 8, 8))
        mask[:, :, 3:6, 2:7] = 0.0
        ma = MaskedActivation(x, constant(mask, dtype=f64))
        params = [x] + [t for _, t in layer.parameters()]
        return grad_check(lambda: proj(layer.forward(ma).features, 40), params)

    def generator():
        cfg = GeneratorConfig(input_resolution=32, channel_scale=1 / 16)
        gen = build_generator(cfg, seed=7, dtype=f64)
        img = tensor_new((1, 3, 32, 32), ("uniform", 0.0, 1.0), seed=19, dtype=f64)
        mask = np.ones((1, 1, 32, 32))
        mask[:, :, 9:21, 7:24] = 0.0
        mask_t = constant(mask, dtype=f64)

        # Fresh init is a corner point of the loss surface: partial conv
        # forces exact zeros at hole positions, eval-mode normalization
        # maps those to exactly beta (= 0 at init), and every hole unit
        # sits on the relu kink. In the beta directions the function is
        # one-sided there, so finite differences disagree with any
        # subgradient choice no matter how small eps gets. Shift the
        # affine state to a generic point first; one optimizer step does
        # the same in real training.
        pick = 101
        for name, t in gen.parameters():
            if name.endswith("bn.gamma"):
                t.data = tensor_new(t.shape, ("uniform", 0.9, 1.1),
                                    seed=pick, dtype=f64).data
            elif name.endswith("bn.beta"):
                u = tensor_new(t.shape, ("uniform", -1.0, 1.0),
                               seed=pick, dtype=f64).data
                # magnitude >= 0.05 keeps hole units clear of the kink
                t.data = np.where(u < 0, -1.0, 1.0) * (0.05 + 0.1 * np.abs(u))
            pick += 1

        # eval-mode stats: train-mode batch statistics couple every unit
        # in a channel to every upstream parameter, so at eps=1e-5 the
        # FD sweep of a deep net almost surely crosses some relu or
        # max-pool kink (the analytic gradient converges at eps<=1e-6).
        # Train-mode backward is covered by the batch_norm and inception
        # entries above.
        proj = tensor_new((1, 3, 32, 32), ("uniform", 0.5, 1.5), seed=20,
                          dtype=f64)

        def build():
            out = gen.forward(img, mask_t, mode="eval")
            return sum_all(mul(out.features, proj))
        return grad_check(build, [t for _, t in gen.parameters()])

    return [("conv2d", conv), ("partial_conv2d", pconv), ("pooling", pool),
            ("batch_norm", bn), ("activations", act), ("concat", concat),
            ("upsample", upsample), ("losses", loss_terms),
            ("inception", inception), ("generator", generator)]


def cmd_gradcheck(args) -> int:
    suite = _gradcheck_suite()
    if args.only:
        suite = [(n, f) for n, f in suite if args.only in n]
        if not suite:
            raise DignError(f"--only {args.only!r} matches nothing; families: "
                            + ", ".join(n for n, _ in _gradcheck_suite()))
    failures = 0
    width = max(len(n) for n, _ in suite)
    for name, fn in suite:
        err = fn()
        ok = err < 1e-4
        failures += 0 if ok else 1
        print(f"{name:<{width}}  {err:12.3e}  {'ok' if ok else 'FAIL'}")
    return 0 if failures == 0 else 1


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dign",
                                description="partial-convolution inpainting toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-masks", help="write a random mask dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--mix", choices=("shape", "growth", "both"), default="both")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", default="256x256", help="WxH, default 256x256")
    g.set_defaults(fn=cmd_gen_masks)

    t = sub.add_parser("train", help="train the generator")
    t.add_argument("--config", help="plain-text key = value file")
    t.add_argument("--images")
    t.add_argument("--masks")
    t.add_argument("--out")
    t.add_argument("--iters", type=int)
    t.add_argument("--resolution", type=int)
    t.add_argument("--channel-scale", type=float, dest="channel_scale")
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--seed", type=int)
    t.add_argument("--precision", choices=("f32", "f64"))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("inpaint", help="complete one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--mask", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_inpaint)

    v = sub.add_parser("viz-features", help="dump per-branch channel maps")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--image", required=True)
    v.add_argument("--mask", required=True)
    v.add_argument("--layer", required=True, help="e.g. enc3")
    v.add_argument("--channels", type=int, default=15)
    v.add_argument("--out", required=True)
    v.set_defaults(fn=cmd_viz_features)

    c = sub.add_parser("gradcheck", help="finite-difference validation at 64-bit")
    c.add_argument("--only", help="restrict to one op family")
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        worker_cap(1)  # validates DIGN_THREADS early
        args = make_parser().parse_args(argv)
        return args.fn(args)
    except DignError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
