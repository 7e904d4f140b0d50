"""``condnoise`` command-line interface.

JSON goes to stdout, human-readable tables to stderr. Exit codes: 0 ok,
2 usage, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import contextlib
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import CondNoiseError, DataError, InvalidSpec
from .image_io import ColorImage, bayer_split, load_color, load_image, save_image
from .lonpe import LonpeConfig, estimate
from .noise_model import NoisePrior, NoiseSpec, make_rng, random_prior, sample_noise

KINDS = ("gaussian", "sv_gaussian", "poisson_gaussian", "exact_poisson_gaussian")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'a,b', got {text!r}") from None
    return a, b


# -- helpers ---------------------------------------------------------------------

def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, default=_jsonable, indent=2) + "\n")


def _jsonable(o):
    if isinstance(o, float) and math.isinf(o):
        return "inf"
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def _finite(x: float):
    return "inf" if math.isinf(x) else x


def _table(rows, headers) -> None:
    widths = [max(len(str(h)), *(len(_fmt(r[i])) for r in rows)) for i, h in enumerate(headers)]
    line = "  ".join(str(h).ljust(w) for h, w in zip(headers, widths))
    print(line, file=sys.stderr)
    print("-" * len(line), file=sys.stderr)
    for r in rows:
        print("  ".join(_fmt(v).ljust(w) for v, w in zip(r, widths)), file=sys.stderr)


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _lonpe_config(args) -> LonpeConfig:
    return LonpeConfig(patch_size=args.patch_size, select_ratio=args.select_ratio,
                       use_smoothness_filter=not args.no_smoothness,
                       min_patches=args.min_patches, seed=args.seed)


def _resolve_prior(args, rng) -> NoisePrior:
    if args.random_prior:
        return random_prior(rng)
    if args.prior is not None:
        return NoisePrior(*args.prior)
    s = args.sigma_s if args.sigma_s is not None else 0.0
    if args.sigma_r_255 is not None:
        r = args.sigma_r_255 / 255.0
    else:
        r = args.sigma_r if args.sigma_r is not None else 0.0
    return NoisePrior(s, r)


def _threads(n):
    if not n:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def _training_images(paths):
    if paths:
        return [load_color(p) for p in paths]
    from .imagery import color_pool
    return color_pool()


# -- subcommands -----------------------------------------------------------------

def cmd_synth(args):
    if args.random_prior and (args.prior is not None or args.sigma_s is not None
                              or args.sigma_r is not None or args.sigma_r_255 is not None):
        raise UsageError("--random-prior cannot be combined with explicit noise levels")
    if args.sigma_r is not None and args.sigma_r_255 is not None:
        raise UsageError("--sigma-r and --sigma-r-255 are mutually exclusive")
    image = load_image(args.input, args.bit_depth)
    prior = _resolve_prior(args, make_rng(args.seed))
    sv_map = load_image(args.sv_map) if args.sv_map else None
    spec = NoiseSpec(args.kind, prior, sv_map=sv_map, clip=args.clip, seed=args.seed)
    noisy = sample_noise(image, spec)
    save_image(noisy, args.output, args.format)
    sidecar = Path(str(args.output) + ".json")
    meta = spec.to_dict()
    sidecar.write_text(json.dumps(meta, indent=2))
    _emit({"output": str(args.output), "sidecar": str(sidecar), **meta})
    return 0


def _estimate_plane(plane, config):
    return estimate(plane, config).to_dict()


def cmd_estimate(args):
    config = _lonpe_config(args)
    image = load_image(args.input, args.bit_depth)
    if args.bayer == "split4":
        if isinstance(image, ColorImage):
            raise InvalidSpec("--bayer split4 expects a single-plane mosaic")
        subs = bayer_split(image, args.bayer_pattern)
        results = {k: _estimate_plane(p, config) for k, p in subs.items()}
        mean = [float(np.mean([r["sigma_s"] for r in results.values()])),
                float(np.mean([r["sigma_r"] for r in results.values()]))]
        _table([(k, r["sigma_s"], r["sigma_r"], r["patches_used"]) for k, r in results.items()],
               ("plane", "sigma_s", "sigma_r", "patches"))
        _emit({"bayer": "split4", "pattern": args.bayer_pattern, "planes": results,
               "mean": {"sigma_s": mean[0], "sigma_r": mean[1]}, "config": asdict(config)})
        return 0
    result = _estimate_plane(image, config)
    _table([(Path(args.input).name, result["sigma_s"], result["sigma_r"], result["patches_used"])],
           ("image", "sigma_s", "sigma_r", "patches"))
    _emit({**result, "config": asdict(config)})
    return 0


def _progress(every):
    def report(step, loss):
        if every and step % every == 0:
            print(f"step {step:6d}  loss {loss:.5f}", file=sys.stderr)
    return report


def cmd_train_denoiser(args):
    from .condsa import CondformerConfig, PatchDataset, TrainSchedule, build_model, save_model, train_denoiser

    config = CondformerConfig(base_channels=args.base_channels, latent_blocks=args.latent_blocks,
                              k=args.k, conditional=not args.no_condsa)
    schedule = TrainSchedule(steps=args.steps, batch_size=args.batch_size, patch_size=args.patch_size,
                             lr_max=args.lr, weight_decay=args.weight_decay, seed=args.seed,
                             prior_mode=args.prior_mode, log_every=args.log_every or 1)
    if args.steps == 0:
        path = save_model(build_model(config, args.seed), args.output, schedule=schedule, losses=[])
        _emit({"checkpoint": str(path), "steps": 0, "final_loss": None})
        return 0
    dataset = PatchDataset(_training_images(args.images), patch_size=args.patch_size)
    result = train_denoiser(dataset, config, schedule, checkpoint=args.output,
                            progress=_progress(args.log_every))
    _emit({"checkpoint": str(result.checkpoint), "steps": args.steps,
           "final_loss": float(np.mean(result.losses[-50:])), "wall_time": result.wall_time})
    return 0


def cmd_train_prior_net(args):
    from .prior_net import (PriorNetConfig, PriorNetSchedule, build_prior_net, make_prior_dataset,
                            train_prior_net)
    from . import tensor as T

    config = PriorNetConfig(patch_size=args.patch_size, patches_per_image=args.patches_per_image)
    schedule = PriorNetSchedule(steps=args.steps, batch_size=args.batch_size, lr_max=args.lr,
                                seed=args.seed)
    if args.steps == 0:
        model = build_prior_net(config, args.seed)
        path = T.save_checkpoint(model.state_dict(), args.output,
                                 {"model": "prior_net", "config": asdict(config),
                                  "schedule": asdict(schedule)})
        _emit({"checkpoint": str(path), "steps": 0})
        return 0
    data = make_prior_dataset(_training_images(args.images), args.count, crop=args.crop, seed=args.seed)
    result = train_prior_net(data, config, schedule, checkpoint=args.output)
    _emit({"checkpoint": str(result.checkpoint), "steps": args.steps,
           "final_loss": float(np.mean(result.losses[-50:])), "wall_time": result.wall_time})
    return 0


def cmd_denoise(args):
    from .condsa import denoise_batch, load_model

    image = load_color(args.input)
    if args.prior is not None:
        prior, source = NoisePrior(*args.prior), "given"
    elif args.prior_from_estimate:
        prior, source = estimate(image, _lonpe_config(args)).prior, "estimate"
    else:
        from .prior_net import load_prior_net, predict
        prior, source = predict(image, load_prior_net(args.prior_from_net), args.seed), "net"
    model = load_model(args.model)
    h, w = image.height, image.width
    m = 2 ** model.config.levels
    ph, pw = (-h) % m, (-w) % m
    padded = np.pad(image.data, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    out = denoise_batch(model, padded[None], prior.as_tuple())[0, :, :h, :w]
    save_image(ColorImage(out, image.bit_depth), args.output, args.format)
    _emit({"output": str(args.output), "prior_source": source,
           "sigma_s": prior.sigma_s, "sigma_r": prior.sigma_r})
    return 0


def cmd_eval(args):
    from .harness import psnr

    pred, gt = load_image(args.pred), load_image(args.gt)
    if type(pred) is not type(gt):
        pred, gt = load_color(args.pred), load_color(args.gt)
    value = psnr(pred, gt)
    print(f"PSNR {value:.4f} dB", file=sys.stderr)
    _emit({"psnr": _finite(value)})
    return 0


def cmd_ablation(args):
    from . import harness
    from .imagery import natural_suite, NATURAL_NAMES

    if args.which == "sweep":
        report = harness.run_estimation_sweep(natural_suite(), seed=args.seed, names=list(NATURAL_NAMES))
        rows = [(tuple(v["prior"]), v["mean_abs_err_s"], v["mean_abs_err_r"])
                for v in report.aggregates.values()]
        _table(rows, ("prior", "mae_sigma_s", "mae_sigma_r"))
    elif args.which == "lonpe":
        report = harness.run_ablation_lonpe(natural_suite(), seed=args.seed, names=list(NATURAL_NAMES))
        rows = [(k, v["mape_s"], v["mape_r"]) for k, v in report.aggregates["table"].items()]
        _table(rows, ("arm", "mape_sigma_s", "mape_sigma_r"))
    else:
        from .condsa import TrainSchedule, make_eval_set

        train, held = conditional_split()
        eval_set = make_eval_set(held, crop=128, per_image=3, seed=args.seed + 123)
        report = harness.run_conditional_ablation(
            train, eval_set, schedule=TrainSchedule(steps=args.steps, seed=args.seed), seed=args.seed)
        _table([(k, v) for k, v in report.aggregates["psnr"].items()], ("arm", "psnr_db"))
    if args.output:
        report.write(args.output)
    _emit(report.aggregates)
    return 0


def conditional_split():
    """Training pool and held-out photographs for the denoising experiments."""
    from .imagery import NATURAL_NAMES, PROCEDURAL_NAMES, natural_color, procedural_color

    held = [n for i, n in enumerate(NATURAL_NAMES) if i % 5 == 4]
    train = [natural_color(n) for n in NATURAL_NAMES if n not in held]
    train += [procedural_color(n, 256, i) for i, n in enumerate(PROCEDURAL_NAMES)]
    return train, [natural_color(n) for n in held]


# -- parser ----------------------------------------------------------------------

def _add_lonpe(p):
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--select-ratio", type=float, default=0.10)
    p.add_argument("--no-smoothness", action="store_true", help="random subset instead of lambda_S ranking")
    p.add_argument("--min-patches", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=0, help="cap BLAS worker threads (0: no cap)")
    common.add_argument("--config", type=Path, help="key = value file; flags override it")

    parser = _Parser(prog="condnoise", description="Noise-prior estimation and conditional denoising.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="add synthetic noise to an image")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--kind", choices=KINDS, default="poisson_gaussian")
    p.add_argument("--sigma-s", type=float)
    p.add_argument("--sigma-r", type=float)
    p.add_argument("--sigma-r-255", type=float, help="read-noise std on the 8-bit scale")
    p.add_argument("--prior", type=_pair, help="sigma_s,sigma_r")
    p.add_argument("--random-prior", action="store_true", help="draw from the training ranges")
    p.add_argument("--sv-map", type=Path, help="per-pixel std map for sv_gaussian")
    p.add_argument("--clip", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--bit-depth", type=int)
    p.add_argument("--format", choices=("float", "pgm8", "pgm16", "ppm8", "ppm16"), default="float")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate", parents=[common], help="estimate the noise prior of an image")
    p.add_argument("input", type=Path)
    _add_lonpe(p)
    p.add_argument("--bit-depth", type=int, help="raw sensor bit depth B")
    p.add_argument("--bayer", choices=("none", "split4"), default="none")
    p.add_argument("--bayer-pattern", choices=("RGGB", "BGGR", "GRBG", "GBRG"), default="RGGB")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("train-denoiser", parents=[common], help="train a micro Condformer")
    p.add_argument("--output", "-o", type=Path, required=True)
    p.add_argument("--images", type=Path, nargs="*", help="training images (default: bundled pool)")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--latent-blocks", type=int, default=2)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--no-condsa", action="store_true")
    p.add_argument("--prior-mode", choices=("true", "zero"), default="true")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train_denoiser)

    p = sub.add_parser("train-prior-net", parents=[common], help="train the learned prior estimator")
    p.add_argument("--output", "-o", type=Path, required=True)
    p.add_argument("--images", type=Path, nargs="*")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--count", type=int, default=2000, help="synthetic training pairs")
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--patches-per-image", type=int, default=8)
    p.set_defaults(func=cmd_train_prior_net)

    p = sub.add_parser("denoise", parents=[common], help="denoise an image with a trained model")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--model", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--prior", type=_pair, help="sigma_s,sigma_r")
    src.add_argument("--prior-from-estimate", action="store_true")
    src.add_argument("--prior-from-net", type=Path, metavar="CHECKPOINT")
    _add_lonpe(p)
    p.add_argument("--format", choices=("float", "ppm8", "ppm16"), default="float")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", parents=[common], help="PSNR between a prediction and ground truth")
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablation", parents=[common], help="run a scripted experiment")
    p.add_argument("which", choices=("sweep", "lonpe", "conditional"))
    p.add_argument("--output", "-o", type=Path, help="report path (JSON; CSV written alongside)")
    p.add_argument("--steps", type=int, default=2000)
    p.set_defaults(func=cmd_ablation)
    return parser


def _apply_config(parser, argv):
    """Feed a ``--config`` file in as defaults of the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    cp = configparser.ConfigParser()
    try:
        text = known.config.read_text()
        if not text.lstrip().startswith("["):
            text = "[DEFAULT]\n" + text
        cp.read_string(text)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from None
    command = next((a for a in argv if not a.startswith("-") and a in _subparsers(parser)), None)
    if command is None:
        return
    subparser = _subparsers(parser)[command]
    values = dict(cp.defaults())
    if cp.has_section(command):
        values.update(cp.items(command))
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or not action.option_strings:
            raise UsageError(f"unknown config key {key!r} for {command}")
        defaults[dest] = _convert(action, raw)
    subparser.set_defaults(**defaults)


def _subparsers(parser):
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices
    return {}


def _convert(action, raw):
    if action.nargs == 0 or isinstance(action, argparse.BooleanOptionalAction):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    conv = action.type or str
    try:
        return conv(raw.strip())
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"bad config value for {action.dest}: {exc}") from None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        with _threads(args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"condnoise {args.command}: {exc}", file=sys.stderr)
        return 2
    except CondNoiseError as exc:
        print(f"condnoise {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"condnoise {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
