"""``dcae`` command line: encode, decode, inspect, train, eval.

Output on stdout is ``key=value`` lines. Failures print one diagnostic line
on stderr and exit with 2 (usage), 3 (format or corruption) or 4 (numeric
integrity).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import codec
from .errors import (
    ConfigurationError,
    CorruptContainerError,
    CorruptStreamError,
    DimensionError,
    IntegrityError,
    MetricUndefinedError,
    UnsupportedFormatError,
)
from .formats import load_model, read_container, read_ppm, save_model, write_pgm, write_ppm
from .metrics import RdCurve, bd_rate, bpp, psnr
from .model import CUSTOM_LAMBDA_INDEX, LAMBDAS, DcaeModel, lambda_index, profile_config
from .training import TrainingConfig, synth_dataset, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_INTEGRITY = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # one diagnostic line: the message followed by the collapsed usage string
        raise UsageError(f"{message}; {' '.join(self.format_usage().split())}")


def _read_bytes(path, what):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror or exc}") from None


def _write_bytes(path, data):
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror or exc}") from None


def _emit(**fields):
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.6f}"
        print(f"{key}={value}")


def _dump_latent(path, symbols):
    """Debug aid with an unstable layout: one line of space-separated ints per slice."""
    lines = [" ".join(str(int(v)) for v in s.reshape(-1)) for s in symbols]
    _write_bytes(path, ("\n".join(lines) + "\n").encode())


def cmd_encode(args):
    image = read_ppm(_read_bytes(args.input, "input"))
    model = load_model(_read_bytes(args.model, "model"))
    if args.lambda_index is not None:
        if not (0 <= args.lambda_index < len(LAMBDAS) or args.lambda_index == CUSTOM_LAMBDA_INDEX):
            raise UsageError(f"--lambda-index must be 0..{len(LAMBDAS) - 1} or {CUSTOM_LAMBDA_INDEX}")
        own = lambda_index(model.config.lmbda)
        if args.lambda_index != own:
            raise ConfigurationError(
                f"model was trained for lambda {model.config.lmbda} (index {own}), not index {args.lambda_index}"
            )
    result = codec.compress(model, image)
    _write_bytes(args.output, result.container)
    h, w = image.shape[:2]
    _emit(width=w, height=h, bytes=len(result.container), bpp=bpp(len(result.container), w, h))
    for r in result.reports:
        print(
            f"stream={r.name} symbols={r.count} ideal_bits={r.ideal_q:.3f} "
            f"model_bits={r.ideal_true:.3f} actual_bits={r.actual}"
        )
    if args.dump_latent:
        _dump_latent(args.dump_latent, result.slice_symbols)
    return EXIT_OK


def cmd_decode(args):
    data = _read_bytes(args.input, "input")
    model = load_model(_read_bytes(args.model, "model"))
    reference = read_ppm(_read_bytes(args.reference, "reference")) if args.reference else None
    result = codec.decompress(model, data)
    _write_bytes(args.output, write_ppm(result.image))
    _emit(width=result.header.width, height=result.header.height)
    if reference is not None:
        _emit(psnr=psnr(reference, result.image))
    if args.dump_latent:
        _dump_latent(args.dump_latent, result.slice_symbols)
    return EXIT_OK


def cmd_inspect(args):
    if (args.input is None) == (args.model is None):
        raise UsageError("give exactly one of --input or --model")
    if args.attn and args.model is None:
        raise UsageError("--attn needs --model")
    if args.input is not None:
        header, _, _ = read_container(_read_bytes(args.input, "input"))
        _emit(
            kind="container",
            version=header.version,
            profile_id=header.profile_id,
            lambda_index=header.lambda_index,
            width=header.width,
            height=header.height,
            slice_count=header.slice_count,
            z_stream_len=header.z_stream_len,
            slice_stream_lens=",".join(str(n) for n in header.slice_stream_lens),
        )
        return EXIT_OK

    model = load_model(_read_bytes(args.model, "model"))
    cfg = model.config
    ent = cfg.entropy
    _emit(
        kind="model",
        profile=cfg.autoencoder.profile_name,
        lmbda=repr(cfg.lmbda),
        y_channels=cfg.autoencoder.y_channels,
        z_channels=cfg.autoencoder.z_channels,
        slice_count=ent.slice_count,
        N=ent.n_entries,
        C_d=ent.dict_channels,
        heads=ent.heads,
        msfa_layers=ent.msfa_layers,
        use_dca=int(ent.use_dca),
        parameters=sum(p.data.size for p in model.parameters()),
    )
    if args.attn:
        image_path, slice_arg, entry_arg = args.attn
        try:
            slice_index, entry = int(slice_arg), int(entry_arg)
        except ValueError:
            raise UsageError("--attn needs IMAGE SLICE ENTRY with integer SLICE and ENTRY") from None
        if not ent.use_dca:
            raise UsageError("model was trained without dictionary attention")
        if not 0 <= slice_index < ent.slice_count:
            raise UsageError(f"slice {slice_index} out of range 0..{ent.slice_count - 1}")
        if not 0 <= entry < ent.n_entries:
            raise UsageError(f"entry {entry} out of range 0..{ent.n_entries - 1}")
        image = read_ppm(_read_bytes(image_path, "image"))
        amap = codec.export_attention_map(model, image, slice_index, entry)
        out = args.output or f"attn_s{slice_index}_e{entry}.pgm"
        _write_bytes(out, write_pgm(amap))
        _emit(attention_map=out, map_width=amap.shape[1], map_height=amap.shape[0])
    return EXIT_OK


def _load_corpus(directory):
    paths = sorted(Path(directory).glob("*.ppm"))
    if not paths:
        raise UsageError(f"no .ppm files in {directory}")
    return paths, [read_ppm(_read_bytes(p, "image")) for p in paths]


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("DCAE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"DCAE_SEED must be an integer, got {env!r}") from None


def cmd_train(args):
    if not args.lmbda > 0:
        raise UsageError("--lambda must be positive")
    if args.steps < 1:
        raise UsageError("--steps must be at least 1")
    seed = _seed(args)
    overrides = {}
    if args.no_dca:
        overrides["use_dca"] = False
    if args.msfa_layers is not None:
        overrides["msfa_layers"] = args.msfa_layers
    cfg = profile_config(args.profile, args.lmbda, **overrides)
    if args.corpus:
        _, images = _load_corpus(args.corpus)
        if len({im.shape for im in images}) != 1:
            raise UsageError("training images must share one size")
        images = np.stack(images)
    else:
        images = synth_dataset("periodic-texture", args.images, (args.size, args.size), seed=seed)
    model = DcaeModel(cfg, seed=seed)
    tcfg = TrainingConfig(
        lmbda=args.lmbda, lr=args.lr, lr_final=args.lr / 10, batch=args.batch, steps=args.steps, seed=seed
    )
    log_file = open(args.log, "w") if args.log else None
    try:
        def log(line):
            if log_file:
                log_file.write(line + "\n")
            else:
                print(line, file=sys.stderr)

        history = train(model, images, tcfg, log=log)
    finally:
        if log_file:
            log_file.close()
    _write_bytes(args.out, save_model(model))
    _emit(steps=len(history), initial_loss=history[0].total, final_loss=history[-1].total, archive=args.out)
    return EXIT_OK


def cmd_eval(args):
    if (args.curves is None) == (args.corpus is None):
        raise UsageError("give exactly one of --curves or --corpus")
    if args.curves:
        if not args.bdrate:
            raise UsageError("--curves needs --bdrate")
        curves = []
        for path in args.curves:
            try:
                curves.append(RdCurve.from_csv(_read_bytes(path, "curve").decode()))
            except (ValueError, UnicodeDecodeError) as exc:
                if isinstance(exc, MetricUndefinedError):
                    raise
                raise UnsupportedFormatError(f"{path}: {exc}") from None
        value = bd_rate(*curves)
        print(f"bd_rate={value:+.2f}%")
        return EXIT_OK

    if args.model is None:
        raise UsageError("--corpus needs --model")
    model = load_model(_read_bytes(args.model, "model"))
    paths, images = _load_corpus(args.corpus)
    rates, qualities = [], []
    for path, image in zip(paths, images):
        data = codec.compress(model, image).container
        rec = codec.decompress(model, data).image
        h, w = image.shape[:2]
        rate, quality = bpp(len(data), w, h), psnr(image, rec)
        rates.append(rate)
        qualities.append(quality)
        print(f"image={path.name} bpp={rate:.6f} psnr={quality:.4f}")
    _emit(images=len(images), mean_bpp=float(np.mean(rates)), mean_psnr=float(np.mean(qualities)))
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="dcae", description="Learned image codec with a dictionary cross-attention prior.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("encode", help="compress a PPM image")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--lambda-index", type=int)
    p.add_argument("--dump-latent", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct a PPM image")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--reference", help="original PPM; prints PSNR")
    p.add_argument("--dump-latent", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("inspect", help="print container or model fields")
    p.add_argument("--input")
    p.add_argument("--model")
    p.add_argument("--attn", nargs=3, metavar=("IMAGE", "SLICE", "ENTRY"))
    p.add_argument("--output", help="PGM path for --attn")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="train a model archive")
    p.add_argument("--profile", default="tiny")
    p.add_argument("--lambda", dest="lmbda", type=float, default=0.0130)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="loss log file (default: stderr)")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--corpus", help="directory of same-size PPMs; default is a synthetic texture corpus")
    p.add_argument("--images", type=int, default=64, help="synthetic corpus size")
    p.add_argument("--size", type=int, default=64, help="synthetic image side")
    p.add_argument("--no-dca", action="store_true")
    p.add_argument("--msfa-layers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="BD-rate between curves or RD points of a corpus")
    p.add_argument("--curves", nargs=2, metavar=("ANCHOR", "TEST"))
    p.add_argument("--bdrate", action="store_true")
    p.add_argument("--corpus")
    p.add_argument("--model")
    p.set_defaults(func=cmd_eval)
    return parser


_FORMAT_ERRORS = (
    CorruptContainerError,
    CorruptStreamError,
    UnsupportedFormatError,
    ConfigurationError,
    MetricUndefinedError,
    DimensionError,
)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"dcae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"dcae: integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except _FORMAT_ERRORS as exc:
        print(f"dcae: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
