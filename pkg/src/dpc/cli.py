"""Command-line entry points: train, sweep, compress, decompress, eval.

Exit codes: 0 success, 1 usage error, 2 data or format error (including a
partially successful eval).
"""

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import fields, replace

import numpy as np

from . import codecnet, pipeline
from .data import list_images, load_patch_dataset
from .entropy.container import ContainerError, ModelMismatchError
from .entropy.rangecoder import DecodeError
from .fileutil import atomic_write
from .imageio import ImageFormatError, read_image, to_float, to_uint8, write_image
from .metrics import ImageMetrics, MetricsReport, default_feature_net, dpl, load_lpips_weights, ms_ssim, psnr
from .quantize import SymbolError
from .tensor import ConfigurationError, DimensionError
from .train import TrainConfig, sweep_rd_points, train
from .weights import FormatError

logger = logging.getLogger("dpc")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
DATA_ERRORS = (
    ContainerError,
    DecodeError,
    FormatError,
    ImageFormatError,
    DimensionError,
    SymbolError,
    ConfigurationError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_training_flags(p):
    d = TrainConfig()
    c = codecnet.CodecConfig()
    p.add_argument("--data-dir", required=True, help="directory of training images")
    p.add_argument("--patches", type=int, default=1000, help="number of random patches (default 1000)")
    p.add_argument("--patch-size", type=int, default=d.patch_size)
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--lmbda", "--lambda", dest="lmbda", type=float, default=d.lmbda)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--decay-factor", type=float, default=d.decay_factor)
    p.add_argument("--decay-every-epochs", type=int, default=d.decay_every_epochs)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--grad-clip", type=float, default=d.grad_clip)
    p.add_argument("--soft-quantization", action="store_true")
    p.add_argument("--sigma", type=float, default=d.sigma)
    p.add_argument("--K", type=int, default=c.K, help="latent channels")
    p.add_argument("--residual-blocks", type=int, default=c.residual_blocks)
    p.add_argument("--base-channels", type=int, default=c.base_channels)
    p.add_argument("--lpips-weights", help="feature-net weights file for the perceptual loss")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser():
    parser = _Parser(prog="dpc", description="Learned image codec with a deep perceptual loss.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model")
    _add_training_flags(p)
    p.add_argument("--target-bpp", type=float, default=TrainConfig().target_bpp)
    p.add_argument("--output", required=True, help="weights file to write")
    p.add_argument("--log", help="line-delimited JSON training log")
    p.add_argument("--checkpoint-dir", help="write a checkpoint after every epoch")

    p = sub.add_parser("sweep", help="train one model per target bit-rate")
    _add_training_flags(p)
    p.add_argument("--targets", type=float, nargs="+", default=[0.23, 0.37, 0.67, 1.0])
    p.add_argument("--betas", type=float, nargs="+", help="one rate weight per target")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--eval-dir", help="evaluate each model on this directory")
    p.add_argument(
        "--finetune-epochs",
        type=int,
        default=0,
        help="train one base model at the highest target, then fine-tune it for this many epochs per target (0: independent runs)",
    )

    p = sub.add_parser("compress", help="image -> .dpc container")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--force", action="store_true", help="overwrite an existing output")

    p = sub.add_parser("decompress", help=".dpc container -> image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument(
        "--force", action="store_true", help="overwrite an existing output and decode despite a model mismatch"
    )

    p = sub.add_parser("eval", help="per-image metrics CSV over a directory")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--lpips-weights")
    p.add_argument("--force", action="store_true", help="overwrite an existing CSV")
    return parser


def _effective(args):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "verbose"}
    print("effective config: " + json.dumps(cfg, sort_keys=True), flush=True)


def _need_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _need_dir(path, what):
    if not os.path.isdir(path):
        raise UsageError(f"{what} not found: {path}")


def _check_output(path, force):
    if os.path.exists(path) and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _feature_net(path):
    if path is None:
        return default_feature_net()
    _need_file(path, "feature-net weights")
    return load_lpips_weights(path)


def _train_config(args, target):
    names = {f.name for f in fields(TrainConfig)}
    values = {k: v for k, v in vars(args).items() if k in names}
    values["target_bpp"] = target
    try:
        return TrainConfig(**values), codecnet.CodecConfig(
            K=args.K, residual_blocks=args.residual_blocks, base_channels=args.base_channels
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _dataset(args, config):
    _need_dir(args.data_dir, "dataset directory")
    return load_patch_dataset(args.data_dir, args.patches, config.patch_size, seed=config.seed)


def cmd_train(args):
    config, codec_config = _train_config(args, args.target_bpp)
    _check_output(args.output, args.force)
    net, w = _feature_net(args.lpips_weights)
    data = _dataset(args, config)
    params, log = train(data, config, codec_config, log_path=args.log, checkpoint_dir=args.checkpoint_dir, net=net, w=w)
    codecnet.save_model(params, args.output)
    last = [r for r in log if r["epoch"] == config.epochs - 1]
    print(f"trained {len(log)} steps; last epoch mean R {np.mean([r['R_bpp'] for r in last]):.4f} bpp")
    print(f"wrote {args.output}")
    return EXIT_OK


def evaluate_directory(params, directory, net=None, w=None):
    """Compress and reconstruct every image in ``directory``; returns ``(report, skipped paths)``."""
    if net is None:
        net, w = default_feature_net()
    report, skipped = MetricsReport(), []
    for path in list_images(directory):
        try:
            x = to_float(read_image(path))
        except (ImageFormatError, OSError) as exc:
            logger.warning("skipping %s: %s", path, exc)
            skipped.append(path)
            continue
        packed = pipeline.compress_array(x, params)
        x_hat = to_float(to_uint8(pipeline.decompress_bytes(packed.data, params)))
        try:
            quality = ms_ssim(x, x_hat)
        except DimensionError as exc:
            logger.warning("skipping %s: %s", path, exc)
            skipped.append(path)
            continue
        report.rows.append(
            ImageMetrics(os.path.basename(path), packed.bpp, psnr(x, x_hat), quality, dpl(x, x_hat, net, w))
        )
    return report, skipped


def cmd_sweep(args):
    if args.betas and len(args.betas) != len(args.targets):
        raise UsageError(f"{len(args.betas)} betas given for {len(args.targets)} targets")
    template, codec_config = _train_config(args, args.targets[0])
    if args.eval_dir:
        _need_dir(args.eval_dir, "evaluation directory")
    net, w = _feature_net(args.lpips_weights)
    data = _dataset(args, template)
    os.makedirs(args.output_dir, exist_ok=True)
    outputs = [os.path.join(args.output_dir, f"model_t{t:g}.dpcw") for t in args.targets]
    for path in outputs:
        _check_output(path, args.force)
    if args.finetune_epochs < 0:
        raise UsageError(f"--finetune-epochs must be >= 0, got {args.finetune_epochs}")
    finetune = replace(template, epochs=args.finetune_epochs) if args.finetune_epochs else None
    status = EXIT_OK
    results = sweep_rd_points(data, template, args.targets, codec_config, args.betas, net=net, w=w, finetune=finetune)
    for (t, params, _), path in zip(results, outputs):
        codecnet.save_model(params, path)
        print(f"t={t:g}: wrote {path}")
        if args.eval_dir:
            report, skipped = evaluate_directory(params, args.eval_dir, net, w)
            csv_path = os.path.splitext(path)[0] + ".csv"
            report.write_csv(csv_path)
            m = report.mean()
            print(f"t={t:g}: bpp {m.bpp:.4f} psnr {m.psnr_db:.2f} ms_ssim {m.ms_ssim:.4f} dpl {m.dpl:.5f} -> {csv_path}")
            status = EXIT_DATA if skipped else status
    return status


def _load_model(path):
    _need_file(path, "model")
    return codecnet.load_model(path)


def cmd_compress(args):
    params = _load_model(args.model)
    _need_file(args.input, "input image")
    _check_output(args.output, args.force)
    packed = pipeline.compress_array(to_float(read_image(args.input)), params)
    atomic_write(args.output, packed.data)
    h = packed.header
    print(
        f"{h.orig_width}x{h.orig_height}: {len(packed.data)} bytes "
        f"(mask {packed.mask_bytes}, symbols {packed.payload_bytes}), {packed.bpp:.4f} bpp"
    )
    return EXIT_OK


def cmd_decompress(args):
    params = _load_model(args.model)
    _need_file(args.input, "container")
    _check_output(args.output, args.force)
    with open(args.input, "rb") as fh:
        data = fh.read()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        image = pipeline.decompress_bytes(data, params, force=args.force)
    for wmsg in caught:
        print(f"warning: {wmsg.message}", file=sys.stderr)
    write_image(args.output, to_uint8(image))
    print(f"wrote {args.output} ({image.shape[2]}x{image.shape[1]})")
    return EXIT_OK


def cmd_eval(args):
    params = _load_model(args.model)
    _need_dir(args.dataset_dir, "dataset directory")
    _check_output(args.out_csv, args.force)
    net, w = _feature_net(args.lpips_weights)
    report, skipped = evaluate_directory(params, args.dataset_dir, net, w)
    report.write_csv(args.out_csv)
    m = report.mean()
    print(f"{len(report.rows)} images: bpp {m.bpp:.4f} psnr {m.psnr_db:.2f} ms_ssim {m.ms_ssim:.4f} dpl {m.dpl:.5f}")
    if skipped:
        print(f"warning: skipped {len(skipped)} unreadable image(s)", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "eval": cmd_eval,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _effective(args)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelMismatchError as exc:
        print(f"error: {exc}; pass --force to decode anyway", file=sys.stderr)
        return EXIT_DATA
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
