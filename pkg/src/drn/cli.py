"""Command-line entry point: ``drn train | upscale | eval | gradcheck | bicubic``.

Exit codes: 0 success, 1 failed gradient check, 2 configuration error,
3 data or image I/O error, 4 non-finite training loss, 5 checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import imaging
from .checkpoint import CheckpointError, load_model, save_checkpoint
from .gradcheck import grad_check_suite
from .metrics import DatasetError, bicubic_upscaler, evaluate, model_upscaler, self_ensemble
from .model import ConfigError, DrnConfig, build_model, init_params
from .training import (AdamState, DataError, NonFiniteLossError, TrainConfig, TrainConfigError,
                       load_dataset, load_train_state, save_train_state, state_path, train)

log = logging.getLogger("drn")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NONFINITE, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5

# RunConfig key -> (target, field name)
RUN_KEYS = {
    "scale": ("model", "scale"),
    "channels": ("model", "base_channels"),
    "groups": ("model", "groups"),
    "blocks": ("model", "blocks_per_group"),
    "rd_units": ("model", "rd_units_per_block"),
    "distill": ("model", "distill_width"),
    "elu_alpha": ("model", "elu_alpha"),
    "per_block_fusion": ("model", "per_block_fusion"),
    "ablate_rdb": ("model", "ablate_rdb"),
    "batch_size": ("train", "batch_size"),
    "patch_size": ("train", "patch_size"),
    "epochs": ("train", "epochs"),
    "steps_per_epoch": ("train", "steps_per_epoch"),
    "base_lr": ("train", "base_lr"),
    "lr_halve_every": ("train", "lr_halve_every"),
    "augment": ("train", "augment"),
    "seed": ("train", "seed"),
}


class UsageError(Exception):
    """Bad command-line or config input; maps to exit code 2."""


def parse_run_config(data: dict, loss: str = "mae") -> tuple[DrnConfig, TrainConfig]:
    """Split a RunConfig document into model and training configs. Unknown
    keys are rejected; missing keys take the dataclass defaults."""
    if not isinstance(data, dict):
        raise UsageError("run config must be a JSON object")
    unknown = sorted(set(data) - set(RUN_KEYS))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    parts = {"model": {}, "train": {"loss": loss}}
    for key, value in data.items():
        target, name = RUN_KEYS[key]
        parts[target][name] = value
    try:
        return DrnConfig(**parts["model"]), TrainConfig(**parts["train"])
    except (ConfigError, TrainConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def read_run_config(path, loss: str = "mae") -> tuple[DrnConfig, TrainConfig]:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_run_config(data, loss)


def _limit_threads():
    value = os.environ.get("DRN_THREADS", "0")
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"DRN_THREADS must be an integer, got {value!r}")
    if n < 0:
        raise UsageError(f"DRN_THREADS must be >= 0, got {n}")
    if n > 0:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=n)
    return None


def _load_model(path, expected_config=None):
    try:
        return load_model(path, expected_config=expected_config)
    except CheckpointError:
        raise
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    model_cfg, train_cfg = read_run_config(args.config, args.loss)
    dataset = load_dataset(args.hr, model_cfg.scale, args.lr)
    out = Path(args.out)
    ckpt_dir = Path(args.ckpt_dir) if args.ckpt_dir else out.parent
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    state = AdamState.from_config(train_cfg)
    start_epoch = 0
    if args.resume:
        model = _load_model(args.resume, model_cfg)
        sidecar = state_path(args.resume)
        if not sidecar.exists():
            raise CheckpointError(f"no optimiser state next to {args.resume} (expected {sidecar})")
        start_epoch = load_train_state(sidecar, model.params, state)
        log.info("resuming at epoch %d, step %d", start_epoch, state.step)
    else:
        model = build_model(model_cfg)
        init_params(model, train_cfg.seed)
    train(model, dataset, train_cfg, state=state, start_epoch=start_epoch,
          ckpt_dir=ckpt_dir, log_file=args.log)
    save_checkpoint(model, out)
    save_train_state(state_path(out), model.params, state, max(start_epoch, train_cfg.epochs))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_upscale(args) -> int:
    model = _load_model(args.ckpt)
    lr = imaging.to_float(imaging.load_png(args.input))
    x = imaging.image_to_tensor(lr, model.dtype)
    y = self_ensemble(model, x) if args.self_ensemble else model(x)
    imaging.save_png(imaging.from_float(imaging.tensor_to_image(y)), args.output)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.ckpt:
        model = _load_model(args.ckpt)
        if model.config.scale != args.scale:
            raise UsageError(f"checkpoint is for x{model.config.scale}, --scale is {args.scale}")
        upscale = model_upscaler(model, args.self_ensemble)
    else:
        upscale = bicubic_upscaler(args.scale)
    try:
        result = evaluate(upscale, args.hr, args.scale, args.lr, plane=args.plane)
    except (DatasetError, imaging.ImageIOError) as exc:
        raise DataError(str(exc)) from exc
    print(result.to_json() if args.json else result.report())
    if result.failures:
        for name, msg in result.failures.items():
            print(f"error: {name}: {msg}", file=sys.stderr)
        return EXIT_DATA
    if not result.images:
        return EXIT_DATA
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = grad_check_suite(args.seed)
    print(report.table())
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_bicubic(args) -> int:
    img = imaging.to_float(imaging.load_png(args.input))
    h, w = img.shape[:2]
    m = args.scale
    if args.down:
        if h % m or w % m:
            raise UsageError(f"image {w}x{h} is not divisible by {m}")
        out = imaging.bicubic_resize(img, w // m, h // m)
    else:
        out = imaging.bicubic_resize(img, w * m, h * m)
    imaging.save_png(imaging.from_float(out), args.output)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drn", description="DRN super-resolution toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a directory of HR images")
    p.add_argument("--config", required=True, help="RunConfig JSON file")
    p.add_argument("--hr", required=True, help="directory of HR PNGs")
    p.add_argument("--lr", help="directory of matching LR PNGs (default: bicubic degradation)")
    p.add_argument("--out", required=True, help="final checkpoint path")
    p.add_argument("--ckpt-dir", help="where ckpt_epoch_<e> files go (default: directory of --out)")
    p.add_argument("--resume", help="checkpoint to continue from; needs its .state.npz sidecar")
    p.add_argument("--log", help="append per-step log lines to this file")
    p.add_argument("--loss", choices=("mae", "mse"), default="mae")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("upscale", help="super-resolve one PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--self-ensemble", action="store_true")
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("eval", help="PSNR/SSIM over a directory of HR PNGs")
    p.add_argument("--hr", required=True)
    p.add_argument("--lr")
    p.add_argument("--scale", type=_positive_int, required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--ckpt")
    source.add_argument("--method", choices=("bicubic",))
    p.add_argument("--self-ensemble", action="store_true")
    p.add_argument("--plane", choices=("y", "rgb"), default="y")
    p.add_argument("--json", action="store_true", help="print JSON instead of the text report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bicubic", help="bicubic up- or down-scaling of one PNG")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--scale", type=_positive_int, required=True)
    p.add_argument("--down", action="store_true")
    p.set_defaults(func=cmd_bicubic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, imaging.ImageIOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
