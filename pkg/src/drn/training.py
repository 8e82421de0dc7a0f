"""Loss, optimiser, patch sampling and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import imaging
from .checkpoint import save_checkpoint
from .model import DRN, ParamStore
from .tensor import TensorShapeError, dihedral

log = logging.getLogger(__name__)


class TrainConfigError(ValueError):
    pass


class DataError(Exception):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


class OptimizerMisuseError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    patch_size: int = 48
    epochs: int = 800
    steps_per_epoch: int = 1000
    base_lr: float = 1e-4
    lr_halve_every: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = False
    seed: int = 0
    loss: str = "mae"

    def __post_init__(self):
        for name in ("batch_size", "patch_size", "epochs", "steps_per_epoch", "lr_halve_every"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise TrainConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if not self.base_lr > 0:
            raise TrainConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.loss not in ("mae", "mse"):
            raise TrainConfigError(f"loss must be 'mae' or 'mse', got {self.loss!r}")

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}


# ---------------------------------------------------------------- loss


def _check_same(pred, target):
    if pred.shape != target.shape:
        raise TensorShapeError(f"prediction {pred.shape} and target {target.shape} differ")


def mae_loss(pred: np.ndarray, target: np.ndarray) -> float:
    _check_same(pred, target)
    return float(np.mean(np.abs(pred.astype(np.float64) - target.astype(np.float64))))


def mae_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    _check_same(pred, target)
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return (np.sign(diff) / diff.size).astype(pred.dtype)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    _check_same(pred, target)
    return float(np.mean((pred.astype(np.float64) - target.astype(np.float64)) ** 2))


def mse_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    _check_same(pred, target)
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return (2.0 * diff / diff.size).astype(pred.dtype)


LOSSES = {"mae": (mae_loss, mae_grad), "mse": (mse_loss, mse_grad)}


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamState":
        return cls(cfg.beta1, cfg.beta2, cfg.eps)


def adam_step(params: ParamStore, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam; moments live in the ParamStore in float64."""
    if not params.grads:
        raise OptimizerMisuseError("adam_step called with no gradients; run backward or zero_grad first")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.params.items():
        g = params.grads[name].astype(np.float64)
        m = params.exp_avg[name]
        v = params.exp_avg_sq[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p[...] = (p.astype(np.float64) - update).astype(p.dtype)


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.base_lr * 0.5 ** (epoch // cfg.lr_halve_every)


# ---------------------------------------------------------------- data


@dataclass
class TrainingPair:
    name: str
    hr: np.ndarray
    lr: np.ndarray


def load_dataset(hr_dir, scale: int, lr_dir=None) -> list[TrainingPair]:
    """HR PNGs cropped to a multiple of ``scale``; LR partners read from
    ``lr_dir`` (same filename) or generated by bicubic degradation."""
    try:
        paths = imaging.list_pngs(hr_dir)
    except imaging.ImageIOError as exc:
        raise DataError(str(exc)) from exc
    if not paths:
        raise DataError(f"no PNG images in {hr_dir}")
    pairs = []
    for path in paths:
        try:
            hr = imaging.crop_to_multiple(imaging.to_float(imaging.load_png(path)), scale)
            if lr_dir is not None:
                lr = imaging.to_float(imaging.load_png(Path(lr_dir) / path.name))
                if lr.shape[0] * scale != hr.shape[0] or lr.shape[1] * scale != hr.shape[1]:
                    raise DataError(f"{path.name}: LR {lr.shape[:2]} is not HR {hr.shape[:2]} / {scale}")
            else:
                lr = imaging.degrade(hr, scale)
        except (imaging.ImageIOError, ValueError) as exc:
            raise DataError(f"{path.name}: {exc}") from exc
        pairs.append(TrainingPair(path.stem, hr, lr))
    return pairs


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Independent stream per optimiser step, so batches do not depend on
    how many steps ran before a resume."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step])))


_warned_small: set = set()


def sample_batch(dataset: list[TrainingPair], scale: int, cfg: TrainConfig, rng: np.random.Generator):
    """Aligned LR/HR patches: the HR corner is always ``scale`` times the LR
    corner. Returns NCHW float32 ``(lr_batch, hr_batch)``."""
    p = cfg.patch_size
    usable = [pair for pair in dataset if pair.lr.shape[0] >= p and pair.lr.shape[1] >= p]
    for pair in dataset:
        if pair.lr.shape[0] < p or pair.lr.shape[1] < p:
            if (pair.name, p) not in _warned_small:
                _warned_small.add((pair.name, p))
                log.warning("skipping %s: smaller than the %d px LR patch", pair.name, p)
    if not usable:
        raise DataError(f"no image admits a {p}x{p} LR patch")
    lr_batch = np.empty((cfg.batch_size, 3, p, p), np.float32)
    hr_batch = np.empty((cfg.batch_size, 3, p * scale, p * scale), np.float32)
    for i in range(cfg.batch_size):
        pair = usable[rng.integers(len(usable))]
        y = int(rng.integers(pair.lr.shape[0] - p + 1))
        x = int(rng.integers(pair.lr.shape[1] - p + 1))
        lr = pair.lr[y:y + p, x:x + p].transpose(2, 0, 1)
        hr = pair.hr[y * scale:(y + p) * scale, x * scale:(x + p) * scale].transpose(2, 0, 1)
        if cfg.augment:
            k = int(rng.integers(8))
            lr, hr = dihedral(lr, k), dihedral(hr, k)
        lr_batch[i] = lr
        hr_batch[i] = hr
    return lr_batch, hr_batch


# ---------------------------------------------------------------- loop


@dataclass
class EpochSummary:
    epoch: int
    mean_loss: float
    seconds: float


@dataclass
class TrainLog:
    lines: list[str] = field(default_factory=list)
    epochs: list[EpochSummary] = field(default_factory=list)


def save_train_state(path, params: ParamStore, state: AdamState, epochs_done: int) -> None:
    """Optimiser sidecar for ``--resume``: Adam moments, step count and the
    number of completed epochs."""
    arrays = {f"m/{n}": params.exp_avg[n] for n in params.params}
    arrays.update({f"v/{n}": params.exp_avg_sq[n] for n in params.params})
    with open(path, "wb") as fh:
        np.savez(fh, step=np.int64(state.step), epochs_done=np.int64(epochs_done), **arrays)


def load_train_state(path, params: ParamStore, state: AdamState) -> int:
    with np.load(path) as data:
        for n in params.params:
            params.exp_avg[n][...] = data[f"m/{n}"]
            params.exp_avg_sq[n][...] = data[f"v/{n}"]
        state.step = int(data["step"])
        return int(data["epochs_done"])


def state_path(ckpt_path) -> Path:
    return Path(f"{ckpt_path}.state.npz")


def train(model: DRN, dataset: list[TrainingPair], cfg: TrainConfig, *,
          state: AdamState | None = None, start_epoch: int = 0,
          ckpt_dir=None, log_file=None) -> TrainLog:
    """Run epochs ``start_epoch .. cfg.epochs - 1``.

    Each step samples a batch, runs forward/backward and one Adam update at
    the epoch's learning rate. Per-step lines go to ``log_file`` and the
    returned log; a checkpoint ``ckpt_epoch_<e>`` (plus optimiser sidecar)
    is written to ``ckpt_dir`` after every epoch.
    """
    if not dataset:
        raise DataError("empty training set")
    state = state or AdamState.from_config(cfg)
    loss_fn, grad_fn = LOSSES[cfg.loss]
    scale = model.config.scale
    out = TrainLog()
    fh = open(log_file, "a") if log_file else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at_epoch(epoch, cfg)
            started = time.perf_counter()
            losses = []
            for _ in range(cfg.steps_per_epoch):
                step = state.step
                lr_batch, hr_batch = sample_batch(dataset, scale, cfg, step_rng(cfg.seed, step))
                model.params.zero_grad()
                pred = model.forward(lr_batch)
                loss = loss_fn(pred, hr_batch)
                if not math.isfinite(loss):
                    raise NonFiniteLossError(step, loss)
                model.backward(grad_fn(pred, hr_batch))
                adam_step(model.params, state, lr)
                losses.append(loss)
                line = f"epoch {epoch} step {step} loss {loss:.9g} lr {lr:.9g}"
                out.lines.append(line)
                if fh:
                    fh.write(line + "\n")
            summary = EpochSummary(epoch, float(np.mean(losses)), time.perf_counter() - started)
            out.epochs.append(summary)
            log.info("epoch %d mean loss %.6f (%.1f s)", epoch, summary.mean_loss, summary.seconds)
            if fh:
                fh.flush()
            if ckpt_dir is not None:
                path = Path(ckpt_dir) / f"ckpt_epoch_{epoch}"
                save_checkpoint(model, path)
                save_train_state(state_path(path), model.params, state, epoch + 1)
    finally:
        if fh:
            fh.close()
    return out
