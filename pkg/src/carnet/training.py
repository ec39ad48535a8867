"""Loss, optimizer, augmentation and the epoch loop.

The loss is binary cross-entropy averaged over pixels.  Training back-propagates
the fused sigmoid + BCE gradient ``(p - y) / count`` straight into the logits.
Adam works on the model's flat parameter buffer in one vectorized pass.
"""
from __future__ import annotations

import csv
import logging
import os
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import kernels
from .checkpoint import save_checkpoint
from .data import DataError, Sample, stack_samples
from .evaluation import evaluate, predict_pairs
from .layers import NumericError
from .tensor import DTYPE, Rng

log = logging.getLogger(__name__)

CLAMP = 1e-7


class UsageError(ValueError):
    """An operation was applied where the protocol forbids it."""


# -- loss --------------------------------------------------------------------------

def _check_target(p, y):
    if p.shape != y.shape:
        raise ValueError(f"bce: prediction shape {p.shape} != target shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("bce: target contains values other than 0 and 1")


def bce_loss(p, y):
    """Mean binary cross-entropy and its gradient with respect to ``p``.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]``; the loss is accumulated in float64.
    """
    p = np.asarray(p)
    y = np.asarray(y)
    _check_target(p, y)
    count = p.size
    pc = np.clip(p.astype(np.float64), CLAMP, 1.0 - CLAMP)
    yd = y.astype(np.float64)
    loss = -(yd * np.log(pc) + (1.0 - yd) * np.log1p(-pc)).sum() / count
    grad = (pc - yd) / (pc * (1.0 - pc)) / count
    return float(loss), grad.astype(p.dtype if p.dtype.kind == "f" else np.float64, copy=False)


def bce_logits_grad(p, y):
    """Gradient of the mean BCE with respect to the logits of a sigmoid head."""
    _check_target(p, y)
    g = np.subtract(p, y, dtype=p.dtype)
    g *= p.dtype.type(1.0 / p.size)
    return g


# -- optimizer ----------------------------------------------------------------------

@dataclass
class AdamConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, m, v, t: int, cfg: AdamConfig = AdamConfig()):
    """One bias-corrected Adam update, in place on flat float32 arrays."""
    if t < 1:
        raise ValueError(f"Adam step counter must be >= 1, got {t}")
    if not np.isfinite(grads).all():
        raise NumericError("parameter")
    kernels.adam_update(params, grads, m, v, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, t)


class Adam:
    """Adam over a module's flat parameter buffer."""

    def __init__(self, model, cfg: AdamConfig = AdamConfig()):
        self.model = model
        self.cfg = cfg
        self.params, self.grads = model.flatten_parameters()
        self.m = np.zeros_like(self.params)
        self.v = np.zeros_like(self.params)
        self.t = 0
        self._spans = []
        off = 0
        for name, p in model.named_parameters():
            self._spans.append((name, off, off + p.size))
            off += p.size

    def offending_layer(self) -> str:
        for name, a, b in self._spans:
            if not np.isfinite(self.grads[a:b]).all():
                return name
        return "unknown"

    def step(self):
        if not np.isfinite(self.grads).all():
            raise NumericError(self.offending_layer())
        self.t += 1
        kernels.adam_update(self.params, self.grads, self.m, self.v, self.cfg.lr,
                            self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.t)

    def load_state(self, m, v, t):
        self.m[...] = m
        self.v[...] = v
        self.t = int(t)


# -- augmentation ---------------------------------------------------------------------

def rot180(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a[..., ::-1, ::-1])


def hflip(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a[..., ::-1])


def augment(samples, rng: Rng, split: str = "train", noise_std: float = 0.01) -> list[Sample]:
    """Originals, their 180-degree rotations, and horizontal flips of both (4x).

    The flipped originals additionally receive zero-mean Gaussian noise
    (clamped to [0, 1]); masks are never noised.
    """
    if split != "train":
        raise UsageError(f"augmentation is only allowed on the training split, not {split!r}")
    samples = list(samples)
    orig, rot, flip, fliprot = [], [], [], []
    for s in samples:
        orig.append(s)
        rot.append(Sample(f"{s.id}@rot180", rot180(s.image), rot180(s.mask)))
        img = hflip(s.image)
        noise = rng.normal(img.size).reshape(img.shape) * noise_std
        img = np.clip(img + noise, 0.0, 1.0).astype(DTYPE)
        flip.append(Sample(f"{s.id}@hflip", img, hflip(s.mask)))
        fliprot.append(Sample(f"{s.id}@rot180+hflip", hflip(rot[-1].image), hflip(rot[-1].mask)))
    return orig + rot + flip + fliprot


# -- training loop --------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 2
    epochs: int = 30
    seed: int = 7
    checkpoint_every: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augmentation: bool = True
    deterministic: bool = True
    save_moments: bool = True

    def validate(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")

    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ods: float | None = None
    ois: float | None = None
    seconds: float = 0.0


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    final: Path | None = None
    seconds: float = 0.0


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def train(model, train_samples, test_samples, cfg: TrainConfig, out_dir) -> TrainResult:
    """Seeded mini-batch training with periodic checkpoint + evaluation.

    Writes ``ckpt_epochNNN.cnet`` every ``checkpoint_every`` epochs,
    ``final.cnet`` at the end, and ``log.csv`` with one row per epoch (ODS/OIS
    filled in on evaluation epochs).  The model must already be initialized.
    """
    cfg.validate()
    train_samples = list(train_samples)
    test_samples = list(test_samples)
    if not train_samples:
        raise DataError("training split is empty")
    size = tuple(model.cfg.input_size)
    for s in train_samples + test_samples:
        if s.image.shape[1:] != s.mask.shape:
            raise DataError(f"{s.id}: image size {s.image.shape[1:]} != mask size {s.mask.shape}")
        if s.size != size:
            raise DataError(f"{s.id}: size {s.size} does not match model input size {size}")
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)

    rng = Rng(cfg.seed).stream(1)  # data stream, independent of weight init
    if cfg.augmentation:
        train_samples = augment(train_samples, rng)
    x_all, y_all = stack_samples(train_samples)
    n = len(x_all)
    opt = Adam(model, cfg.adam())
    model.train()
    result = TrainResult()
    log_path = out / "log.csv"
    limiter = threadpool_limits(limits=1) if cfg.deterministic else nullcontext()
    t_start = time.perf_counter()
    with limiter, open(log_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "loss", "ods", "ois"])
        fh.flush()
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            perm = rng.permutation(n)
            total, batches = 0.0, 0
            for b in range(0, n, cfg.batch_size):
                idx = perm[b:b + cfg.batch_size]
                x, y = x_all[idx], y_all[idx]
                p = model.forward(x)
                loss = _loss_only(p, y)
                model.zero_grad()
                # masks were validated on load, so skip the per-step target check
                g = np.subtract(p, y, dtype=p.dtype)
                g *= p.dtype.type(1.0 / p.size)
                model.backward_logits(g)
                opt.step()
                total += loss
                batches += 1
            rec = EpochRecord(epoch, total / batches)
            if epoch % cfg.checkpoint_every == 0:
                path = out / f"ckpt_epoch{epoch:03d}.cnet"
                save_checkpoint(path, model, epoch, opt.t, (opt.m, opt.v) if cfg.save_moments else None)
                result.checkpoints.append(path)
                if test_samples:
                    rep = evaluate(predict_pairs(model, test_samples))
                    rec.ods, rec.ois = rep.ods, rep.ois
            rec.seconds = time.perf_counter() - t0
            result.history.append(rec)
            wr.writerow([epoch, f"{rec.loss:.6f}", _fmt(rec.ods), _fmt(rec.ois)])
            fh.flush()
            log.info("epoch %d loss %.5f%s (%.1fs)", epoch, rec.loss,
                     "" if rec.ods is None else f" ods {rec.ods:.4f} ois {rec.ois:.4f}", rec.seconds)
        final = out / "final.cnet"
        save_checkpoint(final, model, cfg.epochs, opt.t, (opt.m, opt.v) if cfg.save_moments else None)
    result.final = final
    result.seconds = time.perf_counter() - t_start
    return result


def _loss_only(p, y) -> float:
    pc = np.clip(p.astype(np.float64), CLAMP, 1.0 - CLAMP)
    yd = y.astype(np.float64)
    return float(-(yd * np.log(pc) + (1.0 - yd) * np.log1p(-pc)).mean())


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
