"""Training loop: balanced batches, augmentation, Adam, validation and checkpoints."""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import grade_head, imageio, metrics
from .backbone import GradingNet
from .balancer import BatchSampler, apply_augmentation
from .config import RunConfig

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "val_loss", "val_kappa", "seconds")


class TrainingAborted(FloatingPointError):
    """Non-finite loss or activations; the message carries epoch and batch."""


class Adam:
    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def load_images(paths, side: int | None = None) -> np.ndarray:
    """Stack images into float32 [n, H, W, 3]; all must share the same size."""
    out = None
    for k, p in enumerate(paths):
        img = imageio.read_image(p)
        if side is not None and img.shape[:2] != (side, side):
            raise imageio.DataError(f"{p}: expected {side}x{side} pixels, got {img.shape[1]}x{img.shape[0]}")
        if out is None:
            out = np.empty((len(paths),) + img.shape, dtype=np.float32)
        elif img.shape != out.shape[1:]:
            raise imageio.DataError(f"{p}: size {img.shape} differs from {out.shape[1:]}")
        out[k] = img
    return out if out is not None else np.empty((0, 0, 0, 3), dtype=np.float32)


def stratified_split(grades, fraction: float, seed: int):
    """Indices (train, validation) with ``round(fraction * n_c)`` validation images per grade."""
    grades = np.asarray(grades)
    rng = np.random.default_rng([seed, 0xA11])
    train, val = [], []
    for c in np.unique(grades):
        idx = np.flatnonzero(grades == c)
        rng.shuffle(idx)
        k = int(round(fraction * len(idx)))
        k = min(k, len(idx) - 1)  # keep every grade in training
        val += idx[:k].tolist()
        train += idx[k:].tolist()
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


def to_nchw(batch: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(batch.transpose(0, 3, 1, 2))


def evaluate(net: GradingNet, images: np.ndarray, grades, alpha: float, batch: int = 64) -> dict:
    out = net.predict_arrays(to_nchw(images), batch)
    p = grade_head.gaussian_probs(out["y_r"], np.maximum(out["sigma2"], grade_head.SIGMA2_FLOOR))
    pred = grade_head.predicted_grade(p)
    grades = np.asarray(grades)
    losses = [grade_head.loss(p[i], grades[i], out["sigma2"][i], alpha) for i in range(len(grades))]
    kappa = metrics.qwk(grades, pred) if metrics.kappa_defined(grades, pred) else None
    return {"loss": float(np.mean(losses)) if losses else float("nan"), "kappa": kappa, "pred": pred,
            "u": grade_head.entropy_uncertainty(p), **out}


@dataclass
class TrainResult:
    net: GradingNet
    log: list = field(default_factory=list)
    best_kappa: float | None = None
    best_epoch: int | None = None
    seconds: float = 0.0
    final_path: str | None = None
    best_path: str | None = None


def train_step(net: GradingNet, opt: Adam, x: np.ndarray, y, alpha: float, where: str = "") -> float:
    """One optimizer step on an NHWC batch; returns the batch loss.

    Any NaN/Inf aborts with ``where`` (e.g. "epoch 3, batch 7") in the message.
    """
    try:
        # overflow surfaces as NonFiniteError from the op that produced it
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            _, _, y_r, sigma2 = net(ad.Tensor(to_nchw(x)))
            loss = grade_head.loss_t(y_r, sigma2, y, alpha)
    except ad.NonFiniteError as exc:
        raise TrainingAborted(f"non-finite value at {where}: {exc}") from exc
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingAborted(f"loss is {value} at {where}")
    net.zero_grad()
    loss.backward()
    opt.step()
    return value


def train(config: RunConfig, images: np.ndarray, grades, out_dir: str | None = None,
          val_images: np.ndarray | None = None, val_grades=None, progress=None) -> TrainResult:
    """Train from in-memory images [n, H, W, 3] in [0, 1].

    Without explicit validation data a stratified ``val_fraction`` split is
    held out.  With ``out_dir`` the loss log, run config, and the final and
    best-validation checkpoints are written there.
    """
    grades = np.asarray(grades, dtype=np.int64)
    if val_images is None and config.val_fraction > 0:
        tr, va = stratified_split(grades, config.val_fraction, config.seed)
        val_images, val_grades = images[va], grades[va]
        images, grades = images[tr], grades[tr]
    dtype = np.float32 if config.dtype == "float32" else np.float64
    images = images.astype(dtype, copy=False)
    net = GradingNet(config.backbone(), seed=config.seed).cast(dtype)
    opt = Adam(net.parameters(), config.lr, config.beta1, config.beta2, config.adam_eps)
    sampler = BatchSampler(grades, config.schedule(), config.batch_size, config.seed, config.policy(),
                           config.rounding)
    steps = config.steps_per_epoch or max(1, len(grades) // config.batch_size)
    digest = config.digest()
    result = TrainResult(net)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        config.save(os.path.join(out_dir, "run_config.txt"))
        result.final_path = os.path.join(out_dir, "final.ckpt")
        result.best_path = os.path.join(out_dir, "best.ckpt")
    best_score = None
    start = time.perf_counter()
    net.train()
    with ad.compute_dtype(dtype):
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            total = 0.0
            for k in range(steps):
                batch = sampler.batch(epoch, k)
                x = np.stack([apply_augmentation(images[i], aug) for i, aug in batch])
                y = grades[[i for i, _ in batch]]
                total += train_step(net, opt, x, y, config.alpha, f"epoch {epoch}, batch {k}")
            row = {"epoch": epoch, "train_loss": total / steps, "val_loss": None, "val_kappa": None,
                   "seconds": time.perf_counter() - t0}
            if val_images is not None and len(val_images):
                ev = evaluate(net, val_images, val_grades, config.alpha, config.eval_batch)
                net.train()
                row["val_loss"], row["val_kappa"] = ev["loss"], ev["kappa"]
                # rank by kappa, then by lower loss (kappa is undefined on degenerate splits)
                score = (-np.inf if ev["kappa"] is None else ev["kappa"], -ev["loss"])
                if best_score is None or score > best_score:
                    best_score = score
                    result.best_kappa, result.best_epoch = ev["kappa"], epoch
                    if result.best_path:
                        net.save(result.best_path)
            result.log.append(row)
            if out_dir:
                imageio.write_csv(os.path.join(out_dir, "loss_log.csv"), LOG_FIELDS, result.log,
                                  comment=f"config_digest={digest}")
            log.info("epoch %d loss %.4f val_kappa %s (%.1fs)", epoch, row["train_loss"], row["val_kappa"],
                     row["seconds"])
            if progress:
                progress(row)
    net.eval()
    result.seconds = time.perf_counter() - start
    if result.final_path:
        net.save(result.final_path)
    return result
