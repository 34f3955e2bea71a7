"""Self-supervised objectives and the per-task training loop.

Two augmented views of every image are pushed through encoder and
projector; the contrastive loss treats the counterpart view as the
positive and the remaining 2N-2 projections in the batch as negatives,
the regression loss pulls normalized projections together directly.

All randomness flows through explicit generators.  The training loop
derives one child generator per (seed, epoch, batch) so runs are
reproducible batch for batch regardless of how many epochs ran before.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import Model
from .tensor import Tensor


@dataclass
class SslConfig:
    """Hyperparameters of one self-supervised training stage."""

    method: str = "infonce"      # "infonce" | "mse"
    temperature: float = 0.2
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.method not in ("infonce", "mse"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class ViewPair:
    a: np.ndarray
    b: np.ndarray


# -- augmentations -----------------------------------------------------------


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize one CHW image with bilinear sampling at half-pixel centers."""
    c, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[None, :, None]
    wx = (xs - x0).astype(np.float32)[None, None, :]
    p00 = img[:, y0][:, :, x0]
    p01 = img[:, y0][:, :, x1]
    p10 = img[:, y1][:, :, x0]
    p11 = img[:, y1][:, :, x1]
    top = p00 * (1 - wx) + p01 * wx
    bottom = p10 * (1 - wx) + p11 * wx
    return top * (1 - wy) + bottom * wy


def _augment_once(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n, c, h, w = images.shape
    out = np.empty_like(images)
    for i in range(n):
        img = images[i]
        # random resized crop, area scale 0.5..1.0, aspect preserved
        scale = rng.uniform(0.5, 1.0)
        ch = max(1, int(round(h * math.sqrt(scale))))
        cw = max(1, int(round(w * math.sqrt(scale))))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        img = img[:, top:top + ch, left:left + cw]
        if (ch, cw) != (h, w):
            img = _bilinear_resize(img, h, w)
        if rng.random() < 0.5:
            img = img[:, :, ::-1]
        # per-channel brightness and contrast jitter
        bright = rng.uniform(-0.2, 0.2, size=c).astype(np.float32)
        contrast = rng.uniform(-0.2, 0.2, size=c).astype(np.float32)
        means = img.mean(axis=(1, 2), keepdims=True)
        img = (img - means) * (1.0 + contrast[:, None, None]) + means
        img = img + bright[:, None, None]
        img = img + rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def augment_pair(images: np.ndarray, rng: np.random.Generator) -> ViewPair:
    """Two independently augmented views of a batch of NCHW images in [0,1]."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ValueError(f"expected NCHW images, got shape {images.shape}")
    return ViewPair(a=_augment_once(images, rng), b=_augment_once(images, rng))


# -- losses ------------------------------------------------------------------


def info_nce(za: Tensor, zb: Tensor, temperature: float) -> Tensor:
    """Contrastive loss over the 2N projections of two aligned views.

    Rows are L2-normalized, all pairwise cosine similarities are divided
    by the temperature, and each of the 2N anchors pulls its counterpart
    view against the other 2N-2 projections plus the counterpart itself
    (2N-1 denominator terms).  Returns the mean over all anchors; with
    every projection identical and temperature 1 the value is ln(2N-1).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if za.ndim != 2 or zb.ndim != 2 or za.shape != zb.shape:
        raise T.ShapeError(
            f"expected matching (N, d) embeddings, got {za.shape}, {zb.shape}")
    n = za.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 pairs")
    z = T.concat([T.l2_normalize(za, axis=1), T.l2_normalize(zb, axis=1)],
                 axis=0)
    sims = T.matmul(z, z.T) / temperature
    m = 2 * n
    eye = np.eye(m, dtype=sims.dtype)
    not_self = Tensor(1.0 - eye)
    positives = Tensor(np.roll(eye, n, axis=1))  # view i pairs with i +/- N
    # per-row max over the non-self entries keeps exp in range; the shift is
    # a constant, so gradients are exactly those of the unshifted loss
    masked = sims.data.copy()
    np.fill_diagonal(masked, -np.inf)
    shift = Tensor(masked.max(axis=1, keepdims=True))
    shifted = (sims - shift) * not_self  # diagonal pinned to exp(0), then dropped
    denom = (shifted.exp() * not_self).sum(axis=1)
    log_denom = denom.log() + shift.reshape(m)
    pos = (sims * positives).sum(axis=1)
    return (log_denom - pos).mean()


def mse_loss(za: Tensor, zb: Tensor) -> Tensor:
    """Mean squared distance between L2-normalized projections.

    Equals 2 - 2 cos(za_i, zb_i) averaged over the batch, so it is
    bounded by [0, 4].
    """
    if za.ndim != 2 or zb.ndim != 2 or za.shape != zb.shape:
        raise T.ShapeError(
            f"expected matching (N, d) embeddings, got {za.shape}, {zb.shape}")
    try:
        na = T.l2_normalize(za, axis=1)
        nb = T.l2_normalize(zb, axis=1)
    except ValueError as err:
        raise ValueError(f"cannot normalize embeddings: {err}") from err
    diff = na - nb
    return (diff * diff).sum(axis=1).mean()


# -- training loop -----------------------------------------------------------


def _batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((seed, epoch, batch))))


def ssl_train_task(model: Model, dataset, cfg: SslConfig,
                   loss_log: list | None = None) -> Model:
    """Train ``model`` in place on one task's images; returns the model.

    ``dataset`` may be anything with an ``images`` attribute or a plain
    NCHW array.  Only parameters currently marked trainable move; with
    zero epochs or nothing trainable the model stays bitwise unchanged.
    A non-finite loss aborts immediately.
    """
    cfg.validate()
    images = np.asarray(getattr(dataset, "images", dataset), dtype=np.float32)
    if images.ndim != 4:
        raise ValueError(f"expected NCHW images, got shape {images.shape}")
    params = model.trainable_parameters()
    opt = nn.SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                 weight_decay=cfg.weight_decay)
    n = images.shape[0]
    for epoch in range(cfg.epochs):
        order = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((cfg.seed, epoch)))).permutation(n)
        epoch_losses = []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if cfg.method == "infonce" and idx.size < 2:
                continue  # a lone trailing image has no negatives
            rng = _batch_rng(cfg.seed, epoch, bi)
            pair = augment_pair(images[idx], rng)
            _, pa, _ = model.forward(Tensor(pair.a), train=True)
            _, pb, _ = model.forward(Tensor(pair.b), train=True)
            if cfg.method == "infonce":
                loss = info_nce(pa, pb, cfg.temperature)
            else:
                loss = mse_loss(pa, pb)
            value = float(loss.data.reshape(-1)[0])
            if not math.isfinite(value):
                raise FloatingPointError(
                    f"non-finite loss {value} at epoch {epoch} batch {bi} "
                    f"(method={cfg.method}, lr={cfg.lr})")
            epoch_losses.append(value)
            if params and loss.requires_grad:
                opt.zero_grad()
                loss.backward()
                opt.step()
        if loss_log is not None and epoch_losses:
            loss_log.append(float(np.median(epoch_losses)))
    return model
