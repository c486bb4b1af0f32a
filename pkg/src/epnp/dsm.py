"""Denoising score matching for any model exposing ``build_score``.

The network is trained to predict the injected noise ``sigma * z`` from the
perturbed image ``x + sigma * z``; for an :class:`~epnp.energy.EnergyModel`
the prediction is the gradient network ``H``. The loss is the mean over
batch and pixels of ``(H(x~) - sigma z)^2``.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from .diffgraph import Graph
from .numerics import NonFiniteError, as_dtype, gaussian, make_rng

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    sigma: float = 0.01
    lr: float = 1e-3
    lr_final: float | None = None
    optimizer: str = "adam"
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    precision: str = "f32"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.lr <= 0 or (self.lr_final is not None and self.lr_final <= 0):
            raise ValueError("learning rates must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        as_dtype(self.precision)

    def to_dict(self):
        return asdict(self)


def perturb(x, sigma: float, rng: np.random.Generator):
    """Return ``(x + sigma z, sigma z)`` with ``z ~ N(0, I)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(x)
    target = gaussian(x.shape, sigma, rng, dtype=x.dtype)
    return x + target, target


def _loss_graph(model, x_noisy, target):
    g = Graph()
    pred = model.build_score(g, g.constant(x_noisy))
    diff = g.sub(pred, g.constant(target))
    loss = g.scale(g.sum(g.mul(diff, diff)), 1.0 / diff.value.size)
    return g, loss


def dsm_loss(model, x_noisy, target) -> float:
    """Mean squared mismatch between the predicted and the injected noise."""
    x_noisy = np.asarray(x_noisy, dtype=model.dtype)
    target = np.asarray(target, dtype=model.dtype)
    if x_noisy.shape[0] == 0:
        raise ValueError("empty batch")
    if x_noisy.shape != target.shape:
        raise ValueError("x_noisy and target shapes differ")
    return float(_loss_graph(model, x_noisy, target)[1].value)


def dsm_loss_and_grad(model, x_noisy, target) -> float:
    """Loss value; gradients are accumulated into ``model.blocks()``."""
    g, loss = _loss_graph(model, x_noisy, target)
    g.backward(loss)
    return float(loss.value)


class SGD:
    def __init__(self, blocks, lr):
        self.blocks = blocks
        self.lr = lr

    def step(self):
        for b in self.blocks:
            b.value -= (self.lr * b.grad).astype(b.value.dtype)


class Adam:
    def __init__(self, blocks, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.blocks = blocks
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(b.value) for b in blocks]
        self.v = [np.zeros_like(b.value) for b in blocks]

    def step(self):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for b, m, v in zip(self.blocks, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * b.grad
            v *= self.b2
            v += (1 - self.b2) * b.grad**2
            b.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(b.value.dtype)


def make_optimizer(kind, blocks, lr):
    return Adam(blocks, lr) if kind == "adam" else SGD(blocks, lr)


def train(model, dataset, config: TrainConfig, on_epoch=None):
    """Fit ``model`` by DSM; returns ``(trained_model, history)``.

    The input model is left untouched (training runs on a copy cast to the
    configured precision). ``history`` holds one dict per epoch with
    ``epoch``, ``mean_loss`` and ``wall_seconds``. ``on_epoch(epoch, model,
    history)`` is called after each epoch.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    dtype = as_dtype(config.precision)
    model = model.astype(dtype)
    if hasattr(model, "sigma"):
        model.sigma = config.sigma
    blocks = model.blocks()
    opt = make_optimizer(config.optimizer, blocks, config.lr)
    rng = make_rng(config.seed)
    n_steps = config.epochs * -(-len(dataset) // config.batch_size)
    decay = 1.0
    if config.lr_final is not None and n_steps > 1:
        decay = (config.lr_final / config.lr) ** (1.0 / (n_steps - 1))
    history = []
    initial = None
    above = 0
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = dataset.order(epoch)
        losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = dataset.stack(order[lo : lo + config.batch_size], dtype=dtype)
            x_noisy, target = perturb(batch, config.sigma, rng)
            for b in blocks:
                b.zero_grad()
            loss = dsm_loss_and_grad(model, x_noisy, target)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite DSM loss at epoch {epoch}")
            if not all(np.isfinite(b.grad).all() for b in blocks):
                raise NonFiniteError(f"non-finite parameter gradient at epoch {epoch}")
            if initial is None:
                initial = loss
            opt.step()
            opt.lr *= decay
            if hasattr(model, "after_step"):
                model.after_step()
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        history.append({"epoch": epoch, "mean_loss": mean_loss, "wall_seconds": time.perf_counter() - start})
        logger.debug("epoch %d loss %.6g", epoch, mean_loss)
        above = above + 1 if mean_loss > 10 * initial else 0
        if above >= 3:
            raise TrainingDiverged(f"loss above 10x its initial value for 3 epochs (epoch {epoch})")
        if on_epoch is not None:
            on_epoch(epoch, model, history)
    if hasattr(model, "finalize"):
        model.finalize()
    model.metadata = dict(getattr(model, "metadata", {}) or {})
    model.metadata["training"] = {**config.to_dict(), "final_loss": history[-1]["mean_loss"] if history else None}
    return model, history


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "wall_seconds"])
        for row in history:
            w.writerow([row["epoch"], repr(row["mean_loss"]), f"{row['wall_seconds']:.3f}"])
