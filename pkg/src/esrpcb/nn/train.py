"""ADAM training loop for the SR network (MSE loss on [0, 1] images)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .network import Network
from .tensor import ShapeError

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    halve_every: int = 100_000
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        """Learning rate for the next update: halved every ``halve_every`` steps."""
        return self.lr * 0.5 ** (self.t // self.halve_every)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        lr = self.current_lr()
        self.t += 1
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name].astype(np.float64)
            if name not in self.m:
                self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if lr:
                update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                p -= update.astype(p.dtype)


@dataclass(frozen=True)
class TrainPreset:
    lr_patch: int
    batch_size: int
    lr: float
    steps: int
    halve_every: int


PRESETS = {
    "toy": TrainPreset(lr_patch=48, batch_size=4, lr=1e-4, steps=500, halve_every=100_000),
    "paper": TrainPreset(lr_patch=196, batch_size=16, lr=1e-4, steps=300_000, halve_every=100_000),
}


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``."""
    diff = pred.astype(np.float64) - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


def _stack(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray) \
            and batch[0].ndim == 4:
        return batch
    if len(batch) == 0:
        raise ValueError("empty batch")
    lr = np.stack([p.lr_patch if hasattr(p, "lr_patch") else p[0] for p in batch])
    hr = np.stack([p.hr_patch if hasattr(p, "hr_patch") else p[1] for p in batch])
    return lr, hr


def train_step(net: Network, batch, adam: AdamState) -> float:
    """One ADAM update on ``batch``; returns the pre-update MSE loss.

    ``batch`` is a sequence of ``(lr, hr)`` pairs / PatchPairs, or a tuple of
    stacked ``(N,C,h,w)``, ``(N,3,4h,4w)`` arrays.
    """
    lr, hr = _stack(batch)
    if lr.shape[0] == 0:
        raise ValueError("empty batch")
    scale = net.config.scale
    if hr.shape[2] != lr.shape[2] * scale or hr.shape[3] != lr.shape[3] * scale:
        raise ShapeError(f"HR patch {hr.shape[2:]} is not x{scale} of LR patch {lr.shape[2:]}")
    pred, tape = net.forward(lr, record=True)
    loss, grad = mse_loss(pred, hr)
    grads, _ = net.backward(tape, grad)
    adam.step(net.params, grads)
    return loss


def evaluate_loss(net: Network, lr: np.ndarray, hr: np.ndarray) -> float:
    return mse_loss(net.forward(lr), hr)[0]


def fit(net: Network, pairs, steps: int, batch_size: int, adam: AdamState,
        seed: int = 0, log_every: int = 0) -> list[float]:
    """Train on a fixed pool of patch pairs.

    Mini-batches walk a seeded permutation of the pool, so a run is fully
    reproducible for a given seed. Returns the per-step loss history.
    """
    lr_all, hr_all = _stack(pairs)
    n = lr_all.shape[0]
    batch_size = min(batch_size, n)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    cursor = 0
    history = []
    for step in range(steps):
        if cursor + batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        history.append(train_step(net, (lr_all[idx], hr_all[idx]), adam))
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d  loss %.6f  lr %.2e", step + 1, history[-1], adam.current_lr())
    return history
