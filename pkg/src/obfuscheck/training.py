"""Standard and fast adversarial training.

Adversarial batches are crafted with a single signed-gradient step from a
random start inside the training epsilon box (fast adversarial training),
after a few clean warm-up epochs.  Noise-injection scales train jointly with
the weights and are clamped to stay non-negative after every optimizer step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import project, random_init
from .autodiff import Tensor
from .errors import TrainingError
from .models import Network
from .rng import derive_rng

# step-size pairing for fast adversarial training: step = 1.25 * epsilon
# (2.5/255 for eps 2/255, 5/255 for eps 4/255)
STEP_EPSILON_RATIO = 1.25


def default_train_step(epsilon: float) -> float:
    return STEP_EPSILON_RATIO * epsilon


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    schedule: str = "cosine"  # or "constant"
    momentum: float = 0.9
    adversarial: bool = False
    train_epsilon: float = 0.0
    train_step_size: float | None = None
    warmup_epochs: int = 5
    # craft perturbations through a noisy forward (defense active while
    # crafting) or against the noise-free mean network; noisy crafting
    # weakens the training signal on small models
    craft_noise: bool = True
    alpha_lr_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.adversarial:
            if self.train_epsilon < 0:
                raise ValueError("train_epsilon must be >= 0")
            if self.train_step_size is None:
                self.train_step_size = default_train_step(self.train_epsilon)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # dicts: epoch, clean_acc, loss, mean_alpha
    config: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "clean_acc", "loss", "mean_alpha"])
            for rec in self.epochs:
                w.writerow([rec["epoch"], f"{rec['clean_acc']:.6f}",
                            f"{rec['loss']:.6f}", f"{rec['mean_alpha']:.6f}"])


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))


def _mean_alpha(model: Network) -> float:
    names = model.alpha_names()
    if not names:
        return 0.0
    vals = np.concatenate([model.params[n].data.reshape(-1) for n in names])
    return float(vals.mean())


def _clean_train_accuracy(model: Network, X, y, batch_size=256) -> float:
    correct = 0
    for i in range(0, len(X), batch_size):
        pred = model.predict(X[i:i + batch_size])
        correct += int(np.sum(pred == y[i:i + batch_size]))
    return correct / len(X)


def train(model: Network, dataset, cfg: TrainConfig) -> TrainLog:
    """SGD with momentum over minibatches; deterministic given (cfg, seed).

    ``dataset`` needs train_x/train_y.  Mutates the model in place and
    returns the per-epoch log.
    """
    X, y = dataset.train_x, dataset.train_y
    if len(X) == 0:
        raise ValueError("empty training set")
    trainable = sorted(n for n, p in model.params.items() if p.requires_grad)
    alpha_names = set(model.alpha_names())
    velocity = {n: np.zeros_like(model.params[n].data) for n in trainable}
    log = TrainLog(config={**cfg.__dict__})

    adversarial = cfg.adversarial and cfg.train_epsilon > 0
    for epoch in range(cfg.epochs):
        # clean warm-up epochs first: crafting against a chance-level model
        # only injects noise and can pin small-margin problems at chance
        crafting = adversarial and epoch >= cfg.warmup_epochs
        lr = _lr_at(cfg, epoch)
        order = derive_rng(cfg.seed, "shuffle", epoch).permutation(len(X))
        losses = []
        for b, start in enumerate(range(0, len(X), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb, yb = X[idx], y[idx]

            if crafting:
                crng = derive_rng(cfg.seed, "craft", epoch, b)
                x_start = random_init(xb, cfg.train_epsilon, crng)
                craft_rng = crng if (cfg.craft_noise and model.is_stochastic) \
                    else None
                _, g = model.loss_and_grad(x_start, yb, rng=craft_rng)
                xb = project(
                    x_start + np.float32(cfg.train_step_size) * np.sign(g).astype(np.float32),
                    xb, cfg.train_epsilon)

            rng = derive_rng(cfg.seed, "train", epoch, b) if model.is_stochastic else None
            for n in trainable:
                model.params[n].zero_grad()
            xt = Tensor(xb, requires_grad=False)
            out = model._forward_tensor(xt, rng, None, None)
            loss = ad.cross_entropy(out, yb)
            if not np.isfinite(loss.data):
                raise TrainingError(f"loss diverged at epoch {epoch}, batch {b}")
            ad.backward(loss)
            losses.append(float(loss.data))

            for n in trainable:
                p = model.params[n]
                if p.grad is None:
                    continue
                step_lr = lr * (cfg.alpha_lr_scale if n in alpha_names else 1.0)
                velocity[n] = np.asarray(
                    cfg.momentum * velocity[n] - np.float32(step_lr) * p.grad)
                new = p.data + velocity[n]
                if n in alpha_names:
                    new = np.maximum(new, 0.0)  # alpha stays >= 0
                p.data = np.asarray(new, dtype=p.data.dtype)

        log.epochs.append({
            "epoch": epoch,
            "clean_acc": _clean_train_accuracy(model, X, y),
            "loss": float(np.mean(losses)),
            "mean_alpha": _mean_alpha(model),
        })
    return log
