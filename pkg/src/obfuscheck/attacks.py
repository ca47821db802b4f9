"""White-box L-infinity attacks: FGSM, PGD-K, and PGD with averaged
(expectation-over-transformation style) gradients for stochastic models.

All attacks stay inside the intersection of the epsilon box around the clean
input and the pixel domain [0,1].  Sign and projection are plain array ops,
never part of the autodiff tape.  Every random choice derives from a master
seed plus (example index, restart index, purpose tag), so results do not
depend on scheduling or worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .rng import RngState, derive_rng


@dataclass
class AttackConfig:
    """One attack campaign.  K=1 with step_size=epsilon, no random init and
    eot_samples<=1 is exactly FGSM."""
    epsilon: float
    step_size: float
    num_steps: int = 10
    restarts: int = 1
    eot_samples: int = 0
    random_init: bool = True
    master_seed: int = 0
    verdict_votes: int = 1  # majority vote size for the stochastic success check

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0,1], got {self.epsilon}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.num_steps < 1 or self.restarts < 1:
            raise ValueError("num_steps and restarts must be >= 1")
        if self.eot_samples < 0:
            raise ValueError("eot_samples must be >= 0")

    @staticmethod
    def fgsm(epsilon, master_seed=0, **kw):
        return AttackConfig(epsilon=epsilon, step_size=max(epsilon, 1e-12),
                            num_steps=1, random_init=False, eot_samples=0,
                            master_seed=master_seed, **kw)


@dataclass
class AttackOutcome:
    x_adv: np.ndarray
    success: bool
    final_loss: float
    chosen_restart: int = 0
    per_restart_losses: list = field(default_factory=list)


def random_init(x, epsilon, rng: RngState):
    """Uniform point in the epsilon box around x, clamped to [0,1]."""
    x = np.asarray(x, dtype=np.float32)
    if epsilon == 0:
        return x.copy()
    u = rng.uniform(-epsilon, epsilon, x.shape)
    return project(x + u, x, epsilon)


def project(x_candidate, x_origin, epsilon):
    """Clamp to [origin-eps, origin+eps] intersected with [0,1]; idempotent.

    The clamp is computed in float64 and rounded values are nudged back so
    the returned float32 array satisfies |out - origin| <= epsilon exactly,
    not just up to float32 rounding.
    """
    xo = np.asarray(x_origin, dtype=np.float32)
    xo64 = xo.astype(np.float64)
    eps = float(epsilon)
    d = np.clip(np.asarray(x_candidate, dtype=np.float64) - xo64, -eps, eps)
    out = np.clip(xo64 + d, 0.0, 1.0).astype(np.float32)
    for _ in range(2):
        d = out.astype(np.float64) - xo64
        hi = d > eps
        lo = d < -eps
        if not hi.any() and not lo.any():
            break
        out[hi] = np.nextafter(out[hi], np.float32(-2.0))
        out[lo] = np.nextafter(out[lo], np.float32(2.0))
    return np.clip(out, 0.0, 1.0)


def eot_gradient(model, x, label, T, rng: RngState):
    """Mean of T input gradients under independent fresh noise draws.

    Sample gradients are summed sequentially in sample order, then divided by
    T, so results are bit-reproducible.  For a deterministic model this equals
    the plain gradient for any T.
    """
    if T < 1:
        raise ValueError(f"eot_samples must be >= 1 here, got {T}")
    total = None
    for t in range(T):
        _, g = model.loss_and_grad(x, label, rng=rng)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in EoT sample {t}")
        total = g.astype(np.float32) if total is None else total + g
    return total / np.float32(T)


def _verdict(model, x_adv, x_clean, label, cfg, verdict_rng):
    """One (or a vote of) seeded stochastic forward(s) on the final iterate."""
    losses, wrong = [], 0
    for _ in range(max(1, cfg.verdict_votes)):
        z = model.logits(x_adv[None] if x_adv.ndim == 3 else x_adv,
                         rng=verdict_rng if getattr(model, "is_stochastic", False) else None)
        z = z[0]
        pred = int(np.argmax(z))
        m = float(np.max(z))
        lse = m + float(np.log(np.sum(np.exp(z.astype(np.float64) - m))))
        losses.append(lse - float(z[label]))
        wrong += int(pred != int(label))
    votes = max(1, cfg.verdict_votes)
    return wrong * 2 > votes, float(np.mean(losses))


def pgd(model, x, label, cfg: AttackConfig, rng: RngState, verdict_rng=None):
    """K signed-gradient steps with projection after every step.

    Uses the averaged gradient when cfg.eot_samples >= 2, else one stochastic
    gradient per step.  Success is judged by a seeded stochastic forward.
    """
    x = np.asarray(x, dtype=np.float32)
    if verdict_rng is None:
        verdict_rng = rng.child("verdict")
    stochastic = getattr(model, "is_stochastic", False)
    x_adv = random_init(x, cfg.epsilon, rng) if cfg.random_init else x.copy()
    step = np.float32(cfg.step_size)
    for _ in range(cfg.num_steps):
        if cfg.eot_samples >= 2:
            g = eot_gradient(model, x_adv, label, cfg.eot_samples, rng)
        else:
            _, g = model.loss_and_grad(x_adv, label, rng=rng if stochastic else None)
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite attack gradient")
        x_adv = project(x_adv + step * np.sign(g).astype(np.float32), x, cfg.epsilon)
    success, final_loss = _verdict(model, x_adv, x, label, cfg, verdict_rng)
    return AttackOutcome(x_adv, success, final_loss, 0, [final_loss])


def fgsm(model, x, label, epsilon, rng: RngState, verdict_rng=None):
    """Single signed-gradient step of size epsilon, no random init."""
    cfg = AttackConfig.fgsm(epsilon)
    return pgd(model, x, label, cfg, rng, verdict_rng=verdict_rng)


def attack_with_restarts(model, x, label, cfg: AttackConfig, master_seed=None,
                         example_index=0):
    """Run R independent restarts; keep the strongest outcome.

    Selection prefers any misclassifying restart, then maximum final loss
    (ties to the lowest restart index).  Restart seeds depend only on
    (master_seed, example_index, restart index), so seed streams for R
    restarts are a prefix of those for R+1.
    """
    if master_seed is None:
        master_seed = cfg.master_seed
    verdict_rng_seed = derive_rng(master_seed, example_index, "verdict").seed
    outcomes = []
    for r in range(cfg.restarts):
        rng = derive_rng(master_seed, example_index, r, "restart")
        out = pgd(model, x, label, cfg, rng, verdict_rng=RngState(verdict_rng_seed))
        outcomes.append(out)
    return select_strongest(outcomes, x)


def select_strongest(outcomes, x_clean):
    """Apply the restart selection rule to a list of per-restart outcomes."""
    best = max(range(len(outcomes)),
               key=lambda i: (outcomes[i].success, outcomes[i].final_loss, -i))
    chosen = outcomes[best]
    return AttackOutcome(chosen.x_adv, chosen.success, chosen.final_loss,
                         best, [o.final_loss for o in outcomes])


# ---------------------------------------------------------------------------
# campaign evaluation

def _attack_one(model, x, y, cfg, master_seed, idx):
    return attack_with_restarts(model, x, y, cfg, master_seed, example_index=idx)


def evaluate_attack(model, X, y, cfg: AttackConfig, master_seed=None,
                    n_workers=1, limit=None):
    """Attack every example; returns (robust_accuracy, outcomes by index)."""
    if master_seed is None:
        master_seed = cfg.master_seed
    X = np.asarray(X)
    y = np.asarray(y)
    n = len(X) if limit is None else min(limit, len(X))
    outcomes = [None] * n
    if n_workers <= 1:
        for i in range(n):
            outcomes[i] = _attack_one(model, X[i], int(y[i]), cfg, master_seed, i)
    else:
        clones = [model.clone() if hasattr(model, "clone") else model
                  for _ in range(n_workers)]
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            futs = {pool.submit(_attack_one, clones[i % n_workers], X[i],
                                int(y[i]), cfg, master_seed, i): i for i in range(n)}
            for fut, i in futs.items():
                outcomes[i] = fut.result()
    robust_acc = 1.0 - sum(o.success for o in outcomes) / n
    return robust_acc, outcomes


def clean_accuracy(model, X, y, master_seed=0, limit=None):
    """Accuracy with one seeded stochastic forward per example."""
    X = np.asarray(X)
    y = np.asarray(y)
    n = len(X) if limit is None else min(limit, len(X))
    correct = 0
    stochastic = getattr(model, "is_stochastic", False)
    for i in range(n):
        rng = derive_rng(master_seed, i, "verdict") if stochastic else None
        pred = model.predict(X[i][None] if X[i].ndim == 3 else X[i], rng=rng)
        correct += int(pred[0] == int(y[i]))
    return correct / n
