"""Hand-analyzable stand-in models used by the attack and checklist tests.

Each double implements the informal model protocol the attack code relies on:
``loss_and_grad``, ``logits``, ``predict``, ``clone``, ``is_stochastic``.
"""

import numpy as np


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


class LinearSoftmaxModel:
    """Deterministic linear classifier: logits = x @ W.T + b.

    Cross-entropy input gradient has the closed form W.T @ (p - onehot), so
    FGSM/PGD behavior is checkable by hand or exhaustive search.
    """

    is_stochastic = False

    def __init__(self, W, b=None):
        self.W = np.asarray(W, dtype=np.float32)
        self.b = np.zeros(self.W.shape[0], dtype=np.float32) if b is None \
            else np.asarray(b, dtype=np.float32)

    def clone(self):
        return LinearSoftmaxModel(self.W.copy(), self.b.copy())

    def logits(self, x, rng=None, **kw):
        x = np.atleast_2d(np.asarray(x, dtype=np.float32))
        return x.reshape(len(x), -1) @ self.W.T + self.b

    def predict(self, x, rng=None, **kw):
        return np.argmax(self.logits(x), axis=1)

    def loss_and_grad(self, x, label, rng=None, **kw):
        x = np.asarray(x, dtype=np.float32)
        z = self.logits(x)
        y = np.asarray(label).reshape(-1)
        p = _softmax(z.astype(np.float64))
        n = len(y)
        lse = np.log(np.exp(z - z.max(axis=1, keepdims=True)).sum(axis=1)) \
            + z.max(axis=1)
        loss = float(np.mean(lse - z[np.arange(n), y]))
        p[np.arange(n), y] -= 1.0
        g = (p @ self.W.astype(np.float64) / n).astype(np.float32)
        return loss, g.reshape(x.shape)


class NoisyLinearLoss:
    """Stochastic scalar objective: loss(x) = (w + alpha*eta) . x, eta ~ N(0,I).

    The exact expected input gradient is w, so EoT averaging is checkable
    against a closed form.
    """

    is_stochastic = True

    def __init__(self, w, alpha):
        self.w = np.asarray(w, dtype=np.float32)
        self.alpha = float(alpha)

    def clone(self):
        return NoisyLinearLoss(self.w.copy(), self.alpha)

    def loss_and_grad(self, x, label, rng=None, **kw):
        eta = rng.normal(self.w.shape) if rng is not None \
            else np.zeros_like(self.w)
        g = self.w + np.float32(self.alpha) * eta
        return float(g @ np.asarray(x, dtype=np.float32).reshape(-1)), \
            g.reshape(np.shape(x))

    def logits(self, x, rng=None, **kw):
        x = np.atleast_2d(np.asarray(x, dtype=np.float32))
        s = x.reshape(len(x), -1) @ self.w
        return np.stack([s, -s], axis=1)

    def predict(self, x, rng=None, **kw):
        return np.argmax(self.logits(x), axis=1)


class NegatedGradientModel:
    """Wraps a model but reports a negated input gradient.

    With ``honest_at`` given, the true gradient is returned only for queries
    that exactly match one of those clean inputs; everywhere else the
    gradient is negated.  A no-init single-step attack then succeeds (its one
    query is the clean point) while iterative attacks from random starts are
    pushed away from the decision boundary, and random sampling inside the
    box still finds adversarial points: the classic masked-gradient shape.
    """

    def __init__(self, inner, honest_at=None):
        self.inner = inner
        self.is_stochastic = inner.is_stochastic
        self._honest = None if honest_at is None else \
            {np.asarray(r, dtype=np.float32).tobytes() for r in honest_at}

    def clone(self):
        c = NegatedGradientModel(self.inner.clone())
        c._honest = self._honest
        return c

    def logits(self, x, rng=None, **kw):
        return self.inner.logits(x, rng=rng, **kw)

    def predict(self, x, rng=None, **kw):
        return self.inner.predict(x, rng=rng, **kw)

    def loss_and_grad(self, x, label, rng=None, **kw):
        loss, g = self.inner.loss_and_grad(x, label, rng=rng, **kw)
        if self._honest is not None and \
                np.asarray(x, dtype=np.float32).tobytes() in self._honest:
            return loss, g
        return loss, -g

    def __getattr__(self, name):
        return getattr(self.inner, name)


class ThresholdModel:
    """1-D two-class rule: predicts 1 iff the single input exceeds the
    threshold, with an exactly flat loss surface (zero gradient everywhere).

    Gradient attacks cannot move, so the measure of misclassifying points in
    a box is computable in closed form and testable against random sampling.
    """

    is_stochastic = False

    def __init__(self, threshold):
        self.threshold = float(threshold)

    def clone(self):
        return ThresholdModel(self.threshold)

    def logits(self, x, rng=None, **kw):
        x = np.atleast_1d(np.asarray(x, dtype=np.float32)).reshape(-1)
        side = (x > self.threshold).astype(np.float32) * 2 - 1
        return np.stack([-side, side], axis=1)

    def predict(self, x, rng=None, **kw):
        return np.argmax(self.logits(x), axis=1)

    def loss_and_grad(self, x, label, rng=None, **kw):
        return 0.0, np.zeros_like(np.asarray(x, dtype=np.float32))
