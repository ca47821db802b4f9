"""Small classifiers (MLP, compact CNN) with parametric noise injection.

Noise injection adds ``alpha * eta`` to a target tensor on every stochastic
forward, where ``eta`` is a fresh N(0, sigma^2) draw and sigma is the
population standard deviation of the target tensor itself.  ``alpha`` is a
learnable scale, shared layerwise, channelwise, or elementwise.  Placement
``pni-w`` targets conv/linear weights; ``pni-a-a`` targets the affine
(pre-activation) outputs of conv/linear layers.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .rng import RngState, derive_rng

GRANULARITIES = ("layerwise", "channelwise", "elementwise")
PLACEMENTS = ("none", "pni-w", "pni-a-a")
ALPHA_INIT = 0.25


def compute_sigma(v: np.ndarray) -> float:
    """Population standard deviation of all elements of v."""
    v = np.asarray(v)
    if v.size == 0:
        raise ValueError("compute_sigma: empty tensor")
    mu = v.mean(dtype=np.float64)
    return float(np.sqrt(np.mean((v.astype(np.float64) - mu) ** 2)))


@dataclass
class NoiseDraw:
    """One realized noise draw: eta is already scaled by sigma."""
    eta: np.ndarray
    sigma: float
    seed_trace: int  # rng draw counter right after the draw


@dataclass
class PniAttachment:
    """Where and how noise is injected."""
    target: str            # "w" (weight) or "a" (affine output)
    layer: int             # index into the layer list
    alpha_name: str
    granularity: str

    def alpha_layout(self, v_shape, batched):
        """(broadcast_shape, group_axes) for a target of shape ``v_shape``.

        ``batched`` marks activation targets whose leading axis is the batch;
        alpha never depends on the batch axis.
        """
        nd = len(v_shape)
        if self.granularity == "layerwise":
            return (1,) * nd, tuple(range(nd))
        if self.granularity == "channelwise":
            ax = 1 if batched else 0  # channel axis
            bshape = tuple(v_shape[i] if i == ax else 1 for i in range(nd))
            return bshape, tuple(i for i in range(nd) if i != ax)
        if batched:
            return (1,) + tuple(v_shape[1:]), (0,)
        return tuple(v_shape), ()

    def alpha_shape(self, v_shape, batched):
        if self.granularity == "layerwise":
            return ()
        if self.granularity == "channelwise":
            return (v_shape[1 if batched else 0],)
        return tuple(v_shape[1:]) if batched else tuple(v_shape)


def matmul_t(x: Tensor, w: Tensor) -> Tensor:
    """x [B, in] @ w.T for w stored [out, in] (output features lead)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.data.shape} and {w.data.shape}")
    out = x.data @ w.data.T

    def bw(g):
        return g @ w.data, g.T @ x.data

    return ad._make(out, (x, w), bw, "linear")


def noise_inject(v: Tensor, alpha: Tensor, eta: np.ndarray, bshape, group_axes) -> Tensor:
    """v + reshape(alpha, bshape) * eta with eta treated as a constant.

    grad_v is the incoming gradient unchanged (sigma is detached); grad_alpha
    sums eta * grad over each sharing group.
    """
    a = alpha.data
    if eta.shape != v.data.shape:
        raise ShapeError(f"noise draw shape {eta.shape} != tensor shape {v.data.shape}")
    out = v.data + a.reshape(bshape) * eta

    def bw(g):
        ga = (eta * g).sum(axis=group_axes) if group_axes else (eta * g)
        return g, ga.reshape(a.shape).astype(a.dtype, copy=False)

    return ad._make(out, (v, alpha), bw, "noise_inject")


class Network:
    """A feed-forward classifier built from the autodiff primitives.

    Stochastic forwards (an ``RngState`` or frozen draws supplied) inject
    noise at every attachment; otherwise the forward is deterministic and
    agrees bitwise with the noise-free model on the same weights.
    """

    def __init__(self, layers, params, attachments, meta):
        self.layers = layers
        self.params = params            # name -> Tensor
        self.attachments = attachments  # list[PniAttachment]
        self.meta = dict(meta)
        self.last_draws = {}

    @property
    def is_stochastic(self):
        return bool(self.attachments)

    @property
    def input_shape(self):
        return tuple(self.meta["input_shape"])

    @property
    def num_classes(self):
        return int(self.meta["classes"])

    def alpha_names(self):
        return [a.alpha_name for a in self.attachments]

    def clone(self):
        params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad)
                  for n, p in self.params.items()}
        return Network(copy.deepcopy(self.layers), params,
                       copy.deepcopy(self.attachments), self.meta)

    def _attachment_for(self, target, layer):
        for a in self.attachments:
            if a.target == target and a.layer == layer:
                return a
        return None

    def _inject(self, v, att, rng, frozen, alpha_scale, batched):
        if frozen is not None and att.alpha_name in frozen:
            draw = frozen[att.alpha_name]
            eta = draw.eta.astype(v.data.dtype, copy=False)
        else:
            sigma = compute_sigma(v.data)
            eta = rng.normal(v.data.shape, dtype=v.data.dtype) * v.data.dtype.type(sigma)
            self.last_draws[att.alpha_name] = NoiseDraw(eta, sigma, rng.draws)
        alpha = self.params[att.alpha_name]
        if alpha_scale is not None:
            if alpha_scale < 0:
                raise ValueError(f"alpha override scale must be >= 0, got {alpha_scale}")
            alpha = Tensor(alpha.data * v.data.dtype.type(alpha_scale))
        bshape, group = att.alpha_layout(v.data.shape, batched)
        return noise_inject(v, alpha, eta, bshape, group)

    def _forward_tensor(self, xt: Tensor, rng, frozen, alpha_scale) -> Tensor:
        if tuple(xt.data.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"input shape {tuple(xt.data.shape[1:])} != model input {self.input_shape}")
        stochastic = (rng is not None or frozen is not None) and self.attachments
        self.last_draws = {}
        t = xt
        for i, layer in enumerate(self.layers):
            kind = layer["kind"]
            if kind in ("conv", "linear"):
                w = self.params[layer["w"]]
                att = self._attachment_for("w", i) if stochastic else None
                if att is not None:
                    w = self._inject(w, att, rng, frozen, alpha_scale, batched=False)
                if kind == "conv":
                    t = ad.conv2d(t, w, padding=layer["padding"])
                else:
                    if t.data.ndim == 4:
                        t = ad.flatten(t)
                    t = matmul_t(t, w)
                t = ad.bias_add(t, self.params[layer["b"]])
                att = self._attachment_for("a", i) if stochastic else None
                if att is not None:
                    t = self._inject(t, att, rng, frozen, alpha_scale, batched=True)
            elif kind == "relu":
                t = ad.relu(t)
            elif kind == "pool":
                t = ad.avg_pool2(t)
            elif kind == "flatten":
                t = ad.flatten(t)
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return t

    def forward(self, x, rng: RngState | None = None, *, frozen_draws=None,
                alpha_scale=None, input_grad=False) -> Tensor:
        """Logits for x; stochastic iff ``rng`` or ``frozen_draws`` is given."""
        x = np.asarray(x)
        if x.ndim == len(self.input_shape):
            x = x[None]
        dtype = next(iter(self.params.values())).data.dtype
        xt = Tensor(x.astype(dtype, copy=False), requires_grad=input_grad)
        return self._forward_tensor(xt, rng, frozen_draws, alpha_scale)

    def logits(self, x, rng=None, alpha_scale=None):
        return self.forward(x, rng, alpha_scale=alpha_scale).data

    def predict(self, x, rng=None, alpha_scale=None):
        """Top-1 class per example; argmax ties break to the lowest index."""
        return np.argmax(self.logits(x, rng, alpha_scale=alpha_scale), axis=1)

    def loss_and_grad(self, x, label, rng=None, alpha_scale=None, frozen_draws=None):
        """Cross-entropy loss and its gradient w.r.t. the input.

        Accepts a single example [C,H,W] or a batch; returns (loss, grad_x)
        with grad_x shaped like x.
        """
        x = np.asarray(x)
        single = x.ndim == len(self.input_shape)
        dtype = next(iter(self.params.values())).data.dtype
        xt = Tensor((x[None] if single else x).astype(dtype, copy=False),
                    requires_grad=True)
        out = self._forward_tensor(xt, rng, frozen_draws, alpha_scale)
        labels = np.asarray(label).reshape(-1)
        loss = ad.cross_entropy(out, labels)
        ad.backward(loss)
        return float(loss.data), (xt.grad[0] if single else xt.grad)


# ---------------------------------------------------------------------------
# construction

def _mlp_layers(input_shape, classes, hidden=64):
    features = int(np.prod(input_shape))
    return [
        {"kind": "flatten"},
        {"kind": "linear", "w": "fc1.w", "b": "fc1.b", "in": features, "out": hidden},
        {"kind": "relu"},
        {"kind": "linear", "w": "fc2.w", "b": "fc2.b", "in": hidden, "out": classes},
    ]


def _cnn_layers(input_shape, classes):
    c, h, w = input_shape
    if h % 2 or w % 2:
        raise ValueError("cnn needs even spatial dims")
    flat = 16 * (h // 2) * (w // 2)
    return [
        {"kind": "conv", "w": "conv1.w", "b": "conv1.b", "padding": 1,
         "wshape": (8, c, 3, 3)},
        {"kind": "relu"},
        {"kind": "pool"},
        {"kind": "conv", "w": "conv2.w", "b": "conv2.b", "padding": 1,
         "wshape": (16, 8, 3, 3)},
        {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "linear", "w": "fc1.w", "b": "fc1.b", "in": flat, "out": 64},
        {"kind": "relu"},
        {"kind": "linear", "w": "fc2.w", "b": "fc2.b", "in": 64, "out": classes},
    ]


def _affine_output_shapes(layers, input_shape):
    """Output shape (no batch axis) of each conv/linear layer, by index."""
    shape = tuple(input_shape)
    out = {}
    for i, layer in enumerate(layers):
        kind = layer["kind"]
        if kind == "conv":
            o, _, kh, kw = layer["wshape"]
            p = layer["padding"]
            shape = (o, shape[1] + 2 * p - kh + 1, shape[2] + 2 * p - kw + 1)
            out[i] = shape
        elif kind == "linear":
            shape = (layer["out"],)
            out[i] = shape
        elif kind == "pool":
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
    return out


def build_model(arch, pni="none", granularity="layerwise", input_shape=(1, 16, 16),
                classes=10, init_seed=0, alpha_init=ALPHA_INIT) -> Network:
    """Construct a model with seeded fan-in-scaled uniform weight init.

    Same seed twice gives bitwise-identical parameters.  Alpha starts at
    ``alpha_init`` (default 0.25).
    """
    if arch == "mlp":
        layers = _mlp_layers(input_shape, classes)
    elif arch == "cnn":
        layers = _cnn_layers(input_shape, classes)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    if pni not in PLACEMENTS:
        raise ValueError(f"unknown pni placement {pni!r}")
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")

    params = {}
    for layer in layers:
        if layer["kind"] == "conv":
            o, c, kh, kw = layer["wshape"]
            bound = 1.0 / np.sqrt(c * kh * kw)
            r = derive_rng(init_seed, "init", layer["w"])
            params[layer["w"]] = Tensor(
                r.uniform(-bound, bound, layer["wshape"]), requires_grad=True)
            params[layer["b"]] = Tensor(np.zeros(o, dtype=np.float32), requires_grad=True)
        elif layer["kind"] == "linear":
            bound = 1.0 / np.sqrt(layer["in"])
            r = derive_rng(init_seed, "init", layer["w"])
            params[layer["w"]] = Tensor(
                r.uniform(-bound, bound, (layer["out"], layer["in"])), requires_grad=True)
            params[layer["b"]] = Tensor(
                np.zeros(layer["out"], dtype=np.float32), requires_grad=True)

    meta = {"arch": arch, "pni": pni, "granularity": granularity,
            "input_shape": list(input_shape), "classes": classes,
            "init_seed": init_seed}
    net = Network(layers, params, [], meta)
    if pni == "none":
        return net

    act_shapes = _affine_output_shapes(layers, input_shape)
    attachments = []
    for i, layer in enumerate(layers):
        if layer["kind"] not in ("conv", "linear"):
            continue
        alpha_name = layer["w"].rsplit(".", 1)[0] + ".alpha"
        if pni == "pni-w":
            att = PniAttachment("w", i, alpha_name, granularity)
            shape = att.alpha_shape(params[layer["w"]].data.shape, batched=False)
        else:
            att = PniAttachment("a", i, alpha_name, granularity)
            shape = att.alpha_shape((1,) + act_shapes[i], batched=True)
        params[alpha_name] = Tensor(
            np.full(shape, alpha_init, dtype=np.float32), requires_grad=True)
        attachments.append(att)
    net.attachments = attachments
    return net


# ---------------------------------------------------------------------------
# gradient checking (float64 shadow path)

def grad_check(model: Network, x, label, tol=1e-4, eps=1e-5, rng=None):
    """Compare analytic input/parameter gradients against central differences.

    Runs the whole graph in float64.  For stochastic models the noise draw is
    frozen and replayed, so the comparison is well defined.  Reports failures
    rather than raising.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == len(model.input_shape):
        x = x[None]
    labels = np.asarray(label).reshape(-1)

    frozen = None
    if model.is_stochastic:
        if rng is None:
            rng = derive_rng(0, "grad_check")
        model.loss_and_grad(x.astype(np.float32), labels, rng=rng)
        frozen = {k: NoiseDraw(d.eta.astype(np.float64), d.sigma, d.seed_trace)
                  for k, d in model.last_draws.items()}

    names = sorted(model.params)
    shadow = {n: model.params[n].data.astype(np.float64) for n in names}
    saved = model.params

    def loss_value(pdict, xarr):
        model.params = {n: Tensor(a, dtype=np.float64) for n, a in pdict.items()}
        try:
            out = model._forward_tensor(Tensor(xarr, dtype=np.float64), None, frozen, None)
            return float(ad.cross_entropy(out, labels).data)
        finally:
            model.params = saved

    # analytic gradients on the float64 shadow
    p64 = {n: Tensor(shadow[n], dtype=np.float64, requires_grad=True) for n in names}
    model.params = p64
    try:
        xt = Tensor(x, dtype=np.float64, requires_grad=True)
        loss = ad.cross_entropy(model._forward_tensor(xt, None, frozen, None), labels)
        ad.backward(loss)
    finally:
        model.params = saved

    report = {"per_tensor": {}, "tol": tol}
    num = _central_diff(lambda arr: loss_value(shadow, arr), x, eps)
    report["per_tensor"]["<input>"] = _rel_err(xt.grad, num)
    for n in names:
        def f(arr, n=n):
            pd = dict(shadow)
            pd[n] = arr
            return loss_value(pd, x)
        num = _central_diff(f, shadow[n], eps)
        report["per_tensor"][n] = _rel_err(p64[n].grad, num)
    report["max_rel_error"] = max(report["per_tensor"].values())
    report["ok"] = report["max_rel_error"] < tol
    return report


def _central_diff(f, arr, eps):
    arr = np.array(arr, dtype=np.float64)
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        fp = f(arr)
        arr[idx] = orig - eps
        fm = f(arr)
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
        it.iternext()
    return grad


def _rel_err(ana, num):
    if ana is None:
        ana = np.zeros_like(num)
    if num.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.abs(num))
    return float(np.max(np.abs(np.asarray(ana) - num) / denom))
