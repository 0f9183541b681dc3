"""Minimal dense network engine: layers, explicit backprop, Adam and a plateau schedule.

Parameters of a :class:`DenseNet` live in one flat float64 buffer; each layer
holds views into it (and into a matching gradient buffer), so an optimizer
step is a single fused update over the whole network.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

ACTIVATIONS = ("relu", "sigmoid", "tanh", "softmax")


class ShapeError(ValueError):
    pass


class Dense:
    kind = "dense"

    def __init__(self, in_dim, out_dim):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.param_shapes = [(self.in_dim, self.out_dim), (self.out_dim,)]

    def bind(self, params, grads):
        self.W, self.b = params
        self.dW, self.db = grads

    def init(self, rng):
        # He-style uniform fan-in scaling
        limit = math.sqrt(6.0 / self.in_dim)
        self.W[...] = rng.uniform(-limit, limit, size=self.W.shape)
        self.b[...] = 0.0

    def forward(self, x, training):
        if training:
            self._x = x
        return x @ self.W + self.b

    def backward(self, g):
        np.dot(self._x.T, g, out=self.dW)
        np.sum(g, axis=0, out=self.db)
        return g @ self.W.T

    def spec(self):
        return {"type": "dense", "in": self.in_dim, "out": self.out_dim}


class BatchNorm:
    kind = "batchnorm"

    def __init__(self, dim, momentum=0.9, eps=1e-5):
        self.in_dim = self.out_dim = int(dim)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.param_shapes = [(self.in_dim,), (self.in_dim,)]
        self.running_mean = np.zeros(self.in_dim)
        self.running_var = np.ones(self.in_dim)

    def bind(self, params, grads):
        self.gamma, self.beta = params
        self.dgamma, self.dbeta = grads

    def init(self, rng):
        self.gamma[...] = 1.0
        self.beta[...] = 0.0

    def forward(self, x, training):
        if not training:
            return (x - self.running_mean) / np.sqrt(self.running_var + self.eps) * self.gamma + self.beta
        y, xhat, mean, var, inv_std = kernels.bn_forward_train(x, self.gamma, self.beta, self.eps)
        self._xhat, self._inv_std = xhat, inv_std
        n = x.shape[0]
        unbiased = var * n / (n - 1) if n > 1 else var
        self.running_mean *= self.momentum
        self.running_mean += (1.0 - self.momentum) * mean
        self.running_var *= self.momentum
        self.running_var += (1.0 - self.momentum) * unbiased
        return y

    def backward(self, g):
        return kernels.bn_backward(g, self._xhat, self.gamma, self._inv_std, self.dgamma, self.dbeta)

    def spec(self):
        return {"type": "batchnorm", "dim": self.in_dim, "momentum": self.momentum, "eps": self.eps}


class Activation:
    kind = "activation"
    param_shapes = []

    def __init__(self, fn):
        if fn not in ACTIVATIONS:
            raise ValueError(f"unknown activation {fn!r}; expected one of {ACTIVATIONS}")
        self.fn = fn
        self.in_dim = self.out_dim = None

    def bind(self, params, grads):
        pass

    def init(self, rng):
        pass

    def forward(self, x, training):
        if self.fn == "relu":
            y = np.maximum(x, 0.0)
        elif self.fn == "sigmoid":
            y = 0.5 * (1.0 + np.tanh(0.5 * x))
        elif self.fn == "tanh":
            y = np.tanh(x)
        else:
            e = np.exp(x - x.max(axis=1, keepdims=True))
            y = e / e.sum(axis=1, keepdims=True)
        if training:
            self._x, self._y = x, y
        return y

    def backward(self, g):
        y = self._y
        if self.fn == "relu":
            return g * (self._x > 0)
        if self.fn == "sigmoid":
            return g * y * (1.0 - y)
        if self.fn == "tanh":
            return g * (1.0 - y * y)
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    def spec(self):
        return {"type": self.fn}


def layer_from_spec(spec):
    kind = spec["type"]
    if kind == "dense":
        return Dense(spec["in"], spec["out"])
    if kind == "batchnorm":
        return BatchNorm(spec["dim"], spec.get("momentum", 0.9), spec.get("eps", 1e-5))
    return Activation(kind)


def mlp_spec(in_dim, hidden, out_dim, hidden_act="relu", head="softmax", batchnorm=True, momentum=0.9):
    """Layer specs for ``FC-h, act, BNorm`` blocks followed by ``FC-out, head``."""
    specs = []
    width = in_dim
    for h in hidden:
        specs.append({"type": "dense", "in": width, "out": h})
        specs.append({"type": hidden_act})
        if batchnorm:
            specs.append({"type": "batchnorm", "dim": h, "momentum": momentum, "eps": 1e-5})
        width = h
    specs.append({"type": "dense", "in": width, "out": out_dim})
    if head is not None:
        specs.append({"type": head})
    return specs


class DenseNet:
    """Sequential stack of dense, batch-norm and activation layers.

    Parameters
    ----------
    specs : list of dict
        Layer specifications, see :func:`mlp_spec`.
    rng : numpy.random.Generator or int, optional
        Source for weight initialization.
    """

    def __init__(self, specs, rng=None):
        self.layers = [layer_from_spec(s) for s in specs]
        width = None
        for i, layer in enumerate(self.layers):
            if layer.in_dim is None:
                continue
            if width is not None and layer.in_dim != width:
                raise ShapeError(f"layer {i} ({layer.kind}) expects width {layer.in_dim}, previous layer gives {width}")
            width = layer.out_dim
        if width is None:
            raise ShapeError("network needs at least one dense layer")
        dims = [layer.in_dim for layer in self.layers if layer.in_dim is not None]
        self.in_dim = dims[0]
        self.out_dim = width

        shapes = [s for layer in self.layers for s in layer.param_shapes]
        total = sum(int(np.prod(s)) for s in shapes)
        self.flat_params = np.zeros(total)
        self.flat_grads = np.zeros(total)
        self.params, self.grads = [], []
        offset = 0
        for layer in self.layers:
            ps, gs = [], []
            for s in layer.param_shapes:
                size = int(np.prod(s))
                ps.append(self.flat_params[offset:offset + size].reshape(s))
                gs.append(self.flat_grads[offset:offset + size].reshape(s))
                offset += size
            layer.bind(ps, gs)
            self.params += ps
            self.grads += gs
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        for layer in self.layers:
            layer.init(rng)
        self._cached = False
        self.input_grad = None

    @property
    def n_params(self):
        return self.flat_params.size

    def forward(self, x, training=False):
        """Run the network on a ``[B, in_dim]`` batch.

        In training mode batch norm uses batch statistics (and updates its
        running statistics) and activations are cached for :meth:`backward`.
        Inference mode touches no state.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of shape [B, {self.in_dim}], got {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("non-finite values in network input")
        for layer in self.layers:
            x = layer.forward(x, training)
        self._cached = bool(training)
        return x

    def backward(self, upstream):
        """Backpropagate ``dL/doutput``; fills and returns ``self.grads``.

        The gradient with respect to the network input is left in
        ``self.input_grad``.
        """
        if not self._cached:
            raise RuntimeError("backward() needs a preceding forward(..., training=True)")
        g = np.asarray(upstream, dtype=np.float64)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self.input_grad = g
        return self.grads

    def batchnorm_layers(self):
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def specs(self):
        return [layer.spec() for layer in self.layers]

    def state_dict(self):
        state = {"params": self.flat_params.copy()}
        for i, bn in enumerate(self.batchnorm_layers()):
            state[f"bn{i}_mean"] = bn.running_mean.copy()
            state[f"bn{i}_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state):
        if state["params"].shape != self.flat_params.shape:
            raise ShapeError("parameter count mismatch")
        self.flat_params[...] = state["params"]
        for i, bn in enumerate(self.batchnorm_layers()):
            bn.running_mean[...] = state[f"bn{i}_mean"]
            bn.running_var[...] = state[f"bn{i}_var"]
        self._cached = False

    def copy(self):
        other = DenseNet(self.specs(), rng=0)
        other.load_state_dict(self.state_dict())
        return other


@dataclass
class AdamState:
    n: int
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n)
        if self.v is None:
            self.v = np.zeros(self.n)

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def adam_step(params, grads, state):
    """Bias-corrected Adam update of the flat ``params`` in place; returns ``(params, state)``."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError(f"Adam shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if state.t < 0:
        raise ValueError("Adam step count must be >= 0")
    state.t += 1
    kernels.adam_update(params, grads, state.m, state.v, state.lr, state.beta1, state.beta2, state.eps, state.t)
    return params, state


class Adam:
    """Adam bound to one network's flat parameter buffer."""

    def __init__(self, net, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.state = AdamState(net.n_params, lr, beta1, beta2, eps)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def step(self):
        adam_step(self.net.flat_params, self.net.flat_grads, self.state)


@dataclass
class LrSchedule:
    """Divide the learning rate by ``factor`` after ``patience`` epochs without improvement.

    Improvement means the monitored value drops below the best seen by more
    than ``tol``. ``min_lr`` bounds the decay from below.
    """

    lr: float
    factor: float = 5.0
    patience: int = 10
    tol: float = 1e-4
    min_lr: float = 0.0
    best: float = math.inf
    wait: int = 0
    n_decays: int = 0
    history: list = field(default_factory=list)

    def step(self, metric):
        metric = float(metric)
        if not math.isfinite(metric):
            raise ValueError(f"non-finite metric {metric}")
        self.history.append(metric)
        if metric < self.best - self.tol:
            self.best = metric
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                new_lr = max(self.lr / self.factor, self.min_lr)
                if new_lr < self.lr:
                    self.n_decays += 1
                self.lr = new_lr
                self.wait = 0
        return self.lr


def step_schedule(sched, epoch_metric):
    return sched.step(epoch_metric)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, nets, optimizers=None, meta=None):
    """Write networks (and optional Adam states) to an ``.npz`` container.

    The container stores layer specs and metadata as a JSON header and all
    arrays verbatim, so a load round-trips bit-exactly.
    """
    arrays = {}
    header = {"nets": {}, "optimizers": {}, "meta": meta or {}}
    for name, net in nets.items():
        header["nets"][name] = net.specs()
        for key, arr in net.state_dict().items():
            arrays[f"net/{name}/{key}"] = arr
    for name, opt in (optimizers or {}).items():
        state = opt.state if isinstance(opt, Adam) else opt
        header["optimizers"][name] = state.hyper()
        arrays[f"opt/{name}/m"] = state.m
        arrays[f"opt/{name}/v"] = state.v
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`. Returns ``(nets, adam_states, meta)``."""
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        nets = {}
        for name, specs in header["nets"].items():
            net = DenseNet(specs, rng=0)
            prefix = f"net/{name}/"
            net.load_state_dict({k[len(prefix):]: data[k] for k in data.files if k.startswith(prefix)})
            nets[name] = net
        opts = {}
        for name, hyper in header["optimizers"].items():
            m = data[f"opt/{name}/m"]
            opts[name] = AdamState(m.size, hyper["lr"], hyper["beta1"], hyper["beta2"], hyper["eps"],
                                   hyper["t"], m.copy(), data[f"opt/{name}/v"].copy())
    return nets, opts, header["meta"]
