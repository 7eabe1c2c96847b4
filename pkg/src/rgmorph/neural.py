"""Minimal dense-network engine.

Fully-connected layers with optional batch normalization and inverted
dropout, their exact backward passes, an Adam optimizer with exponential
per-epoch learning-rate decay, and a central-difference gradient checker.
Everything runs in float64 and keeps its state explicit: forwards return a
cache, backwards consume it, optimizers return new arrays.
"""
from __future__ import annotations

import copy
import contextlib
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, NumericError, ShapeError
from .rng import RngStream

ACTIVATIONS = ("relu", "sigmoid", "softmax", "none")
MODES = ("train", "infer")

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
LR_INITIAL = 1e-3
LR_DECAY = 0.95


def deterministic(flag=True):
    """Context pinning BLAS to one thread so reductions have a fixed order."""
    if not flag:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def _check_mode(mode):
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")


def activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        # split by sign so exp never overflows
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if kind == "softmax":
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    if kind == "none":
        return z
    raise ConfigurationError(f"unknown activation {kind!r}")


def activation_backward(a, grad, kind):
    """Gradient w.r.t. the pre-activation, given the activation output ``a``."""
    if kind == "relu":
        return grad * (a > 0)
    if kind == "sigmoid":
        return grad * a * (1.0 - a)
    if kind == "softmax":
        return a * (grad - np.sum(grad * a, axis=1, keepdims=True))
    if kind == "none":
        return grad
    raise ConfigurationError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BnState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def create(cls, width, momentum=BN_MOMENTUM, epsilon=BN_EPSILON):
        return cls(
            gamma=np.ones(width),
            beta=np.zeros(width),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            momentum=momentum,
            epsilon=epsilon,
        )


@dataclass
class _BnCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def batchnorm_forward(x, bn, mode):
    """Normalize ``x`` per feature.

    In train mode batch statistics (population variance) are used and the
    running statistics in ``bn`` are updated in place; in infer mode the
    running statistics are used and the returned cache is ``None``.
    """
    _check_mode(mode)
    if x.shape[1] != bn.gamma.shape[0]:
        raise ShapeError(
            f"batchnorm width {bn.gamma.shape[0]} does not match input width {x.shape[1]}"
        )
    if mode == "infer":
        inv_std = 1.0 / np.sqrt(bn.running_var + bn.epsilon)
        return (x - bn.running_mean) * inv_std * bn.gamma + bn.beta, None
    n = x.shape[0]
    if n < 2:
        raise ConfigurationError("batch normalization in train mode needs a batch of at least 2")
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + bn.epsilon)
    xhat = (x - mu) * inv_std
    bn.running_mean = bn.momentum * bn.running_mean + (1.0 - bn.momentum) * mu
    bn.running_var = bn.momentum * bn.running_var + (1.0 - bn.momentum) * var
    return bn.gamma * xhat + bn.beta, _BnCache(xhat, inv_std, bn.gamma)


def batchnorm_backward(cache, dy):
    """Return ``(dx, dgamma, dbeta)``; accounts for the batch-statistic path."""
    n = dy.shape[0]
    dgamma = np.sum(dy * cache.xhat, axis=0)
    dbeta = np.sum(dy, axis=0)
    dxhat = dy * cache.gamma
    dx = (cache.inv_std / n) * (
        n * dxhat - dxhat.sum(axis=0) - cache.xhat * np.sum(dxhat * cache.xhat, axis=0)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# dropout


def dropout_forward(x, keep_prob, rng, mode):
    """Inverted dropout. Returns ``(y, mask)``; the mask is 0/1 valued."""
    _check_mode(mode)
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigurationError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if mode == "infer" or keep_prob == 1.0:
        return x, np.ones_like(x)
    if rng is None:
        raise ConfigurationError("train-mode dropout needs an RngStream")
    mask = (rng.generator.random(x.shape) < keep_prob).astype(np.float64)
    return x * mask / keep_prob, mask


# ---------------------------------------------------------------------------
# dense layer


@dataclass
class DenseLayer:
    """Affine map followed by optional BN, an activation and optional dropout.

    With BN attached the bias is carried (it is part of the stored block)
    but not applied: ``BN(z + b) == BN(z)`` exactly, so its gradient is
    identically zero and it stays at its initial value.
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "none"
    bn: BnState | None = None
    keep_prob: float | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weights {self.weights.shape}"
            )

    @property
    def has_bn(self):
        return self.bn is not None

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]

    @classmethod
    def create(cls, n_in, n_out, activation, rng, bn=False, keep_prob=None):
        """He-normal init for ReLU layers, ``1/fan_in`` variance otherwise."""
        if n_in < 1 or n_out < 1:
            raise ConfigurationError(f"layer widths must be >= 1, got {n_in}->{n_out}")
        scale = np.sqrt(2.0 / n_in) if activation == "relu" else np.sqrt(1.0 / n_in)
        weights = rng.generator.standard_normal((n_out, n_in)) * scale
        return cls(
            weights=weights,
            bias=np.zeros(n_out),
            activation=activation,
            bn=BnState.create(n_out) if bn else None,
            keep_prob=keep_prob,
        )

    def parameters(self):
        """Trainable arrays by name (live references)."""
        params = {"weights": self.weights, "bias": self.bias}
        if self.bn is not None:
            params["gamma"] = self.bn.gamma
            params["beta"] = self.bn.beta
        return params

    def set_parameters(self, params):
        self.weights = params["weights"]
        self.bias = params["bias"]
        if self.bn is not None:
            self.bn.gamma = params["gamma"]
            self.bn.beta = params["beta"]

    def n_parameters(self):
        return sum(p.size for p in self.parameters().values())


@dataclass
class LayerCache:
    x: np.ndarray
    weights: np.ndarray
    activation: str
    out: np.ndarray  # activation output, before dropout
    bn_cache: _BnCache | None = None
    mask: np.ndarray | None = None
    keep_prob: float = 1.0
    output_shape: tuple = field(default=())


def dense_forward(x, layer, mode, rng=None):
    """Forward ``x`` (N x in) through ``layer``; returns ``(y, cache)``."""
    _check_mode(mode)
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise ShapeError(f"layer expects inputs of width {layer.n_in}, got shape {x.shape}")
    z = x @ layer.weights.T
    bn_cache = None
    if layer.bn is not None:
        z, bn_cache = batchnorm_forward(z, layer.bn, mode)
    else:
        z = z + layer.bias
    a = activate(z, layer.activation)
    y, mask, keep = a, None, 1.0
    if layer.keep_prob is not None and layer.keep_prob < 1.0:
        y, mask = dropout_forward(a, layer.keep_prob, rng, mode)
        keep = layer.keep_prob
        if mode == "infer":
            mask = None
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite layer output")
    cache = LayerCache(
        x=x,
        weights=layer.weights,
        activation=layer.activation,
        out=a,
        bn_cache=bn_cache,
        mask=mask,
        keep_prob=keep,
        output_shape=y.shape,
    )
    return y, cache


def layer_backward(cache, upstream_grad, through_activation=True):
    """Backpropagate through one layer.

    ``upstream_grad`` is dL/d(output). With ``through_activation=False`` it
    is instead taken as dL/d(pre-activation), which lets fused loss
    gradients (softmax + cross-entropy) skip the activation Jacobian.

    Returns ``(input_grad, param_grads)``; ``param_grads`` is keyed like
    :meth:`DenseLayer.parameters`.
    """
    if cache is None:
        raise ConfigurationError("backward needs a cache from a train-mode forward")
    if upstream_grad.shape != cache.output_shape:
        raise ShapeError(
            f"upstream gradient shape {upstream_grad.shape} != layer output {cache.output_shape}"
        )
    g = upstream_grad
    if through_activation:
        if cache.mask is not None:
            g = g * cache.mask / cache.keep_prob
        g = activation_backward(cache.out, g, cache.activation)
    grads = {}
    if cache.bn_cache is not None:
        g, grads["gamma"], grads["beta"] = batchnorm_backward(cache.bn_cache, g)
        grads["bias"] = np.zeros(g.shape[1])
    else:
        grads["bias"] = g.sum(axis=0)
    grads["weights"] = g.T @ cache.x
    return g @ cache.weights, grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def zeros_like(cls, params):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_update(params, grads, state, lr, block="params"):
    """One bias-corrected Adam step.

    Parameters
    ----------
    params, grads : dict of str -> ndarray
        Same keys and shapes. ``grads`` may hold a subset of ``params``;
        missing entries are left untouched (their moments too).
    state : AdamState
    lr : float

    Returns
    -------
    new_params : dict
    new_state : AdamState
    """
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    for k, g in grads.items():
        if k not in params or params[k].shape != g.shape:
            raise ShapeError(f"gradient '{block}.{k}' does not match its parameter")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block '{block}.{k}'")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = dict(params), dict(state.m), dict(state.v)
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, g in grads.items():
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        new_params[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(m_new, v_new, t, b1, b2, state.epsilon)


def lr_schedule(epoch, initial=LR_INITIAL, decay=LR_DECAY):
    """Exponentially decayed learning rate for a 0-based epoch index."""
    if epoch < 0:
        raise ConfigurationError(f"epoch must be >= 0, got {epoch}")
    return initial * decay**epoch


# ---------------------------------------------------------------------------
# plain stacks and gradient checking


def mse_sum(target, output):
    """Squared error summed per sample, averaged over the batch."""
    diff = target - output
    return float(np.sum(diff * diff) / target.shape[0])


class Sequential:
    """A plain stack of dense layers trained on summed squared error.

    Exists mainly as a small network for :func:`grad_check`; the
    autoencoder has its own model class.
    """

    def __init__(self, layers, seed=0):
        self.layers = list(layers)
        self.seed = seed

    def parameters(self):
        return {
            f"{i}.{k}": p for i, layer in enumerate(self.layers) for k, p in layer.parameters().items()
        }

    def _forward(self, x, mode):
        rng = RngStream(self.seed, 0)
        caches = []
        for i, layer in enumerate(self.layers):
            x, cache = dense_forward(x, layer, mode, rng.child(i))
            caches.append(cache)
        return x, caches

    def predict(self, x):
        return self._forward(np.asarray(x, dtype=np.float64), "infer")[0]

    def loss(self, batch, loss_selector="mse"):
        x, target = _split_batch(batch)
        out, _ = self._forward(x, "train")
        return mse_sum(target, out)

    def loss_and_grads(self, batch, loss_selector="mse"):
        x, target = _split_batch(batch)
        out, caches = self._forward(x, "train")
        grad = 2.0 * (out - target) / x.shape[0]
        grads = {}
        for i in reversed(range(len(self.layers))):
            grad, g = layer_backward(caches[i], grad)
            grads.update({f"{i}.{k}": v for k, v in g.items()})
        return mse_sum(target, out), grads


def _split_batch(batch):
    if isinstance(batch, tuple):
        x, target = batch
    else:
        x, target = batch, batch
    return np.asarray(x, dtype=np.float64), np.asarray(target, dtype=np.float64)


def grad_check(network, batch, loss_selector="mse", h=1e-5):
    """Largest relative disagreement between analytic and numeric gradients.

    ``network`` needs ``parameters()``, ``loss(batch, sel)`` and
    ``loss_and_grads(batch, sel)``. Central differences with step ``h``;
    relative error is ``|a - n| / max(|a|, |n|, 1e-8)``. The network is
    copied first so running statistics of the caller stay untouched.
    """
    net = copy.deepcopy(network)
    _, analytic = net.loss_and_grads(batch, loss_selector)
    worst = 0.0
    for name, arr in net.parameters().items():
        a_grad = analytic.get(name)
        if a_grad is None:
            a_grad = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            lp = net.loss(batch, loss_selector)
            arr[idx] = orig - h
            lm = net.loss(batch, loss_selector)
            arr[idx] = orig
            num = (lp - lm) / (2.0 * h)
            a = a_grad[idx]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
