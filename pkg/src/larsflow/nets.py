"""Small fully connected networks with explicit reverse-mode gradients.

These networks parameterize coupling-layer scale/shift maps and acceptance
probabilities. Everything is float64 numpy; there is no autograd framework
underneath. A forward pass returns a :class:`ForwardCache` holding the
per-layer activations (and dropout masks in training mode), and
:func:`mlp_backward` replays it in reverse to accumulate exact gradients.

Flattened parameter ordering
----------------------------
``MlpParams.param_vector()`` concatenates, for each layer from input to
output: the weight matrix in row-major (C) order with shape
``(fan_in, fan_out)``, then the bias vector. ``set_param_vector`` inverts
this bijectively and bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .rng import RngStream

SIGMOID_CLIP = 1e-12


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected network.

    ``output_head="sigmoid"`` squashes outputs into (0, 1), clipped away
    from the exact endpoints; acceptance networks require it.
    """

    input_dim: int
    hidden_layers: int
    hidden_units: int
    output_dim: int
    hidden_activation: str = "tanh"
    output_head: str = "linear"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if self.hidden_layers < 0:
            raise ValueError("hidden_layers must be >= 0")
        if self.hidden_layers > 0 and self.hidden_units < 1:
            raise ValueError("hidden_units must be positive")
        if self.hidden_activation not in ("tanh", "relu"):
            raise ValueError(f"unknown hidden_activation {self.hidden_activation!r}")
        if self.output_head not in ("linear", "sigmoid"):
            raise ValueError(f"unknown output_head {self.output_head!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def layer_dims(self) -> list[int]:
        return [self.input_dim] + [self.hidden_units] * self.hidden_layers + [self.output_dim]


class MlpParams:
    """Per-layer weights/biases plus reverse-mode gradient accumulators.

    Gradient buffers accumulate additively across ``mlp_backward`` calls
    until :meth:`zero_grad` clears them. ``version`` increments whenever
    parameters are replaced, which lets backward detect stale caches.
    """

    def __init__(self, spec: MlpSpec, weights, biases):
        self.spec = spec
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        dims = spec.layer_dims()
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[k], dims[k + 1]) or b.shape != (dims[k + 1],):
                raise ValueError(f"layer {k}: parameter shape mismatch")
        self.grad_weights = [np.zeros_like(w) for w in self.weights]
        self.grad_biases = [np.zeros_like(b) for b in self.biases]
        self.version = 0

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def zero_grad(self):
        for gw in self.grad_weights:
            gw[...] = 0.0
        for gb in self.grad_biases:
            gb[...] = 0.0

    def param_vector(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_param_vector(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError("parameter vector length mismatch")
        pos = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = vec[pos : pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = vec[pos : pos + b.size]
            pos += b.size
        self.version += 1

    def grad_vector(self) -> np.ndarray:
        parts = []
        for gw, gb in zip(self.grad_weights, self.grad_biases):
            parts.append(gw.ravel())
            parts.append(gb)
        return np.concatenate(parts) if parts else np.zeros(0)

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class ForwardCache:
    """Intermediate state of one forward pass, consumed by backward.

    Valid only for the exact parameters and input that produced it.
    """

    params_version: int
    params_ref: object
    x: np.ndarray
    mode: str
    layer_inputs: list
    preactivations: list
    dropout_masks: list
    output: np.ndarray
    squeeze_output: bool


def mlp_init(spec: MlpSpec, rng: RngStream) -> MlpParams:
    """Initialize parameters.

    Hidden weights are uniform in +-sqrt(6 / (fan_in + fan_out)); all
    biases start at zero. The final layer is zeroed entirely, so a fresh
    sigmoid-head network outputs exactly 0.5 and a fresh linear-head
    network outputs exactly 0 for any input.
    """
    dims = spec.layer_dims()
    weights, biases = [], []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        if k == len(dims) - 2:
            w = np.zeros((fan_in, fan_out))
        else:
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.generator.uniform(-lim, lim, size=(fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(spec, weights, biases)


def _promote(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError("input must be a vector or a 2D batch")


def mlp_forward(params: MlpParams, x, mode: str = "eval", rng: RngStream | None = None):
    """Run the network on a vector or an ``(n, input_dim)`` batch.

    Returns ``(output, cache)``. In eval mode dropout is the identity and
    no rng is consumed; in train mode with a positive dropout rate an rng
    is required and the sampled masks land in the cache so backward sees
    the same network the forward pass used.
    """
    spec = params.spec
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    xb, squeeze = _promote(x)
    if xb.shape[1] != spec.input_dim:
        raise ValueError(f"input dim {xb.shape[1]} does not match spec input_dim {spec.input_dim}")
    use_dropout = mode == "train" and spec.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("rng required for dropout in train mode")

    h = xb
    layer_inputs, preacts, masks = [], [], []
    n_layers = params.n_layers
    for k in range(n_layers - 1):
        layer_inputs.append(h)
        pre = h @ params.weights[k] + params.biases[k]
        preacts.append(pre)
        if spec.hidden_activation == "tanh":
            h = np.tanh(pre)
        else:
            h = np.maximum(pre, 0.0)
        if use_dropout:
            keep = rng.uniform(h.size).reshape(h.shape) >= spec.dropout_rate
            mask = keep / (1.0 - spec.dropout_rate)
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
    layer_inputs.append(h)
    pre = h @ params.weights[-1] + params.biases[-1]
    preacts.append(pre)
    if spec.output_head == "sigmoid":
        out = np.clip(expit(pre), SIGMOID_CLIP, 1.0 - SIGMOID_CLIP)
    else:
        out = pre

    cache = ForwardCache(
        params_version=params.version,
        params_ref=params,
        x=xb,
        mode=mode,
        layer_inputs=layer_inputs,
        preactivations=preacts,
        dropout_masks=masks,
        output=out,
        squeeze_output=squeeze,
    )
    return (out[0] if squeeze else out), cache


def mlp_backward(params: MlpParams, cache: ForwardCache, cotangent):
    """Reverse-mode gradients of <cotangent, output>.

    Accumulates parameter gradients into ``params.grad_weights`` /
    ``params.grad_biases`` (additively, until ``zero_grad``), and returns
    ``(input_gradient, (grad_weights, grad_biases))`` where the gradient
    lists alias the accumulators.
    """
    if cache is None:
        raise ValueError("missing forward cache")
    if cache.params_ref is not params or cache.params_version != params.version:
        raise ValueError("stale forward cache: parameters changed since forward pass")
    spec = params.spec
    cot = np.asarray(cotangent, dtype=np.float64)
    if cache.squeeze_output and cot.ndim == 1:
        cot = cot[None, :]
    if cot.shape != cache.output.shape:
        raise ValueError("cotangent shape does not match cached output")

    if spec.output_head == "sigmoid":
        out = cache.output
        d_pre = cot * out * (1.0 - out)
    else:
        d_pre = cot

    n_layers = params.n_layers
    for k in range(n_layers - 1, -1, -1):
        h_in = cache.layer_inputs[k]
        params.grad_weights[k] += h_in.T @ d_pre
        params.grad_biases[k] += d_pre.sum(axis=0)
        d_h = d_pre @ params.weights[k].T
        if k > 0:
            mask = cache.dropout_masks[k - 1]
            if mask is not None:
                d_h = d_h * mask
            pre = cache.preactivations[k - 1]
            if spec.hidden_activation == "tanh":
                d_pre = d_h * (1.0 - np.tanh(pre) ** 2)
            else:
                d_pre = d_h * (pre > 0.0)
        else:
            d_input = d_h
    if cache.squeeze_output:
        d_input = d_input[0]
    return d_input, (params.grad_weights, params.grad_biases)
