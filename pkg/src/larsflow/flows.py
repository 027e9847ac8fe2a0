"""Invertible layers and their composition into a flow model.

Layers implement ``forward`` (base-to-data), ``inverse``, and a
``backward`` that consumes the cache of either direction together with
cotangents on the output and on the per-sample log-determinant. Parameter
gradients come back as a flat vector in the layer's documented ordering.

Model parameter ordering: the flow parameters (all layers, base-to-data
order) come first, followed by the base distribution parameters. Gradient
vectors from :meth:`FlowModel.log_prob_backward` and the training steps
use the same layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bases import BaseGrads
from .errors import NumericsError
from .nets import MlpParams, MlpSpec, mlp_backward, mlp_forward, mlp_init
from .rng import RngStream


def _check_finite(arr, layer_name: str):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"numerical overflow in layer {layer_name}")


class CouplingLayer:
    """Affine coupling transform.

    Dimensions where ``mask`` is True pass through unchanged and condition
    two networks producing a log-scale and a shift for the remaining
    dimensions. The raw log-scale is squashed to (-scale_cap, scale_cap)
    with a tanh so a wild network output cannot blow up the exponential.
    """

    def __init__(self, mask, scale_net: MlpParams, shift_net: MlpParams, scale_cap: float = 5.0):
        self.mask = np.asarray(mask, dtype=bool)
        if self.mask.ndim != 1:
            raise ValueError("mask must be a 1D boolean vector")
        n_keep = int(self.mask.sum())
        n_change = int((~self.mask).sum())
        if n_keep == 0 or n_change == 0:
            raise ValueError("mask needs at least one kept and one transformed dimension")
        for net, name in ((scale_net, "scale"), (shift_net, "shift")):
            if net.spec.input_dim != n_keep or net.spec.output_dim != n_change:
                raise ValueError(f"{name} net must map {n_keep} inputs to {n_change} outputs")
        if scale_cap <= 0:
            raise ValueError("scale_cap must be positive")
        self.d = self.mask.size
        self.keep = np.flatnonzero(self.mask)
        self.change = np.flatnonzero(~self.mask)
        self.scale_net = scale_net
        self.shift_net = shift_net
        self.scale_cap = float(scale_cap)

    @property
    def n_params(self) -> int:
        return self.scale_net.n_params + self.shift_net.n_params

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.scale_net.param_vector(), self.shift_net.param_vector()])

    def set_param_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        ns = self.scale_net.n_params
        self.scale_net.set_param_vector(vec[:ns])
        self.shift_net.set_param_vector(vec[ns:])

    def _nets(self, xa, mode, rng):
        s_raw, cs = mlp_forward(self.scale_net, xa, mode=mode, rng=rng)
        s_hat = self.scale_cap * np.tanh(s_raw / self.scale_cap)
        t, ct = mlp_forward(self.shift_net, xa, mode=mode, rng=rng)
        return s_raw, s_hat, t, cs, ct

    def forward(self, x, mode: str = "eval", rng: RngStream | None = None):
        x = np.asarray(x, dtype=np.float64)
        xa = x[:, self.keep]
        xb = x[:, self.change]
        s_raw, s_hat, t, cs, ct = self._nets(xa, mode, rng)
        yb = xb * np.exp(s_hat) + t
        y = np.empty_like(x)
        y[:, self.keep] = xa
        y[:, self.change] = yb
        _check_finite(y, "coupling")
        logdet = s_hat.sum(axis=1)
        cache = ("fwd", xa, xb, s_raw, s_hat, t, cs, ct)
        return y, logdet, cache

    def inverse(self, y, mode: str = "eval", rng: RngStream | None = None):
        y = np.asarray(y, dtype=np.float64)
        ya = y[:, self.keep]
        yb = y[:, self.change]
        s_raw, s_hat, t, cs, ct = self._nets(ya, mode, rng)
        xb = (yb - t) * np.exp(-s_hat)
        x = np.empty_like(y)
        x[:, self.keep] = ya
        x[:, self.change] = xb
        _check_finite(x, "coupling")
        logdet = -s_hat.sum(axis=1)
        cache = ("inv", ya, yb, s_raw, s_hat, t, cs, ct)
        return x, logdet, cache

    def backward(self, cache, d_out, d_logdet):
        direction, xa, xb_or_yb, s_raw, s_hat, t, cs, ct = cache
        d_out = np.asarray(d_out, dtype=np.float64)
        d_logdet = np.asarray(d_logdet, dtype=np.float64)
        n = d_out.shape[0]
        d_in = np.empty_like(d_out)
        sech2 = 1.0 - np.tanh(s_raw / self.scale_cap) ** 2
        if direction == "fwd":
            xb = xb_or_yb
            dyb = d_out[:, self.change]
            d_in[:, self.change] = dyb * np.exp(s_hat)
            d_s_hat = dyb * xb * np.exp(s_hat) + d_logdet[:, None]
            d_t = dyb
        else:
            yb = xb_or_yb
            xb = (yb - t) * np.exp(-s_hat)
            dxb = d_out[:, self.change]
            d_in[:, self.change] = dxb * np.exp(-s_hat)
            d_s_hat = -dxb * xb - d_logdet[:, None]
            d_t = -dxb * np.exp(-s_hat)
        d_s_raw = d_s_hat * sech2
        self.scale_net.zero_grad()
        self.shift_net.zero_grad()
        d_xa_s, _ = mlp_backward(self.scale_net, cs, d_s_raw)
        d_xa_t, _ = mlp_backward(self.shift_net, ct, d_t)
        d_in[:, self.keep] = d_out[:, self.keep] + d_xa_s + d_xa_t
        grads = np.concatenate([self.scale_net.grad_vector(), self.shift_net.grad_vector()])
        return d_in, grads


class InvertibleLinear:
    """Learned invertible linear map in LU form.

    W = P L U with a fixed permutation P (identity unless given), L unit
    lower triangular, and U upper triangular whose diagonal is
    sign * exp(log_diag) with fixed signs. log|det W| is the sum of
    log_diag, so the determinant can never hit zero. Initialized at the
    identity.

    Parameter ordering: strictly-lower entries of L (row-major), then
    strictly-upper entries of U (row-major), then log_diag.
    """

    def __init__(self, d: int, perm=None):
        if d < 2:
            raise ValueError("d must be >= 2")
        self.d = d
        self.perm = np.arange(d) if perm is None else np.asarray(perm, dtype=np.int64)
        if sorted(self.perm.tolist()) != list(range(d)):
            raise ValueError("perm must be a permutation of 0..d-1")
        self.inv_perm = np.argsort(self.perm)
        self.sign = np.ones(d)
        self.lower = np.zeros((d, d))
        self.upper = np.zeros((d, d))
        self.log_diag = np.zeros(d)
        self._tril = np.tril_indices(d, -1)
        self._triu = np.triu_indices(d, 1)

    @property
    def n_params(self) -> int:
        return self._tril[0].size + self._triu[0].size + self.d

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.lower[self._tril], self.upper[self._triu], self.log_diag])

    def set_param_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        nl = self._tril[0].size
        nu = self._triu[0].size
        self.lower[self._tril] = vec[:nl]
        self.upper[self._triu] = vec[nl : nl + nu]
        self.log_diag[...] = vec[nl + nu :]

    def _matrices(self):
        L = np.eye(self.d) + self.lower
        U = self.upper.copy()
        np.fill_diagonal(U, self.sign * np.exp(self.log_diag))
        W = (L @ U)[self.perm, :]
        return L, U, W

    def forward(self, x, mode: str = "eval", rng=None):
        x = np.asarray(x, dtype=np.float64)
        L, U, W = self._matrices()
        y = x @ W.T
        _check_finite(y, "linear")
        logdet = np.full(x.shape[0], float(self.log_diag.sum()))
        return y, logdet, ("fwd", x, None, L, U, W)

    def inverse(self, y, mode: str = "eval", rng=None):
        y = np.asarray(y, dtype=np.float64)
        L, U, W = self._matrices()
        x = np.linalg.solve(W, y.T).T
        _check_finite(x, "linear")
        logdet = np.full(y.shape[0], -float(self.log_diag.sum()))
        return x, logdet, ("inv", y, x, L, U, W)

    def _chain_to_params(self, dW, L, U, d_diag_extra):
        # W = P L U; un-permute the W cotangent, then split into L/U parts.
        dLU = dW[self.inv_perm, :]
        dL = dLU @ U.T
        dU = L.T @ dLU
        g_lower = dL[self._tril]
        g_upper = dU[self._triu]
        g_logdiag = np.diag(dU) * np.diag(U) + d_diag_extra
        return np.concatenate([g_lower, g_upper, g_logdiag])

    def backward(self, cache, d_out, d_logdet):
        direction, arr_in, arr_out, L, U, W = cache
        d_out = np.asarray(d_out, dtype=np.float64)
        d_logdet = np.asarray(d_logdet, dtype=np.float64)
        if direction == "fwd":
            x = arr_in
            d_in = d_out @ W
            dW = d_out.T @ x
            extra = np.full(self.d, d_logdet.sum())
        else:
            z = arr_out
            W_inv = np.linalg.inv(W)
            d_in = d_out @ W_inv
            dW = -W_inv.T @ (d_out.T @ z)
            extra = np.full(self.d, -d_logdet.sum())
        grads = self._chain_to_params(dW, L, U, extra)
        return d_in, grads


class AffineConstant:
    """Learnable per-dimension scale and shift: x = exp(log_s) * z + b.

    Placed directly after a resampled base so the proposal stays a fixed
    standard normal while the model still learns location and spread.
    """

    def __init__(self, d: int):
        if d < 1:
            raise ValueError("d must be >= 1")
        self.d = d
        self.log_s = np.zeros(d)
        self.b = np.zeros(d)

    @property
    def n_params(self) -> int:
        return 2 * self.d

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.log_s, self.b])

    def set_param_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        self.log_s[...] = vec[: self.d]
        self.b[...] = vec[self.d :]

    def forward(self, x, mode: str = "eval", rng=None):
        x = np.asarray(x, dtype=np.float64)
        y = x * np.exp(self.log_s) + self.b
        _check_finite(y, "affine")
        logdet = np.full(x.shape[0], float(self.log_s.sum()))
        return y, logdet, ("fwd", x, y)

    def inverse(self, y, mode: str = "eval", rng=None):
        y = np.asarray(y, dtype=np.float64)
        x = (y - self.b) * np.exp(-self.log_s)
        _check_finite(x, "affine")
        logdet = np.full(y.shape[0], -float(self.log_s.sum()))
        return x, logdet, ("inv", y, x)

    def backward(self, cache, d_out, d_logdet):
        direction, arr_in, arr_out = cache
        d_out = np.asarray(d_out, dtype=np.float64)
        d_logdet = np.asarray(d_logdet, dtype=np.float64)
        if direction == "fwd":
            x = arr_in
            scale = np.exp(self.log_s)
            d_in = d_out * scale
            g_log_s = (d_out * x).sum(axis=0) * scale + d_logdet.sum()
            g_b = d_out.sum(axis=0)
        else:
            x = arr_out
            scale = np.exp(-self.log_s)
            d_in = d_out * scale
            g_log_s = -(d_out * x).sum(axis=0) - d_logdet.sum()
            g_b = -(d_out * scale).sum(axis=0)
        return d_in, np.concatenate([g_log_s, g_b])


def layer_apply(layer, x, direction: str = "forward", mode: str = "eval", rng=None):
    """Apply a single layer in the requested direction.

    Returns ``(output, logdet, cache)``; the cache feeds ``layer.backward``.
    """
    if direction == "forward":
        return layer.forward(x, mode=mode, rng=rng)
    if direction == "inverse":
        return layer.inverse(x, mode=mode, rng=rng)
    raise ValueError(f"unknown direction {direction!r}")


def make_coupling_net(n_in: int, n_out: int, hidden_layers: int, hidden_units: int,
                      rng: RngStream, activation: str = "tanh", dropout_rate: float = 0.0) -> MlpParams:
    spec = MlpSpec(
        input_dim=n_in,
        hidden_layers=hidden_layers,
        hidden_units=hidden_units,
        output_dim=n_out,
        hidden_activation=activation,
        output_head="linear",
        dropout_rate=dropout_rate,
    )
    return mlp_init(spec, rng)


def alternating_mask(d: int, flip: bool) -> np.ndarray:
    """Even/odd coordinate mask; ``flip`` selects the complement."""
    mask = (np.arange(d) % 2) == 0
    return ~mask if flip else mask


@dataclass
class ModelGrads:
    """Gradient of a scalar loss in model parameter layout.

    ``z_coeff`` carries the cotangent of any plugged-in normalizer value;
    see :class:`larsflow.bases.BaseGrads`. ``d_input`` is the gradient
    with respect to the evaluation points.
    """

    theta: np.ndarray
    phi: np.ndarray
    z_coeff: np.ndarray
    d_input: np.ndarray

    def full(self, z_grad=None) -> np.ndarray:
        """Flat (theta, phi) gradient; ``z_grad`` completes the normalizer
        path with the gradient of the current Monte Carlo estimate."""
        phi = self.phi.copy()
        if self.z_coeff.size:
            if z_grad is None:
                raise ValueError("z_grad required to resolve the normalizer gradient path")
            phi += self.z_coeff @ np.atleast_2d(z_grad)
        return np.concatenate([self.theta, phi])


class FlowModel:
    """A base distribution pushed through a stack of invertible layers.

    ``layers`` are ordered base-to-data. ``log_prob`` runs the inverse
    pass and adds the inverse-direction log-determinants to the base log
    density; sampling draws from the base (rejection loop included for
    resampled bases) and runs the forward pass.
    """

    def __init__(self, base, layers):
        self.base = base
        self.layers = list(layers)
        for layer in self.layers:
            if layer.d != base.d:
                raise ValueError("layer dimension does not match base dimension")

    @property
    def d(self) -> int:
        return self.base.d

    @property
    def n_theta(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def n_phi(self) -> int:
        return self.base.n_params

    @property
    def n_params(self) -> int:
        return self.n_theta + self.n_phi

    def param_vector(self) -> np.ndarray:
        parts = [layer.param_vector() for layer in self.layers]
        parts.append(self.base.param_vector())
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_param_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError("parameter vector length mismatch")
        pos = 0
        for layer in self.layers:
            layer.set_param_vector(vec[pos : pos + layer.n_params])
            pos += layer.n_params
        self.base.set_param_vector(vec[pos:])

    def log_prob_with_cache(self, x, mode: str = "eval", rng=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        h = x
        logdets = []
        caches = []
        for layer in reversed(self.layers):
            h, ld, c = layer.inverse(h, mode=mode, rng=rng)
            logdets.append(ld)
            caches.append(c)
        lp_base, base_cache = self.base.log_prob_batch(h)
        lp = lp_base + (np.sum(logdets, axis=0) if logdets else 0.0)
        return lp, ("logprob", caches, base_cache)

    def log_prob(self, x) -> np.ndarray:
        lp, _ = self.log_prob_with_cache(x)
        return lp

    def log_prob_backward(self, cache, cotangent) -> ModelGrads:
        """Gradients of <cotangent, log_prob> for the cached evaluation."""
        kind, caches, base_cache = cache
        if kind != "logprob":
            raise ValueError("cache does not belong to a log_prob evaluation")
        cot = np.asarray(cotangent, dtype=np.float64)
        bg: BaseGrads = self.base.log_prob_backward(base_cache, cot)
        d_h = bg.dz
        theta_parts = [None] * len(self.layers)
        # The inverse pass visited layers last-to-first; undo it first-to-last.
        for idx, layer in enumerate(self.layers):
            layer_cache = caches[len(self.layers) - 1 - idx]
            d_h, g = layer.backward(layer_cache, d_h, cot)
            theta_parts[idx] = g
        theta = np.concatenate(theta_parts) if theta_parts else np.zeros(0)
        return ModelGrads(theta=theta, phi=bg.phi, z_coeff=bg.z_coeff, d_input=d_h)

    def forward_from_base(self, z, mode: str = "eval", rng=None):
        """Push base-space points to data space; returns the summed
        forward log-determinant and per-layer caches."""
        h = np.atleast_2d(np.asarray(z, dtype=np.float64))
        total_ld = np.zeros(h.shape[0])
        caches = []
        for layer in self.layers:
            h, ld, c = layer.forward(h, mode=mode, rng=rng)
            total_ld += ld
            caches.append(c)
        return h, total_ld, caches

    def forward_backward(self, caches, d_x, d_logdet):
        """Gradients of <d_x, x> + <d_logdet, logdet> through the forward
        pass, with base samples held fixed. Returns (d_z, theta_grad)."""
        d_h = np.asarray(d_x, dtype=np.float64)
        theta_parts = [None] * len(self.layers)
        for idx in range(len(self.layers) - 1, -1, -1):
            d_h, g = self.layers[idx].backward(caches[idx], d_h, d_logdet)
            theta_parts[idx] = g
        theta = np.concatenate(theta_parts) if theta_parts else np.zeros(0)
        return d_h, theta

    def sample(self, rng: RngStream, n: int):
        """Draw n samples; returns (x, log_prob, attempts)."""
        if n < 1:
            raise ValueError("n must be >= 1")
        z, attempts = self.base.sample_batch(n, rng)
        lp_base, _ = self.base.log_prob_batch(z)
        x, fwd_ld, _ = self.forward_from_base(z)
        return x, lp_base - fwd_ld, attempts


def flow_log_prob(model: FlowModel, x) -> np.ndarray:
    """Model log density at x (vector or batch)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return float(model.log_prob(x[None, :])[0])
    return model.log_prob(x)


def flow_sample(model: FlowModel, rng: RngStream, n: int):
    """Draw n samples with their log densities."""
    x, lp, _ = model.sample(rng, n)
    return x, lp


def flow_param_grads(model: FlowModel, x, cotangent=None, z_grad=None) -> np.ndarray:
    """Gradient of sum(cotangent * log_prob(x)) over (theta, phi).

    With a resampled base the normalizer is treated as the plugged-in
    value unless ``z_grad`` (gradient of the Monte Carlo estimate) is
    supplied to complete that path.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cot = np.ones(x.shape[0]) if cotangent is None else np.asarray(cotangent, dtype=np.float64)
    lp, cache = model.log_prob_with_cache(x)
    grads = model.log_prob_backward(cache, cot)
    if grads.z_coeff.size and z_grad is None:
        z_grad = np.zeros((grads.z_coeff.size, model.n_phi))
    return grads.full(z_grad)
