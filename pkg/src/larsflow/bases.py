"""Base distributions: Gaussian, mixture, and resampled variants.

The resampled base reweights a standard-normal proposal pi(z) by a learned
acceptance probability a(z) in (0, 1). Truncating the rejection loop after
T attempts (the T-th proposal is always accepted) yields the density

    p_T(z) = pi(z) * (alpha + (1 - alpha) * a(z) / Z),
    alpha  = (1 - Z)^(T-1),
    Z      = integral of pi(z) * a(z) dz,

with Z estimated by Monte Carlo as the mean acceptance over proposal
draws. During training the value of Z is smoothed by an exponential
moving average while its gradient path uses only the current batch
estimate; both halves of that contract live here.

Every base exposes a batch ``log_prob_batch`` returning a cache, a
``log_prob_backward`` producing input gradients plus parameter gradients,
and ``sample_batch``. For resampled bases the backward additionally
returns the coefficient of the plugged-in normalizer, which callers
combine with the gradient of the current Monte Carlo estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import MlpParams, MlpSpec, mlp_backward, mlp_forward, mlp_init
from .rng import Grid2D, RngStream, draw_standard_normal, log_sum_exp

LOG_2PI = float(np.log(2.0 * np.pi))
Z_CLAMP_LO = 1e-6
Z_CLAMP_HI = 1.0 - 1e-6
ARG_FLOOR = 1e-38
DEFAULT_EMA_DECAY = 0.05
DEFAULT_MC_SAMPLES = 512


@dataclass
class BaseGrads:
    """Backward result of a base log-density.

    ``z_coeff`` holds, per normalizer slot, the summed cotangent of the
    plugged-in Z value; multiply it with the gradient of the current
    Monte Carlo estimate to complete the parameter gradient.
    """

    dz: np.ndarray
    phi: np.ndarray
    z_coeff: np.ndarray


def _std_normal_logpdf(z: np.ndarray) -> np.ndarray:
    return -0.5 * z.shape[1] * LOG_2PI - 0.5 * np.sum(z * z, axis=1)


def _as_batch(z, d: int) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
        squeeze = True
    elif z.ndim == 2:
        squeeze = False
    else:
        raise ValueError("z must be a vector or a 2D batch")
    if z.shape[1] != d:
        raise ValueError(f"dimension mismatch: got {z.shape[1]}, expected {d}")
    return z, squeeze


class StandardGaussian:
    """Zero-mean identity-covariance Gaussian with no learnable parameters."""

    n_z = 0

    def __init__(self, d: int):
        if d < 1:
            raise ValueError("d must be >= 1")
        self.d = d

    @property
    def n_params(self) -> int:
        return 0

    def param_vector(self) -> np.ndarray:
        return np.zeros(0)

    def set_param_vector(self, vec):
        if np.asarray(vec).size != 0:
            raise ValueError("StandardGaussian has no parameters")

    def log_prob_batch(self, z, z_value=None):
        zb, _ = _as_batch(z, self.d)
        return _std_normal_logpdf(zb), zb

    def log_prob_backward(self, cache, cotangent) -> BaseGrads:
        zb = cache
        cot = np.asarray(cotangent, dtype=np.float64)
        dz = -zb * cot[:, None]
        return BaseGrads(dz=dz, phi=np.zeros(0), z_coeff=np.zeros(0))

    def sample_batch(self, n: int, rng: RngStream):
        z = draw_standard_normal(rng, n, self.d)
        return z, np.ones(n, dtype=np.int64)


def std_normal_log_prob(base: StandardGaussian, z) -> float:
    """Log density of the standard normal at a single point."""
    zb, _ = _as_batch(z, base.d)
    if zb.shape[0] != 1:
        raise ValueError("std_normal_log_prob expects a single vector")
    return float(_std_normal_logpdf(zb)[0])


class GaussianMixture:
    """Diagonal Gaussian mixture with learnable means, log-variances, and
    logit weights. Differentiable along the log-prob path only."""

    n_z = 0

    def __init__(self, means, log_vars, logit_weights):
        self.means = np.asarray(means, dtype=np.float64)
        self.log_vars = np.asarray(log_vars, dtype=np.float64)
        self.logit_weights = np.asarray(logit_weights, dtype=np.float64)
        if self.means.ndim != 2 or self.means.shape != self.log_vars.shape:
            raise ValueError("means and log_vars must share shape (K, d)")
        if self.logit_weights.shape != (self.means.shape[0],):
            raise ValueError("logit_weights must have one entry per component")
        self.K, self.d = self.means.shape

    @property
    def n_params(self) -> int:
        return self.means.size + self.log_vars.size + self.logit_weights.size

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.means.ravel(), self.log_vars.ravel(), self.logit_weights])

    def set_param_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError("parameter vector length mismatch")
        m = self.means.size
        v = self.log_vars.size
        self.means[...] = vec[:m].reshape(self.means.shape)
        self.log_vars[...] = vec[m : m + v].reshape(self.log_vars.shape)
        self.logit_weights[...] = vec[m + v :]

    def log_weights(self) -> np.ndarray:
        return self.logit_weights - log_sum_exp(self.logit_weights)

    def log_prob_batch(self, z, z_value=None):
        zb, _ = _as_batch(z, self.d)
        diff = zb[:, None, :] - self.means[None, :, :]
        inv_var = np.exp(-self.log_vars)
        comp = -0.5 * (LOG_2PI + self.log_vars)[None, :, :] - 0.5 * diff**2 * inv_var[None, :, :]
        comp_lp = comp.sum(axis=2) + self.log_weights()[None, :]
        lp = log_sum_exp(comp_lp, axis=1)
        cache = (zb, diff, inv_var, comp_lp, lp)
        return lp, cache

    def log_prob_backward(self, cache, cotangent) -> BaseGrads:
        zb, diff, inv_var, comp_lp, lp = cache
        cot = np.asarray(cotangent, dtype=np.float64)
        resp = np.exp(comp_lp - lp[:, None])
        dcomp = resp * cot[:, None]
        d_means = np.einsum("ik,ikj->kj", dcomp, diff * inv_var[None, :, :])
        d_logvars = np.einsum("ik,ikj->kj", dcomp, -0.5 + 0.5 * diff**2 * inv_var[None, :, :])
        col = dcomp.sum(axis=0)
        w = np.exp(self.log_weights())
        d_logits = col - w * col.sum()
        dz = -np.einsum("ik,ikj->ij", dcomp, diff * inv_var[None, :, :])
        phi = np.concatenate([d_means.ravel(), d_logvars.ravel(), d_logits])
        return BaseGrads(dz=dz, phi=phi, z_coeff=np.zeros(0))

    def sample_batch(self, n: int, rng: RngStream):
        w = np.exp(self.log_weights())
        cum = np.cumsum(w)
        cum[-1] = 1.0
        ks = np.searchsorted(cum, rng.uniform(n), side="right")
        eps = draw_standard_normal(rng, n, self.d)
        z = self.means[ks] + np.exp(0.5 * self.log_vars[ks]) * eps
        return z, np.ones(n, dtype=np.int64)


def mixture_init(K: int, d: int, rng: RngStream) -> GaussianMixture:
    """Mixture with means uniform in [-2.5, 2.5]^d, variances 0.5, uniform
    weights."""
    if K < 1 or d < 1:
        raise ValueError("K and d must be >= 1")
    means = rng.generator.uniform(-2.5, 2.5, size=(K, d))
    log_vars = np.full((K, d), np.log(0.5))
    return GaussianMixture(means, log_vars, np.zeros(K))


def mixture_log_prob(base: GaussianMixture, z) -> float:
    zb, _ = _as_batch(z, base.d)
    if zb.shape[0] != 1:
        raise ValueError("mixture_log_prob expects a single vector")
    lp, _ = base.log_prob_batch(zb)
    return float(lp[0])


def mixture_sample(base: GaussianMixture, rng: RngStream) -> np.ndarray:
    z, _ = base.sample_batch(1, rng)
    return z[0]


def _trunc_log_term(a: np.ndarray, z_value: float, T: int):
    """log(alpha + (1 - alpha) * a / Z) with its partials.

    The clamp on Z applies to alpha and its derivative only; the a / Z
    ratio uses the raw value so that constant acceptance collapses the
    density to the proposal exactly.
    """
    zc = min(max(z_value, Z_CLAMP_LO), Z_CLAMP_HI)
    alpha = (1.0 - zc) ** (T - 1)
    ratio = a / z_value
    arg = alpha + (1.0 - alpha) * ratio
    arg = np.maximum(arg, ARG_FLOOR)
    log_term = np.log(arg)
    d_a = (1.0 - alpha) / z_value / arg
    dalpha_dz = -(T - 1) * (1.0 - zc) ** (T - 2) if T > 1 else 0.0
    d_z = (dalpha_dz * (1.0 - ratio) - (1.0 - alpha) * a / z_value**2) / arg
    return log_term, d_a, d_z


class ResampledBase:
    """Standard-normal proposal filtered by a learned acceptance network.

    ``z_ema`` tracks the smoothed normalizer across training updates;
    ``z_override`` (used during evaluation) temporarily replaces it with a
    high-precision estimate without touching training state.
    """

    n_z = 1

    def __init__(
        self,
        d: int,
        acceptance: MlpParams,
        T: int = 100,
        ema_decay: float = DEFAULT_EMA_DECAY,
        mc_samples: int = DEFAULT_MC_SAMPLES,
    ):
        if d < 1:
            raise ValueError("d must be >= 1")
        if acceptance.spec.input_dim != d or acceptance.spec.output_dim != 1:
            raise ValueError("acceptance network must map d inputs to 1 output")
        if acceptance.spec.output_head != "sigmoid":
            raise ValueError("acceptance network needs a sigmoid output head")
        if T < 1:
            raise ValueError("T must be a positive integer")
        if not 0.0 < ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in (0, 1]")
        if mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        self.d = d
        self.acceptance = acceptance
        self.T = int(T)
        self.ema_decay = float(ema_decay)
        self.mc_samples = int(mc_samples)
        self.z_ema: float | None = None
        self.z_override: float | None = None

    @property
    def n_params(self) -> int:
        return self.acceptance.n_params

    def param_vector(self) -> np.ndarray:
        return self.acceptance.param_vector()

    def set_param_vector(self, vec):
        self.acceptance.set_param_vector(vec)

    def set_z_override(self, value: float | None):
        if value is not None and not 0.0 < value <= 1.0:
            raise ValueError("z override must lie in (0, 1]")
        self.z_override = value

    def z_value(self, explicit: float | None = None) -> float:
        for candidate in (explicit, self.z_override, self.z_ema):
            if candidate is not None:
                return float(candidate)
        raise RuntimeError(
            "no normalizer value available: run estimate_z/ema_update or set an override"
        )

    def accept_prob(self, z, mode: str = "eval", rng: RngStream | None = None):
        zb, _ = _as_batch(z, self.d)
        out, cache = mlp_forward(self.acceptance, zb, mode=mode, rng=rng)
        return out[:, 0], cache

    def log_prob_batch(self, z, z_value: float | None = None, mode: str = "eval", rng=None):
        zb, _ = _as_batch(z, self.d)
        zv = self.z_value(z_value)
        if not 0.0 < zv <= 1.0:
            raise ValueError("z_value must lie in (0, 1]")
        a, net_cache = self.accept_prob(zb, mode=mode, rng=rng)
        log_term, d_a, d_z = _trunc_log_term(a, zv, self.T)
        lp = _std_normal_logpdf(zb) + log_term
        cache = (zb, net_cache, d_a, d_z)
        return lp, cache

    def log_prob_backward(self, cache, cotangent) -> BaseGrads:
        zb, net_cache, d_a, d_z = cache
        cot = np.asarray(cotangent, dtype=np.float64)
        self.acceptance.zero_grad()
        d_out = (cot * d_a)[:, None]
        d_input, _ = mlp_backward(self.acceptance, net_cache, d_out)
        phi = self.acceptance.grad_vector().copy()
        dz = -zb * cot[:, None] + d_input
        z_coeff = np.array([float(np.sum(cot * d_z))])
        return BaseGrads(dz=dz, phi=phi, z_coeff=z_coeff)

    def sample_batch(self, n: int, rng: RngStream):
        """Vectorized truncated rejection sampling.

        Every pending slot draws one proposal per round; the T-th round
        accepts unconditionally, so attempts lie in [1, T].
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        out = np.empty((n, self.d))
        attempts = np.zeros(n, dtype=np.int64)
        pending = np.arange(n)
        for t in range(1, self.T + 1):
            z = draw_standard_normal(rng, pending.size, self.d)
            if t == self.T:
                acc = np.ones(pending.size, dtype=bool)
            else:
                a, _ = self.accept_prob(z)
                acc = rng.uniform(pending.size) < a
            hit = pending[acc]
            out[hit] = z[acc]
            attempts[hit] = t
            pending = pending[~acc]
            if pending.size == 0:
                break
        return out, attempts

    def estimate_z(self, S: int, rng: RngStream, want_grad: bool = True, chunk: int = 1 << 16):
        """Monte Carlo normalizer estimate over S proposal draws.

        Returns ``(z_hat, grad)`` where ``grad`` is the gradient of the
        estimate with respect to the acceptance parameters (mean of the
        per-draw acceptance gradients), or None when not requested.
        """
        if S < 1:
            raise ValueError("S must be >= 1")
        if want_grad:
            self.acceptance.zero_grad()
        total = 0.0
        remaining = S
        while remaining > 0:
            m = min(chunk, remaining)
            z = draw_standard_normal(rng, m, self.d)
            a, cache = self.accept_prob(z)
            total += float(a.sum())
            if want_grad:
                mlp_backward(self.acceptance, cache, np.full((m, 1), 1.0 / S))
            remaining -= m
        z_hat = total / S
        grad = self.acceptance.grad_vector().copy() if want_grad else None
        return z_hat, grad

    def ema_update(self, z_batch: float) -> float:
        if not 0.0 < z_batch <= 1.0:
            raise ValueError("z_batch must lie in (0, 1]")
        if self.z_ema is None:
            self.z_ema = float(z_batch)
        else:
            self.z_ema = (1.0 - self.ema_decay) * self.z_ema + self.ema_decay * float(z_batch)
        return self.z_ema


def lars_log_prob(base: ResampledBase, z, z_value: float) -> float:
    """Truncated resampled log density at a single point, with explicit Z."""
    if not 0.0 < z_value <= 1.0:
        raise ValueError("z_value must lie in (0, 1]")
    lp, _ = base.log_prob_batch(np.asarray(z, dtype=np.float64)[None, :], z_value=z_value)
    return float(lp[0])


def lars_sample(base: ResampledBase, rng: RngStream):
    """Single draw via the truncated rejection loop; returns (z, attempts)."""
    z, attempts = base.sample_batch(1, rng)
    return z[0], int(attempts[0])


def lars_estimate_z(base: ResampledBase, S: int, rng: RngStream, want_grad: bool = True):
    return base.estimate_z(S, rng, want_grad=want_grad)


def lars_ema_update(base: ResampledBase, z_batch: float) -> float:
    return base.ema_update(z_batch)


class GroupedResampledBase:
    """Resampled base factorized over equal-size groups of dimensions.

    One shared acceptance network maps a group vector to ``num_groups``
    sigmoid outputs; group j uses output j. The joint density is the
    product of per-group truncated resampled densities, each with its own
    smoothed normalizer, and a single batch of proposals updates every
    group's estimate at once.
    """

    def __init__(
        self,
        num_groups: int,
        group_dim: int,
        acceptance: MlpParams,
        T: int = 100,
        ema_decay: float = DEFAULT_EMA_DECAY,
        mc_samples: int = DEFAULT_MC_SAMPLES,
    ):
        if num_groups < 1 or group_dim < 1:
            raise ValueError("num_groups and group_dim must be >= 1")
        if acceptance.spec.input_dim != group_dim or acceptance.spec.output_dim != num_groups:
            raise ValueError("shared acceptance net must map group_dim inputs to num_groups outputs")
        if acceptance.spec.output_head != "sigmoid":
            raise ValueError("acceptance network needs a sigmoid output head")
        if T < 1:
            raise ValueError("T must be a positive integer")
        if not 0.0 < ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in (0, 1]")
        self.G = int(num_groups)
        self.g = int(group_dim)
        self.d = self.G * self.g
        self.acceptance = acceptance
        self.T = int(T)
        self.ema_decay = float(ema_decay)
        self.mc_samples = int(mc_samples)
        self.z_ema: np.ndarray | None = None
        self.z_override: np.ndarray | None = None

    @property
    def n_z(self) -> int:
        return self.G

    @property
    def n_params(self) -> int:
        return self.acceptance.n_params

    def param_vector(self) -> np.ndarray:
        return self.acceptance.param_vector()

    def set_param_vector(self, vec):
        self.acceptance.set_param_vector(vec)

    def set_z_override(self, values):
        if values is None:
            self.z_override = None
            return
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (self.G,) or not np.all((v > 0.0) & (v <= 1.0)):
            raise ValueError("z override must be G values in (0, 1]")
        self.z_override = v

    def z_values(self, explicit=None) -> np.ndarray:
        for candidate in (explicit, self.z_override, self.z_ema):
            if candidate is not None:
                return np.asarray(candidate, dtype=np.float64)
        raise RuntimeError(
            "no normalizer values available: run estimate_z/ema_update or set an override"
        )

    def log_prob_batch(self, z, z_value=None, mode: str = "eval", rng=None):
        zb, _ = _as_batch(z, self.d)
        zv = self.z_values(z_value)
        if zv.shape != (self.G,):
            raise ValueError("z_value must provide one entry per group")
        n = zb.shape[0]
        lp = np.zeros(n)
        group_caches = []
        for j in range(self.G):
            block = zb[:, j * self.g : (j + 1) * self.g]
            out, net_cache = mlp_forward(self.acceptance, block, mode=mode, rng=rng)
            a = out[:, j]
            log_term, d_a, d_z = _trunc_log_term(a, float(zv[j]), self.T)
            lp += _std_normal_logpdf(block) + log_term
            group_caches.append((block, net_cache, d_a, d_z))
        return lp, group_caches

    def log_prob_backward(self, cache, cotangent) -> BaseGrads:
        cot = np.asarray(cotangent, dtype=np.float64)
        n = cot.shape[0]
        dz = np.empty((n, self.d))
        z_coeff = np.zeros(self.G)
        self.acceptance.zero_grad()
        for j, (block, net_cache, d_a, d_z) in enumerate(cache):
            d_out = np.zeros((n, self.G))
            d_out[:, j] = cot * d_a
            d_input, _ = mlp_backward(self.acceptance, net_cache, d_out)
            dz[:, j * self.g : (j + 1) * self.g] = -block * cot[:, None] + d_input
            z_coeff[j] = float(np.sum(cot * d_z))
        phi = self.acceptance.grad_vector().copy()
        return BaseGrads(dz=dz, phi=phi, z_coeff=z_coeff)

    def sample_batch(self, n: int, rng: RngStream):
        """Independent truncated rejection per group; attempts are summed
        across groups and averaged into a per-sample mean."""
        out = np.empty((n, self.d))
        attempts_total = np.zeros(n, dtype=np.int64)
        for j in range(self.G):
            block = np.empty((n, self.g))
            attempts = np.zeros(n, dtype=np.int64)
            pending = np.arange(n)
            for t in range(1, self.T + 1):
                z = draw_standard_normal(rng, pending.size, self.g)
                if t == self.T:
                    acc = np.ones(pending.size, dtype=bool)
                else:
                    a_all, _ = mlp_forward(self.acceptance, z)
                    acc = rng.uniform(pending.size) < a_all[:, j]
                hit = pending[acc]
                block[hit] = z[acc]
                attempts[hit] = t
                pending = pending[~acc]
                if pending.size == 0:
                    break
            out[:, j * self.g : (j + 1) * self.g] = block
            attempts_total += attempts
        return out, attempts_total

    def estimate_z(self, S: int, rng: RngStream, want_grad: bool = True, chunk: int = 1 << 16):
        """One shared proposal batch estimates every group's normalizer.

        Returns ``(z_hat, grads)`` with ``z_hat`` shaped (G,) and
        ``grads`` shaped (G, n_params) when requested.
        """
        if S < 1:
            raise ValueError("S must be >= 1")
        totals = np.zeros(self.G)
        grads = np.zeros((self.G, self.n_params)) if want_grad else None
        remaining = S
        while remaining > 0:
            m = min(chunk, remaining)
            z = draw_standard_normal(rng, m, self.g)
            a, net_cache = mlp_forward(self.acceptance, z)
            totals += a.sum(axis=0)
            if want_grad:
                for j in range(self.G):
                    self.acceptance.zero_grad()
                    cot = np.zeros((m, self.G))
                    cot[:, j] = 1.0 / S
                    mlp_backward(self.acceptance, net_cache, cot)
                    grads[j] += self.acceptance.grad_vector()
            remaining -= m
        return totals / S, grads

    def ema_update(self, z_batch) -> np.ndarray:
        zb = np.asarray(z_batch, dtype=np.float64)
        if zb.shape != (self.G,) or not np.all((zb > 0.0) & (zb <= 1.0)):
            raise ValueError("z_batch must be G values in (0, 1]")
        if self.z_ema is None:
            self.z_ema = zb.copy()
        else:
            self.z_ema = (1.0 - self.ema_decay) * self.z_ema + self.ema_decay * zb
        return self.z_ema


def grouped_log_prob(base: GroupedResampledBase, z) -> float:
    lp, _ = base.log_prob_batch(np.asarray(z, dtype=np.float64)[None, :])
    return float(lp[0])


def grouped_sample(base: GroupedResampledBase, rng: RngStream) -> np.ndarray:
    z, _ = base.sample_batch(1, rng)
    return z[0]


def exact_z_quadrature(base, grid: Grid2D, group: int | None = None) -> float:
    """Midpoint-rule normalizer for a 2D acceptance factor.

    Valid for a ResampledBase with d = 2, or one group of size 2 of a
    grouped base; the test suites use it as the oracle for the Monte
    Carlo estimator.
    """
    nodes = grid.nodes()
    if isinstance(base, GroupedResampledBase):
        if base.g != 2:
            raise ValueError("quadrature normalizer requires group_dim = 2")
        if group is None or not 0 <= group < base.G:
            raise ValueError("group index required for a grouped base")
        out, _ = mlp_forward(base.acceptance, nodes)
        a = out[:, group]
    else:
        if base.d != 2:
            raise ValueError("quadrature normalizer requires d = 2")
        a, _ = base.accept_prob(nodes)
    pi = np.exp(_std_normal_logpdf(nodes))
    return grid.integrate(pi * a)


def make_acceptance_net(
    d: int,
    hidden_layers: int,
    hidden_units: int,
    rng: RngStream,
    outputs: int = 1,
    activation: str = "tanh",
    dropout_rate: float = 0.0,
) -> MlpParams:
    """Convenience constructor for acceptance networks (sigmoid head)."""
    spec = MlpSpec(
        input_dim=d,
        hidden_layers=hidden_layers,
        hidden_units=hidden_units,
        output_dim=outputs,
        hidden_activation=activation,
        output_head="sigmoid",
        dropout_rate=dropout_rate,
    )
    return mlp_init(spec, rng)
