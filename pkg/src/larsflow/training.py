"""Objectives, gradient estimators, optimizer, and training loops.

Maximum-likelihood steps minimize

    loss = -mean log p(x) - lambda_z * Z_hat,

where the optional second term rewards a high expected acceptance (the
mean first-attempt acceptance equals the normalizer, so pushing it up
lowers the rejection rate). The normalizer's value inside the log density
comes from the exponential moving average; its gradient path uses only
the current Monte Carlo estimate.

KL-divergence training cannot reparameterize through the accept/reject
step, so the base-parameter gradient uses a score-function form

    grad_phi KLD = Cov{ grad_phi log p_base(z), f(z) },
    f(z) = log p_base(z) - log|det J(z)| - log target(F(z)),

estimated with batch-mean baseline subtraction for variance reduction,
while the flow-parameter gradient is the plain pathwise expectation

    grad_theta KLD = -E[ grad_theta (log target(F(z)) + log|det J(z)|) ]

with the base samples held fixed.

All randomness is derived statelessly from (seed, purpose, iteration), so
identical configs reproduce identical traces bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, TrainingDiverged
from .flows import FlowModel
from .rng import (
    STREAM_DATA,
    STREAM_MODEL_SAMPLE,
    STREAM_PROPOSAL,
    STREAM_SPLIT,
    RngStream,
    derive_stream,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Experiment definition for one training run."""

    objective: str = "ml"
    iterations: int = 5000
    batch_size: int = 256
    learning_rate: float = 1e-3
    lr_decay_iters: tuple = ()
    lr_decay_factor: float = 1.0
    lambda_z: float = 0.0
    z_update_samples: int = 512
    truncation: int = 100
    polyak_rate: float = 0.0
    seed: int = 0
    eval_every: int = 0
    grad_clip_norm: float = 100.0

    def __post_init__(self):
        if self.objective not in ("ml", "kl"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_z < 0:
            raise ValueError("lambda_z must be >= 0")
        if self.z_update_samples < 1:
            raise ValueError("z_update_samples must be >= 1")
        if self.truncation < 1:
            raise ValueError("truncation must be >= 1")
        if not 0.0 <= self.polyak_rate < 1.0:
            raise ValueError("polyak_rate must lie in [0, 1)")
        decay = tuple(self.lr_decay_iters)
        if any(b < 0 for b in decay) or list(decay) != sorted(decay):
            raise ValueError("lr_decay_iters must be sorted non-negative breakpoints")
        object.__setattr__(self, "lr_decay_iters", decay)
        if self.lr_decay_factor <= 0:
            raise ValueError("lr_decay_factor must be positive")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")

    def lr_at(self, iteration: int) -> float:
        passed = sum(1 for b in self.lr_decay_iters if iteration >= b)
        return self.learning_rate * self.lr_decay_factor**passed


@dataclass
class AdamState:
    """First/second moment accumulators matching the flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def init(cls, n_params: int) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), step=0)


def adam_step(state: AdamState, params: np.ndarray, gradients: np.ndarray, lr: float) -> np.ndarray:
    """Bias-corrected Adam update; mutates ``state`` and returns new params."""
    params = np.asarray(params, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    if g.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter/gradient/moment shape mismatch")
    state.step += 1
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * g
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * g * g
    m_hat = state.m / (1.0 - ADAM_BETA1**state.step)
    v_hat = state.v / (1.0 - ADAM_BETA2**state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def polyak_update(average_params: np.ndarray, params: np.ndarray, rate: float) -> np.ndarray:
    """Exponential parameter average used for evaluation."""
    if not 0.0 < rate < 1.0:
        raise ValueError("rate must lie in (0, 1)")
    return (1.0 - rate) * np.asarray(average_params) + rate * np.asarray(params)


@dataclass
class MetricsTrace:
    """Per-iteration records plus periodic evaluation rows."""

    iterations: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    z_ema: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    mean_attempts: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def append_step(self, iteration, loss, z_ema, grad_norm, mean_attempts):
        if self.iterations and iteration <= self.iterations[-1]:
            raise ValueError("iteration indices must be strictly increasing")
        self.iterations.append(int(iteration))
        self.loss.append(float(loss))
        self.z_ema.append(float(z_ema))
        self.grad_norm.append(float(grad_norm))
        self.mean_attempts.append(float(mean_attempts))

    def append_eval(self, iteration, metric, value):
        self.evals.append((int(iteration), str(metric), float(value)))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,loss,z_ema,grad_norm,mean_attempts\n")
            for row in zip(self.iterations, self.loss, self.z_ema, self.grad_norm, self.mean_attempts):
                fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r},{row[4]!r}\n")

    def evals_to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,metric,value\n")
            for it, metric, value in self.evals:
                fh.write(f"{it},{metric},{value!r}\n")


def _base_ema_scalar(base) -> float:
    ema = getattr(base, "z_ema", None)
    if ema is None:
        return float("nan")
    return float(np.mean(ema))


def _refresh_z_for_step(model: FlowModel, n_samples: int, rng: RngStream):
    """Estimate the normalizer on fresh proposals, fold it into the EMA,
    and return the estimate with its parameter gradient."""
    base = model.base
    if not hasattr(base, "estimate_z"):
        return None, None
    z_hat, z_grad = base.estimate_z(n_samples, rng, want_grad=True)
    base.ema_update(z_hat)
    return np.atleast_1d(z_hat), np.atleast_2d(z_grad)


def nll_step(model: FlowModel, batch, lambda_z: float, rng: RngStream,
             z_samples: int | None = None, mode: str = "eval"):
    """One maximum-likelihood step.

    Returns ``(loss, grad, aux)`` with ``grad`` over the full (theta, phi)
    vector. For a resampled base the normalizer is re-estimated first with
    ``z_samples`` proposals (default: the base's own setting), the EMA is
    advanced once, and both the density path and the penalty contribute
    through the current batch's estimate gradient.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n = batch.shape[0]
    if n < 1:
        raise ValueError("batch must be non-empty")
    base = model.base
    dropout_rng = None
    if mode == "train":
        dropout_rng = rng.split(1)[0]
    z_hat, z_grad = (None, None)
    if hasattr(base, "estimate_z"):
        s = z_samples if z_samples is not None else base.mc_samples
        z_hat, z_grad = _refresh_z_for_step(model, s, rng)
    lp, cache = model.log_prob_with_cache(batch, mode=mode, rng=dropout_rng)
    loss = -float(np.mean(lp))
    if z_hat is not None and lambda_z != 0.0:
        loss -= lambda_z * float(np.mean(z_hat))
    if not np.isfinite(loss):
        raise NumericsError("non-finite loss in likelihood step")
    grads = model.log_prob_backward(cache, np.full(n, -1.0 / n))
    phi = grads.phi.copy()
    if z_hat is not None and grads.z_coeff.size:
        z_cot = grads.z_coeff - lambda_z / z_hat.size
        phi += z_cot @ z_grad
    grad = np.concatenate([grads.theta, phi])
    aux = {
        "z_hat": None if z_hat is None else (float(z_hat[0]) if z_hat.size == 1 else z_hat.copy()),
        "z_ema": _base_ema_scalar(base),
        "mean_lp": float(np.mean(lp)),
    }
    return loss, grad, aux


_MAX_DROP_FRACTION = 0.10


def _check_drop_budget(keep: np.ndarray) -> int:
    n_bad = int((~keep).sum())
    if n_bad > _MAX_DROP_FRACTION * keep.size:
        raise NumericsError(
            f"{n_bad} of {keep.size} samples non-finite; exceeding the drop budget"
        )
    return n_bad


def kl_grad_phi(model: FlowModel, target, n_samples: int, rng: RngStream,
                z_update: bool = True, z_samples: int | None = None, z_grad=None):
    """Covariance (score-function) estimator of the base-parameter KLD
    gradient.

    Samples the model, forms f(z) per sample, subtracts the batch mean,
    and backpropagates the weights through the base density only. The
    normalizer path multiplies the cotangent of the plugged-in value with
    the current estimate's gradient. Non-finite samples are dropped and
    counted; more than 10% dropped raises.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    base = model.base
    if z_update and hasattr(base, "estimate_z"):
        s = z_samples if z_samples is not None else base.mc_samples
        _, z_grad_new = _refresh_z_for_step(model, s, rng)
        z_grad = z_grad_new
    z, attempts = base.sample_batch(n_samples, rng)
    x, fwd_ld, _ = model.forward_from_base(z)
    lp_base, base_cache = base.log_prob_batch(z)
    f = lp_base - fwd_ld - target.log_unnorm(x)
    finite = np.isfinite(f)
    n_bad = _check_drop_budget(finite)
    n_kept = int(finite.sum())
    f_bar = float(np.mean(f[finite]))
    w = np.where(finite, (f - f_bar) / n_kept, 0.0)
    bg = base.log_prob_backward(base_cache, w)
    phi = bg.phi.copy()
    if bg.z_coeff.size:
        if z_grad is None:
            raise ValueError("z_grad required when the base has a normalizer path")
        phi += bg.z_coeff @ np.atleast_2d(z_grad)
    aux = {
        "mean_f": f_bar,
        "dropped": n_bad,
        "mean_attempts": float(np.mean(attempts)),
        "z_ema": _base_ema_scalar(base),
    }
    return phi, aux


def kl_grad_theta(model: FlowModel, target, n_samples: int, rng: RngStream):
    """Pathwise estimator of the flow-parameter KLD gradient.

    Base samples are treated as constants; the gradient flows through the
    forward transform and the target's log-density gradient.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    z, attempts = model.base.sample_batch(n_samples, rng)
    x, fwd_ld, caches = model.forward_from_base(z)
    t_lp = target.log_unnorm(x)
    t_grad = target.log_unnorm_grad(x)
    finite = np.isfinite(t_lp) & np.all(np.isfinite(t_grad), axis=1) & np.isfinite(fwd_ld)
    n_bad = _check_drop_budget(finite)
    n_kept = int(finite.sum())
    scale = np.where(finite, -1.0 / n_kept, 0.0)
    d_x = t_grad * scale[:, None]
    d_x[~finite] = 0.0
    _, theta = model.forward_backward(caches, d_x, scale)
    aux = {"dropped": n_bad, "mean_attempts": float(np.mean(attempts))}
    return theta, aux


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grad))
    if max_norm > 0 and norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


class _BatchSource:
    """Uniform interface over finite datasets and endless target samplers."""

    def __init__(self, data_source, batch_size: int, seed: int):
        self.batch_size = batch_size
        self.seed = seed
        if isinstance(data_source, np.ndarray):
            if data_source.ndim != 2 or data_source.shape[0] < 1:
                raise ValueError("dataset must be a non-empty (n, d) array")
            self.data = np.asarray(data_source, dtype=np.float64)
            self.kind = "dataset"
            self._epoch = -1
            self._pos = 0
            self._order = None
        elif hasattr(data_source, "rejection_sample"):
            self.target = data_source
            self.kind = "target"
        elif callable(data_source):
            self.fn = data_source
            self.kind = "callable"
        else:
            raise TypeError("data_source must be an array, a target, or a callable")

    def _next_epoch(self):
        self._epoch += 1
        rng = derive_stream(self.seed, STREAM_SPLIT, self._epoch)
        self._order = rng.permutation(self.data.shape[0])
        self._pos = 0

    def batch(self, iteration: int) -> np.ndarray:
        if self.kind == "target":
            return self.target.rejection_sample(self.batch_size, derive_stream(self.seed, STREAM_DATA, iteration))
        if self.kind == "callable":
            return np.atleast_2d(np.asarray(self.fn(self.batch_size, derive_stream(self.seed, STREAM_DATA, iteration)), dtype=np.float64))
        rows = []
        need = self.batch_size
        while need > 0:
            if self._order is None or self._pos >= self._order.size:
                self._next_epoch()
            take = min(need, self._order.size - self._pos)
            rows.append(self.data[self._order[self._pos : self._pos + take]])
            self._pos += take
            need -= take
        return np.concatenate(rows, axis=0)


def _snapshot(model: FlowModel, adam: AdamState, iteration: int):
    base = model.base
    state = {
        "iteration": iteration,
        "params": model.param_vector(),
        "adam_m": adam.m.copy(),
        "adam_v": adam.v.copy(),
        "adam_step": adam.step,
    }
    ema = getattr(base, "z_ema", None)
    state["z_ema"] = None if ema is None else np.atleast_1d(ema).copy()
    return state


def _run_loop(model: FlowModel, config: TrainConfig, step_fn, eval_fn=None):
    params = model.param_vector()
    adam = AdamState.init(params.size)
    average = params.copy() if config.polyak_rate > 0 else None
    trace = MetricsTrace()
    last_good = _snapshot(model, adam, -1)
    for it in range(config.iterations):
        try:
            loss, grad, mean_attempts = step_fn(it)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise NumericsError("non-finite loss or gradient")
        except NumericsError as exc:
            raise TrainingDiverged(
                f"training diverged at iteration {it}: {exc}", it, last_good
            ) from exc
        params = adam_step(adam, params, grad, config.lr_at(it))
        model.set_param_vector(params)
        if average is not None:
            average = polyak_update(average, params, config.polyak_rate)
        trace.append_step(it, loss, _base_ema_scalar(model.base), float(np.linalg.norm(grad)), mean_attempts)
        last_good = _snapshot(model, adam, it)
        if eval_fn is not None and config.eval_every > 0 and (it + 1) % config.eval_every == 0:
            for metric, value in eval_fn(model, it):
                trace.append_eval(it, metric, value)
    if average is not None:
        # Evaluation uses the averaged weights; the returned model carries them.
        model.set_param_vector(average)
    if eval_fn is not None and config.iterations > 0:
        for metric, value in eval_fn(model, config.iterations - 1):
            trace.append_eval(config.iterations - 1, f"final_{metric}", value)
    return model, trace


def train_ml(model: FlowModel, data_source, config: TrainConfig, eval_fn=None):
    """Maximum-likelihood training; see :func:`nll_step` for one step."""
    source = _BatchSource(data_source, config.batch_size, config.seed)
    has_dropout = _model_has_dropout(model)

    def step(it):
        batch = source.batch(it)
        rng = derive_stream(config.seed, STREAM_PROPOSAL, it)
        loss, grad, aux = nll_step(
            model, batch, config.lambda_z, rng,
            z_samples=config.z_update_samples,
            mode="train" if has_dropout else "eval",
        )
        return loss, grad, float("nan")

    return _run_loop(model, config, step, eval_fn)


def train_kl(model: FlowModel, target, config: TrainConfig, eval_fn=None):
    """Reverse-KL training with the covariance/pathwise estimator pair."""

    def step(it):
        rng_phi = derive_stream(config.seed, STREAM_MODEL_SAMPLE, it)
        rng_theta = derive_stream(config.seed, STREAM_PROPOSAL, it)
        theta, aux_t = kl_grad_theta(model, target, config.batch_size, rng_theta)
        phi, aux_p = kl_grad_phi(
            model, target, config.batch_size, rng_phi, z_samples=config.z_update_samples
        )
        grad = np.concatenate([theta, phi])
        grad, _ = clip_grad_norm(grad, config.grad_clip_norm)
        return aux_p["mean_f"], grad, aux_p["mean_attempts"]

    return _run_loop(model, config, step, eval_fn)


def _model_has_dropout(model: FlowModel) -> bool:
    for layer in model.layers:
        for net_name in ("scale_net", "shift_net"):
            net = getattr(layer, net_name, None)
            if net is not None and net.spec.dropout_rate > 0:
                return True
    acceptance = getattr(model.base, "acceptance", None)
    return acceptance is not None and acceptance.spec.dropout_rate > 0
