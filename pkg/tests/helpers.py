"""Shared oracles and builders for the test suite.

The finite-difference helpers are the independent gradient oracle: they
only ever call forward evaluations, never the backward code they check.
"""

import numpy as np

import larsflow as lf

FD_H = 1e-5


def central_diff(f, v0, h=FD_H):
    """Dense central-difference gradient of a scalar function."""
    v0 = np.asarray(v0, dtype=np.float64)
    g = np.zeros_like(v0)
    for i in range(v0.size):
        vp = v0.copy()
        vp[i] += h
        vm = v0.copy()
        vm[i] -= h
        g[i] = (f(vp) - f(vm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-3):
    """Elementwise relative error with an absolute floor for tiny values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def perturbed_mlp(spec, seed, scale=0.4):
    rng = lf.RngStream(seed, 0)
    params = lf.mlp_init(spec, rng)
    v = params.param_vector()
    params.set_param_vector(v + rng.generator.normal(0.0, scale, v.size))
    return params


def perturbed_acceptance(d, hidden_layers, hidden_units, seed, scale=0.4):
    rng = lf.RngStream(seed, 0)
    net = lf.make_acceptance_net(d, hidden_layers, hidden_units, rng)
    v = net.param_vector()
    net.set_param_vector(v + rng.generator.normal(0.0, scale, v.size))
    return net


def random_model(seed, d=2, n_coupling=2, hidden=5, base_kind="resampled",
                 with_linear=True, perturb=0.2, T=20):
    """Small random flow model for gradient and invertibility checks."""
    r = lf.RngStream(seed, 7)
    if base_kind == "resampled":
        acc = perturbed_acceptance(d, 1, 6, seed + 1000, scale=0.4)
        base = lf.ResampledBase(d, acc, T=T)
    elif base_kind == "mixture":
        base = lf.mixture_init(3, d, r)
    else:
        base = lf.StandardGaussian(d)
    layers = [lf.AffineConstant(d)]
    for i in range(n_coupling):
        mask = lf.alternating_mask(d, flip=bool(i % 2))
        n_keep = int(mask.sum())
        n_change = d - n_keep
        s = lf.make_coupling_net(n_keep, n_change, 1, hidden, r)
        t = lf.make_coupling_net(n_keep, n_change, 1, hidden, r)
        layers.append(lf.CouplingLayer(mask, s, t))
    if with_linear:
        layers.append(lf.InvertibleLinear(d))
    model = lf.FlowModel(base, layers)
    if perturb:
        v = model.param_vector()
        model.set_param_vector(v + r.generator.normal(0.0, perturb, v.size))
    return model


class ConstantAcceptanceBase(lf.ResampledBase):
    """Resampled base whose acceptance is an exact constant.

    Bypasses the network (and its sigmoid clipping) so degenerate-case
    identities hold to the last bit.
    """

    def __init__(self, d, c, T=100):
        rng = lf.RngStream(0, 0)
        super().__init__(d, lf.make_acceptance_net(d, 0, 0, rng), T=T)
        self.c = float(c)

    def accept_prob(self, z, mode="eval", rng=None):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return np.full(z.shape[0], self.c), None


class GaussianTarget:
    """Standard normal as an unnormalized target (for closed-form KLD)."""

    def __init__(self, mean=(0.0, 0.0)):
        self.mean = np.asarray(mean, dtype=np.float64)

    def log_unnorm(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        vals = -0.5 * np.sum((x - self.mean) ** 2, axis=1)
        return vals if vals.size > 1 else float(vals[0])

    def log_unnorm_grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return -(x - self.mean)


def quadrature_z_oracle(base, lo=-6.0, hi=6.0, points=400):
    return lf.exact_z_quadrature(base, lf.Grid2D((lo, lo), (hi, hi), points))
