"""Exact unnormalized 2D benchmark densities and an exact sampler.

Three targets with qualitatively different support topology:

* ``dual_moon``: two crescent-shaped modes at (+-1, 0), carved from a
  sharp ring of radius 1 by a pull of |z1| toward 2; the soft term
  log(1 + exp(-4|z1|/0.09)) only matters near the symmetry axis.
* ``circle_of_gaussians``: eight equal isotropic Gaussians with means on
  a circle of radius 2 and per-dimension variance (2 - sqrt(2)) / 9.
* ``two_rings``: two narrow rings at radii 2 and 3.

``rejection_sample`` draws exact samples by proposing uniformly on a
per-target box and accepting against a padded grid-maximum envelope, so
sampled data and the density formulas can be cross-checked by chi-square
tests.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import NumericsError
from .rng import RngStream, log_sum_exp

TARGET_KINDS = ("dual_moon", "circle_of_gaussians", "two_rings")

_DUAL_MOON_TILT = 4.0 / 0.09
_CIRCLE_VAR = (2.0 - np.sqrt(2.0)) / 9.0
_CIRCLE_LOG_COEF = float(np.log(9.0 / (2.0 * np.pi * (2.0 - np.sqrt(2.0)))))
_CIRCLE_ANGLES = 2.0 * np.pi * np.arange(1, 9) / 8.0
_CIRCLE_MEANS = np.column_stack([2.0 * np.sin(_CIRCLE_ANGLES), 2.0 * np.cos(_CIRCLE_ANGLES)])
_RING_LOG_COEF = float(np.log(32.0 / np.pi))
_RING_RADII = np.array([2.0, 3.0])

_BOXES = {
    "dual_moon": 3.0,
    "circle_of_gaussians": 4.0,
    "two_rings": 4.0,
}

ENVELOPE_PAD = 1.1
ENVELOPE_GRID = 1000
_MIN_ACCEPT_RATE = 1e-4
_MIN_ACCEPT_PROPOSALS = 10**6


def _as_points(z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        if z.shape != (2,):
            raise ValueError("point must be 2-dimensional")
        return z[None, :], True
    if z.ndim == 2 and z.shape[1] == 2:
        return z, False
    raise ValueError("points must have shape (n, 2)")


def _dual_moon_lp(z: np.ndarray) -> np.ndarray:
    r = np.sqrt(np.sum(z * z, axis=1))
    a = np.abs(z[:, 0])
    lp = -((r - 1.0) ** 2) / 0.08
    lp -= (a - 2.0) ** 2 / 0.18
    lp += np.logaddexp(0.0, -_DUAL_MOON_TILT * a)
    return lp


def _dual_moon_grad(z: np.ndarray) -> np.ndarray:
    r = np.sqrt(np.sum(z * z, axis=1))
    a = np.abs(z[:, 0])
    sgn = np.sign(z[:, 0])
    r_safe = np.maximum(r, 1e-12)
    g = -2.0 * (r - 1.0) / 0.08 / r_safe
    grad = z * g[:, None]
    grad[:, 0] += -2.0 * (a - 2.0) * sgn / 0.18
    grad[:, 0] += -_DUAL_MOON_TILT * sgn * expit(-_DUAL_MOON_TILT * a)
    return grad


def _circle_terms(z: np.ndarray) -> np.ndarray:
    diff = z[:, None, :] - _CIRCLE_MEANS[None, :, :]
    return _CIRCLE_LOG_COEF - np.sum(diff * diff, axis=2) / (2.0 * _CIRCLE_VAR)


def _circle_lp(z: np.ndarray) -> np.ndarray:
    return log_sum_exp(_circle_terms(z), axis=1)


def _circle_grad(z: np.ndarray) -> np.ndarray:
    terms = _circle_terms(z)
    lp = log_sum_exp(terms, axis=1)
    resp = np.exp(terms - lp[:, None])
    diff = z[:, None, :] - _CIRCLE_MEANS[None, :, :]
    return -np.einsum("ik,ikj->ij", resp, diff) / _CIRCLE_VAR


def _rings_terms(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(np.sum(z * z, axis=1))
    terms = _RING_LOG_COEF - 32.0 * (r[:, None] - _RING_RADII[None, :]) ** 2
    return terms, r


def _rings_lp(z: np.ndarray) -> np.ndarray:
    terms, _ = _rings_terms(z)
    return log_sum_exp(terms, axis=1)


def _rings_grad(z: np.ndarray) -> np.ndarray:
    terms, r = _rings_terms(z)
    lp = log_sum_exp(terms, axis=1)
    resp = np.exp(terms - lp[:, None])
    r_safe = np.maximum(r, 1e-12)
    radial = np.sum(resp * (-64.0 * (r[:, None] - _RING_RADII[None, :])), axis=1)
    return z * (radial / r_safe)[:, None]


_LP_FNS = {
    "dual_moon": _dual_moon_lp,
    "circle_of_gaussians": _circle_lp,
    "two_rings": _rings_lp,
}
_GRAD_FNS = {
    "dual_moon": _dual_moon_grad,
    "circle_of_gaussians": _circle_grad,
    "two_rings": _rings_grad,
}


class Target2D:
    """One of the three benchmark densities plus its exact sampler."""

    def __init__(self, kind: str):
        if kind not in TARGET_KINDS:
            raise ValueError(f"unknown target {kind!r}; choose from {TARGET_KINDS}")
        self.kind = kind
        half = _BOXES[kind]
        self.box_lo = np.array([-half, -half])
        self.box_hi = np.array([half, half])
        self._log_envelope_max: float | None = None

    def log_unnorm(self, z):
        pts, squeeze = _as_points(z)
        lp = _LP_FNS[self.kind](pts)
        return float(lp[0]) if squeeze else lp

    def log_unnorm_grad(self, z):
        pts, squeeze = _as_points(z)
        g = _GRAD_FNS[self.kind](pts)
        return g[0] if squeeze else g

    def _envelope(self) -> float:
        """Grid maximum of the log density over the sampling box, padded
        by log(1.1) at acceptance time. Cached after the first call."""
        if self._log_envelope_max is None:
            axis = np.linspace(self.box_lo[0], self.box_hi[0], ENVELOPE_GRID)
            g0, g1 = np.meshgrid(axis, axis, indexing="ij")
            pts = np.column_stack([g0.ravel(), g1.ravel()])
            best = -np.inf
            for chunk in np.array_split(pts, 16):
                best = max(best, float(np.max(self.log_unnorm(chunk))))
            self._log_envelope_max = best
        return self._log_envelope_max

    def rejection_sample(self, n: int, rng: RngStream, chunk: int = 1 << 17) -> np.ndarray:
        """Exact samples from the box-restricted normalized target."""
        if n < 1:
            raise ValueError("n must be >= 1")
        log_bound = self._envelope() + np.log(ENVELOPE_PAD)
        out = np.empty((n, 2))
        filled = 0
        proposed = 0
        accepted = 0
        width = self.box_hi - self.box_lo
        while filled < n:
            m = min(chunk, max(4 * (n - filled), 1024))
            u = rng.uniform(2 * m).reshape(m, 2)
            pts = self.box_lo + u * width
            acc_prob = np.exp(self.log_unnorm(pts) - log_bound)
            keep = rng.uniform(m) < acc_prob
            proposed += m
            accepted += int(keep.sum())
            take = pts[keep][: n - filled]
            out[filled : filled + take.shape[0]] = take
            filled += take.shape[0]
            if proposed >= _MIN_ACCEPT_PROPOSALS and accepted / proposed < _MIN_ACCEPT_RATE:
                raise NumericsError(
                    f"degenerate envelope for {self.kind}: acceptance rate "
                    f"{accepted / proposed:.2e} after {proposed} proposals"
                )
        return out


def make_target(kind: str) -> Target2D:
    return Target2D(kind)


def target_log_unnorm(t: Target2D, z):
    return t.log_unnorm(z)


def target_rejection_sample(t: Target2D, n: int, rng: RngStream) -> np.ndarray:
    return t.rejection_sample(n, rng)
