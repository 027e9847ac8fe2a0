import numpy as np
import pytest
from scipy import stats

import larsflow as lf
from larsflow.errors import NumericsError

from helpers import central_diff, rel_err


def test_dual_moon_origin_value():
    t = lf.Target2D("dual_moon")
    # Direct evaluation: -(0-1)^2/0.08 - (|0|-2)^2/0.18 + log(1 + e^0)
    expected = -1.0 / 0.08 - 4.0 / 0.18 + np.log(2.0)
    assert t.log_unnorm(np.zeros(2)) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(-34.0291, abs=1e-4)


def test_dual_moon_two_equal_modes():
    t = lf.Target2D("dual_moon")
    left = t.log_unnorm(np.array([-1.0, 0.0]))
    right = t.log_unnorm(np.array([1.0, 0.0]))
    assert left == pytest.approx(right, abs=1e-12)
    gap = t.log_unnorm(np.array([0.0, 1.0]))
    assert gap < left - 10.0


def test_dual_moon_first_two_terms_even_in_z1():
    t = lf.Target2D("dual_moon")
    r = lf.RngStream(1, 0)
    z = r.generator.normal(0, 1.5, (50, 2))
    flipped = z * np.array([-1.0, 1.0])
    # |z1| and ||z|| are even in z1, so the whole density is symmetric here.
    assert np.allclose(t.log_unnorm(z), t.log_unnorm(flipped), atol=1e-12)


def test_two_rings_on_ring_value():
    t = lf.Target2D("two_rings")
    for theta in (0.0, 1.1, 3.9):
        z = 2.0 * np.array([np.cos(theta), np.sin(theta)])
        expected = np.log(32.0 / np.pi) + np.log1p(np.exp(-32.0))
        assert t.log_unnorm(z) == pytest.approx(expected, abs=1e-12)
        assert t.log_unnorm(z) == pytest.approx(np.log(32.0 / np.pi), abs=1e-10)


def test_circle_of_gaussians_equal_density_at_means():
    t = lf.Target2D("circle_of_gaussians")
    angles = 2 * np.pi * np.arange(1, 9) / 8
    means = np.column_stack([2 * np.sin(angles), 2 * np.cos(angles)])
    vals = t.log_unnorm(means)
    assert np.max(vals) - np.min(vals) < 1e-10


def test_gradients_match_finite_differences():
    r = lf.RngStream(2, 0)
    for kind in ("dual_moon", "circle_of_gaussians", "two_rings"):
        t = lf.Target2D(kind)
        pts = r.generator.normal(0, 1.6, (100, 2))
        g_an = t.log_unnorm_grad(pts)

        worst = 0.0
        for i in range(pts.shape[0]):
            def scalar(v, i=i):
                p = pts.copy()
                p[i] = v
                return float(t.log_unnorm(p[i]))

            g_fd = central_diff(scalar, pts[i], h=1e-6)
            worst = max(worst, rel_err(g_an[i], g_fd, floor=1e-4).max())
        assert worst < 1e-6, kind


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown target"):
        lf.Target2D("three_rings")


def test_point_shape_validation():
    t = lf.Target2D("two_rings")
    with pytest.raises(ValueError):
        t.log_unnorm(np.zeros(3))


def test_circle_samples_centered():
    t = lf.Target2D("circle_of_gaussians")
    x = t.rejection_sample(10**5, lf.RngStream(3, 0))
    assert np.max(np.abs(x.mean(axis=0))) < 0.05


def test_two_rings_radial_structure():
    t = lf.Target2D("two_rings")
    x = t.rejection_sample(10**5, lf.RngStream(4, 0))
    r = np.linalg.norm(x, axis=1)
    assert np.mean(r < 1.0) < 0.01
    hist, edges = np.histogram(r, bins=60, range=(0, 4))
    centers = 0.5 * (edges[:-1] + edges[1:])
    peak_bins = centers[np.argsort(hist)[-8:]]
    assert np.any(np.abs(peak_bins - 2.0) < 0.2)
    assert np.any(np.abs(peak_bins - 3.0) < 0.2)


def test_envelope_bounds_density_on_fine_grid():
    # Acceptance probabilities must stay <= 1 even on a finer grid than
    # the envelope used.
    for kind in ("dual_moon", "circle_of_gaussians", "two_rings"):
        t = lf.Target2D(kind)
        t.rejection_sample(10, lf.RngStream(5, 0))
        axis = np.linspace(t.box_lo[0], t.box_hi[0], 1501)
        g0, g1 = np.meshgrid(axis, axis, indexing="ij")
        pts = np.column_stack([g0.ravel(), g1.ravel()])
        lp_max = max(float(np.max(t.log_unnorm(chunk))) for chunk in np.array_split(pts, 32))
        assert lp_max <= t._envelope() + np.log(1.1) + 1e-9


def test_degenerate_envelope_error(monkeypatch):
    t = lf.Target2D("two_rings")
    t.rejection_sample(5, lf.RngStream(6, 0))
    # Force an absurdly high bound so essentially nothing gets accepted.
    t._log_envelope_max = t._log_envelope_max + 30.0
    with pytest.raises(NumericsError, match="degenerate envelope"):
        t.rejection_sample(10**4, lf.RngStream(7, 0))


def test_quadrature_normalization_converges():
    for kind in ("dual_moon", "circle_of_gaussians", "two_rings"):
        t = lf.Target2D(kind)
        lo = t.box_lo - 1.0
        hi = t.box_hi + 1.0
        vals = []
        for pts in (500, 1000):
            grid = lf.Grid2D(tuple(lo), tuple(hi), pts)
            lp = t.log_unnorm(grid.nodes())
            vals.append(np.exp(lf.log_sum_exp(lp) + np.log(grid.cell_area)))
        assert abs(vals[1] - vals[0]) / vals[1] < 1e-3, kind


def _chi2_pvalue_samples_vs_density(t, n_samples, bins=50, subdiv=8, seed=8):
    x = t.rejection_sample(n_samples, lf.RngStream(seed, 0))
    lo, hi = t.box_lo, t.box_hi
    counts, _, _ = np.histogram2d(
        x[:, 0], x[:, 1], bins=bins, range=[[lo[0], hi[0]], [lo[1], hi[1]]]
    )
    fine = lf.Grid2D(tuple(lo), tuple(hi), bins * subdiv)
    dens = np.exp(t.log_unnorm(fine.nodes()) - lf.log_sum_exp(t.log_unnorm(fine.nodes())))
    cell = dens.reshape(bins, subdiv, bins, subdiv).sum(axis=(1, 3))
    expected = cell / cell.sum() * n_samples
    keep = expected >= 5.0
    obs = np.concatenate([counts[keep], [counts[~keep].sum()]])
    exp = np.concatenate([expected[keep], [expected[~keep].sum()]])
    if exp[-1] < 1e-9:
        obs, exp = obs[:-1], exp[:-1]
    exp *= obs.sum() / exp.sum()
    chi2 = float(np.sum((obs - exp) ** 2 / exp))
    return float(stats.chi2.sf(chi2, df=obs.size - 1))


@pytest.mark.parametrize("kind", ["circle_of_gaussians", "two_rings", "dual_moon"])
def test_rejection_samples_are_exact(kind):
    t = lf.Target2D(kind)
    n = 10**6 if kind != "dual_moon" else 3 * 10**5
    p = _chi2_pvalue_samples_vs_density(t, n)
    assert p > 0.001, f"{kind}: chi-square p={p}"
