import copy

import numpy as np
import pytest

import larsflow as lf
from larsflow.errors import LarsFlowError
from larsflow.evaluation import (
    ModelDensityTarget,
    dataset_ll,
    export_density_grid,
    histogram_kld,
    quadrature_kld,
    refresh_normalizer,
)

from helpers import GaussianTarget, random_model


def test_kld_of_model_with_itself_is_zero():
    model = random_model(seed=1, base_kind="gaussian", n_coupling=2, perturb=0.2)
    target = ModelDensityTarget(copy.deepcopy(model))
    grid = lf.Grid2D((-6.0, -6.0), (6.0, 6.0), 400)
    assert abs(quadrature_kld(model, target, grid)) < 1e-6


def test_shifted_gaussian_closed_form():
    layer = lf.AffineConstant(2)
    layer.b[...] = [1.0, 0.0]
    model = lf.FlowModel(lf.StandardGaussian(2), [layer])
    grid = lf.Grid2D((-7.0, -7.0), (7.0, 7.0), 500)
    kld = quadrature_kld(model, GaussianTarget(), grid)
    assert kld == pytest.approx(0.5, abs=1e-3)


def test_kld_non_negative():
    grid = lf.Grid2D((-6.0, -6.0), (6.0, 6.0), 300)
    for seed in (2, 3, 4):
        model = random_model(seed=seed, base_kind="gaussian", n_coupling=2, perturb=0.25)
        kld = quadrature_kld(model, GaussianTarget(), grid)
        assert kld >= -1e-9


def test_model_mass_escape_raises():
    layer = lf.AffineConstant(2)
    layer.log_s[...] = [np.log(3.0), np.log(3.0)]
    model = lf.FlowModel(lf.StandardGaussian(2), [layer])
    grid = lf.Grid2D((-2.0, -2.0), (2.0, 2.0), 100)
    with pytest.raises(LarsFlowError, match="grid too small"):
        quadrature_kld(model, GaussianTarget(), grid)


def test_target_mass_escape_raises():
    model = lf.FlowModel(lf.StandardGaussian(2), [])
    grid = lf.Grid2D((-6.0, -6.0), (6.0, 6.0), 200)
    with pytest.raises(LarsFlowError, match="grid too small"):
        quadrature_kld(model, GaussianTarget(mean=(5.5, 0.0)), grid)


def test_refresh_normalizer_uses_quadrature_in_2d():
    model = random_model(seed=5, base_kind="resampled", n_coupling=0,
                         with_linear=False, perturb=0.0, T=50)
    z = refresh_normalizer(model)
    zq = lf.exact_z_quadrature(model.base, lf.Grid2D((-6, -6), (6, 6), 500))
    assert z == pytest.approx(zq, abs=1e-12)
    assert model.base.z_override == pytest.approx(zq)
    model.base.set_z_override(None)


def test_refreshed_normalizer_restores_state():
    model = random_model(seed=6, base_kind="resampled", n_coupling=0,
                         with_linear=False, perturb=0.0, T=50)
    model.base.z_ema = 0.42
    from larsflow.evaluation import refreshed_normalizer

    with refreshed_normalizer(model):
        assert model.base.z_override is not None
    assert model.base.z_override is None
    assert model.base.z_ema == 0.42


def test_histogram_identical_sets_zero():
    x = lf.draw_standard_normal(lf.RngStream(7, 0), 5000, 2)
    assert histogram_kld(x, x, bins=30) == 0.0


def test_histogram_two_normal_draws_small():
    a = lf.draw_standard_normal(lf.RngStream(8, 0), 10**6, 1)
    b = lf.draw_standard_normal(lf.RngStream(8, 1), 10**6, 1)
    assert histogram_kld(a, b, bins=100) < 5e-4


def test_histogram_input_validation():
    x = lf.draw_standard_normal(lf.RngStream(9, 0), 2000, 2)
    with pytest.raises(ValueError, match="1000"):
        histogram_kld(x[:500], x, bins=30)
    with pytest.raises(ValueError, match="bins"):
        histogram_kld(x, x, bins=5)
    with pytest.raises(ValueError, match="dimensionality"):
        histogram_kld(x, np.zeros((2000, 3)), bins=30)


def test_histogram_few_nonempty_bins():
    x = np.zeros((2000, 1))
    ref = lf.draw_standard_normal(lf.RngStream(10, 0), 2000, 1)
    with pytest.raises(ValueError, match="non-empty"):
        histogram_kld(x, ref, bins=50)


def test_histogram_against_grid_reference():
    model = lf.FlowModel(lf.StandardGaussian(2), [])
    grid = lf.Grid2D((-5.0, -5.0), (5.0, 5.0), 200)
    dg = export_density_grid(model, None, grid)
    x, _ = lf.flow_sample(model, lf.RngStream(11, 0), 200_000)
    kld = histogram_kld(x, dg, bins=40)
    assert 0 <= kld < 5e-3


def test_dataset_ll_identity_model():
    model = lf.FlowModel(lf.StandardGaussian(2), [])
    mean, se = dataset_ll(model, np.zeros((1, 2)))
    assert mean == pytest.approx(-np.log(2 * np.pi), abs=1e-12)
    assert se == 0.0


def test_dataset_ll_permutation_invariant():
    model = random_model(seed=12, base_kind="gaussian", n_coupling=1, perturb=0.2)
    data = lf.draw_standard_normal(lf.RngStream(13, 0), 500, 2)
    m1, _ = dataset_ll(model, data)
    m2, _ = dataset_ll(model, data[::-1])
    assert m1 == pytest.approx(m2, abs=1e-12)


def test_dataset_ll_matches_negative_entropy():
    model = lf.FlowModel(lf.StandardGaussian(2), [])
    x, _ = lf.flow_sample(model, lf.RngStream(14, 0), 10**5)
    mean, se = dataset_ll(model, x)
    # Differential entropy of a 2D standard normal: 1 + log(2 pi).
    assert abs(mean + (1 + np.log(2 * np.pi))) < 3 * se


def test_dataset_ll_rejects_too_many_bad_rows():
    model = lf.FlowModel(lf.StandardGaussian(2), [])
    data = np.zeros((50, 2))
    data[:10] = np.inf
    with pytest.raises(lf.NumericsError, match="non-finite"):
        dataset_ll(model, data)


def test_export_grid_midpoints(tmp_path):
    model = lf.FlowModel(lf.StandardGaussian(2), [])
    grid = lf.Grid2D((0.0, 0.0), (1.0, 1.0), 3)
    path = tmp_path / "grid.csv"
    dg = export_density_grid(model, None, grid, path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x1,x2,log_p_model"
    assert len(lines) == 10
    first = lines[1].split(",")
    assert float(first[0]) == pytest.approx(1 / 6)
    assert float(first[1]) == pytest.approx(1 / 6)


def test_export_grid_values_bit_exact():
    model = random_model(seed=15, base_kind="gaussian", n_coupling=2, perturb=0.2)
    grid = lf.Grid2D((-2.0, -2.0), (2.0, 2.0), 20)
    dg = export_density_grid(model, None, grid)
    direct = model.log_prob(grid.nodes())
    assert np.array_equal(dg.log_p_model, direct)


def test_export_grid_with_target(tmp_path):
    model = lf.FlowModel(lf.StandardGaussian(2), [])
    target = lf.Target2D("two_rings")
    grid = lf.Grid2D((-4.0, -4.0), (4.0, 4.0), 5)
    path = tmp_path / "grid.csv"
    export_density_grid(model, target, grid, path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x1,x2,log_p_model,log_p_target"
    assert len(lines) == 26


def test_export_grid_io_error():
    model = lf.FlowModel(lf.StandardGaussian(2), [])
    grid = lf.Grid2D((0.0, 0.0), (1.0, 1.0), 3)
    with pytest.raises(LarsFlowError, match="/no/such/dir"):
        export_density_grid(model, None, grid, path="/no/such/dir/grid.csv")
