import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multidistill import numerics as nx
from multidistill import oracles
from multidistill.adapters import adapt, align_grid, identity_adapter, init_adapter, interp_channels, resample_matrix
from multidistill.gradcheck import check_gradients, max_rel_error
from multidistill.numerics import Tensor


def test_equal_grids_return_input(rng):
    t = Tensor(rng.standard_normal((9, 5)))
    assert align_grid(t, 3, 3) is t


@settings(max_examples=30)
@given(g_t=st.integers(1, 6), g_s=st.integers(1, 6), value=st.floats(-10, 10))
def test_constants_survive_resampling(g_t, g_s, value):
    with nx.precision(np.float64):
        out = align_grid(Tensor(np.full((g_t * g_t, 3), value)), g_t, g_s).data
    assert out.shape == (g_s * g_s, 3)
    np.testing.assert_allclose(out, value, atol=1e-9)


def test_two_to_four_matches_scripted():
    grid = np.array([[[0.0, 1.0], [2.0, -1.0]], [[4.0, 0.5], [8.0, 3.0]]])
    out = align_grid(Tensor(grid.reshape(4, 2)), 2, 4).data.reshape(4, 4, 2)
    np.testing.assert_allclose(out, oracles.bilinear_scripted(grid, 4), atol=1e-6)


@pytest.mark.parametrize("g_t,g_s", [(4, 2), (3, 5), (8, 4), (2, 8)])
def test_resampling_matches_scripted(rng, g_t, g_s):
    grid = rng.standard_normal((g_t, g_t, 3))
    with nx.precision(np.float64):
        out = align_grid(Tensor(grid.reshape(-1, 3)), g_t, g_s).data.reshape(g_s, g_s, 3)
    np.testing.assert_allclose(out, oracles.bilinear_scripted(grid, g_s), atol=1e-12)


def test_resampling_is_batched_and_linear(rng):
    a = rng.standard_normal((2, 16, 3))
    b = rng.standard_normal((2, 16, 3))
    with nx.precision(np.float64):
        f = lambda x: align_grid(Tensor(x), 4, 2).data  # noqa: E731
        np.testing.assert_allclose(f(2 * a + b), 2 * f(a) + f(b), atol=1e-12)
        np.testing.assert_allclose(f(a)[1], align_grid(Tensor(a[1]), 4, 2).data, atol=1e-12)


def test_resample_matrix_rows_sum_to_one():
    np.testing.assert_allclose(resample_matrix(3, 7).sum(axis=1), 1.0, atol=1e-6)


def test_non_square_grid_rejected():
    with pytest.raises(nx.ContractError):
        align_grid(Tensor(np.zeros((5, 2))), 2, 4)


def test_zero_weights_give_zero_output(rng):
    ad = init_adapter(6, 4, 2, 4, rng)
    for t in (ad.w1, ad.w2, ad.b2):
        t.data[:] = 0
    out = adapt(ad, Tensor(rng.standard_normal((4, 6))))
    assert out.shape == (16, 4) and not out.data.any()


def test_identity_construction(rng):
    x = rng.standard_normal((9, 5))
    with nx.precision(np.float64):
        out = adapt(identity_adapter(5, 3), Tensor(x)).data
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_random_adapter_matches_loop(rng):
    ad = init_adapter(6, 5, 2, 2, rng)
    ad.b1.data[:] = rng.standard_normal(ad.b1.shape)
    ad.b2.data[:] = rng.standard_normal(ad.b2.shape)
    with nx.precision(np.float64):
        x = rng.standard_normal((4, 6))
        got = adapt(ad, Tensor(x)).data
    want = oracles.adapter_loop(x, ad.w1.data, ad.b1.data, ad.w2.data, ad.b2.data)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_adapter_gradients(f64, rng):
    ad = init_adapter(6, 4, 4, 2, rng, hidden=8)
    ad.b1.data[:] = rng.standard_normal(8) * 0.3
    x = Tensor(rng.standard_normal((16, 6)))
    t = Tensor(rng.standard_normal((4, 4)))
    params = dict(ad.named_parameters(""))
    params["x"] = x
    samples = check_gradients(lambda: nx.mse(adapt(ad, x), t), params, count=60)
    assert max_rel_error(samples) <= 1e-4


def test_interp_channels_endpoints(rng):
    x = rng.standard_normal((3, 4))
    with nx.precision(np.float64):
        y = interp_channels(Tensor(x), 8).data
    assert y.shape == (3, 8)
    np.testing.assert_allclose(interp_channels(Tensor(np.ones((2, 3))), 5).data, 1.0, atol=1e-6)


def test_hidden_width_floor(rng):
    with pytest.raises(ValueError):
        init_adapter(16, 16, 2, 2, rng, hidden=4)
