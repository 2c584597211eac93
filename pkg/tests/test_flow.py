import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from snapflow.flow import (
    DivergenceError,
    NFECounter,
    euler_sample,
    flow_map,
    interpolate,
    one_nfe_sample,
    rk4_integrate,
    time_grid,
)
from snapflow.numerics import make_rng


def const_field(c):
    return lambda x, s, t, ctx=None: np.broadcast_to(c, x.shape).astype(float)


def linear_field(x, s, t, ctx=None):
    return x


def test_interpolate_endpoints():
    rng = make_rng(0)
    x0, eps = rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 3, 2))
    assert np.array_equal(interpolate(x0, eps, 0.0).xt, x0)
    assert np.array_equal(interpolate(x0, eps, 1.0).xt, eps)


def test_interpolate_midpoint():
    fs = interpolate(np.array([0.0]), np.array([2.0]), 0.5)
    assert fs.xt.tolist() == [1.0]
    assert fs.v_cond.tolist() == [2.0]


def test_interpolate_errors():
    with pytest.raises(ValueError, match="shape"):
        interpolate(np.zeros(2), np.zeros(3), 0.5)
    with pytest.raises(ValueError):
        interpolate(np.zeros(2), np.zeros(2), 1.5)


@settings(max_examples=50)
@given(arrays(np.float64, (3, 2), elements=st.floats(-10, 10)),
       arrays(np.float64, (3, 2), elements=st.floats(-10, 10)),
       st.floats(0.01, 1.0))
def test_v_cond_recovers_from_xt(x0, eps, t):
    fs = interpolate(x0, eps, t)
    assert np.allclose((fs.xt - x0) / t, fs.v_cond, atol=1e-9 * (1 + 1 / t))


def test_per_sample_times():
    x0, eps = np.zeros((3, 2, 1)), np.ones((3, 2, 1))
    fs = interpolate(x0, eps, np.array([0.0, 0.5, 1.0]))
    assert fs.xt[:, 0, 0].tolist() == [0.0, 0.5, 1.0]


def test_time_grid():
    assert np.allclose(time_grid(4), [1, 0.75, 0.5, 0.25, 0])
    assert time_grid(10)[-1] == 0.0


@pytest.mark.parametrize("K", [1, 2, 3, 10])
def test_euler_constant_field_exact(K):
    x1 = make_rng(1).standard_normal((2, 3, 2))
    c = np.full((3, 2), 0.7)
    assert np.allclose(euler_sample(const_field(c), x1, K), x1 - c, atol=1e-14)


def test_euler_linear_one_step():
    x1 = make_rng(1).standard_normal((2, 3, 2))
    assert np.array_equal(euler_sample(linear_field, x1, 1), np.zeros_like(x1))


def test_euler_linear_converges_first_order():
    x1 = np.ones((1, 1, 1))
    errs = [abs(euler_sample(linear_field, x1, K)[0, 0, 0] - np.exp(-1)) for K in (1, 2, 4, 8, 16, 64)]
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1.0 / 64


@pytest.mark.parametrize("K", [1, 2, 5, 10])
def test_nfe_equals_k(K):
    c = NFECounter()
    euler_sample(linear_field, np.ones((4, 2, 2)), K, counter=c)
    assert c.calls == K


def test_one_nfe_counts_one():
    c = NFECounter()
    one_nfe_sample(linear_field, np.ones((4, 2, 2)), counter=c)
    assert c.calls == 1


def test_consistency_queries_next_grid_time():
    seen = []

    def field(x, s, t, ctx=None):
        seen.append((float(s), float(t)))
        return np.zeros_like(x)

    euler_sample(field, np.ones((1, 1, 1)), 4, consistency=True)
    assert seen == [(0.75, 1.0), (0.5, 0.75), (0.25, 0.5), (0.0, 0.25)]
    seen.clear()
    euler_sample(field, np.ones((1, 1, 1)), 2)
    assert seen == [(1.0, 1.0), (0.5, 0.5)]


def test_flow_map_examples():
    x = np.array([[[3.0]]])
    assert np.array_equal(flow_map(const_field(5.0), x, 0.4, 0.4), x)
    assert flow_map(const_field(2.0), x, 0.5, 1.0).item() == 2.0
    assert flow_map(const_field(2.0), x, 0.0, 1.0).item() == 1.0


def test_flow_map_rejects_reversed_times():
    with pytest.raises(ValueError):
        flow_map(linear_field, np.ones((1, 1, 1)), 0.8, 0.2)


def test_one_nfe_equals_euler_k1_when_s_ignored():
    def field(x, s, t, ctx=None):
        return np.sin(x) * t

    x1 = make_rng(2).standard_normal((3, 4, 2))
    assert np.array_equal(one_nfe_sample(field, x1), euler_sample(field, x1, 1))
    assert np.array_equal(one_nfe_sample(field, x1), one_nfe_sample(field, x1))


def test_context_passed_through():
    ctx = np.arange(3.0)[:, None]

    def field(x, s, t, c):
        return np.broadcast_to(c[:, :, None], x.shape)

    out = one_nfe_sample(field, np.zeros((3, 1, 1)), ctx)
    assert out[:, 0, 0].tolist() == [0.0, -1.0, -2.0]


def test_divergence_detected():
    def field(x, s, t, ctx=None):
        return np.full_like(x, np.inf)

    with pytest.raises(DivergenceError, match="step 0"):
        euler_sample(field, np.ones((1, 1, 1)), 3)


def test_rk4_exponential():
    x = rk4_integrate(lambda x, r: x, np.ones(1), 1.0, 0.0, 100)
    assert x[0] == pytest.approx(np.exp(-1), rel=1e-10)
    path = rk4_integrate(lambda x, r: x, np.ones(1), 1.0, 0.0, 10, keep_path=True)
    assert path.shape == (11, 1)
