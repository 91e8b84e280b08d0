import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from kgrl.approximators import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    Adam,
    GaussianHeadOutput,
    Mlp,
    MlpSpec,
    NumericError,
    ShapeError,
    backward,
    finite_diff_check,
    gaussian_log_density,
    gaussian_sample,
    init_params,
    mlp_forward,
    squash_correction,
    unpack,
)


def test_param_count_and_offsets():
    spec = MlpSpec(3, (4, 5), 2)
    assert spec.n_params == 3 * 4 + 4 + 4 * 5 + 5 + 5 * 2 + 2
    offs = spec.offsets()
    assert offs[0] == (0, 12, 16)
    assert offs[-1][2] == spec.n_params


def test_init_law_bounds(rng):
    spec = MlpSpec(16, (64,), 4)
    p = init_params(spec, rng)
    (W1, b1), (W2, b2) = unpack(spec, p)
    assert np.abs(W1).max() <= 1 / 4 and np.abs(b1).max() <= 1 / 4
    assert np.abs(W2).max() <= 1 / 8
    # uniform(-c, c) has variance c^2/3
    assert abs(W1.var() - (1 / 16) / 3) < 0.003


def test_forward_matches_manual(rng):
    spec = MlpSpec(3, (5,), 2, "tanh")
    p = init_params(spec, rng)
    (W1, b1), (W2, b2) = unpack(spec, p)
    x = rng.normal(size=(4, 3))
    np.testing.assert_allclose(mlp_forward(spec, p, x), np.tanh(x @ W1.T + b1) @ W2.T + b2, rtol=1e-13)


def test_single_input_returns_vector(rng):
    spec = MlpSpec(3, (5,), 2)
    p = init_params(spec, rng)
    assert mlp_forward(spec, p, np.zeros(3)).shape == (2,)


def test_shape_errors(rng):
    spec = MlpSpec(3, (5,), 2)
    p = init_params(spec, rng)
    with pytest.raises(ShapeError):
        mlp_forward(spec, p, np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        mlp_forward(spec, p[:-1], np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        MlpSpec(3, (0,), 2)


def test_non_finite_reports_layer(rng):
    spec = MlpSpec(2, (3, 3), 1)
    p = init_params(spec, rng)
    w0, b0, end = spec.offsets()[1]
    p[b0] = np.inf
    with pytest.raises(NumericError) as err:
        mlp_forward(spec, p, np.ones(2))
    assert err.value.layer == 1


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_backward_matches_finite_differences(activation, rng):
    spec = MlpSpec(4, (6, 5), 3, activation)
    p = init_params(spec, rng)
    x = rng.normal(size=(5, 4))
    up = rng.normal(size=(5, 3))

    def fn(params):
        val = float(np.sum(up * mlp_forward(spec, params, x)))
        return val, backward(spec, params, x, up)[0]

    assert finite_diff_check(fn, p) < 1e-6


def test_input_gradient(rng):
    spec = MlpSpec(4, (6,), 2, "tanh")
    p = init_params(spec, rng)
    x = rng.normal(size=(3, 4))
    up = rng.normal(size=(3, 2))
    _, gx = backward(spec, p, x, up)

    def fn(xx):
        xx = xx.reshape(3, 4)
        return float(np.sum(up * mlp_forward(spec, p, xx))), gx

    assert finite_diff_check(fn, x.ravel()) < 1e-6


@pytest.mark.parametrize("backend", ["numpy", "cython"])
def test_explicit_backend(backend, rng):
    from kgrl import kernels
    try:
        kernels.get_backend(backend)
    except ImportError:
        pytest.skip("compiled kernels not built")
    spec = MlpSpec(3, (4,), 2)
    p = init_params(spec, rng)
    x = rng.normal(size=(2, 3))
    np.testing.assert_allclose(Mlp(spec, backend).forward(p, x), mlp_forward(spec, p, x), rtol=1e-13)


@given(st.floats(-3, 3), st.floats(-25, 5), st.floats(-3, 3))
def test_log_density_matches_scipy(loc, log_std, x):
    log_std_c = min(max(log_std, LOG_STD_MIN), LOG_STD_MAX)
    ref = stats.norm.logpdf(x, loc, math.exp(log_std_c))
    got = gaussian_log_density(np.array([x]), np.array([loc]), np.array([log_std_c]))
    assert got == pytest.approx(ref, rel=1e-10, abs=1e-10)


def test_head_clamps_log_std():
    head = GaussianHeadOutput.from_network(np.array([0.1, -0.2, -30.0, 5.0]), 2)
    np.testing.assert_array_equal(head.log_std, [LOG_STD_MIN, LOG_STD_MAX])
    np.testing.assert_array_equal(head.log_std_mask(), [0.0, 0.0])


def test_squashed_sample_density_integrates_to_one():
    from scipy.integrate import quad
    head = GaussianHeadOutput(np.array([0.3]), np.array([-0.5]))

    def dens(a):
        x = math.atanh(a)
        return math.exp(gaussian_log_density(np.array([x]), head.mean, head.log_std) - squash_correction(np.array([a])))

    total, _ = quad(dens, -1 + 1e-12, 1 - 1e-12, limit=200)
    assert total == pytest.approx(1.0, abs=1e-4)


def test_gaussian_sample_shapes_and_bounds(rng):
    head = GaussianHeadOutput(np.zeros((4, 2)), np.zeros((4, 2)))
    a, lp = gaussian_sample(head, rng.normal(size=(4, 2)))
    assert a.shape == (4, 2) and lp.shape == (4,)
    assert np.all(np.abs(a) < 1)
    with pytest.raises(ShapeError):
        gaussian_sample(head, np.zeros(3))


def test_adam_first_step_is_lr_sized():
    p = np.array([1.0, -2.0])
    opt = Adam(2, lr=0.1)
    opt.step(p, np.array([3.0, -0.5]))
    np.testing.assert_allclose(p, [0.9, -1.9], rtol=1e-7)


def test_adam_updates_matrix_in_place():
    p = np.ones((2, 3))
    opt = Adam(6, lr=0.01)
    view = p
    opt.step(p, np.ones((2, 3)))
    assert view is p
    np.testing.assert_allclose(p, 0.99, rtol=1e-7)


def test_adam_state_roundtrip():
    p = np.zeros(3)
    a = Adam(3)
    a.step(p, np.array([1.0, 2.0, 3.0]))
    b = Adam(3)
    b.load(a.state())
    q = p.copy()
    a.step(p, np.ones(3))
    b.step(q, np.ones(3))
    np.testing.assert_array_equal(p, q)


@settings(max_examples=25)
@given(st.lists(st.floats(-0.999, 0.999), min_size=1, max_size=5))
def test_squash_correction_is_nonpositive(a):
    assert squash_correction(np.array(a)) <= 1e-5
