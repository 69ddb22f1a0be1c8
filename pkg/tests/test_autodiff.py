import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from katrec import autodiff as ad
from katrec.autodiff import Adam, ShapeError, Tensor

from conftest import central_diff, rel_error

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def fd_check(build, inputs, rng):
    """Contract ``build(*inputs)`` with a random weight and compare gradients."""
    out_shape = build(*inputs).shape
    w = Tensor(rng.normal(size=out_shape))

    def loss():
        return ad.sum(build(*inputs) * w)

    for x in inputs:
        x.grad = None
    ad.backward(loss())

    def value():
        with ad.no_grad():
            return loss().item()

    return max(rel_error(x.grad, central_diff(value, x.data)) for x in inputs)


def _take(x):
    return ad.take(x, [2, 0, 2, 1])


def _segsum(x):
    return ad.segment_sum(x, [0, 2, 0, 1, 2], 3)


def _segsoft(x):
    return ad.segment_softmax(x, [0, 0, 1, 1, 1, 3], 4)


def _masked_softmax(x):
    mask = np.array([[True, False, True, True], [True, True, True, False], [False, True, True, True]])
    return ad.softmax(x, mask=mask)


def _dropout(x):
    return ad.dropout(x, 0.3, np.random.default_rng(5), train=True)


def _ln(x, g, b):
    return ad.layer_norm(x, g, b)


UNARY = {
    "exp": (ad.exp, (3, 4), False),
    "log": (ad.log, (3, 4), True),
    "tanh": (ad.tanh, (3, 4), False),
    "sigmoid": (ad.sigmoid, (3, 4), False),
    "log_sigmoid": (ad.log_sigmoid, (3, 4), False),
    "gelu": (ad.gelu, (3, 4), False),
    "softmax": (ad.softmax, (3, 4), False),
    "masked_softmax": (_masked_softmax, (3, 4), False),
    "sum_axis": (lambda x: ad.sum(x, axis=1), (3, 4), False),
    "sum_keepdims": (lambda x: ad.sum(x, axis=0, keepdims=True), (3, 4), False),
    "mean": (lambda x: ad.mean(x, axis=(0, 1)), (2, 3, 4), False),
    "sq_norm": (ad.sq_norm, (3, 4), False),
    "reshape": (lambda x: ad.reshape(x, (4, 3)), (3, 4), False),
    "transpose": (lambda x: ad.transpose(x, (2, 0, 1)), (2, 3, 4), False),
    "take": (_take, (3, 4), False),
    "segment_sum": (_segsum, (5, 3), False),
    "segment_softmax": (_segsoft, (6,), False),
    "dropout": (_dropout, (3, 4), False),
    "scalar_div": (lambda x: x / 4.0, (3,), False),
    "neg": (lambda x: -x, (3,), False),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    fn, shape, positive = UNARY[name]
    assert fd_check(fn, [leaf(rng, *shape, positive=positive)], rng) < 1e-4


def test_leaky_relu_gradient_away_from_kink():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 0.05] = 0.3
    assert fd_check(lambda t: ad.leaky_relu(t, 0.2), [Tensor(x, requires_grad=True)], rng) < 1e-4


BINARY = {
    "add_broadcast": (lambda a, b: a + b, (3, 4), (4,)),
    "sub": (lambda a, b: a - b, (3, 4), (3, 4)),
    "mul_broadcast": (lambda a, b: a * b, (2, 3, 4), (3, 1)),
    "matmul": (lambda a, b: a @ b, (3, 4), (4, 2)),
    "batched_matmul": (lambda a, b: a @ b, (2, 3, 4), (2, 4, 5)),
    "broadcast_matmul": (lambda a, b: a @ b, (2, 3, 4), (4, 5)),
    "concat": (lambda a, b: ad.concat([a, b], axis=-1), (3, 2), (3, 4)),
    "concat_axis0": (lambda a, b: ad.concat([a, b], axis=0), (1, 4), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    fn, sa, sb = BINARY[name]
    assert fd_check(fn, [leaf(rng, *sa), leaf(rng, *sb)], rng) < 1e-4


def test_layer_norm_gradients_all_inputs():
    rng = np.random.default_rng(3)
    x, g, b = leaf(rng, 2, 3, 5), leaf(rng, 5), leaf(rng, 5)
    assert fd_check(_ln, [x, g, b], rng) < 1e-4


def test_shared_node_gradients_accumulate():
    rng = np.random.default_rng(4)
    x = leaf(rng, 3, 3)
    assert fd_check(lambda t: ad.tanh(t @ t) * t + t, [x], rng) < 1e-4


def test_softmax_of_equal_inputs_is_uniform():
    out = ad.softmax(Tensor([0.0, 0.0])).data
    np.testing.assert_array_equal(out, [0.5, 0.5])


def test_masked_softmax_gives_exact_zero_and_normalizes():
    x = Tensor(np.array([[1.0, 50.0, -3.0]]))
    out = ad.softmax(x, mask=np.array([[True, False, True]])).data
    assert out[0, 1] == 0.0
    assert abs(out.sum() - 1.0) < 1e-12


@pytest.mark.parametrize("slope", [0.2, 0.01, 0.5])
def test_leaky_relu_definition(slope):
    out = ad.leaky_relu(Tensor([0.0, -1.0, 2.0]), slope).data
    np.testing.assert_array_equal(out, [0.0, -slope, 2.0])


def test_gelu_matches_scalar_loop():
    x = np.random.default_rng(11).normal(size=3) * 2
    got = ad.gelu(Tensor(x)).data
    want = [v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0))) for v in x]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    grads = ad.backward(x * x)
    assert grads[x] == pytest.approx(6.0, abs=1e-15)


def test_sum_of_softmax_has_zero_gradient():
    v = Tensor(np.random.default_rng(2).normal(size=7), requires_grad=True)
    ad.backward(ad.sum(ad.softmax(v)))
    np.testing.assert_allclose(v.grad, 0.0, atol=1e-15)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(x * 2.0)


def test_shape_errors_name_the_op():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError, match="matmul.*\\(2, 3\\).*\\(4, 5\\)"):
        a @ b
    with pytest.raises(ShapeError, match="add"):
        a + Tensor(np.ones(4))
    with pytest.raises(ShapeError, match="concat"):
        ad.concat([a, b], axis=-1)
    with pytest.raises(ShapeError, match="layer_norm"):
        ad.layer_norm(a, Tensor(np.ones(2)), Tensor(np.zeros(3)))


def test_dropout_identity_outside_training():
    x = Tensor(np.arange(6.0))
    assert ad.dropout(x, 0.5, np.random.default_rng(0), train=False) is x


def test_dropout_masks_are_seeded():
    x = Tensor(np.ones((50, 4)))
    a = ad.dropout(x, 0.4, np.random.default_rng(9), train=True).data
    b = ad.dropout(x, 0.4, np.random.default_rng(9), train=True).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0 / 0.6}


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.tanh(x) * 2.0
    assert not y.requires_grad and y._parents == ()


def test_backward_visits_each_node_once():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    z = y + y
    ad.backward(z * z)
    # d/dx (2x^2)^2 = 16 x^3
    assert x.grad == pytest.approx(16 * 8.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_are_distributions(x):
    out = ad.softmax(Tensor(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=finite))
def test_layer_norm_standardizes_rows(x):
    x = x + np.arange(x.shape[1]) * 0.37  # keep rows away from exactly constant
    q = x.shape[1]
    out = ad.layer_norm(Tensor(x), Tensor(np.ones(q)), Tensor(np.zeros(q))).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-9
    var = out.var(axis=-1)
    # the epsilon inside the square root pulls the variance slightly below 1
    assert np.abs(var - 1.0).max() < 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 10), elements=finite))
def test_forward_ops_stay_finite(x):
    t = Tensor(x)
    for op in (ad.tanh, ad.sigmoid, ad.gelu, ad.log_sigmoid, ad.softmax, ad.leaky_relu):
        assert np.isfinite(op(t).data).all()


# -- initialization -----------------------------------------------------------

def test_trunc_normal_respects_bounds():
    x = ad.trunc_normal_init((100_000,), -0.02, 0.02, 0.02, np.random.default_rng(0))
    assert x.min() >= -0.02 and x.max() <= 0.02


@pytest.mark.parametrize("low,high,std", [(-0.02, 0.02, 0.02), (-0.01, 0.03, 0.02), (0.0, 0.05, 0.02)])
def test_trunc_normal_mean_within_three_standard_errors(low, high, std):
    n = 100_000
    x = ad.trunc_normal_init((n,), low, high, std, np.random.default_rng(1))
    dist = stats.truncnorm(low / std, high / std, loc=0.0, scale=std)
    se = dist.std() / math.sqrt(n)
    assert abs(x.mean() - dist.mean()) < 3 * se


def test_trunc_normal_degenerate_interval():
    x = ad.trunc_normal_init((1000,), 0.0, 1e-9, 1e-9, np.random.default_rng(0))
    assert np.all((x >= 0) & (x <= 1e-9))


def test_trunc_normal_errors_and_determinism():
    with pytest.raises(ValueError):
        ad.trunc_normal_init((3,), 0.1, 0.1, 0.02, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ad.trunc_normal_init((3,), 0.0, 0.1, 0.02, None)
    a = ad.trunc_normal_init((5, 5), rng=np.random.default_rng(42))
    b = ad.trunc_normal_init((5, 5), rng=np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)


# -- Adam ---------------------------------------------------------------------

def test_adam_single_scalar_step_matches_formula():
    p = Tensor(np.array(1.0), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    p.grad = np.array(1.0)
    opt.step()
    m = 0.1 * 1.0
    v = 0.001 * 1.0
    mhat = m / (1 - 0.9)
    vhat = v / (1 - 0.999)
    want = 1.0 - 1e-4 * (mhat / (math.sqrt(vhat) + 1e-8) + 0.01 * 1.0)
    assert abs(p.data - want) < 1e-12


def test_adam_two_steps_match_reference_loop():
    rng = np.random.default_rng(8)
    p0 = rng.normal(size=4)
    grads = [rng.normal(size=4) for _ in range(5)]
    p = Tensor(p0.copy(), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-2, weight_decay=0.01, total_steps=10)
    ref, m, v = p0.copy(), np.zeros(4), np.zeros(4)
    for t, g in enumerate(grads, start=1):
        p.grad = g
        opt.step()
        lr = 1e-2 * (1 - (t - 1) / 10)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - lr * ((m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8) + 0.01 * ref)
    np.testing.assert_allclose(p.data, ref, rtol=0, atol=1e-12)


def test_adam_zero_gradient_without_decay_is_noop():
    p = Tensor(np.array([0.3, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1, weight_decay=0.0)
    for _ in range(3):
        p.grad = np.zeros(2)
        opt.step()
    np.testing.assert_array_equal(p.data, [0.3, -2.0])


def test_adam_horizon_end_freezes_parameters():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1, total_steps=3)
    for _ in range(3):
        p.grad = np.array([1.0])
        opt.step()
    frozen = p.data.copy()
    assert opt.current_lr() == 0.0
    for _ in range(2):
        p.grad = np.array([5.0])
        opt.step()
    np.testing.assert_array_equal(p.data, frozen)


def test_adam_missing_gradient_raises():
    a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"a": a, "b": b})
    a.grad = np.ones(2)
    with pytest.raises(ValueError, match="missing gradient.*'b'"):
        opt.step()


def test_adam_state_roundtrip():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01)
    p.grad = np.array([1.0, -1.0, 0.5])
    opt.step()
    st_ = opt.state_dict()
    q = Tensor(p.data.copy(), requires_grad=True)
    opt2 = Adam({"p": q}, lr=0.01)
    opt2.load_state_dict(st_)
    for o, t in ((opt, p), (opt2, q)):
        t.grad = np.array([0.2, 0.1, -0.3])
        o.step()
    np.testing.assert_array_equal(p.data, q.data)
    assert opt.step_count == opt2.step_count == 2
