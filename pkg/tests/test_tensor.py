import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from camp import tensor as T
from camp.diagnostics import TOLERANCE, gradient_suite
from camp.errors import NumericalError


def t(a, grad=False):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# --------------------------------------------------------------------------
# conv2d
# --------------------------------------------------------------------------

def test_conv2d_scalar_affine():
    y = T.conv2d(t([[[[5.0]]]]), t([[[[3.0]]]]), t([2.0]))
    assert y.data.ravel().tolist() == [17.0]


def test_conv2d_identity_kernel_reproduces_input(rng):
    x = rng.normal(size=(2, 5, 7, 1))
    k = np.zeros((3, 3, 1, 1))
    k[1, 1, 0, 0] = 1.0
    assert np.array_equal(T.conv2d(t(x), t(k), t([0.0])).data, x)


@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
def test_conv2d_matches_loop_oracle(rng, stride, padding):
    x = rng.normal(size=(1, 6, 6, 2))
    k = rng.normal(size=(3, 3, 2, 4))
    b = rng.normal(size=4)
    got = T.conv2d(t(x), t(k), t(b), stride, padding).data
    assert np.max(np.abs(got - oracles.conv2d_loops(x, k, b, stride, padding))) < 1e-12


def test_conv2d_same_output_size_is_ceil():
    for n, s in ((7, 2), (8, 2), (9, 3), (5, 1)):
        y = T.conv2d(t(np.ones((1, n, n, 1))), t(np.ones((3, 3, 1, 1))), t([0.0]), s)
        assert y.shape[1:3] == (-(-n // s),) * 2
    assert T.same_padding(4, 2, 1) == (4, 0, 1)  # extra padding bottom/right


def test_conv2d_errors():
    with pytest.raises(ValueError, match="channel mismatch"):
        T.conv2d(t(np.ones((1, 4, 4, 2))), t(np.ones((3, 3, 3, 1))), t([0.0]))
    with pytest.raises(ValueError, match="stride"):
        T.conv2d(t(np.ones((1, 4, 4, 1))), t(np.ones((3, 3, 1, 1))), t([0.0]), stride=0)


# --------------------------------------------------------------------------
# conv2d_transpose
# --------------------------------------------------------------------------

def test_conv_transpose_1x1_is_pointwise_linear(rng):
    x = rng.normal(size=(2, 3, 4, 3))
    k = rng.normal(size=(1, 1, 3, 2))
    b = rng.normal(size=2)
    y = T.conv2d_transpose(t(x), t(k), t(b), stride=1).data
    assert np.allclose(y, x @ k[0, 0] + b, atol=1e-13)


def test_conv_transpose_doubles_spatial_size():
    y = T.conv2d_transpose(t(np.ones((1, 2, 2, 1))), t(np.ones((3, 3, 1, 1))), t([0.0]), stride=2)
    assert y.shape == (1, 4, 4, 1)


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv_transpose_matches_loop_oracle(rng, stride):
    x = rng.normal(size=(2, 3, 4, 3))
    k = rng.normal(size=(3, 3, 3, 2))
    b = rng.normal(size=2)
    got = T.conv2d_transpose(t(x), t(k), t(b), stride).data
    assert np.max(np.abs(got - oracles.conv2d_transpose_loops(x, k, b, stride))) < 1e-12


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3),
       st.sampled_from([1, 2, 3]), st.integers(0, 2**31))
def test_adjoint_identity(stride, n, c_in, c_out, k, seed):
    r = np.random.default_rng(seed)
    h, w = r.integers(1, 5, size=2)
    y = r.normal(size=(n, h, w, c_in))
    kern = r.normal(size=(k, k, c_in, c_out))
    x = r.normal(size=(n, h * stride, w * stride, c_out))
    fwd = T.conv2d(t(x), t(kern.transpose(0, 1, 3, 2)), t(np.zeros(c_in)), stride, "same").data
    adj = T.conv2d_transpose(t(y), t(kern), t(np.zeros(c_out)), stride).data
    lhs, rhs = np.sum(fwd * y), np.sum(x * adj)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_conv_transpose_channel_mismatch():
    with pytest.raises(ValueError, match="channel mismatch"):
        T.conv2d_transpose(t(np.ones((1, 2, 2, 2))), t(np.ones((3, 3, 1, 1))), t([0.0]))


# --------------------------------------------------------------------------
# pooling, dense, batch norm
# --------------------------------------------------------------------------

def test_maxpool_routes_gradient_to_max():
    x = t(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1), grad=True)
    with T.Tape() as tape:
        y = T.maxpool2d(x)
        loss = T.weighted_sum(y, [[[[1.0]]]])
    tape.backward(loss)
    assert y.data.item() == 4.0
    assert x.grad[0, :, :, 0].tolist() == [[0.0, 0.0], [0.0, 1.0]]


def test_maxpool_constant_input_tie_rule():
    x = t(np.full((1, 4, 4, 1), 3.0), grad=True)
    with T.Tape() as tape:
        y = T.maxpool2d(x)
        loss = T.weighted_sum(y, np.ones(y.shape))
    tape.backward(loss)
    assert np.all(y.data == 3.0)
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    assert np.array_equal(x.grad[0, :, :, 0], expected)


def test_maxpool_matches_loop_oracle(rng):
    x = rng.normal(size=(1, 8, 8, 3))
    assert np.array_equal(T.maxpool2d(t(x)).data, oracles.maxpool_loops(x)[0])


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ValueError, match="even"):
        T.maxpool2d(t(np.ones((1, 3, 4, 1))))


def test_dense_identity_and_oracle(rng):
    x = rng.normal(size=(3, 5))
    assert np.array_equal(T.dense(t(x), t(np.eye(5)), t(np.zeros(5))).data, x)
    w, b = rng.normal(size=(5, 4)), rng.normal(size=4)
    assert np.max(np.abs(T.dense(t(x), t(w), t(b)).data - oracles.dense_loops(x, w, b))) < 1e-12
    with pytest.raises(ValueError, match="mismatch"):
        T.dense(t(x), t(np.ones((4, 2))), t(np.zeros(2)))


def test_batchnorm_train_mode_standardizes(rng):
    x = rng.normal(loc=3.0, scale=2.5, size=(4, 5, 5, 3))
    rm, rv = np.zeros(3), np.ones(3)
    y = T.batchnorm2d(t(x), t(np.ones(3)), t(np.zeros(3)), rm, rv, training=True).data
    assert np.allclose(y.mean(axis=(0, 1, 2)), 0.0, atol=1e-6)
    assert np.allclose(y.var(axis=(0, 1, 2)), 1.0, atol=1e-5)  # eps shrinks it a little
    y2 = T.batchnorm2d(t(x), t(np.full(3, 2.0)), t(np.full(3, 3.0)), rm, rv, training=True).data
    assert np.allclose(y2.mean(axis=(0, 1, 2)), 3.0, atol=1e-6)
    assert np.allclose(y2.std(axis=(0, 1, 2)), 2.0, atol=1e-5)


def test_batchnorm_matches_loop_oracle_and_updates_running_stats(rng):
    x = rng.normal(size=(3, 4, 4, 2))
    g, b = rng.normal(size=2), rng.normal(size=2)
    rm, rv = np.full(2, 0.5), np.full(2, 2.0)
    y = T.batchnorm2d(t(x), t(g), t(b), rm, rv, training=True).data
    ref, mean, var = oracles.batchnorm_loops(x, g, b)
    assert np.max(np.abs(y - ref)) < 1e-12
    assert np.allclose(rm, 0.9 * 0.5 + 0.1 * mean, atol=1e-15)
    assert np.allclose(rv, 0.9 * 2.0 + 0.1 * var, atol=1e-15)
    # inference uses the running statistics and leaves them alone
    before = rm.copy(), rv.copy()
    yi = T.batchnorm2d(t(x), t(g), t(b), rm, rv, training=False).data
    assert np.allclose(yi, g * (x - rm) / np.sqrt(rv + 1e-5) + b, atol=1e-13)
    assert np.array_equal(rm, before[0]) and np.array_equal(rv, before[1])


def test_batchnorm_degenerate_batch():
    with pytest.raises(ValueError, match="at least 2"):
        T.batchnorm2d(t(np.ones((1, 1, 1, 2))), t(np.ones(2)), t(np.zeros(2)),
                      np.zeros(2), np.ones(2), training=True)


# --------------------------------------------------------------------------
# pointwise ops
# --------------------------------------------------------------------------

def test_leaky_relu_values():
    assert T.leaky_relu(t([2.0, -2.0]), 0.01).data.tolist() == [2.0, -0.02]
    x = np.linspace(-3, 3, 13)
    assert np.array_equal(T.leaky_relu(t(x), 1.0).data, x)


def test_sigmoid_values_and_symmetry():
    assert T.sigmoid(t([0.0])).data.tolist() == [0.5]
    x = np.linspace(-40, 40, 81)
    s, sm = T.sigmoid(t(x)).data, T.sigmoid(t(-x)).data
    assert np.allclose(s + sm, 1.0, atol=1e-15)
    extreme = T.sigmoid(t([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(extreme)) and extreme.tolist() == [0.0, 1.0]


def test_dropout_identities():
    x = t(np.arange(12.0).reshape(3, 4))
    assert T.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert T.dropout(x, 0.9, False, None) is x
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, True, np.random.default_rng(0))


def test_dropout_keep_fraction_and_scaling():
    rate = 0.25
    y = T.dropout(t(np.ones(10**6)), rate, True, np.random.default_rng(7)).data
    kept = y != 0
    assert abs(kept.mean() - (1 - rate)) < 0.003
    assert np.allclose(y[kept], 1.0 / (1 - rate))


# --------------------------------------------------------------------------
# tape and gradcheck
# --------------------------------------------------------------------------

def test_backward_twice_rejected():
    x = t([1.0, 2.0], grad=True)
    with T.Tape() as tape:
        loss = T.weighted_sum(T.sigmoid(x), [1.0, 1.0])
    tape.backward(loss)
    with pytest.raises(RuntimeError, match="already"):
        tape.backward(loss)


def test_tape_is_topological_and_gradients_accumulate():
    x = t([0.5, -1.5], grad=True)
    with T.Tape() as tape:
        a = T.leaky_relu(x, 0.1)
        b = T.add(a, x)  # x used twice
        loss = T.weighted_sum(b, [1.0, 1.0])
    ids = [n.output.node_id for n in tape.nodes]
    assert ids == sorted(ids)
    for node in tape.nodes:
        for inp in node.inputs:
            assert inp.node_id is None or inp.node_id < node.output.node_id
    tape.backward(loss)
    assert x.grad.tolist() == [2.0, 1.1]


def test_no_recording_without_grad():
    with T.Tape() as tape:
        T.sigmoid(t([1.0]))
    assert tape.nodes == []


def test_gradcheck_dense_and_conv(rng):
    x, w, b = t(rng.normal(size=(3, 6)), True), t(rng.normal(size=(6, 4)), True), t(rng.normal(size=4), True)
    d = rng.normal(size=(3, 4))
    assert T.gradcheck(lambda: T.weighted_sum(T.dense(x, w, b), d), [x, w, b]) < 1e-6
    xc, kc, bc = t(rng.normal(size=(1, 5, 5, 2)), True), t(rng.normal(size=(3, 3, 2, 3)), True), t(rng.normal(size=3), True)
    dc = rng.normal(size=(1, 5, 5, 3))
    assert T.gradcheck(lambda: T.weighted_sum(T.conv2d(xc, kc, bc), dc), [xc, kc, bc]) < 1e-5


def test_leaky_relu_gradient_away_from_kink(rng):
    x = rng.uniform(0.01, 2.0, size=20) * rng.choice([-1, 1], size=20)
    xt = t(x, True)
    d = rng.normal(size=20)
    assert T.gradcheck(lambda: T.weighted_sum(T.leaky_relu(xt, 0.01), d), [xt]) < 1e-6


def test_gradcheck_requires_float64():
    x = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        T.gradcheck(lambda: T.weighted_sum(x, np.ones(3)), [x])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradcheck_rejects_non_finite():
    x = t([0.0], True)
    with pytest.raises(NumericalError):
        T.gradcheck(lambda: T.weighted_sum(T.dense(T.Tensor([[np.inf]]), T.reshape(x, (1, 1)), t([0.0])),
                                           [[1.0]]), [x])


def test_gradcheck_skips_kink_crossings():
    # |x| < h: the central difference straddles the kink and must be skipped
    x = t([1e-7], True)
    sig = lambda: np.array([x.data[0] > 0])
    rep = T.gradcheck_report(lambda: T.weighted_sum(T.leaky_relu(x, 0.01), [1.0]), [x], signature=sig)
    assert rep.skipped == 1 and rep.probed == 0


def test_gradient_suite_all_pass():
    results = gradient_suite(seed=1, size=16, max_entries=6)
    assert {r.name for r in results} >= {"conv2d[s=1,same]", "conv2d_transpose", "maxpool2d", "dense",
                                          "batchnorm2d[train]", "leaky_relu", "sigmoid", "dropout",
                                          "dice_loss", "bce", "sparse_penalty", "camp1+dice",
                                          "camp2+bce+sparse"}
    bad = [(r.name, r.max_rel_error) for r in results if not r.max_rel_error < TOLERANCE]
    assert not bad
    assert all(r.probed > 0 for r in results)
