import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsgcn import autodiff as ad
from gsgcn.autodiff import Tensor


def param(x, name=None):
    return Tensor(np.asarray(x), requires_grad=True, name=name)


def weighted(out, rng, positive=False):
    """Scalar ``sum(out * R)`` with fixed random weights so every output entry matters."""
    lo = 0.5 if positive else -1.5
    r = rng.uniform(lo, 1.5, size=out.shape)
    if not positive:
        r = np.where(np.abs(r) < 0.5, np.sign(r) * 0.5 + r, r)
    return ad.sum_(ad.mul(out, Tensor(r)))


# Primitive cases: (name, builder(rng) -> (params, fn(params) -> Tensor)).
# Inputs stay away from relu kinks, log(0) and clip boundaries.

def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1, 1], size=shape)


CASES = {
    "add": lambda r: ([param(r.normal(size=(3, 4))), param(r.normal(size=(1, 4)))],
                      lambda p: ad.add(p[0], p[1])),
    "sub": lambda r: ([param(r.normal(size=(2, 3))), param(r.normal(size=(2, 1)))],
                      lambda p: ad.sub(p[0], p[1])),
    "mul": lambda r: ([param(_away_from_zero(r, (2, 3, 2))), param(_away_from_zero(r, (3, 1)))],
                      lambda p: ad.mul(p[0], p[1])),
    "scale": lambda r: ([param(r.normal(size=(5,)))], lambda p: ad.scale(p[0], -2.5)),
    "shift": lambda r: ([param(r.normal(size=(5,)))], lambda p: ad.shift(p[0], 0.7)),
    "power": lambda r: ([param(r.uniform(0.5, 1.5, size=(6,)))], lambda p: ad.power(p[0], 2.0)),
    "clip": lambda r: ([param(r.uniform(0.15, 0.85, size=(6,)) * np.array([1, 1, 1, 1, 0.1, 9.0]))],
                       lambda p: ad.clip(p[0], 0.1, 1.0)),
    "relu": lambda r: ([param(_away_from_zero(r, (4, 4)))], lambda p: ad.relu(p[0])),
    "exp": lambda r: ([param(r.uniform(-1, 1, size=(3, 3)))], lambda p: ad.exp(p[0])),
    "log": lambda r: ([param(r.uniform(0.5, 2.0, size=(3, 3)))], lambda p: ad.log(p[0])),
    "softmax": lambda r: ([param(r.normal(size=(3, 4)))], lambda p: ad.softmax(p[0], axis=1)),
    "matmul": lambda r: ([param(r.uniform(0.5, 1.5, size=(2, 3, 4))), param(r.uniform(0.5, 1.5, size=(4, 2)))],
                         lambda p: ad.matmul(p[0], p[1])),
    "matmul_batched": lambda r: ([param(r.uniform(0.5, 1.5, size=(3, 4))), param(r.uniform(0.5, 1.5, size=(2, 4, 3)))],
                                 lambda p: ad.matmul(p[0], p[1])),
    "concat": lambda r: ([param(r.normal(size=(2, 3))), param(r.normal(size=(2, 2)))],
                         lambda p: ad.concat(p, axis=1)),
    "slice": lambda r: ([param(r.normal(size=(4, 5)))], lambda p: ad.slice_(p[0], (slice(1, 3), slice(None, None, 2)))),
    "pad_zero": lambda r: ([param(r.normal(size=(2, 3)))], lambda p: ad.pad_zero(p[0], [(1, 0), (2, 1)])),
    "reshape": lambda r: ([param(r.normal(size=(2, 6)))], lambda p: ad.reshape(p[0], (3, 4))),
    "transpose": lambda r: ([param(r.normal(size=(2, 3, 4)))], lambda p: ad.transpose(p[0], (2, 0, 1))),
    "sum": lambda r: ([param(r.normal(size=(3, 4)))], lambda p: ad.sum_(p[0], axes=1, keepdims=True)),
    "mean": lambda r: ([param(r.normal(size=(3, 4, 2)))], lambda p: ad.mean(p[0], axes=(0, 2))),
}


def _bn_case(training):
    def build(r):
        x = param(r.normal(size=(4, 3, 5)))
        g = param(r.uniform(0.5, 1.5, size=3))
        b = param(r.normal(size=3))
        rm, rv = r.normal(size=3), r.uniform(0.5, 2, size=3)
        return [x, g, b], lambda p: ad.batchnorm(p[0], p[1], p[2], rm.copy(), rv.copy(), training,
                                                 update_stats=False)
    return build


CASES["batchnorm_train"] = _bn_case(True)
CASES["batchnorm_eval"] = _bn_case(False)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradient_float32(name, seed):
    rng = np.random.default_rng(seed)
    with ad.precision("float32"):
        params, fn = CASES[name](rng)
        params = [param(p.data.astype(np.float32)) for p in params]
        # positive weights keep matmul sums from cancelling; elsewhere mixed signs keep the loss small
        positive = name.startswith("matmul")
        loss = lambda: weighted(fn(params), np.random.default_rng(11), positive)
        assert all(p.data.size <= 64 for p in params)
        # a 1e-2 step resolves 32-bit losses; every input sits at least that far from a kink
        assert ad.finite_diff_check(loss, params, 1e-2) < 1e-2


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradient_float64(name):
    rng = np.random.default_rng(3)
    with ad.precision("float64"):
        params, fn = CASES[name](rng)
        params = [param(p.data.astype(np.float64)) for p in params]
        loss = lambda: weighted(fn(params), np.random.default_rng(5))
        assert ad.finite_diff_check(loss, params, 1e-6) < 1e-6


def test_default_dtype_is_32_bit():
    assert Tensor([1.0, 2.0]).data.dtype == np.float32
    with ad.precision("float64"):
        assert Tensor([1.0]).data.dtype == np.float64
    assert ad.get_dtype() is np.float32


def test_forward_examples():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_backward_examples():
    x = param([3.0])
    assert ad.backward(ad.sum_(x * x), [x])[x].tolist() == [6.0]
    w = param([1.0, 2.0])
    g = ad.backward(ad.sum_(x * x), [x, w])
    np.testing.assert_array_equal(g[w], [0.0, 0.0])
    y = param([-1.0, 2.0])
    np.testing.assert_array_equal(ad.backward(ad.sum_(ad.relu(y)), [y])[y], [0.0, 1.0])


def test_relu_subgradient_at_zero_is_zero():
    x = param([0.0])
    assert ad.backward(ad.sum_(ad.relu(x)), [x])[x][0] == 0.0


def test_backward_requires_scalar():
    x = param(np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.backward(x * x, [x])


def test_shared_subexpression_accumulates():
    x = param([2.0])
    y = x * x
    loss = ad.sum_(y + y * x)  # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
    assert ad.backward(loss, [x])[x][0] == pytest.approx(2 * 2 + 3 * 4)


def test_deep_chain_has_no_recursion_limit():
    x = param([1.0])
    y = x
    for _ in range(5000):
        y = ad.shift(y, 0.0)
    assert ad.backward(ad.sum_(y), [x])[x][0] == 1.0


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"add.*\(2, 3\).*\(4,\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_empty_axis_rejected():
    with pytest.raises(ad.ShapeError):
        ad.softmax(Tensor(np.ones((2, 0))), axis=1)


def test_no_node_without_requires_grad():
    assert ad.add(Tensor([1.0]), Tensor([2.0])).node is None
    assert ad.add(param([1.0]), Tensor([2.0])).node is not None


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_softmax_is_a_distribution(rows, cols, seed):
    x = np.random.default_rng(seed).normal(0, 10, size=(rows, cols))
    p = ad.softmax(Tensor(x), axis=1).data
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2), st.integers(0, 2**31 - 1))
def test_concat_then_slice_round_trips(widths, axis, seed):
    rng = np.random.default_rng(seed)
    parts = []
    for w in widths:
        shape = [2, 3, 2]
        shape[axis] = w
        parts.append(rng.normal(size=shape).astype(np.float32))
    cat = ad.concat([Tensor(p) for p in parts], axis=axis)
    start = 0
    for p in parts:
        idx = [slice(None)] * 3
        idx[axis] = slice(start, start + p.shape[axis])
        assert ad.slice_(cat, tuple(idx)).data.tobytes() == p.tobytes()
        start += p.shape[axis]


def test_batchnorm_eval_is_affine():
    rng = np.random.default_rng(0)
    with ad.precision("float64"):
        g, b = Tensor(rng.uniform(0.5, 2, 3)), Tensor(rng.normal(size=3))
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
        bn = lambda x: ad.batchnorm(Tensor(x), g, b, rm, rv, training=False).data
        x, y = rng.normal(size=(4, 3, 2)), rng.normal(size=(4, 3, 2))
        a, c = 1.7, -0.4
        # affine maps preserve affine combinations with weights summing to one
        np.testing.assert_allclose(bn(a * x + (1 - a) * y), a * bn(x) + (1 - a) * bn(y), atol=1e-12)
        np.testing.assert_allclose(bn(x + c) - bn(x), np.broadcast_to((c * g.data / np.sqrt(rv + 1e-5))[None, :, None], x.shape),
                                   atol=1e-12)


def test_batchnorm_running_stats_momentum():
    x = np.arange(24, dtype=np.float64).reshape(4, 3, 2)
    rm, rv = np.zeros(3), np.ones(3)
    with ad.precision("float64"):
        ad.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True)
    mu = x.mean(axis=(0, 2))
    var = x.var(axis=(0, 2), ddof=1)
    np.testing.assert_allclose(rm, 0.1 * mu)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var)


def test_finite_diff_check_quadratic_is_near_exact():
    rng = np.random.default_rng(1)
    with ad.precision("float64"):
        w = param(rng.normal(size=(4,)))
        A = Tensor(rng.normal(size=(4, 4)))
        loss = lambda: ad.sum_(ad.mul(ad.matmul(A, ad.reshape(w, (4, 1))), ad.reshape(w, (4, 1))))
        assert ad.finite_diff_check(loss, [w]) < 1e-4


def test_finite_diff_check_zero_case():
    w = param(np.zeros(2))
    loss = lambda: ad.sum_(ad.scale(Tensor(np.ones(2)), 0.0))
    assert ad.finite_diff_check(loss, [w]) == 0.0
    assert ad.finite_diff_check(loss, []) == 0.0


def test_finite_diff_check_detects_nondeterminism():
    w = param([1.0])
    counter = iter(range(100))
    loss = lambda: ad.sum_(ad.shift(w, float(next(counter))))
    with pytest.raises(ad.NonDeterministicLossError):
        ad.finite_diff_check(loss, [w])


def test_finite_diff_check_restores_parameters():
    w = param(np.array([0.3, -0.2]))
    before = w.data.copy()
    ad.finite_diff_check(lambda: ad.sum_(ad.exp(w)), [w])
    assert w.data.tobytes() == before.tobytes()


def test_corrupted_backward_rule_is_caught(monkeypatch):
    """Mutation test: the checker must notice a wrong exp derivative."""
    monkeypatch.setitem(ad.BACKWARD_RULES, "exp", lambda node, g: (g * 2.0 * node.parents[0].data,))
    w = param(np.array([0.3, -0.2, 0.5]))
    assert ad.finite_diff_check(lambda: ad.sum_(ad.exp(w)), [w]) > 0.1


def test_sampled_entries_are_reproducible():
    rng = np.random.default_rng(0)
    with ad.precision("float64"):
        w = param(rng.normal(size=50))
        loss = lambda: ad.sum_(ad.power(w, 3.0))
        a = ad.gradient_report(loss, [w], 1e-5, max_entries=5, seed=3)
        b = ad.gradient_report(loss, [w], 1e-5, max_entries=5, seed=3)
    assert a[0][1] == b[0][1] < 1e-6


def test_dump_graph_lists_edges():
    x = param(np.ones((2, 2)), name="x")
    text = ad.dump_graph(ad.sum_(ad.relu(x)))
    assert "x[2, 2] -> relu" in text
    assert "-> sum" in text


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_flags_non_finite(monkeypatch):
    monkeypatch.setattr(ad, "DEBUG", True)
    with pytest.raises(FloatingPointError):
        ad.log(Tensor([-1.0]))


def test_no_grad_records_no_graph():
    w = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.sum_(ad.mul(w, w))
    assert not y.requires_grad and y.node is None and y.item() == 3.0
    assert ad.sum_(ad.mul(w, w)).requires_grad  # re-enabled on exit
