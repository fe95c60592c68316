import numpy as np
import pytest

from diffctr import autodiff as ad
from diffctr.errors import NumericError, ShapeError
from diffctr.optim import ParamStore
from diffctr.rng import stream


def make_store(arrays):
    store = ParamStore()
    for name, arr in arrays.items():
        store.add(name, arr)
    return store


def test_quadratic_gradient():
    store = make_store({"w": np.array([3.0, 4.0]).reshape(1, 2)})

    def fn(p, _):
        w = p["w"]
        return ad.tsum(ad.mul(w, w))

    loss, grads = ad.forward_backward(fn, store)
    assert loss == 25.0
    np.testing.assert_array_equal(grads["w"], np.array([[6.0, 8.0]]))


def test_unused_parameter_gets_zero_gradient():
    store = make_store({"w": np.ones((2, 2)), "unused": np.ones((3,))})

    def fn(p, _):
        return ad.tsum(p["w"])

    _, grads = ad.forward_backward(fn, store)
    np.testing.assert_array_equal(grads["unused"], np.zeros(3))


def test_three_layer_composite_matches_central_differences():
    rng = stream(11, "composite")
    store = make_store(
        {
            "w1": rng.normal(size=(5, 6)) * 0.4,
            "b1": rng.normal(size=(6,)) * 0.1,
            "w2": rng.normal(size=(6, 4)) * 0.4,
            "b2": rng.normal(size=(4,)) * 0.1,
            "w3": rng.normal(size=(4, 3)) * 0.4,
        }
    )
    # +0.5 shift keeps ReLU inputs away from the kink
    x = ad.const(rng.normal(size=(7, 5)) + 0.5)

    def fn(p, _):
        h1 = ad.relu(ad.add(ad.matmul(x, p["w1"]), p["b1"]))
        h2 = ad.relu(ad.add(ad.matmul(h1, p["w2"]), p["b2"]))
        return ad.tmean(ad.sigmoid(ad.matmul(h2, p["w3"])))

    reports = ad.grad_check(fn, store, h=1e-5, tol=1e-5)
    assert all(r.passed for r in reports), [(r.name, r.max_rel_error) for r in reports]


@pytest.mark.parametrize(
    "name,builder",
    [
        ("matmul", lambda p: ad.matmul(p["a"], p["b"])),
        ("batched_matmul", lambda p: ad.matmul(p["x3"], p["b"])),
        ("add_broadcast", lambda p: ad.add(p["a"], p["row_b"])),
        ("mul", lambda p: ad.mul(p["a"], p["a2"])),
        ("sub", lambda p: ad.sub(p["a"], p["a2"])),
        ("smul", lambda p: ad.smul(p["a"], 2.5)),
        ("relu_shifted", lambda p: ad.relu(ad.add(p["a"], ad.const(0.5)))),
        ("exp", lambda p: ad.exp(p["a"])),
        ("log", lambda p: ad.log(ad.add(ad.mul(p["a"], p["a"]), ad.const(1.0)))),
        ("sigmoid", lambda p: ad.sigmoid(p["a"])),
        ("softplus", lambda p: ad.softplus(p["a"])),
        ("sum_axis", lambda p: ad.tsum(p["a"], axis=1)),
        ("mean_axis", lambda p: ad.tmean(p["a"], axis=0)),
        ("gather", lambda p: ad.gather_rows(p["table"], np.array([0, 2, 2, 1]))),
        ("take_position", lambda p: ad.take_position(p["x3"], 1)),
        ("stack", lambda p: ad.stack([p["a"], p["a2"]], axis=1)),
        ("l2_normalize", lambda p: ad.l2_normalize(p["a"])),
        ("logsumexp", lambda p: ad.logsumexp(p["a"], axis=1)),
        ("cosine_rows", lambda p: ad.cosine_rows(p["a"], p["a2"])),
        ("cosine_matrix", lambda p: ad.cosine_matrix(p["a"], p["b2"])),
        ("softmax", lambda p: ad.softmax(p["a"], axis=1)),
        ("log_softmax", lambda p: ad.log_softmax(p["a"], axis=1)),
    ],
)
def test_each_op_matches_finite_differences(name, builder):
    rng = stream(7, "ops", name)
    store = make_store(
        {
            "a": rng.normal(size=(3, 4)),
            "a2": rng.normal(size=(3, 4)) + 0.1,
            "b": rng.normal(size=(4, 2)),
            "b2": rng.normal(size=(5, 4)),
            "row_b": rng.normal(size=(4,)),
            "table": rng.normal(size=(3, 4)),
            "x3": rng.normal(size=(2, 3, 4)),
        }
    )

    # random projection makes the scalar loss sensitive to every output entry
    weights = stream(8, "weights", name).normal(size=builder(store).data.shape)

    def fn(p, _):
        return ad.tmean(ad.mul(builder(p), ad.const(weights)))

    reports = ad.grad_check(fn, store, h=1e-5, tol=1e-5)
    assert all(r.passed for r in reports), [(r.name, r.max_rel_error) for r in reports]


def test_logsumexp_shift_invariance():
    rng = stream(3, "lse")
    x = rng.normal(size=(4, 6)) * 3
    base = ad.logsumexp(ad.const(x), axis=1).data
    shifted = ad.logsumexp(ad.const(x + 123.456), axis=1).data
    np.testing.assert_allclose(shifted - 123.456, base, atol=1e-12)


def test_logsumexp_ignores_log_zero_entries():
    x = np.array([[1.0, 2.0, ad.LOG_ZERO]])
    got = ad.logsumexp(ad.const(x), axis=1).data
    expected = np.log(np.exp(1.0) + np.exp(2.0))
    np.testing.assert_allclose(got, [expected], atol=1e-12)


def test_cosine_bounds():
    rng = stream(5, "cos")
    a = ad.const(rng.normal(size=(50, 8)) * 10)
    b = ad.const(rng.normal(size=(50, 8)) * 10)
    c = ad.cosine_rows(a, b).data
    assert np.all(c >= -1.0) and np.all(c <= 1.0)
    m = ad.cosine_matrix(a, b).data
    assert np.all(m >= -1.0) and np.all(m <= 1.0)
    same = ad.cosine_rows(a, a).data
    np.testing.assert_allclose(same, 1.0, atol=1e-12)


def test_forward_backward_bit_identical():
    rng = stream(9, "det")
    base = {"w": rng.normal(size=(4, 4)), "b": rng.normal(size=(4,))}
    x = rng.normal(size=(6, 4)) + 0.5

    def run():
        store = make_store({k: v.copy() for k, v in base.items()})

        def fn(p, _):
            return ad.tmean(ad.relu(ad.add(ad.matmul(ad.const(x), p["w"]), p["b"])))

        return ad.forward_backward(fn, store)

    loss1, g1 = run()
    loss2, g2 = run()
    assert loss1 == loss2
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_shape_error_names_both_operands():
    a = ad.const(np.zeros((2, 3)))
    b = ad.const(np.zeros((4, 5)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.add(a, b)
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(a, b)


def test_non_finite_names_op():
    with pytest.raises(NumericError, match="exp"):
        ad.exp(ad.const(np.array([1000.0])))
    with pytest.raises(NumericError, match="log"):
        ad.log(ad.const(np.array([0.0])))


def test_gather_rows_range_check():
    table = ad.const(np.zeros((3, 2)))
    with pytest.raises(ShapeError, match="3 rows"):
        ad.gather_rows(table, np.array([3]))


def test_adjoint_fault_breaks_grad_check():
    store = make_store({"w": np.array([[1.0, 2.0], [3.0, 4.0]])})

    def fn(p, _):
        return ad.tsum(ad.relu(ad.add(p["w"], ad.const(0.5))))

    assert all(r.passed for r in ad.grad_check(fn, store))
    with ad.adjoint_fault("relu", 2.0):
        reports = ad.grad_check(fn, store)
    assert not all(r.passed for r in reports)


def test_grad_check_h_range():
    store = make_store({"w": np.ones((1,))})
    with pytest.raises(ValueError):
        ad.grad_check(lambda p, _: ad.tsum(p["w"]), store, h=1e-2)
