import numpy as np
import pytest

from tnp import autodiff as ad
from tnp.autodiff import Tape, Tensor
from tnp.errors import NumericError, ShapeError

HALF_LOG_2PI = 0.9189385332046727


def grads_of(loss_fn, params):
    with Tape() as tape:
        loss = loss_fn()
    return ad.backward_gradients(tape, loss, leaves=params)


class TestMaskedSoftmax:
    def test_uniform_logits(self):
        out = ad.masked_softmax(Tensor([0.0, 0.0, 0.0]), [True, True, True])
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3])

    def test_single_allowed_entry(self):
        out = ad.masked_softmax(Tensor([1.0, 2.0]), [True, False])
        np.testing.assert_array_equal(out.data, [1.0, 0.0])

    def test_closed_form(self):
        out = ad.masked_softmax(Tensor([0.0, np.log(2.0)]), [True, True])
        np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], atol=1e-15)

    def test_empty_row_rejected(self):
        with pytest.raises(ShapeError, match="empty attention row"):
            ad.masked_softmax(Tensor([[1.0, 2.0], [3.0, 4.0]]), [[True, True], [False, False]])

    def test_rows_sum_to_one_and_denied_zero(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.normal(size=(6, 9)) * 5)
        mask = rng.random((6, 9)) < 0.6
        mask[:, 0] = True
        out = ad.masked_softmax(logits, mask).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
        assert (out[~mask] == 0.0).all()

    def test_stable_for_large_logits(self):
        out = ad.masked_softmax(Tensor([1e4, 1e4 + np.log(3.0)]), [True, True])
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(1)
        mask = np.array([[True, True, False], [True, True, True]])
        params = {"x": ad.parameter(rng.normal(size=(2, 3)))}

        def f(p):
            return (ad.masked_softmax(p["x"], mask) ** 3.0).sum()

        assert ad.finite_difference_check(f, params, h=1e-6) < 1e-8


class TestBackward:
    def test_sum_gives_ones(self):
        w = ad.parameter(np.arange(6.0).reshape(2, 3))
        grads = grads_of(lambda: ad.tsum(w), [w])
        np.testing.assert_array_equal(ad.grad_of(grads, w), np.ones((2, 3)))

    def test_quadratic_gives_w(self):
        w = ad.parameter(np.array([1.0, -2.0, 3.0]))
        grads = grads_of(lambda: ad.tsum(w * w) * 0.5, [w])
        np.testing.assert_allclose(ad.grad_of(grads, w), w.data)

    def test_untouched_leaf_gets_zero(self):
        w = ad.parameter(np.ones(3))
        unused = ad.parameter(np.ones(4))
        grads = grads_of(lambda: ad.tsum(w), [w, unused])
        np.testing.assert_array_equal(ad.grad_of(grads, unused), np.zeros(4))

    def test_non_scalar_loss_rejected(self):
        w = ad.parameter(np.ones(3))
        with Tape() as tape:
            loss = w * 2.0
        with pytest.raises(ShapeError, match="scalar"):
            ad.backward_gradients(tape, loss)

    def test_non_finite_loss_rejected(self):
        w = ad.parameter(np.array([-1.0]))
        with Tape() as tape:
            loss = ad.log(w).sum()
        with pytest.raises(NumericError):
            ad.backward_gradients(tape, loss)

    def test_each_node_visited_once_with_shared_subexpression(self):
        w = ad.parameter(np.array([2.0]))
        with Tape() as tape:
            shared = w * 3.0
            loss = (shared + shared).sum()
        g = ad.grad_of(ad.backward_gradients(tape, loss), w)
        np.testing.assert_allclose(g, [6.0])

    def test_tape_records_parents_before_children(self):
        w = ad.parameter(np.ones(2))
        with Tape() as tape:
            a = w * 2.0
            b = a + 1.0
            c = b.sum()
        order = {id(node): i for i, node in enumerate(tape.nodes)}
        assert order[id(a)] < order[id(b)] < order[id(c)]


class TestFiniteDifferenceCheck:
    def test_linear_is_nearly_exact(self):
        params = {"w": ad.parameter(np.array([1.0, 2.0, 3.0]))}

        def f(p):
            return (p["w"] * np.array([4.0, -1.0, 0.5])).sum()

        assert ad.finite_difference_check(f, params, h=1e-5) < 1e-10

    def test_softplus_at_zero(self):
        params = {"w": ad.parameter(np.array([0.0]))}

        def f(p):
            return ad.softplus(p["w"]).sum()

        # analytic derivative at 0 is exactly 0.5
        assert ad.finite_difference_check(f, params, h=1e-5) < 1e-6

    def test_masked_attention_block(self):
        rng = np.random.default_rng(3)
        mask = np.tril(np.ones((4, 4), dtype=bool))
        params = {
            "tok": ad.parameter(rng.normal(size=(4, 6))),
            "wq": ad.parameter(rng.normal(size=(6, 6)) * 0.5),
            "wk": ad.parameter(rng.normal(size=(6, 6)) * 0.5),
            "wv": ad.parameter(rng.normal(size=(6, 6)) * 0.5),
        }

        def f(p):
            q, k, v = p["tok"] @ p["wq"], p["tok"] @ p["wk"], p["tok"] @ p["wv"]
            weights = ad.masked_softmax(q @ k.transpose() * (1 / np.sqrt(6)), mask)
            return ((weights @ v) ** 2.0).mean()

        assert ad.finite_difference_check(f, params, h=1e-5) < 1e-4

    def test_rejects_non_finite_objective(self):
        params = {"w": ad.parameter(np.array([-1.0]))}

        def f(p):
            return ad.log(p["w"]).sum()

        with pytest.raises(NumericError):
            ad.finite_difference_check(f, params)


class TestPrimitives:
    def test_broadcast_add_gradients(self):
        a = ad.parameter(np.ones((3, 4)))
        b = ad.parameter(np.ones(4))
        grads = grads_of(lambda: ad.tsum(a + b), [a, b])
        np.testing.assert_array_equal(ad.grad_of(grads, b), np.full(4, 3.0))

    @pytest.mark.parametrize("shapes", [((3, 4), (4, 5)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 5))])
    def test_matmul_fd(self, shapes):
        rng = np.random.default_rng(5)
        params = {
            "a": ad.parameter(rng.normal(size=shapes[0])),
            "b": ad.parameter(rng.normal(size=shapes[1])),
        }

        def f(p):
            return (ad.matmul(p["a"], p["b"]) ** 2.0).mean()

        assert ad.finite_difference_check(f, params, h=1e-6) < 1e-7

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_elementwise_fd(self):
        rng = np.random.default_rng(6)
        params = {"x": ad.parameter(rng.uniform(0.5, 2.0, size=(3, 3)))}

        def f(p):
            x = p["x"]
            return (
                ad.exp(x) + ad.log(x) + ad.tanh(x) + ad.sqrt(x) + ad.softplus(x) + x**1.7
            ).sum()

        assert ad.finite_difference_check(f, params, h=1e-6) < 1e-7

    def test_clip_gradient_zero_outside(self):
        x = ad.parameter(np.array([-2.0, 0.5, 3.0]))
        grads = grads_of(lambda: ad.clip(x, -1.0, 1.0).sum(), [x])
        np.testing.assert_array_equal(ad.grad_of(grads, x), [0.0, 1.0, 0.0])

    def test_reductions_and_reshape_fd(self):
        rng = np.random.default_rng(7)
        params = {"x": ad.parameter(rng.normal(size=(2, 3, 4)))}

        def f(p):
            x = p["x"]
            a = x.sum(axis=1).mean(axis=-1, keepdims=True)
            b = x.reshape(6, 4).transpose()[1:3].sum()
            return (a * a).sum() + b

        assert ad.finite_difference_check(f, params, h=1e-6) < 1e-8

    def test_concat_and_take_fd(self):
        rng = np.random.default_rng(8)
        params = {
            "a": ad.parameter(rng.normal(size=(3, 2))),
            "b": ad.parameter(rng.normal(size=(3, 2))),
        }

        def f(p):
            joined = ad.concat([p["a"], p["b"]], axis=1)
            return (joined[:, 1:3] ** 2.0).sum()

        assert ad.finite_difference_check(f, params, h=1e-6) < 1e-8

    def test_trisolve_matches_numpy_and_fd(self):
        rng = np.random.default_rng(9)
        L = np.tril(rng.normal(size=(4, 4))) + np.eye(4) * 3.0
        b = rng.normal(size=4)
        out = ad.trisolve_lower(Tensor(L), Tensor(b))
        np.testing.assert_allclose(out.data, np.linalg.solve(L, b), atol=1e-12)
        params = {"L": ad.parameter(L), "b": ad.parameter(b)}

        def f(p):
            Lt = p["L"] * np.tril(np.ones((4, 4))) + np.eye(4) * 0.0
            return (ad.trisolve_lower(Lt, p["b"]) ** 2.0).sum()

        assert ad.finite_difference_check(f, params, h=1e-6) < 1e-6

    def test_cholesky_matches_numpy_and_fd(self):
        rng = np.random.default_rng(10)
        A = rng.normal(size=(3, 3))
        params = {"A": ad.parameter(A)}

        def f(p):
            sigma = ad.matmul(p["A"], p["A"].transpose()) + np.eye(3) * 0.7
            L = ad.cholesky(sigma)
            return ad.log(ad.diag_part(L)).sum() + (L**2.0).mean()

        assert ad.finite_difference_check(f, params, h=1e-6) < 1e-6

    def test_cholesky_failure_raises(self):
        with pytest.raises(NumericError, match="factorization"):
            ad.cholesky(Tensor(np.array([[1.0, 2.0], [2.0, 1.0]])))

    def test_forward_without_tape_records_nothing(self):
        w = ad.parameter(np.ones(3))
        out = w * 2.0
        assert not out.requires_grad

    def test_determinism(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(5, 5))
        a = ad.masked_softmax(Tensor(x), np.tril(np.ones((5, 5), bool))).data
        b = ad.masked_softmax(Tensor(x), np.tril(np.ones((5, 5), bool))).data
        np.testing.assert_array_equal(a, b)
