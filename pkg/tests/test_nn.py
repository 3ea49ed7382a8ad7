import numpy as np
import pytest

from tnp import autodiff as ad
from tnp.autodiff import Tensor
from tnp.errors import ConfigError, ShapeError
from tnp.nn import AttentionLayer, Linear, Mlp, TransformerBlock, mlp_forward, scaled_dot_attention


def brute_force_attention(layer, tokens, mask):
    """Per-head python-loop oracle for Eq.-style attention."""
    q = tokens @ layer.wq.w.data + layer.wq.b.data
    k = tokens @ layer.wk.w.data + layer.wk.b.data
    v = tokens @ layer.wv.w.data + layer.wv.b.data
    n, d = tokens.shape
    heads, dh = layer.n_heads, d // layer.n_heads
    merged = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        qs, ks, vs = q[:, sl], k[:, sl], v[:, sl]
        for i in range(n):
            logits = np.full(n, -np.inf)
            for j in range(n):
                if mask[i, j]:
                    logits[j] = qs[i] @ ks[j] / np.sqrt(dh)
            w = np.exp(logits - logits[mask[i]].max())
            w[~mask[i]] = 0.0
            w = w / w.sum()
            merged[i, sl] = sum(w[j] * vs[j] for j in range(n))
    return merged @ layer.wo.w.data + layer.wo.b.data


class TestAttention:
    def test_self_only_mask_returns_value_projection(self):
        rng = np.random.default_rng(0)
        layer = AttentionLayer.create(rng, 4, 1)
        # zero queries/keys, identity value and output projections
        layer.wq.w.data[:] = 0.0
        layer.wk.w.data[:] = 0.0
        layer.wv.w.data = np.eye(4)
        layer.wv.b.data[:] = 0.0
        layer.wo.w.data = np.eye(4)
        layer.wo.b.data[:] = 0.0
        tokens = Tensor(rng.normal(size=(3, 4)))
        out = scaled_dot_attention(layer, tokens, np.eye(3, dtype=bool))
        np.testing.assert_allclose(out.data, tokens.data, atol=1e-14)

    def test_two_token_brute_force(self):
        rng = np.random.default_rng(1)
        layer = AttentionLayer.create(rng, 6, 2)
        tokens = rng.normal(size=(2, 6))
        mask = np.ones((2, 2), dtype=bool)
        out = scaled_dot_attention(layer, Tensor(tokens), mask)
        ref = brute_force_attention(layer, tokens, mask)
        assert np.abs(out.data - ref).max() < 1e-12

    def test_eight_token_masked_brute_force(self):
        rng = np.random.default_rng(2)
        layer = AttentionLayer.create(rng, 8, 4)
        tokens = rng.normal(size=(8, 8))
        mask = np.tril(np.ones((8, 8), dtype=bool))
        mask[:3, :3] = True
        out = scaled_dot_attention(layer, Tensor(tokens), mask)
        ref = brute_force_attention(layer, tokens, mask)
        assert np.abs(out.data - ref).max() < 1e-12

    def test_denied_token_perturbation_leaves_rows_unchanged(self):
        rng = np.random.default_rng(3)
        layer = AttentionLayer.create(rng, 8, 2)
        n = 8
        mask = np.tril(np.ones((n, n), dtype=bool))
        tokens = rng.normal(size=(n, 8))
        base = scaled_dot_attention(layer, Tensor(tokens), mask).data
        perturbed = tokens.copy()
        perturbed[7] = rng.normal(size=8) * 50.0  # token 7 denied to rows 0..6
        out = scaled_dot_attention(layer, Tensor(perturbed), mask).data
        np.testing.assert_array_equal(out[:7], base[:7])

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(4)
        layer = AttentionLayer.create(rng, 6, 3)
        tokens = rng.normal(size=(2, 5, 6))
        mask = np.tril(np.ones((5, 5), dtype=bool))
        batched = scaled_dot_attention(layer, Tensor(tokens), mask).data
        for b in range(2):
            single = scaled_dot_attention(layer, Tensor(tokens[b]), mask).data
            np.testing.assert_allclose(batched[b], single, atol=1e-14)

    def test_shape_errors(self):
        rng = np.random.default_rng(5)
        layer = AttentionLayer.create(rng, 6, 2)
        with pytest.raises(ShapeError):
            scaled_dot_attention(layer, Tensor(np.ones((3, 4))), np.ones((3, 3), bool))
        with pytest.raises(ShapeError):
            scaled_dot_attention(layer, Tensor(np.ones((3, 6))), np.ones((4, 4), bool))

    def test_head_count_must_divide_width(self):
        with pytest.raises(ConfigError):
            AttentionLayer.create(np.random.default_rng(0), 6, 4)

    def test_rows_are_convex_combinations(self):
        rng = np.random.default_rng(6)
        layer = AttentionLayer.create(rng, 4, 1)
        layer.wv.w.data = np.eye(4)
        layer.wv.b.data[:] = 0.0
        layer.wo.w.data = np.eye(4)
        layer.wo.b.data[:] = 0.0
        tokens = rng.normal(size=(4, 4))
        mask = np.ones((4, 4), dtype=bool)
        out = scaled_dot_attention(layer, Tensor(tokens), mask).data
        # with identity value/output paths each row lies in the convex hull
        assert (out.min(axis=0) >= tokens.min(axis=0) - 1e-12).all()
        assert (out.max(axis=0) <= tokens.max(axis=0) + 1e-12).all()


class TestMlp:
    def test_identity_single_layer(self):
        mlp = Mlp.create(np.random.default_rng(0), [3, 3])
        mlp.layers[0].w.data = np.eye(3)
        mlp.layers[0].b.data[:] = 0.0
        x = np.random.default_rng(1).normal(size=(5, 3))
        np.testing.assert_array_equal(mlp_forward(mlp, Tensor(x)).data, x)

    def test_relu_definition(self):
        out = ad.relu(Tensor([-1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_two_layer_hand_composition(self):
        mlp = Mlp.create(np.random.default_rng(2), [2, 2, 1], activation="relu")
        w0 = np.array([[1.0, -1.0], [0.5, 2.0]])
        b0 = np.array([0.1, -0.2])
        w1 = np.array([[2.0], [-3.0]])
        b1 = np.array([0.25])
        mlp.layers[0].w.data, mlp.layers[0].b.data = w0, b0
        mlp.layers[1].w.data, mlp.layers[1].b.data = w1, b1
        x = np.array([1.5, -0.5])
        hidden = np.maximum(x @ w0 + b0, 0.0)
        expected = hidden @ w1 + b1
        out = mlp_forward(mlp, Tensor(x)).data
        np.testing.assert_array_equal(out, expected)

    def test_unknown_activation_rejected(self):
        with pytest.raises(ConfigError, match="unknown activation"):
            Mlp.create(np.random.default_rng(0), [2, 2], activation="swishish")

    def test_width_mismatch_rejected(self):
        mlp = Mlp.create(np.random.default_rng(0), [3, 4])
        with pytest.raises(ShapeError):
            mlp_forward(mlp, Tensor(np.ones((2, 5))))

    def test_last_layer_is_affine(self):
        mlp = Mlp.create(np.random.default_rng(3), [2, 4, 2], activation="relu")
        x = np.random.default_rng(4).normal(size=(10, 2)) * 100.0
        out = mlp_forward(mlp, Tensor(x)).data
        assert (out < 0).any()  # relu on the output would forbid this


class TestTransformerBlock:
    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        block = TransformerBlock.create(rng, 8, 2, 16)
        params = block.params("blk")
        params["tok"] = ad.parameter(rng.normal(size=(5, 8)))
        mask = np.tril(np.ones((5, 5), dtype=bool))

        def f(p):
            return (block(p["tok"], mask) ** 2.0).mean()

        assert ad.finite_difference_check(f, params, h=1e-5) < 1e-4

    def test_forward_deterministic(self):
        rng = np.random.default_rng(8)
        block = TransformerBlock.create(rng, 8, 2, 16)
        tokens = rng.normal(size=(2, 5, 8))
        mask = np.ones((5, 5), dtype=bool)
        a = block(Tensor(tokens), mask).data
        b = block(Tensor(tokens), mask).data
        np.testing.assert_array_equal(a, b)
