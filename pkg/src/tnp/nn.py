"""Neural-net building blocks: masked multi-head attention, MLPs, layer norm.

All blocks are plain containers of leaf ``Tensor`` parameters plus pure
forward functions, so one parameter set can be shared read-only across
evaluation workers while a single training thread mutates its own copy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

_ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "softplus": ad.softplus,
    "identity": lambda t: t,
}


def activation_fn(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(
            f"unknown activation {name!r}; expected one of {sorted(_ACTIVATIONS)}"
        ) from None


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class Linear:
    w: Tensor
    b: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, d_in: int, d_out: int) -> "Linear":
        return cls(
            w=ad.parameter(xavier_uniform(rng, d_in, d_out)),
            b=ad.parameter(np.zeros(d_out)),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


@dataclass
class Mlp:
    """Affine layers interleaved with a fixed activation; last layer affine."""

    layers: list[Linear]
    activation: str

    @classmethod
    def create(
        cls, rng: np.random.Generator, widths: list[int], activation: str = "relu"
    ) -> "Mlp":
        if len(widths) < 2:
            raise ConfigError(f"mlp needs at least [d_in, d_out] widths, got {widths}")
        activation_fn(activation)  # validate eagerly
        layers = [
            Linear.create(rng, widths[i], widths[i + 1]) for i in range(len(widths) - 1)
        ]
        return cls(layers=layers, activation=activation)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.{i}"))
        return out


def mlp_forward(mlp: Mlp, x: Tensor) -> Tensor:
    act = activation_fn(mlp.activation)
    h = x
    for i, layer in enumerate(mlp.layers):
        if layer.w.shape[0] != h.shape[-1]:
            raise ShapeError(
                f"mlp layer {i} expects input width {layer.w.shape[0]}, got {h.shape[-1]}"
            )
        h = layer(h)
        if i < len(mlp.layers) - 1:
            h = act(h)
    return h


@dataclass
class LayerNorm:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @classmethod
    def create(cls, d: int) -> "LayerNorm":
        return cls(gamma=ad.parameter(np.ones(d)), beta=ad.parameter(np.zeros(d)))

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / ad.sqrt(var + self.eps) * self.gamma + self.beta

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


@dataclass
class AttentionLayer:
    """Multi-head scaled dot-product attention with an output projection."""

    wq: Linear
    wk: Linear
    wv: Linear
    wo: Linear
    n_heads: int
    d_model: int

    @classmethod
    def create(cls, rng: np.random.Generator, d_model: int, n_heads: int) -> "AttentionLayer":
        if d_model % n_heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by {n_heads} heads")
        make = lambda: Linear.create(rng, d_model, d_model)
        return cls(wq=make(), wk=make(), wv=make(), wo=make(), n_heads=n_heads, d_model=d_model)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(lin.params(f"{prefix}.{name}"))
        return out


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (..., n, d) -> (..., heads, n, d_head)
    *batch, n, d = x.shape
    x = x.reshape((*batch, n, n_heads, d // n_heads))
    return x.swapaxes(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *batch, heads, n, dh = x.shape
    return x.swapaxes(-3, -2).reshape((*batch, n, heads * dh))


def scaled_dot_attention(layer: AttentionLayer, tokens: Tensor, mask: np.ndarray) -> Tensor:
    """Attention over a token matrix (..., n, d_model) under a permission mask.

    ``mask[i, j]`` True means row i may attend column j. Per-head weights use
    the 1/sqrt(d_model/heads) scaling; rows are convex combinations of the
    allowed value rows only.
    """
    if tokens.shape[-1] != layer.d_model:
        raise ShapeError(
            f"tokens have width {tokens.shape[-1]}, layer expects {layer.d_model}"
        )
    n = tokens.shape[-2]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise ShapeError(f"mask shape {mask.shape} does not match {n} tokens")
    q = _split_heads(layer.wq(tokens), layer.n_heads)
    k = _split_heads(layer.wk(tokens), layer.n_heads)
    v = _split_heads(layer.wv(tokens), layer.n_heads)
    scale = 1.0 / np.sqrt(layer.d_model // layer.n_heads)
    scores = ad.matmul(q, k.swapaxes(-1, -2)) * scale
    weights = ad.masked_softmax(scores, mask)
    mixed = _merge_heads(ad.matmul(weights, v))
    return layer.wo(mixed)


@dataclass
class TransformerBlock:
    """Pre-norm residual block: attention then feed-forward."""

    attn: AttentionLayer
    norm1: LayerNorm
    norm2: LayerNorm
    ff: Mlp

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        d_model: int,
        n_heads: int,
        ff_width: int,
        activation: str = "relu",
    ) -> "TransformerBlock":
        return cls(
            attn=AttentionLayer.create(rng, d_model, n_heads),
            norm1=LayerNorm.create(d_model),
            norm2=LayerNorm.create(d_model),
            ff=Mlp.create(rng, [d_model, ff_width, d_model], activation),
        )

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = x + scaled_dot_attention(self.attn, self.norm1(x), mask)
        return h + mlp_forward(self.ff, self.norm2(h))

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.params(f"{prefix}.attn")
        out.update(self.norm1.params(f"{prefix}.norm1"))
        out.update(self.norm2.params(f"{prefix}.norm2"))
        out.update(self.ff.params(f"{prefix}.ff"))
        return out
