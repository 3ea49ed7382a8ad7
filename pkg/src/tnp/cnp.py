"""Conditional neural process baseline: mean-pooled deterministic encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .model import DiagonalPrediction, LOG_SIGMA_MAX, LOG_SIGMA_MIN
from .nn import Mlp, mlp_forward
from .tasks import TaskBatch


@dataclass
class CnpConfig:
    d_x: int = 1
    d_y: int = 1
    width: int = 64
    n_layers: int = 4
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.width <= 0 or self.n_layers < 2:
            raise ConfigError(f"bad CNP dims: width={self.width}, n_layers={self.n_layers}")


class CnpModel:
    """Per-pair encoder MLP, mean pooling, and a per-target decoder MLP."""

    def __init__(self, config: CnpConfig, rng: np.random.Generator) -> None:
        self.config = config
        c = config
        enc_widths = [c.d_x + c.d_y] + [c.width] * c.n_layers
        dec_widths = [c.d_x + c.width] + [c.width] * (c.n_layers - 1) + [2 * c.d_y]
        self.encoder = Mlp.create(rng, enc_widths, c.activation)
        self.decoder = Mlp.create(rng, dec_widths, c.activation)

    def parameters(self) -> dict[str, Tensor]:
        out = self.encoder.params("encoder")
        out.update(self.decoder.params("decoder"))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(params) != set(arrays):
            raise ConfigError("parameter name mismatch on load")
        for name, tensor in params.items():
            tensor.data = np.array(arrays[name], dtype=tensor.data.dtype, copy=True)


def create_cnp(config: CnpConfig, seed: int = 0) -> CnpModel:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return CnpModel(config, rng)


def cnp_predict(model: CnpModel, batch: TaskBatch) -> DiagonalPrediction:
    """Independent Gaussians per target from the pooled context representation."""
    if batch.m < 1:
        raise ConfigError("CNP needs at least one context point")
    pairs = np.concatenate([batch.x[:, : batch.m], batch.y[:, : batch.m]], axis=-1)
    encoded = mlp_forward(model.encoder, ad.as_tensor(pairs))
    pooled = encoded.mean(axis=1, keepdims=True)  # (B, 1, width)
    n_t = batch.N - batch.m
    tiled = pooled + ad.as_tensor(np.zeros((batch.B, n_t, 1)))
    dec_in = ad.concat([ad.as_tensor(batch.x[:, batch.m :]), tiled], axis=-1)
    raw = mlp_forward(model.decoder, dec_in)
    d_y = model.config.d_y
    mean = raw[..., :d_y]
    sigma = ad.exp(ad.clip(raw[..., d_y:], LOG_SIGMA_MIN, LOG_SIGMA_MAX))
    return DiagonalPrediction(mean=mean, sigma=sigma)
