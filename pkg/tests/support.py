"""Shared helpers for the test suite: desk-scale training with on-disk caching.

Training is deterministic given the seed, so a cached checkpoint is identical
to a fresh run; delete .cache/ (or set TNP_ACCEPTANCE_CACHE=0) to retrain
from scratch. Usable as a script to pre-train models:

    python3 tests/support.py tnp_d cnp
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from tnp.cnp import CnpConfig, create_cnp
from tnp.model import ModelConfig, create_model
from tnp.rng import rng_stream
from tnp.runio import load_model, save_model
from tnp.tasks import TaskBatch, sample_gp_batch, sample_wheel_batch
from tnp.training import TrainConfig, train_run

CACHE_DIR = Path(__file__).resolve().parent.parent / ".cache" / "acceptance"

DESK = dict(d_model=32, n_layers=4, n_heads=2, ff_width=64, n_embed_layers=4)
DESK_STEPS = 20000
WHEEL_STEPS = 4000
EVAL_SEED = 90210


def desk_model_config(variant: str, **overrides) -> ModelConfig:
    return ModelConfig(variant=variant, **{**DESK, **overrides})


def gp_source(family: str, B: int = 16):
    def source(rng):
        return sample_gp_batch(rng, family=family, B=B)

    return source


def wheel_source(B: int = 8, N: int = 96, m_rule=(48, 88)):
    def source(rng):
        return sample_wheel_batch(rng, B=B, N=N, m_rule=m_rule)[0]

    return source


MODEL_SPECS = {
    "cnp": dict(kind="cnp", seed=11, steps=DESK_STEPS),
    "tnp_d": dict(kind="tnp", variant="D", seed=12, steps=DESK_STEPS),
    "tnp_nd": dict(kind="tnp", variant="ND", seed=13, steps=DESK_STEPS),
    "tnp_a": dict(kind="tnp", variant="A", seed=14, steps=DESK_STEPS),
    "tnp_a_pretrain": dict(kind="tnp", variant="A", seed=15, steps=DESK_STEPS, objective="pretrain"),
    "wheel_d": dict(
        kind="tnp",
        variant="D",
        seed=16,
        steps=WHEEL_STEPS,
        task="wheel",
        reward_drop_rate=0.5,
        d_x=2,
        d_y=5,
        n_embed_layers=3,
        batch_size=8,
    ),
}


def _spec_hash(name: str) -> str:
    text = json.dumps({**MODEL_SPECS[name], "desk": DESK}, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _build_model(name: str):
    spec = MODEL_SPECS[name]
    if spec["kind"] == "cnp":
        return create_cnp(CnpConfig(), seed=spec["seed"])
    overrides = {
        k: spec[k] for k in ("d_x", "d_y", "n_embed_layers") if k in spec
    }
    return create_model(desk_model_config(spec["variant"], **overrides), seed=spec["seed"])


def train_model(name: str, verbose: bool = True):
    spec = MODEL_SPECS[name]
    model = _build_model(name)
    config = TrainConfig(
        steps=spec["steps"],
        batch_size=spec.get("batch_size", 16),
        seed=spec["seed"],
        objective=spec.get("objective", "meta"),
        reward_drop_rate=spec.get("reward_drop_rate", 0.0),
        log_interval=500,
    )
    source = wheel_source() if spec.get("task") == "wheel" else gp_source("rbf", config.batch_size)
    t0 = time.time()

    def on_metrics(record):
        if verbose:
            print(
                f"[{name}] step {record['step']} loss {record['loss']:.4f} "
                f"({time.time() - t0:.0f}s)",
                flush=True,
            )

    model, _ = train_run(model, config, source, on_metrics=on_metrics)
    return model


def trained_model(name: str):
    """Load the cached checkpoint for a spec, training it first if needed."""
    use_cache = os.environ.get("TNP_ACCEPTANCE_CACHE", "1") != "0"
    path = CACHE_DIR / f"{name}-{_spec_hash(name)}.tnpc"
    if use_cache and path.exists():
        return load_model(path)
    model = train_model(name)
    if use_cache:
        CACHE_DIR.mkdir(parents=True, exist_ok=True)
        save_model(model, path)
    return model


def eval_suite(family: str, n_tasks: int = 3000, seed: int = EVAL_SEED, batch: int = 16) -> list[TaskBatch]:
    """Held-out evaluation tasks, grouped into rectangular batches."""
    out, produced, i = [], 0, 0
    while produced < n_tasks:
        rng = rng_stream(seed, 77, i)
        b = min(batch, n_tasks - produced)
        out.append(sample_gp_batch(rng, family=family, B=b))
        produced += b
        i += 1
    return out


def main(argv: list[str]) -> int:
    names = argv or list(MODEL_SPECS)
    for name in names:
        if name not in MODEL_SPECS:
            print(f"unknown model {name}; known: {list(MODEL_SPECS)}")
            return 1
        t0 = time.time()
        trained_model(name)
        print(f"[{name}] ready in {time.time() - t0:.0f}s", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
