"""Command-line entry points.

Subcommands: train, eval, bandit, bo, gradcheck, props. Every run resolves a
flat key=value config (file plus --set overrides), writes a manifest before
doing work, and emits JSONL metrics next to its artifacts.

Exit codes: 0 success, 1 configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import decision as dec
from . import metrics as met
from . import runio
from . import tasks
from . import training as tr
from .cnp import CnpConfig, create_cnp
from .errors import ConfigError, NumericError, ShapeError
from .model import ModelConfig, create_model
from .rng import rng_stream

GRADCHECK_TOLERANCE = 1e-4


def _get(cfg: dict, key: str, default, cast):
    if key not in cfg:
        return default
    try:
        return cast(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {cfg[key]!r}") from exc


def _build_model_config(cfg: dict):
    kind = cfg.get("kind", "tnp")
    if kind == "cnp":
        cls = CnpConfig
    elif kind == "tnp":
        cls = ModelConfig
    else:
        raise ConfigError(f"kind must be tnp|cnp, got {kind!r}")
    kwargs = {}
    valid = {f.name: f.type for f in dataclass_fields(cls)}
    for key, value in cfg.items():
        if not key.startswith("model."):
            continue
        name = key.split(".", 1)[1]
        if name not in valid:
            raise ConfigError(f"unknown model option {key!r}")
        kwargs[name] = runio._coerce(value)
    return cls(**kwargs)


def _build_train_config(cfg: dict, seed: int) -> tr.TrainConfig:
    return tr.TrainConfig(
        steps=_get(cfg, "train.steps", 2000, int),
        batch_size=_get(cfg, "train.batch_size", 16, int),
        lr_max=_get(cfg, "train.lr_max", 5e-4, float),
        lr_min=_get(cfg, "train.lr_min", 0.0, float),
        clip_norm=_get(cfg, "train.clip_norm", 10.0, float),
        objective=_get(cfg, "train.objective", "meta", str),
        reward_drop_rate=_get(cfg, "train.reward_drop_rate", 0.0, float),
        checkpoint_interval=_get(cfg, "train.checkpoint_interval", 0, int),
        log_interval=_get(cfg, "train.log_interval", 200, int),
        seed=seed,
    )


def _build_task_source(cfg: dict, batch_size: int):
    kind = cfg.get("task.kind", "gp")
    if kind == "gp":
        family = cfg.get("task.family", "rbf")
        d_x = _get(cfg, "task.d_x", 1, int)
        n_range = (_get(cfg, "task.n_lo", 6, int), _get(cfg, "task.n_hi", 50, int))
        m_rule = (_get(cfg, "task.m_lo", 3, int), _get(cfg, "task.m_hi", 47, int))

        def source(rng):
            return tasks.sample_gp_batch(
                rng, family=family, B=batch_size, N_range=n_range, m_rule=m_rule, d_x=d_x
            )

        return source
    if kind == "wheel":
        n = _get(cfg, "task.wheel_n", 96, int)
        m_rule = (_get(cfg, "task.wheel_m_lo", 48, int), _get(cfg, "task.wheel_m_hi", 88, int))

        def source(rng):
            return tasks.sample_wheel_batch(rng, B=batch_size, N=n, m_rule=m_rule)[0]

        return source
    raise ConfigError(f"task.kind must be gp|wheel, got {kind!r}")


def _resolve(args) -> tuple[dict, int, Path]:
    cfg = runio.load_config(args.config) if args.config else {}
    cfg = runio.apply_overrides(cfg, args.set or [])
    seed = args.seed if args.seed is not None else _get(cfg, "seed", 0, int)
    cfg["seed"] = str(seed)
    out_dir = Path(args.out_dir or cfg.get("out_dir", "runs/latest"))
    out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, seed, out_dir


def _eval_tasks(cfg: dict, seed: int, family: str, n_tasks: int) -> list[tasks.TaskBatch]:
    batch = 16
    d_x = _get(cfg, "task.d_x", 1, int)
    n_range = (_get(cfg, "task.n_lo", 6, int), _get(cfg, "task.n_hi", 50, int))
    m_rule = (_get(cfg, "task.m_lo", 3, int), _get(cfg, "task.m_hi", 47, int))
    out = []
    produced = 0
    i = 0
    while produced < n_tasks:
        rng = rng_stream(seed, 7, i)
        b = min(batch, n_tasks - produced)
        out.append(
            tasks.sample_gp_batch(rng, family=family, B=b, N_range=n_range, m_rule=m_rule, d_x=d_x)
        )
        produced += b
        i += 1
    return out


# -- subcommands -----------------------------------------------------------------


def _cmd_train(args) -> int:
    cfg, seed, out_dir = _resolve(args)
    manifest = runio.RunManifest.start("train", cfg, seed, str(out_dir))
    manifest_path = out_dir / "manifest.json"
    manifest.write(manifest_path)
    train_cfg = _build_train_config(cfg, seed)
    model_cfg = _build_model_config(cfg)
    if cfg.get("kind", "tnp") == "cnp":
        model = create_cnp(model_cfg, seed=seed)
    else:
        model = create_model(model_cfg, seed=seed)
    source = _build_task_source(cfg, train_cfg.batch_size)
    metrics_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "model.tnpc"
    with open(metrics_path, "w") as fh:

        def on_metrics(record):
            runio.write_metrics_record(
                fh, {"step": record["step"], "metric": "train_loss", "value": record["loss"], "seed": seed}
            )
            runio.write_metrics_record(
                fh, {"step": record["step"], "metric": "lr", "value": record["lr"], "seed": seed}
            )

        def on_checkpoint(step, mdl, state):
            runio.save_model(mdl, ckpt_path)

        model, history = tr.train_run(
            model, train_cfg, source, on_metrics=on_metrics, on_checkpoint=on_checkpoint
        )
    runio.save_model(model, ckpt_path)
    runio.metrics_to_csv(metrics_path, out_dir / "train_loss.csv", "train_loss")
    manifest.finish(manifest_path, [str(ckpt_path), str(metrics_path)])
    print(f"trained {cfg.get('kind', 'tnp')} model: final loss {history[-1]['loss']:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg, seed, out_dir = _resolve(args)
    manifest = runio.RunManifest.start("eval", cfg, seed, str(out_dir))
    manifest_path = out_dir / "manifest.json"
    manifest.write(manifest_path)
    model = runio.load_model(args.model)
    family = cfg.get("eval.family", cfg.get("task.family", "rbf"))
    n_tasks = _get(cfg, "eval.n_tasks", 256, int)
    mode = cfg.get("eval.mode", "auto")
    if mode == "auto":
        kind = getattr(getattr(model, "config", None), "variant", "CNP")
        mode = {"D": "diag", "A": "autoregressive", "ND": "joint", "CNP": "diag"}.get(kind, "diag")
    suite = _eval_tasks(cfg, seed, family, n_tasks)
    reports = [
        met.eval_log_likelihood(model, suite, mode=mode, seed=seed),
        met.eval_rmse(model, suite, seed=seed),
    ]
    if mode in ("diag", "autoregressive"):
        reports.append(met.eval_calibration_error(model, suite, seed=seed))
    metrics_path = out_dir / "metrics.jsonl"
    with open(metrics_path, "w") as fh:
        for report in reports:
            for i, value in enumerate(report.per_task):
                runio.write_metrics_record(
                    fh, {"task": i, "metric": report.metric, "value": float(value), "seed": seed}
                )
    summary = {r.metric: r.summary() for r in reports}
    (out_dir / "report.json").write_text(__import__("json").dumps(summary, indent=2) + "\n")
    manifest.finish(manifest_path, [str(metrics_path), str(out_dir / "report.json")])
    for r in reports:
        print(f"{r.metric}: {r.mean:.4f} +/- {r.std:.4f} over {r.n_tasks} tasks")
    return 0


def _cmd_bandit(args) -> int:
    cfg, seed, out_dir = _resolve(args)
    manifest = runio.RunManifest.start("bandit", cfg, seed, str(out_dir))
    manifest_path = out_dir / "manifest.json"
    manifest.write(manifest_path)
    delta = _get(cfg, "bandit.delta", 0.7, float)
    steps = _get(cfg, "bandit.steps", 500, int)
    episodes = _get(cfg, "bandit.episodes", 10, int)
    kappa = _get(cfg, "bandit.kappa", dec.DEFAULT_KAPPA, float)
    window = _get(cfg, "bandit.window", dec.BANDIT_CONTEXT_WINDOW, int)
    model = runio.load_model(args.model)
    predictor = dec.TnpArmPredictor(model, window=window)
    states, uniform_states = [], []
    metrics_path = out_dir / "metrics.jsonl"
    with open(metrics_path, "w") as fh:
        for ep in range(episodes):
            st = dec.run_bandit_episode(predictor, delta, steps, kappa, rng_stream(seed, 21, ep))
            us = dec.run_bandit_episode(None, delta, steps, kappa, rng_stream(seed, 21, ep), policy="uniform")
            states.append(st)
            uniform_states.append(us)
            cum = np.cumsum(st.instantaneous_regret)
            for t in range(steps):
                runio.write_metrics_record(
                    fh,
                    {"step": t, "metric": "cumulative_regret", "value": float(cum[t]), "seed": ep},
                )
    summary = dec.regret_metrics(states, uniform_states)
    (out_dir / "report.json").write_text(__import__("json").dumps(summary, indent=2) + "\n")
    runio.metrics_to_csv(metrics_path, out_dir / "regret.csv", "cumulative_regret")
    manifest.finish(manifest_path, [str(metrics_path), str(out_dir / "report.json")])
    print(
        f"bandit delta={delta}: normalized cumulative regret "
        f"{summary['cumulative_normalized']:.2f} (uniform=100)"
    )
    return 0


def _cmd_bo(args) -> int:
    cfg, seed, out_dir = _resolve(args)
    manifest = runio.RunManifest.start("bo", cfg, seed, str(out_dir))
    manifest_path = out_dir / "manifest.json"
    manifest.write(manifest_path)
    n_objectives = _get(cfg, "bo.objectives", 10, int)
    iters = _get(cfg, "bo.iters", 50, int)
    kappa = _get(cfg, "bo.kappa", dec.DEFAULT_KAPPA, float)
    init_count = _get(cfg, "bo.init", dec.BO_INIT_COUNT, int)
    family = cfg.get("bo.family", "rbf")
    model = runio.load_model(args.model)
    surrogate = dec.TnpSurrogate(model)
    metrics_path = out_dir / "metrics.jsonl"
    final_model, final_random = [], []
    with open(metrics_path, "w") as fh:
        for i in range(n_objectives):
            objective = dec.objective_from_gp_draw(rng_stream(seed, 31, i), family=family)
            st = dec.run_bo(objective, surrogate, iters, init_count, kappa, rng_stream(seed, 32, i))
            rs = dec.run_bo(objective, None, iters, init_count, kappa, rng_stream(seed, 32, i), select="random")
            final_model.append(st.simple_regret[-1])
            final_random.append(rs.simple_regret[-1])
            for t in range(iters):
                runio.write_metrics_record(
                    fh, {"step": t, "metric": "simple_regret", "value": float(st.simple_regret[t]), "seed": i}
                )
                runio.write_metrics_record(
                    fh,
                    {"step": t, "metric": "simple_regret_random", "value": float(rs.simple_regret[t]), "seed": i},
                )
    summary = {
        "mean_simple_regret": float(np.mean(final_model)),
        "mean_simple_regret_random": float(np.mean(final_random)),
        "objectives": n_objectives,
        "iterations": iters,
    }
    (out_dir / "report.json").write_text(__import__("json").dumps(summary, indent=2) + "\n")
    runio.metrics_to_csv(metrics_path, out_dir / "bo_regret.csv", "simple_regret")
    manifest.finish(manifest_path, [str(metrics_path), str(out_dir / "report.json")])
    print(
        f"bo: mean simple regret {summary['mean_simple_regret']:.4f} "
        f"vs random {summary['mean_simple_regret_random']:.4f}"
    )
    return 0


def _miniature_models(seed: int):
    common = dict(d_model=8, n_layers=2, n_heads=2, ff_width=16, n_embed_layers=2)
    return {
        "D": create_model(ModelConfig(variant="D", **common), seed=seed),
        "A": create_model(ModelConfig(variant="A", **common), seed=seed + 1),
        "ND": create_model(
            ModelConfig(
                variant="ND",
                nd_extra_attention_layers=1,
                nd_projection_dim=4,
                nd_projection_layers=2,
                **common,
            ),
            seed=seed + 2,
        ),
    }


def _cmd_gradcheck(args) -> int:
    from . import autodiff as ad

    cfg, seed, out_dir = _resolve(args)
    batch = tasks.sample_gp_batch(rng_stream(seed, 41), B=1, N_range=(8, 9), m_rule=(3, 4))
    worst = 0.0
    for name, model in _miniature_models(seed).items():

        def objective(_params, model=model):
            return tr.training_loss(model, batch)

        err = ad.finite_difference_check(objective, model.parameters(), h=1e-5)
        worst = max(worst, err)
        print(f"gradcheck {name}: max relative error {err:.3e}")
    print(f"gradcheck worst: {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    return 0 if worst < GRADCHECK_TOLERANCE else 2


def _cmd_props(args) -> int:
    cfg, seed, out_dir = _resolve(args)
    batch = tasks.sample_gp_batch(rng_stream(seed, 42), B=2, N_range=(9, 10), m_rule=(3, 5))
    ok_all = True
    for name, model in _miniature_models(seed).items():
        ok_ctx, dev_ctx = met.check_context_invariance(model, batch, n_perms=4, seed=seed)
        if name == "A":
            small = tasks.sample_gp_batch(rng_stream(seed, 43), B=1, N_range=(7, 8), m_rule=(3, 4))
            ok_eq, dev_eq = met.check_target_equivariance(model, small, tol=1e-9, seed=seed)
        else:
            tol = 1e-8 if name == "ND" else 1e-9
            ok_eq, dev_eq = met.check_target_equivariance(model, batch, tol=tol, seed=seed)
        ok_mask, dev_mask, violations = met.check_mask_dependency(
            model, batch, n_probes=40, seed=seed
        )
        ok = ok_ctx and ok_eq and ok_mask
        ok_all = ok_all and ok
        print(
            f"props {name}: context {dev_ctx:.2e} equivariance {dev_eq:.2e} "
            f"mask {dev_mask:.2e} ({violations} violations) -> {'ok' if ok else 'FAIL'}"
        )
    return 0 if ok_all else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tnp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, needs_model in (
        ("train", _cmd_train, False),
        ("eval", _cmd_eval, True),
        ("bandit", _cmd_bandit, True),
        ("bo", _cmd_bo, True),
        ("gradcheck", _cmd_gradcheck, False),
        ("props", _cmd_props, False),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=None)
        if needs_model:
            p.add_argument("--model", required=True, help="model checkpoint path")
        p.set_defaults(fn=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, ShapeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
