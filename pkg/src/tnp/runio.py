"""Deterministic persistence: key=value configs, run manifests, binary model
checkpoints, and JSONL metrics with a CSV plot emitter.

Checkpoint format (little-endian throughout):

    magic   4 bytes  b"TNPC"
    version u32      format version (1)
    cfglen  u64      length of the UTF-8 config text (sorted key=value lines)
    cfg     bytes
    count   u64      number of array records, then per record:
        namelen u64, name bytes, rank u64, dims u64 * rank,
        values  float64 * prod(dims)
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .cnp import CnpConfig, CnpModel, create_cnp
from .errors import ConfigError
from .model import ModelConfig, TnpModel, create_model

MAGIC = b"TNPC"
FORMAT_VERSION = 1


# -- key=value configs ----------------------------------------------------------


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key in {raw!r}")
        out[key] = value.strip()
    return out


def load_config(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def apply_overrides(config: dict[str, str], overrides: list[str]) -> dict[str, str]:
    out = dict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_text(config: dict[str, str]) -> str:
    return "".join(f"{k}={config[k]}\n" for k in sorted(config))


def config_hash(config: dict[str, str]) -> str:
    return hashlib.sha256(config_text(config).encode()).hexdigest()


# -- run manifest -----------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: dict[str, str]
    seed: int
    out_dir: str
    config_sha256: str
    started_at: float
    finished_at: float | None = None
    artifacts: list[str] | None = None

    @classmethod
    def start(cls, command: str, config: dict[str, str], seed: int, out_dir: str) -> "RunManifest":
        return cls(
            command=command,
            config=dict(config),
            seed=seed,
            out_dir=str(out_dir),
            config_sha256=config_hash(config),
            started_at=time.time(),
            artifacts=[],
        )

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    def finish(self, path: str | Path, artifacts: list[str]) -> None:
        self.finished_at = time.time()
        self.artifacts = list(artifacts)
        self.write(path)


# -- binary checkpoints --------------------------------------------------------------


def _write_u64(fh, value: int) -> None:
    fh.write(struct.pack("<Q", value))


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ConfigError("truncated checkpoint file")
    return data


def _read_u64(fh) -> int:
    return struct.unpack("<Q", _read_exact(fh, 8))[0]


def serialize_arrays(arrays: dict[str, np.ndarray], config: dict[str, str], path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        blob = config_text(config).encode()
        _write_u64(fh, len(blob))
        fh.write(blob)
        _write_u64(fh, len(arrays))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            encoded = name.encode()
            _write_u64(fh, len(encoded))
            fh.write(encoded)
            _write_u64(fh, arr.ndim)
            for dim in arr.shape:
                _write_u64(fh, dim)
            fh.write(arr.tobytes())


def deserialize_arrays(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise ConfigError(f"bad checkpoint magic in {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        cfg_len = _read_u64(fh)
        config = parse_config_text(_read_exact(fh, cfg_len).decode())
        count = _read_u64(fh)
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = _read_u64(fh)
            name = _read_exact(fh, name_len).decode()
            rank = _read_u64(fh)
            dims = tuple(_read_u64(fh) for _ in range(rank))
            n_values = int(np.prod(dims)) if dims else 1
            raw = _read_exact(fh, 8 * n_values)
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        trailing = fh.read(1)
        if trailing:
            raise ConfigError("trailing bytes after checkpoint payload")
    return config, arrays


def _config_to_dict(model) -> dict[str, str]:
    if isinstance(model, CnpModel):
        kind = "cnp"
    elif isinstance(model, TnpModel):
        kind = "tnp"
    else:
        raise ConfigError(f"cannot serialize {type(model).__name__}")
    out = {"kind": kind}
    for key, value in asdict(model.config).items():
        out[f"model.{key}"] = str(value)
    return out


def save_model(model, path: str | Path) -> None:
    arrays = {name: tensor.data for name, tensor in model.parameters().items()}
    serialize_arrays(arrays, _config_to_dict(model), path)


_BOOLS = {"True": True, "False": False}


def _coerce(value: str):
    if value in _BOOLS:
        return _BOOLS[value]
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value


def model_config_from_dict(config: dict[str, str]):
    kind = config.get("kind")
    fields = {
        k.split(".", 1)[1]: _coerce(v) for k, v in config.items() if k.startswith("model.")
    }
    if kind == "cnp":
        valid = set(CnpConfig.__dataclass_fields__)
        return CnpConfig(**{k: v for k, v in fields.items() if k in valid})
    if kind == "tnp":
        valid = set(ModelConfig.__dataclass_fields__)
        return ModelConfig(**{k: v for k, v in fields.items() if k in valid})
    raise ConfigError(f"checkpoint kind must be tnp|cnp, got {kind!r}")


def load_model(path: str | Path):
    """Reconstruct a model with bit-identical parameters."""
    config, arrays = deserialize_arrays(path)
    model_config = model_config_from_dict(config)
    if config.get("kind") == "cnp":
        model = create_cnp(model_config, seed=0)
    else:
        model = create_model(model_config, seed=0)
    model.load_arrays(arrays)
    return model


# -- metrics records -------------------------------------------------------------------


def write_metrics_record(stream, record: dict) -> None:
    """Append one JSON object per line."""
    stream.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path: str | Path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def metrics_to_csv(
    jsonl_path: str | Path,
    csv_path: str | Path,
    metric: str,
    x_key: str = "step",
    value_key: str = "value",
) -> int:
    """Aggregate a JSONL metric into CSV rows ``x,mean,std`` (sorted by x)."""
    groups: dict[float, list[float]] = {}
    for record in read_metrics(jsonl_path):
        if record.get("metric") != metric:
            continue
        groups.setdefault(record[x_key], []).append(record[value_key])
    with open(csv_path, "w") as fh:
        fh.write("x,mean,std\n")
        for x in sorted(groups):
            vals = np.asarray(groups[x], dtype=float)
            std = vals.std(ddof=1) if vals.size > 1 else 0.0
            fh.write(f"{x},{vals.mean():.10g},{std:.10g}\n")
    return len(groups)
