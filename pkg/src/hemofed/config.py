"""Run configuration: a JSON document with documented defaults.

Layout (every key optional; unknown keys are rejected)::

    {
      "model":      {"input_hw": 8, "slices_S": 4, "growth_rate_k": 8,
                     "block_layout": [2, 2], "gru_hidden": 16},
      "data":       {"n": 400, "seed": 0, "eval_fraction": 0.2, "dir": null},
      "partition":  {"num_clients": 8, "alpha": 1.0, "seed": 0},
      "federation": {"rounds": 30, "fraction": 1.0, "lr": 2.0, "local_epochs": 1,
                     "batch_size": 32, "availability": 1.0, "masking": false,
                     "mask_dropout": 0.0, "workers": 1, "record_timing": false,
                     "seed": 0,
                     "dp": {"enabled": false, "clip_norm": null, "sigma": 0.0, "seed": 0}},
      "output_dir": "hemofed-out"
    }

``data.dir`` points at a directory written by ``gen-data``; when null the
dataset is regenerated in memory from ``(n, seed)``, which yields the same
samples. The last ``round(n * eval_fraction)`` samples form the held-out split.
``dp.clip_norm = null`` means no clipping.

Command-line overrides use dotted paths, e.g. ``--set federation.lr=0.5``;
the value is parsed as JSON when possible and taken as a string otherwise.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .data import PartitionSpec
from .errors import ContractError
from .fed import DPConfig, SimConfig
from .model import ModelConfig

DEFAULTS: dict[str, Any] = {
    "model": {"input_hw": 8, "slices_S": 4, "growth_rate_k": 8, "block_layout": [2, 2],
              "gru_hidden": 16},
    "data": {"n": 400, "seed": 0, "eval_fraction": 0.2, "dir": None},
    "partition": {"num_clients": 8, "alpha": 1.0, "seed": 0},
    "federation": {
        "rounds": 30, "fraction": 1.0, "lr": 2.0, "local_epochs": 1, "batch_size": 32,
        "availability": 1.0, "masking": False, "mask_dropout": 0.0, "workers": 1,
        "record_timing": False, "seed": 0,
        "dp": {"enabled": False, "clip_norm": None, "sigma": 0.0, "seed": 0},
    },
    "output_dir": "hemofed-out",
}

# keys whose value may be null in addition to the default's type
_NULLABLE = {"data.dir", "federation.dp.clip_norm"}
_NULLABLE_TYPES = {"data.dir": str, "federation.dp.clip_norm": float}


class ConfigError(ContractError):
    """Invalid run configuration (unknown key, wrong type, out-of-range value)."""


def _check_value(path: str, default: Any, value: Any) -> Any:
    if value is None:
        if path in _NULLABLE:
            return None
        raise ConfigError(f"config key {path!r} may not be null")
    expected = _NULLABLE_TYPES.get(path, type(default))
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif expected is list:
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigError(f"config key {path!r} expects {expected.__name__}, got {value!r}")
    return value


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    if not isinstance(update, dict):
        raise ConfigError(f"config section {prefix.rstrip('.') or '<root>'!r} must be an object")
    for key, value in update.items():
        path = prefix + key
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            _merge(base[key], value, path + ".")
        else:
            base[key] = _check_value(path, base[key], value)


def apply_override(tree: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested: Any = value
    for key in reversed(path.strip().split(".")):
        nested = {key: nested}
    _merge(tree, nested)


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    model: ModelConfig
    sim: SimConfig
    partition: PartitionSpec
    n: int
    data_seed: int
    n_eval: int
    data_dir: Path | None
    output_dir: Path

    @property
    def n_train(self) -> int:
        return self.n - self.n_eval

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


def resolve(tree: dict) -> RunConfig:
    """Validate a fully merged config tree and build the typed objects."""
    m, d, p, f = tree["model"], tree["data"], tree["partition"], tree["federation"]
    model = ModelConfig(input_hw=m["input_hw"], slices_S=m["slices_S"],
                        growth_rate_k=m["growth_rate_k"], block_layout=tuple(m["block_layout"]),
                        gru_hidden=m["gru_hidden"])
    if d["n"] < 2:
        raise ConfigError("data.n must be >= 2")
    if not 0.0 < d["eval_fraction"] < 1.0:
        raise ConfigError("data.eval_fraction must lie in (0, 1)")
    n_eval = int(round(d["n"] * d["eval_fraction"]))
    if not 1 <= n_eval < d["n"]:
        raise ConfigError(f"data.eval_fraction gives {n_eval} held-out samples out of {d['n']}")
    for key in ("rounds", "local_epochs", "batch_size", "workers"):
        if f[key] < 1:
            raise ConfigError(f"federation.{key} must be >= 1")
    if not 0.0 < f["fraction"] <= 1.0:
        raise ConfigError("federation.fraction must lie in (0, 1]")
    if not 0.0 <= f["availability"] <= 1.0 or not 0.0 <= f["mask_dropout"] <= 1.0:
        raise ConfigError("federation.availability and mask_dropout must lie in [0, 1]")
    if not (f["lr"] >= 0 and math.isfinite(f["lr"])):
        raise ConfigError("federation.lr must be finite and >= 0")
    dp_raw = f["dp"]
    dp = None
    if dp_raw["enabled"]:
        clip = math.inf if dp_raw["clip_norm"] is None else dp_raw["clip_norm"]
        dp = DPConfig(clip_norm=clip, sigma=dp_raw["sigma"], seed=dp_raw["seed"])
    sim = SimConfig(model=model, rounds=f["rounds"], lr=f["lr"], fraction=f["fraction"],
                    local_epochs=f["local_epochs"], batch_size=f["batch_size"],
                    availability=f["availability"], dp=dp, masking=f["masking"],
                    mask_dropout=f["mask_dropout"], seed=f["seed"], workers=f["workers"],
                    record_timing=f["record_timing"])
    spec = PartitionSpec(p["num_clients"], p["alpha"], p["seed"])
    return RunConfig(raw=tree, model=model, sim=sim, partition=spec, n=d["n"], data_seed=d["seed"],
                     n_eval=n_eval, data_dir=Path(d["dir"]) if d["dir"] else None,
                     output_dir=Path(tree["output_dir"]))


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    """Defaults, then the JSON file (if any), then dotted overrides, then validation."""
    tree = copy.deepcopy(DEFAULTS)
    if path is not None:
        text = Path(path).read_text()
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        _merge(tree, user)
    for assignment in overrides:
        apply_override(tree, assignment)
    return resolve(tree)
