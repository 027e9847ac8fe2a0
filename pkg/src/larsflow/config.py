"""Experiment configuration: JSON schema, validation, model construction.

Configs are plain JSON with four sections (model, data, train, eval) plus
a seed and an output directory. Validation is strict: unknown keys are
rejected and every error message names the offending field, because a
config typo silently falling back to a default is how experiments go
irreproducible.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .bases import (
    GaussianMixture,
    GroupedResampledBase,
    ResampledBase,
    StandardGaussian,
    make_acceptance_net,
    mixture_init,
)
from .errors import ConfigError
from .flows import AffineConstant, CouplingLayer, FlowModel, InvertibleLinear, alternating_mask, make_coupling_net
from .rng import STREAM_INIT, derive_stream
from .training import TrainConfig

BASE_KINDS = ("gaussian", "mixture", "resampled", "grouped")

_MODEL_DEFAULTS = {
    "base": "resampled",
    "truncation": 100,
    "z_update_samples": 512,
    "ema_decay": 0.05,
    "acceptance_hidden_layers": 2,
    "acceptance_hidden_units": 64,
    "acceptance_dropout": 0.0,
    "num_groups": 2,
    "mixture_components": 10,
    "coupling_layers": 8,
    "coupling_hidden_layers": 2,
    "coupling_hidden_units": 32,
    "coupling_dropout": 0.0,
    "activation": "tanh",
    "scale_cap": 5.0,
    "invertible_linear": False,
    "affine_constant": True,
}

_TRAIN_DEFAULTS = {
    "objective": "ml",
    "iterations": 5000,
    "batch_size": 256,
    "learning_rate": 1e-3,
    "lr_decay_iters": [],
    "lr_decay_factor": 1.0,
    "lambda_z": 0.0,
    "polyak_rate": 0.0,
    "eval_every": 0,
    "grad_clip_norm": 100.0,
}

_EVAL_DEFAULTS = {
    "grid_lo": [-5.0, -5.0],
    "grid_hi": [5.0, 5.0],
    "grid_points": 500,
    "histogram_bins": 100,
    "mc_z_samples": 10**7,
}

_DATA_KEYS = {"target", "csv_path", "has_header", "standardize", "split"}


def _merge_section(name: str, given: dict, defaults: dict) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{name}: must be an object")
    for key in given:
        if key not in defaults:
            raise ConfigError(f"{name}.{key}: unknown key")
    merged = dict(defaults)
    merged.update(given)
    return merged


def _require(cond: bool, field: str, message: str):
    if not cond:
        raise ConfigError(f"{field}: {message}")


def validate_config(raw: dict, base_dir: str = ".") -> dict:
    """Validate a raw config dict and fill defaults. Returns the resolved
    config; raises :class:`ConfigError` naming the first bad field."""
    if not isinstance(raw, dict):
        raise ConfigError("config: must be a JSON object")
    allowed_top = {"seed", "output_dir", "model", "data", "train", "eval"}
    for key in raw:
        if key not in allowed_top:
            raise ConfigError(f"{key}: unknown key")
    _require("output_dir" in raw, "output_dir", "required")
    _require("data" in raw, "data", "required")
    cfg = {
        "seed": raw.get("seed", 0),
        "output_dir": raw["output_dir"],
        "model": _merge_section("model", raw.get("model", {}), _MODEL_DEFAULTS),
        "data": dict(raw["data"]) if isinstance(raw["data"], dict) else raw["data"],
        "train": _merge_section("train", raw.get("train", {}), _TRAIN_DEFAULTS),
        "eval": _merge_section("eval", raw.get("eval", {}), _EVAL_DEFAULTS),
    }
    _require(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed", "must be a non-negative integer")
    _require(isinstance(cfg["output_dir"], str) and cfg["output_dir"], "output_dir", "must be a non-empty string")

    m = cfg["model"]
    _require(m["base"] in BASE_KINDS, "model.base", f"must be one of {BASE_KINDS}")
    for key in ("truncation", "z_update_samples", "acceptance_hidden_layers",
                "acceptance_hidden_units", "mixture_components", "coupling_layers",
                "coupling_hidden_layers", "coupling_hidden_units", "num_groups"):
        _require(isinstance(m[key], int) and m[key] >= 0, f"model.{key}", "must be a non-negative integer")
    _require(m["truncation"] >= 1, "model.truncation", "must be >= 1")
    _require(m["z_update_samples"] >= 1, "model.z_update_samples", "must be >= 1")
    _require(0.0 < float(m["ema_decay"]) <= 1.0, "model.ema_decay", "must lie in (0, 1]")
    for key in ("acceptance_dropout", "coupling_dropout"):
        _require(0.0 <= float(m[key]) < 1.0, f"model.{key}", "must lie in [0, 1)")
    _require(m["activation"] in ("tanh", "relu"), "model.activation", "must be tanh or relu")
    _require(float(m["scale_cap"]) > 0, "model.scale_cap", "must be positive")
    if m["base"] == "grouped":
        _require(m["num_groups"] >= 1, "model.num_groups", "must be >= 1")
    if m["base"] == "mixture":
        _require(m["mixture_components"] >= 1, "model.mixture_components", "must be >= 1")

    data = cfg["data"]
    _require(isinstance(data, dict), "data", "must be an object")
    for key in data:
        _require(key in _DATA_KEYS, f"data.{key}", "unknown key")
    has_target = "target" in data
    has_csv = "csv_path" in data
    _require(has_target != has_csv, "data", "exactly one of target or csv_path is required")
    if has_target:
        from .targets import TARGET_KINDS

        _require(data["target"] in TARGET_KINDS, "data.target", f"must be one of {TARGET_KINDS}")
        for key in ("has_header", "standardize", "split"):
            _require(key not in data, f"data.{key}", "only valid with csv_path")
    else:
        path = data["csv_path"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        _require(os.path.exists(path), "data.csv_path", f"file not found: {path}")
        data["csv_path"] = path
        data.setdefault("has_header", False)
        data.setdefault("standardize", True)
        data.setdefault("split", [0.8, 0.1, 0.1])
        split = data["split"]
        _require(
            isinstance(split, (list, tuple)) and len(split) == 3
            and all(isinstance(f, (int, float)) and f >= 0 for f in split)
            and abs(sum(split) - 1.0) < 1e-9,
            "data.split",
            "must be three non-negative fractions summing to 1",
        )

    t = cfg["train"]
    _require(t["objective"] in ("ml", "kl"), "train.objective", "must be ml or kl")
    _require(isinstance(t["iterations"], int) and t["iterations"] >= 0, "train.iterations", "must be >= 0")
    _require(isinstance(t["batch_size"], int) and t["batch_size"] >= 1, "train.batch_size", "must be >= 1")
    _require(float(t["learning_rate"]) > 0, "train.learning_rate", "must be positive")
    _require(float(t["lambda_z"]) >= 0, "train.lambda_z", "must be >= 0")
    if float(t["lambda_z"]) > 0:
        _require(m["base"] in ("resampled", "grouped"), "train.lambda_z",
                 "requires a resampled or grouped base")
    _require(0.0 <= float(t["polyak_rate"]) < 1.0, "train.polyak_rate", "must lie in [0, 1)")
    decay = t["lr_decay_iters"]
    _require(
        isinstance(decay, (list, tuple)) and all(isinstance(b, int) and b >= 0 for b in decay)
        and list(decay) == sorted(decay),
        "train.lr_decay_iters",
        "must be sorted non-negative integers",
    )
    _require(float(t["lr_decay_factor"]) > 0, "train.lr_decay_factor", "must be positive")
    _require(isinstance(t["eval_every"], int) and t["eval_every"] >= 0, "train.eval_every", "must be >= 0")
    _require(float(t["grad_clip_norm"]) >= 0, "train.grad_clip_norm", "must be >= 0")
    if t["objective"] == "kl":
        _require(has_target, "train.objective", "kl training requires a 2D target data source")

    e = cfg["eval"]
    for key in ("grid_lo", "grid_hi"):
        v = e[key]
        _require(isinstance(v, (list, tuple)) and len(v) == 2, f"eval.{key}", "must be a pair")
    _require(isinstance(e["grid_points"], int) and e["grid_points"] >= 2, "eval.grid_points", "must be >= 2")
    _require(isinstance(e["histogram_bins"], int) and e["histogram_bins"] >= 10, "eval.histogram_bins", "must be >= 10")
    _require(isinstance(e["mc_z_samples"], int) and e["mc_z_samples"] >= 1, "eval.mc_z_samples", "must be >= 1")
    return cfg


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON in {path}: {exc}") from exc
    return validate_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def build_model(cfg: dict, d: int) -> FlowModel:
    """Construct the flow model for a validated config.

    Initialization order is fixed (base first, then layers base-to-data)
    so a given (config, seed) pair always produces the same parameters.
    """
    m = cfg["model"]
    seed = cfg["seed"]
    rng = derive_stream(seed, STREAM_INIT, 0)
    kind = m["base"]
    if kind == "gaussian":
        base = StandardGaussian(d)
    elif kind == "mixture":
        base = mixture_init(m["mixture_components"], d, rng)
    elif kind == "resampled":
        acceptance = make_acceptance_net(
            d, m["acceptance_hidden_layers"], m["acceptance_hidden_units"], rng,
            activation=m["activation"], dropout_rate=m["acceptance_dropout"],
        )
        base = ResampledBase(d, acceptance, T=m["truncation"], ema_decay=m["ema_decay"],
                             mc_samples=m["z_update_samples"])
    else:
        groups = m["num_groups"]
        if d % groups != 0:
            raise ConfigError(f"model.num_groups: {groups} does not divide dimension {d}")
        group_dim = d // groups
        acceptance = make_acceptance_net(
            group_dim, m["acceptance_hidden_layers"], m["acceptance_hidden_units"], rng,
            outputs=groups, activation=m["activation"], dropout_rate=m["acceptance_dropout"],
        )
        base = GroupedResampledBase(groups, group_dim, acceptance, T=m["truncation"],
                                    ema_decay=m["ema_decay"], mc_samples=m["z_update_samples"])

    layers = []
    if m["affine_constant"]:
        layers.append(AffineConstant(d))
    n_coupling = m["coupling_layers"]
    for i in range(n_coupling):
        mask = alternating_mask(d, flip=bool(i % 2))
        n_keep = int(mask.sum())
        n_change = d - n_keep
        s_net = make_coupling_net(n_keep, n_change, m["coupling_hidden_layers"],
                                  m["coupling_hidden_units"], rng,
                                  activation=m["activation"], dropout_rate=m["coupling_dropout"])
        t_net = make_coupling_net(n_keep, n_change, m["coupling_hidden_layers"],
                                  m["coupling_hidden_units"], rng,
                                  activation=m["activation"], dropout_rate=m["coupling_dropout"])
        layers.append(CouplingLayer(mask, s_net, t_net, scale_cap=float(m["scale_cap"])))
        if m["invertible_linear"] and i % 2 == 1 and i != n_coupling - 1:
            layers.append(InvertibleLinear(d))
    return FlowModel(base, layers)


def train_config_from(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        objective=t["objective"],
        iterations=t["iterations"],
        batch_size=t["batch_size"],
        learning_rate=float(t["learning_rate"]),
        lr_decay_iters=tuple(t["lr_decay_iters"]),
        lr_decay_factor=float(t["lr_decay_factor"]),
        lambda_z=float(t["lambda_z"]),
        z_update_samples=cfg["model"]["z_update_samples"],
        truncation=cfg["model"]["truncation"],
        polyak_rate=float(t["polyak_rate"]),
        seed=cfg["seed"],
        eval_every=t["eval_every"],
        grad_clip_norm=float(t["grad_clip_norm"]),
    )


def eval_grid_from(cfg: dict):
    e = cfg["eval"]
    from .rng import Grid2D

    return Grid2D(tuple(float(v) for v in e["grid_lo"]), tuple(float(v) for v in e["grid_hi"]), e["grid_points"])
