"""Versioned JSON checkpoints with bit-exact parameter round trips.

Floating point values are stored as C99 hexadecimal float strings
(``float.hex()``), which reproduce the exact bits on load; decimal text
round-tripping is where reproducibility quietly dies. Loading validates
field by field and names the first malformed one, and a format version
mismatch is refused rather than reinterpreted.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1

_REQUIRED_FIELDS = (
    "format_version",
    "config",
    "iteration",
    "params_hex",
    "z_ema_hex",
    "adam",
    "data_stats",
    "rng",
)


def _encode_floats(arr) -> list[str]:
    return [float(v).hex() for v in np.asarray(arr, dtype=np.float64).ravel()]


def _decode_floats(values, field: str) -> np.ndarray:
    if not isinstance(values, list):
        raise CheckpointError(f"{field}: expected a list of hex floats")
    out = np.empty(len(values))
    for i, s in enumerate(values):
        try:
            out[i] = float.fromhex(s)
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"{field}[{i}]: not a hex float: {s!r}") from exc
    return out


def make_state(config: dict, iteration: int, params, z_ema, adam_state=None, data_stats=None) -> dict:
    state = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "iteration": int(iteration),
        "params_hex": _encode_floats(params),
        "z_ema_hex": None if z_ema is None else _encode_floats(np.atleast_1d(z_ema)),
        "adam": None,
        "data_stats": None,
        "rng": {"seed": int(config.get("seed", 0)), "iteration": int(iteration)},
    }
    if adam_state is not None:
        state["adam"] = {
            "step": int(adam_state.step),
            "m_hex": _encode_floats(adam_state.m),
            "v_hex": _encode_floats(adam_state.v),
        }
    if data_stats is not None:
        state["data_stats"] = {
            "mean_hex": _encode_floats(data_stats["mean"]),
            "std_hex": _encode_floats(data_stats["std"]),
        }
    return state


def checkpoint_save(state: dict, path: str):
    """Write a checkpoint atomically enough for our purposes: serialize
    fully, then write in one call."""
    payload = json.dumps(state, sort_keys=True, separators=(",", ":"))
    with open(path, "w") as fh:
        fh.write(payload)


def checkpoint_load(path: str) -> dict:
    """Load and validate a checkpoint; errors name the first bad field."""
    try:
        with open(path) as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        state = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if not isinstance(state, dict):
        raise CheckpointError("checkpoint root: expected an object")
    for field in _REQUIRED_FIELDS:
        if field not in state:
            raise CheckpointError(f"{field}: missing")
    version = state["format_version"]
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"format_version: unsupported value {version!r} (this build reads {FORMAT_VERSION})"
        )
    if not isinstance(state["config"], dict):
        raise CheckpointError("config: expected an object")
    if not isinstance(state["iteration"], int):
        raise CheckpointError("iteration: expected an integer")
    params = _decode_floats(state["params_hex"], "params_hex")
    z_ema = None
    if state["z_ema_hex"] is not None:
        z_ema = _decode_floats(state["z_ema_hex"], "z_ema_hex")
    adam = state["adam"]
    adam_decoded = None
    if adam is not None:
        if not isinstance(adam, dict) or "step" not in adam:
            raise CheckpointError("adam: expected an object with step/m_hex/v_hex")
        adam_decoded = {
            "step": adam["step"],
            "m": _decode_floats(adam.get("m_hex", []), "adam.m_hex"),
            "v": _decode_floats(adam.get("v_hex", []), "adam.v_hex"),
        }
        if adam_decoded["m"].shape != params.shape or adam_decoded["v"].shape != params.shape:
            raise CheckpointError("adam.m_hex: moment length does not match params_hex")
    stats = state["data_stats"]
    stats_decoded = None
    if stats is not None:
        if not isinstance(stats, dict):
            raise CheckpointError("data_stats: expected an object")
        stats_decoded = {
            "mean": _decode_floats(stats.get("mean_hex", []), "data_stats.mean_hex"),
            "std": _decode_floats(stats.get("std_hex", []), "data_stats.std_hex"),
        }
    rng = state["rng"]
    if not isinstance(rng, dict) or not isinstance(rng.get("seed"), int):
        raise CheckpointError("rng.seed: expected an integer")
    return {
        "format_version": version,
        "config": state["config"],
        "iteration": state["iteration"],
        "params": params,
        "z_ema": z_ema,
        "adam": adam_decoded,
        "data_stats": stats_decoded,
        "rng": rng,
    }
