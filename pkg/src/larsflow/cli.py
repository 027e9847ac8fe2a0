"""Experiment command line: train, evaluate, sample, export, sweep.

Exit codes: 0 success, 2 invalid config/checkpoint/data (message names the
field), 1 runtime failure (a diverged training run still checkpoints its
last finite state before exiting).

Every command writes its artifacts under one output directory and drops a
``manifest.json`` there listing each written file with its SHA-256.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import checkpoint as ckpt_mod
from .config import build_model, eval_grid_from, load_config, train_config_from, validate_config
from .data import apply_standardization, load_csv_dataset
from .errors import CheckpointError, ConfigError, DataError, LarsFlowError, TrainingDiverged
from .evaluation import (
    dataset_ll,
    export_density_grid,
    quadrature_kld,
    refresh_normalizer,
    refreshed_normalizer,
)
from .rng import STREAM_EVAL, derive_stream
from .targets import Target2D
from .training import AdamState, train_kl, train_ml


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir: str, files: list[str]) -> str:
    entries = []
    for path in sorted(set(files)):
        rel = os.path.relpath(path, out_dir)
        entries.append({"path": rel, "sha256": _sha256(path)})
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump({"files": entries}, fh, sort_keys=True, separators=(",", ":"))
    return manifest_path


def _write_metric_rows(path: str, rows: list[tuple[str, float, float]]):
    with open(path, "w") as fh:
        fh.write("metric,value,stderr\n")
        for metric, value, stderr in rows:
            fh.write(f"{metric},{value!r},{stderr!r}\n")


def _load_data(cfg: dict):
    """Resolve the config's data section.

    Returns (kind, payload, d): for targets the payload is the Target2D;
    for CSVs it is (train, val, test, stats).
    """
    data = cfg["data"]
    if "target" in data:
        return "target", Target2D(data["target"]), 2
    train, val, test, stats = load_csv_dataset(
        data["csv_path"],
        has_header=data["has_header"],
        standardize=data["standardize"],
        split=data["split"],
        seed=cfg["seed"],
    )
    return "csv", (train, val, test, stats), train.shape[1]


def _make_eval_fn(cfg: dict, kind: str, payload):
    grid = eval_grid_from(cfg)

    if kind == "target":
        target = payload

        def eval_fn(model, iteration):
            rng = derive_stream(cfg["seed"], STREAM_EVAL, iteration + 1)
            try:
                value = quadrature_kld(model, target, grid, rng=rng)
            except LarsFlowError:
                # A half-trained model can spill mass off the grid; record
                # the miss instead of killing the run.
                value = float("nan")
            return [("quadrature_kld", value)]

        return eval_fn

    _, val, _, _ = payload
    if val.shape[0] == 0:
        return None

    def eval_fn(model, iteration):
        rng = derive_stream(cfg["seed"], STREAM_EVAL, iteration + 1)
        mean, _ = dataset_ll(model, val, rng=rng)
        return [("val_ll", mean)]

    return eval_fn


def _save_run_checkpoint(cfg: dict, model, iteration: int, adam_state, stats, path: str):
    base = model.base
    z_ema = getattr(base, "z_ema", None)
    state = ckpt_mod.make_state(cfg, iteration, model.param_vector(), z_ema, adam_state, stats)
    ckpt_mod.checkpoint_save(state, path)


def _restore_model_flexible(state: dict):
    """Rebuild a model from a checkpoint, inferring d for csv runs."""
    cfg = validate_config(state["config"])
    if "target" in cfg["data"]:
        d = 2
    elif state["data_stats"] is not None:
        d = state["data_stats"]["mean"].size
    else:
        train, _, _, _ = load_csv_dataset(
            cfg["data"]["csv_path"],
            has_header=cfg["data"]["has_header"],
            standardize=False,
            split=cfg["data"]["split"],
            seed=cfg["seed"],
        )
        d = train.shape[1]
    model = build_model(cfg, d)
    model.set_param_vector(state["params"])
    base = model.base
    if state["z_ema"] is not None and hasattr(base, "ema_update"):
        z = state["z_ema"]
        base.z_ema = float(z[0]) if (z.size == 1 and hasattr(base, "T") and not hasattr(base, "G")) else z
    return cfg, model


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    return _run_training(cfg)


def _run_training(cfg: dict) -> int:
    out_dir = cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    kind, payload, d = _load_data(cfg)
    model = build_model(cfg, d)
    tc = train_config_from(cfg)
    eval_fn = _make_eval_fn(cfg, kind, payload)
    stats = payload[3] if kind == "csv" else None

    written = []
    adam_holder = {"state": None}

    def run():
        if tc.objective == "ml":
            source = payload if kind == "target" else payload[0]
            return train_ml(model, source, tc, eval_fn=eval_fn)
        return train_kl(model, payload, tc, eval_fn=eval_fn)

    try:
        trained, trace = run()
    except TrainingDiverged as exc:
        state = exc.last_state
        path = os.path.join(out_dir, "checkpoint_diverged.json")
        adam = AdamState(m=state["adam_m"], v=state["adam_v"], step=state["adam_step"])
        snapshot_model = build_model(cfg, d)
        snapshot_model.set_param_vector(state["params"])
        if state["z_ema"] is not None and hasattr(snapshot_model.base, "ema_update"):
            z = state["z_ema"]
            snapshot_model.base.z_ema = float(z[0]) if z.size == 1 else z
        _save_run_checkpoint(cfg, snapshot_model, state["iteration"], adam, stats, path)
        write_manifest(out_dir, [path])
        print(f"error: {exc}; last finite state saved to {path}", file=sys.stderr)
        return 1

    metrics_path = os.path.join(out_dir, "metrics.csv")
    evals_path = os.path.join(out_dir, "metrics_eval.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    trace.to_csv(metrics_path)
    trace.evals_to_csv(evals_path)
    _save_run_checkpoint(cfg, trained, tc.iterations - 1, None, stats, ckpt_path)
    written += [metrics_path, evals_path, ckpt_path]
    write_manifest(out_dir, written)
    return 0


def cmd_eval(args) -> int:
    state = ckpt_mod.checkpoint_load(args.checkpoint)
    cfg, model = _restore_model_flexible(state)
    out_dir = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval")
    os.makedirs(out_dir, exist_ok=True)
    rng = derive_stream(state["rng"]["seed"], STREAM_EVAL, state["iteration"] + 1)
    rows = []
    written = []
    if args.kld:
        if "target" not in cfg["data"]:
            raise ConfigError("data.target: --kld requires a checkpoint trained on a 2D target")
        target = Target2D(cfg["data"]["target"])
        value = quadrature_kld(model, target, eval_grid_from(cfg), rng=rng)
        rows.append(("quadrature_kld", value, float("nan")))
    if args.ll is not None:
        data, _, _, _ = load_csv_dataset(args.ll, has_header=False, standardize=False, split=(1.0, 0.0, 0.0), seed=0)
        if state["data_stats"] is not None:
            data = apply_standardization(data, state["data_stats"])
        mean, se = dataset_ll(model, data, rng=rng)
        rows.append(("ll", mean, se))
    if args.grid:
        grid_path = os.path.join(out_dir, "density_grid.csv")
        target = Target2D(cfg["data"]["target"]) if "target" in cfg["data"] else None
        with refreshed_normalizer(model, rng=rng):
            export_density_grid(model, target, eval_grid_from(cfg), path=grid_path)
        written.append(grid_path)
    if rows:
        metrics_path = os.path.join(out_dir, "eval_metrics.csv")
        _write_metric_rows(metrics_path, rows)
        written.append(metrics_path)
    write_manifest(out_dir, written)
    for metric, value, _ in rows:
        print(f"{metric}: {value!r}")
    return 0


def cmd_sample(args) -> int:
    state = ckpt_mod.checkpoint_load(args.checkpoint)
    _, model = _restore_model_flexible(state)
    rng = derive_stream(state["rng"]["seed"], STREAM_EVAL, state["iteration"] + 2)
    refresh_rng = derive_stream(state["rng"]["seed"], STREAM_EVAL, state["iteration"] + 3)
    with refreshed_normalizer(model, rng=refresh_rng):
        x, lp, _ = model.sample(rng, args.n)
    out_path = os.path.abspath(args.output)
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    with open(out_path, "w") as fh:
        fh.write(",".join(f"x{j + 1}" for j in range(x.shape[1])) + ",log_prob\n")
        for row, l in zip(x, lp):
            fh.write(",".join(repr(float(v)) for v in row) + f",{float(l)!r}\n")
    write_manifest(os.path.dirname(out_path), [out_path])
    return 0


def cmd_grid(args) -> int:
    state = ckpt_mod.checkpoint_load(args.checkpoint)
    cfg, model = _restore_model_flexible(state)
    rng = derive_stream(state["rng"]["seed"], STREAM_EVAL, state["iteration"] + 4)
    out_path = os.path.abspath(args.output)
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    target = Target2D(cfg["data"]["target"]) if "target" in cfg["data"] else None
    with refreshed_normalizer(model, rng=rng):
        export_density_grid(model, target, eval_grid_from(cfg), path=out_path)
    write_manifest(os.path.dirname(out_path), [out_path])
    return 0


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok != ""]
    except ValueError as exc:
        raise ConfigError(f"invalid numeric list {text!r}") from exc


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok != ""]
    except ValueError as exc:
        raise ConfigError(f"invalid integer list {text!r}") from exc


def _final_z_and_kld(cfg: dict, out_dir: str):
    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    state = ckpt_mod.checkpoint_load(ckpt_path)
    _, model = _restore_model_flexible(state)
    rng = derive_stream(state["rng"]["seed"], STREAM_EVAL, state["iteration"] + 1)
    z = refresh_normalizer(model, rng=rng)
    final_z = float(np.mean(z)) if z is not None else float("nan")
    final_kld = float("nan")
    if "target" in cfg["data"]:
        target = Target2D(cfg["data"]["target"])
        final_kld = quadrature_kld(model, target, eval_grid_from(cfg), rng=rng)
    if hasattr(model.base, "set_z_override"):
        model.base.set_z_override(None)
    return final_z, final_kld


def cmd_zsweep(args) -> int:
    cfg = load_config(args.config)
    lambdas = _parse_float_list(args.lambdas)
    if not lambdas:
        raise ConfigError("--lambdas: at least one value required")
    seeds = _parse_int_list(args.seeds) if args.seeds else [cfg["seed"]]
    root = cfg["output_dir"]
    os.makedirs(root, exist_ok=True)
    rows = []
    written = []
    for lam in lambdas:
        z_values, kld_values = [], []
        for seed in seeds:
            sub = dict(cfg)
            sub["seed"] = seed
            sub["train"] = dict(cfg["train"], lambda_z=lam)
            sub["output_dir"] = os.path.join(root, f"lambda_{lam:g}_seed_{seed}")
            code = _run_training(sub)
            if code != 0:
                return code
            z, kld = _final_z_and_kld(sub, sub["output_dir"])
            z_values.append(z)
            kld_values.append(kld)
        rows.append((lam, float(np.mean(z_values)), float(np.mean(kld_values))))
    sweep_path = os.path.join(root, "zsweep.csv")
    with open(sweep_path, "w") as fh:
        fh.write("lambda,final_Z,final_kld\n")
        for lam, z, kld in rows:
            fh.write(f"{lam!r},{z!r},{kld!r}\n")
    written.append(sweep_path)
    write_manifest(root, written)
    for lam, z, kld in rows:
        print(f"lambda={lam:g}: final_Z={z:.4f} final_kld={kld:.4f}")
    return 0


def cmd_archsweep(args) -> int:
    cfg = load_config(args.config)
    layer_counts = _parse_int_list(args.layers)
    unit_counts = _parse_int_list(args.units)
    if not layer_counts or not unit_counts:
        raise ConfigError("--layers and --units each require at least one value")
    if cfg["model"]["base"] not in ("resampled", "grouped"):
        raise ConfigError("model.base: archsweep varies the acceptance net; use a resampled base")
    root = cfg["output_dir"]
    os.makedirs(root, exist_ok=True)
    rows = []
    is_target = "target" in cfg["data"]
    for layers in layer_counts:
        for units in unit_counts:
            sub = dict(cfg)
            sub["model"] = dict(cfg["model"], acceptance_hidden_layers=layers, acceptance_hidden_units=units)
            sub["output_dir"] = os.path.join(root, f"arch_{layers}x{units}")
            code = _run_training(sub)
            if code != 0:
                return code
            if is_target:
                _, value = _final_z_and_kld(sub, sub["output_dir"])
                rows.append((layers, units, "quadrature_kld", value))
            else:
                state = ckpt_mod.checkpoint_load(os.path.join(sub["output_dir"], "checkpoint.json"))
                _, model = _restore_model_flexible(state)
                _, _, test, stats = _load_data(sub)[1]
                rng = derive_stream(state["rng"]["seed"], STREAM_EVAL, state["iteration"] + 1)
                mean, _ = dataset_ll(model, test, rng=rng)
                rows.append((layers, units, "test_ll", mean))
    sweep_path = os.path.join(root, "archsweep.csv")
    with open(sweep_path, "w") as fh:
        fh.write("hidden_layers,hidden_units,metric,value\n")
        for layers, units, metric, value in rows:
            fh.write(f"{layers},{units},{metric},{value!r}\n")
    write_manifest(root, [sweep_path])
    for layers, units, metric, value in rows:
        print(f"{layers}x{units}: {metric}={value:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="larsflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a JSON config")
    p_train.add_argument("config")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--kld", action="store_true", help="quadrature KLD against the config target")
    p_eval.add_argument("--ll", metavar="CSV", default=None, help="mean log-likelihood of a CSV dataset")
    p_eval.add_argument("--grid", action="store_true", help="export the density grid")
    p_eval.set_defaults(fn=cmd_eval)

    p_sample = sub.add_parser("sample", help="draw samples from a checkpoint")
    p_sample.add_argument("checkpoint")
    p_sample.add_argument("-n", type=int, required=True)
    p_sample.add_argument("-o", "--output", required=True)
    p_sample.set_defaults(fn=cmd_sample)

    p_grid = sub.add_parser("grid", help="export a density grid CSV from a checkpoint")
    p_grid.add_argument("checkpoint")
    p_grid.add_argument("-o", "--output", required=True)
    p_grid.set_defaults(fn=cmd_grid)

    p_zsweep = sub.add_parser("zsweep", help="sweep the acceptance-rate penalty weight")
    p_zsweep.add_argument("config")
    p_zsweep.add_argument("--lambdas", required=True, help="comma-separated penalty weights")
    p_zsweep.add_argument("--seeds", default=None, help="comma-separated seeds (default: config seed)")
    p_zsweep.set_defaults(fn=cmd_zsweep)

    p_arch = sub.add_parser("archsweep", help="sweep acceptance-network depth and width")
    p_arch.add_argument("config")
    p_arch.add_argument("--layers", required=True, help="comma-separated hidden layer counts")
    p_arch.add_argument("--units", required=True, help="comma-separated hidden unit counts")
    p_arch.set_defaults(fn=cmd_archsweep)
    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except LarsFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
