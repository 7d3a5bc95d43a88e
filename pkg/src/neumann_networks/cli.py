"""Command-line entry point: ``neumann-net <subcommand> --config cfg.json --out DIR``.

Exit status is 0 on success, 1 when the configuration is invalid and 2 when
a computation diverges or produces non-finite values.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import platform
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from neumann_networks import __version__, harness, learned, linops, nmnt, oracle
from neumann_networks.errors import DivergenceError
from neumann_networks.estimators import EstimatorConfig, Variant, ZeroRegularizer
from neumann_networks.linops import ModelSpec

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "number", "minimum": 0}
_NUM = {"type": "number"}

MODEL_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["inpainting", "gaussian_blur", "downsample", "gaussian_sensing"]},
        "p": _POS_INT, "m": _POS_INT, "side": _POS_INT, "kernel_size": _POS_INT,
        "sigma": _NUM, "factor": _POS_INT, "seed": _INT,
        "observed": {"type": "array", "items": _INT},
        "boundary": {"type": "string"}, "filter": {"type": "string"},
        "row_orthonormalize": {"type": "boolean"},
    },
    "additionalProperties": False,
}

UOS_SCHEMA = {
    "type": "object",
    "required": ["r", "K", "seed"],
    "properties": {"p": _POS_INT, "r": _POS_INT, "K": _POS_INT, "seed": _INT},
    "additionalProperties": False,
}

DATA_SCHEMA = {
    "type": "object",
    "required": ["source", "N", "seed"],
    "properties": {
        "source": {"enum": ["uos", "images"]},
        "N": {"type": "integer", "minimum": 0},
        "noise_sigma": _NONNEG,
        "seed": _INT,
        "uos": UOS_SCHEMA,
        "image": {
            "type": "object",
            "properties": {"side": {"enum": [8, 16, 32]}, "kind": {"enum": ["blocks", "smooth"]},
                           "blocks": _POS_INT, "smoothness": _NUM},
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

ESTIMATOR_SCHEMA = {
    "type": "object",
    "properties": {
        "variant": {"enum": ["NN", "PNN", "GDN"]}, "eta": _NUM, "lam": _NONNEG,
        "blocks": {"type": "integer", "minimum": 0}, "cg_iters": _POS_INT, "cg_tol": _NUM,
    },
    "additionalProperties": False,
}

SCHEMAS = {
    "gen-model": {
        "type": "object", "required": ["model"],
        "properties": {"model": MODEL_SCHEMA, "seed": _INT}, "additionalProperties": False,
    },
    "gen-data": {
        "type": "object", "required": ["model", "data"],
        "properties": {"model": MODEL_SCHEMA, "data": DATA_SCHEMA, "seed": _INT},
        "additionalProperties": False,
    },
    "verify-theory": {
        "type": "object",
        "required": ["p", "m", "r", "K", "eta", "blocks", "trials", "seed"],
        "properties": {
            "p": _POS_INT, "m": _POS_INT, "r": _POS_INT, "K": _POS_INT, "eta": _NUM,
            "blocks": _POS_INT, "trials": _POS_INT, "seed": _INT, "uos_seed": _INT,
            "variant": {"enum": ["NN", "GDN"]}, "model": MODEL_SCHEMA,
            "write_trials": {"type": "boolean"},
        },
        "additionalProperties": False,
    },
    "train": {
        "type": "object", "required": ["model", "data", "arch", "estimator"],
        "properties": {
            "model": MODEL_SCHEMA, "data": DATA_SCHEMA, "seed": _INT,
            "arch": {
                "type": "object", "required": ["hidden"],
                "properties": {"hidden": {"type": "array", "items": _POS_INT, "minItems": 1},
                               "activation": {"enum": ["relu", "elu"]}},
                "additionalProperties": False,
            },
            "estimator": ESTIMATOR_SCHEMA,
            "train": {
                "type": "object",
                "properties": {"batch_size": _POS_INT, "iterations": {"type": "integer", "minimum": 0},
                               "lr": _NUM, "decay_rate": _NUM, "decay_steps": _POS_INT,
                               "seed": _INT, "train_eta": {"type": "boolean"}},
                "additionalProperties": False,
            },
        },
        "additionalProperties": False,
    },
    "eval": {
        "type": "object", "required": ["params", "data"],
        "properties": {"params": {"type": "string"}, "data": DATA_SCHEMA, "peak": _NUM,
                       "seed": _INT},
        "additionalProperties": False,
    },
    "diagnose": {
        "type": "object", "required": ["params"],
        "properties": {
            "params": {"type": "string"}, "gamma": _NUM, "trials": _POS_INT, "seed": _INT,
            "scales": {"type": "array", "items": _NUM, "minItems": 1},
        },
        "additionalProperties": False,
    },
    "landscape": {
        "type": "object", "required": ["params", "train_data", "test_data"],
        "properties": {
            "params": {"type": "string"}, "train_data": DATA_SCHEMA, "test_data": DATA_SCHEMA,
            "tau": _NUM, "half_extent": _POS_INT, "seed": _INT,
        },
        "additionalProperties": False,
    },
}


class ConfigError(ValueError):
    pass


def _write(out: Path, name: str, content, artifacts: list[str]):
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    if isinstance(content, (bytes, bytearray)):
        path.write_bytes(content)
    else:
        path.write_text(content)
    artifacts.append(name)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _model(cfg: dict) -> linops.ForwardModel:
    return linops.build_forward_model(ModelSpec.from_dict(cfg))


def _uos(data_cfg: dict, p: int) -> oracle.UnionOfSubspaces:
    u = data_cfg.get("uos")
    if u is None:
        raise ConfigError("data.source 'uos' needs a 'uos' block")
    if u.get("p", p) != p:
        raise ConfigError("uos.p disagrees with the forward model")
    return oracle.sample_subspaces(p, u["r"], u["K"], u["seed"])


def _dataset(data_cfg: dict, model: linops.ForwardModel) -> harness.Dataset:
    sigma = data_cfg.get("noise_sigma", 0.0)
    if data_cfg["source"] == "uos":
        uos = _uos(data_cfg, model.p)
        return harness.gen_uos_dataset(uos, model, data_cfg["N"], sigma, data_cfg["seed"],
                                       uos_seed=data_cfg["uos"]["seed"])
    spec = harness.ImageSpec(**data_cfg.get("image", {}))
    return harness.gen_image_dataset(spec, model, data_cfg["N"], sigma, data_cfg["seed"])


def _load_params(path: str):
    sidecar = json.loads(Path(path).with_suffix(".json").read_text())
    theta = nmnt.load(path)
    arch = learned.MLPArch.from_dict(sidecar["arch"])
    params = learned.ParamVector(theta, sidecar["eta"])
    est = EstimatorConfig.from_dict(sidecar["estimator"])
    model = _model(sidecar["model"])
    return sidecar, arch, params, est, model


def _est_with_eta(est: EstimatorConfig, params: learned.ParamVector) -> EstimatorConfig:
    return est if est.variant is Variant.PNN else est.replace(eta=params.eta)


def cmd_gen_model(cfg, out, artifacts):
    model = _model(cfg["model"])
    _write(out, "model.nmnt", nmnt.dumps(model.matrix), artifacts)
    _write(out, "model.json", _json({
        "spec": model.spec.to_dict(), "m": model.m, "p": model.p,
        "orthonormal_rows": linops.check_orthonormal_rows(model, 1e-10),
    }), artifacts)


def cmd_gen_data(cfg, out, artifacts):
    model = _model(cfg["model"])
    data = _dataset(cfg["data"], model)
    _write(out, "betas.nmnt", nmnt.dumps(data.betas), artifacts)
    _write(out, "ys.nmnt", nmnt.dumps(data.ys), artifacts)
    if data.labels is not None:
        _write(out, "labels.nmnt", nmnt.dumps(data.labels.astype(np.float64)), artifacts)
        uos = _uos(cfg["data"], model.p)
        _write(out, "uos_bases.nmnt", nmnt.dumps(np.stack(uos.bases)), artifacts)
    _write(out, "dataset.json", _json(data.provenance), artifacts)


def cmd_verify_theory(cfg, out, artifacts):
    p, m = cfg["p"], cfg["m"]
    model = _model(cfg["model"]) if "model" in cfg else linops.coordinate_restriction(p, m)
    if model.p != p or model.m != m:
        raise ConfigError("model dimensions disagree with p and m")
    uos = oracle.sample_subspaces(p, cfg["r"], cfg["K"], cfg.get("uos_seed", cfg["seed"]))
    report = oracle.verify_bound(model, uos, cfg["eta"], cfg["blocks"], cfg["trials"],
                                 cfg["seed"], cfg.get("variant", "NN"))
    _write(out, "bound_report.json", report.to_json() + "\n", artifacts)
    if cfg.get("write_trials", True):
        _write(out, "trials.csv", report.trials_csv(), artifacts)


def cmd_train(cfg, out, artifacts):
    model = _model(cfg["model"])
    data = _dataset(cfg["data"], model)
    arch = learned.MLPArch.from_hidden(model.p, cfg["arch"]["hidden"],
                                       cfg["arch"].get("activation", "relu"))
    est = EstimatorConfig.from_dict(cfg["estimator"])
    tcfg = dict(cfg.get("train", {}))
    if "seed" in cfg:
        tcfg["seed"] = cfg["seed"]
    train_cfg = learned.TrainConfig(estimator=est, **tcfg)
    params, history = learned.train(model, arch, data, train_cfg)
    _write(out, "params.nmnt", nmnt.dumps(params.theta), artifacts)
    sidecar = json.loads(learned.save_sidecar(arch, params, train_cfg))
    sidecar.update({"estimator": est.to_dict(), "model": model.spec.to_dict(),
                    "data": cfg["data"], "final_train_loss": history.final_loss})
    _write(out, "params.json", _json(sidecar), artifacts)
    _write(out, "history.csv", history.to_csv(), artifacts)


def cmd_eval(cfg, out, artifacts):
    sidecar, arch, params, est, model = _load_params(cfg["params"])
    data = _dataset(cfg["data"], model)
    R = learned.MLPRegularizer(arch, params.theta)
    est = _est_with_eta(est, params)
    peak = cfg.get("peak", 1.0)
    values, mse = harness.evaluate_regularizer(model, R, est, data, peak)
    row = {"name": Path(cfg["params"]).stem, "variant": est.variant.value,
           "blocks": est.blocks, "eta": est.eta, "lam": est.lam, "source": R.tag,
           "median_psnr": float(np.median(values)), "mean_psnr": float(np.mean(values)),
           "mse": mse}
    record = harness.ExperimentRecord([row], {"params": cfg["params"], "n_test": len(data),
                                              "peak": peak, "dataset": data.provenance},
                                      {row["name"]: values})
    _write(out, "psnr.csv", record.to_csv(), artifacts)
    _write(out, "summary.json", record.to_json() + "\n", artifacts)


def cmd_diagnose(cfg, out, artifacts):
    sidecar, arch, params, est, model = _load_params(cfg["params"])
    data_cfg = sidecar["data"]
    if data_cfg["source"] != "uos":
        raise ConfigError("diagnostics need a model trained on union-of-subspaces data")
    uos = _uos(data_cfg, model.p)
    R = learned.MLPRegularizer(arch, params.theta)
    seed = cfg.get("seed", 0)
    trials = cfg.get("trials", 1024)
    lin = harness.piecewise_linearity_test(R, uos, model, cfg.get("gamma", 0.25), trials, seed)
    lines = ["trial,same,different,gaussian"]
    lines += [f"{i},{a!r},{b!r},{c!r}" for i, (a, b, c) in
              enumerate(zip(lin.same, lin.different, lin.gaussian))]
    _write(out, "linearity.csv", "\n".join(lines) + "\n", artifacts)
    scales = cfg.get("scales", [1e-3, 1e-2, 0.1, 1.0, 10.0])
    resp = harness.rowspace_nullspace_test(R, model, uos, scales, trials, seed,
                                           min(params.eta, 1.0), est.blocks)
    base = harness.rowspace_nullspace_test(ZeroRegularizer(), model, uos, scales, trials, seed,
                                           min(params.eta, 1.0), est.blocks)
    _write(out, "subspace_response.csv", resp.to_csv(), artifacts)
    _write(out, "diagnose.json", _json({
        "linearity_medians": lin.medians, "c": resp.c, "scales": list(map(float, scales)),
        "row_median": resp.row_median.tolist(), "null_median": resp.null_median.tolist(),
        "zero_baseline_row_median": base.row_median.tolist(),
    }), artifacts)


def cmd_landscape(cfg, out, artifacts):
    sidecar, arch, params, est, model = _load_params(cfg["params"])
    train_data = _dataset(cfg["train_data"], model)
    test_data = _dataset(cfg["test_data"], model)
    est = _est_with_eta(est, params)

    def loss_on(data):
        return lambda theta: learned.empirical_risk(
            model, arch, learned.ParamVector(theta, params.eta), est, data.betas, data.ys)

    sl = harness.landscape_slice({"train": loss_on(train_data), "test": loss_on(test_data)},
                                 params, arch, cfg.get("tau", 0.01), cfg.get("half_extent", 25),
                                 cfg.get("seed", 0))
    _write(out, "landscape.csv", sl.to_csv(), artifacts)
    _write(out, "landscape.json", _json(sl.metadata()), artifacts)


COMMANDS = {
    "gen-model": cmd_gen_model,
    "gen-data": cmd_gen_data,
    "verify-theory": cmd_verify_theory,
    "train": cmd_train,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "landscape": cmd_landscape,
}


def load_config(subcommand: str, path: str, seed: int | None) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if seed is not None:
        cfg = copy.deepcopy(cfg)
        cfg["seed"] = seed
    try:
        jsonschema.validate(cfg, SCHEMAS[subcommand])
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.message}") from exc
    return cfg


def execute(subcommand: str, config_path: str, output_dir: str, seed: int | None = None) -> int:
    start = time.perf_counter()
    try:
        cfg = load_config(subcommand, config_path, seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(output_dir)
    artifacts: list[str] = []
    try:
        with np.errstate(over="raise", invalid="raise"):
            COMMANDS[subcommand](cfg, out, artifacts)
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    manifest = {
        "subcommand": subcommand,
        "config": cfg,
        "seed": cfg.get("seed"),
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "artifacts": artifacts,
        "wall_time_s": time.perf_counter() - start,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(_json(manifest))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="neumann-net", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    args = parser.parse_args(argv)
    return execute(args.subcommand, args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
