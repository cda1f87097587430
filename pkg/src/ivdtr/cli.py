"""Command-line surface: fit / improve / simulate / evaluate.

Configuration comes from a JSON document (--config) overridden by flags;
flags win. Exit codes: 0 success, 2 validation or configuration error,
3 numerical failure (non-convergence under strict mode). Failures emit a
machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from typing import Optional

import numpy as np

from .bounds import RewardBounds, WeightSpec, parse_weight_spec
from .crossfit import fit_ivoptimal_crossfit
from .data import DataError, Dataset, load_csv
from .dtr_core import (
    Dtr,
    backward_induct,
    constant_dtr,
    dtr_from_json,
    dtr_to_json,
    project_policy,
)
from .improve import fit_ivimproved, relative_stage_estimates
from .nuisance import NumericalError
from .sim import SimConfig, fit_sra_baseline, run_cell, true_value


class ConfigError(ValueError):
    """Raised on invalid run configuration."""


_COMMON_KEYS = {"seed", "out", "report", "threads", "strict"}
_ALLOWED_KEYS = {
    "fit": _COMMON_KEYS | {"data", "schema", "reward_bounds", "lambda", "depth", "crossfit"},
    "improve": _COMMON_KEYS | {"data", "schema", "reward_bounds", "baseline", "depth"},
    "simulate": _COMMON_KEYS | {
        "c1", "xi", "n_train", "replications", "n_eval", "lambda", "depth",
        "crossfit", "out_csv", "out_json",
    },
    "evaluate": _COMMON_KEYS | {"policy", "c1", "xi", "n_eval"},
}


def _load_config(path: Optional[str], command: str) -> dict:
    config: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                config = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(config) - _ALLOWED_KEYS[command]
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    return config


def _apply_overrides(config: dict, args: argparse.Namespace) -> dict:
    overrides = {
        "data": args.data,
        "lambda": getattr(args, "lam", None),
        "depth": args.depth,
        "crossfit": args.crossfit,
        "baseline": args.baseline,
        "seed": args.seed,
        "out": args.out,
        "threads": args.threads,
        "policy": getattr(args, "policy", None),
    }
    merged = dict(config)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def _require(config: dict, key: str):
    if key not in config or config[key] is None:
        raise ConfigError(f"missing required config key '{key}'")
    return config[key]


def _reward_bounds(config: dict) -> RewardBounds:
    pairs = _require(config, "reward_bounds")
    try:
        return RewardBounds.from_pairs(pairs)
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"bad reward_bounds: {exc}") from None


def _weight_spec(config: dict, num_stages: int) -> WeightSpec:
    raw = config.get("lambda", "m")
    try:
        if isinstance(raw, str):
            return parse_weight_spec(raw, num_stages)
        if isinstance(raw, (int, float)):
            return WeightSpec(float(raw))
        return WeightSpec(tuple(float(v) for v in raw))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load_dataset(config: dict) -> Dataset:
    path = _require(config, "data")
    schema = None
    if config.get("schema") is not None:
        doc = config["schema"]
        try:
            schema = (int(doc["num_stages"]), tuple(int(d) for d in doc["covariate_dims"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad schema: {exc}") from None
    try:
        return load_csv(path, schema=schema)
    except FileNotFoundError:
        raise ConfigError(f"data file not found: {path}") from None


def _check_converged(config: dict, fitted) -> None:
    if not config.get("strict", False):
        return
    for est in fitted:
        if not est.nuisance.converged:
            raise NumericalError(
                f"stage {est.stage} nuisance fit did not converge within limits"
            )


def _dump_json(doc: dict, path: Optional[str]) -> None:
    text = json.dumps(doc, sort_keys=True, indent=2)
    if path is None:
        print(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _interval_quantiles(est) -> dict:
    widths = np.concatenate([est.upper_pos - est.lower_pos, est.upper_neg - est.lower_neg])
    return {
        "q10": float(np.quantile(widths, 0.10)),
        "q50": float(np.quantile(widths, 0.50)),
        "q90": float(np.quantile(widths, 0.90)),
    }


def cmd_fit(config: dict) -> int:
    dataset = _load_dataset(config)
    bounds = _reward_bounds(config)
    lam = _weight_spec(config, dataset.num_stages)
    depth = int(config.get("depth", 2))
    m = int(config.get("crossfit", 0))
    seed = int(config.get("seed", 0))
    clip = 1e-3

    estimates, _ = backward_induct(dataset, bounds, lam, clip=clip)
    _check_converged(config, estimates)
    if m >= 2:
        policy = fit_ivoptimal_crossfit(dataset, bounds, lam, depth, m=m, seed=seed, clip=clip)
    else:
        policy = project_policy(estimates, dataset, depth, lam=lam)

    policy_doc = dtr_to_json(policy)
    _dump_json(policy_doc, config.get("out"))
    report = {
        "command": "fit",
        "n": dataset.n,
        "num_stages": dataset.num_stages,
        "crossfit": m,
        "stages": [
            {
                "stage": est.stage,
                "interval_width_quantiles": _interval_quantiles(est),
                "empty_cells": [list(map(str, c)) for c in est.nuisance.empty_cells],
                "n_repaired": est.n_repaired,
                "converged": est.nuisance.converged,
                "tree": policy_doc["stages"][est.stage - 1],
            }
            for est in estimates
        ],
    }
    if config.get("report"):
        _dump_json(report, config["report"])
    return 0


def _resolve_baseline(spec: str, dataset: Dataset, depth: int) -> tuple[Dtr, str]:
    if spec == "std":
        return constant_dtr(-1, dataset.num_stages, kind="std"), "std"
    if spec == "prosp":
        return constant_dtr(1, dataset.num_stages, kind="prosp"), "prosp"
    if spec == "sra":
        return fit_sra_baseline(dataset, depth), "sra"
    try:
        with open(spec, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"baseline policy file not found: {spec}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"baseline policy is not valid JSON: {exc}") from None
    try:
        return dtr_from_json(doc), spec
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"malformed baseline policy JSON: {exc}") from None


def cmd_improve(config: dict) -> int:
    dataset = _load_dataset(config)
    bounds = _reward_bounds(config)
    depth = int(config.get("depth", 2))
    baseline_spec = str(_require(config, "baseline"))
    baseline, tag = _resolve_baseline(baseline_spec, dataset, depth)
    if baseline.num_stages != dataset.num_stages:
        raise ConfigError(
            f"baseline has {baseline.num_stages} stages, data has {dataset.num_stages}"
        )

    policy, estimates = fit_ivimproved(
        dataset, baseline, bounds, depth, baseline_id=tag
    )
    policy_doc = dtr_to_json(policy)
    _dump_json(policy_doc, config.get("out"))
    report = {
        "command": "improve",
        "baseline": tag,
        "n": dataset.n,
        "stages": [],
    }
    for est in estimates:
        H = dataset.histories(est.stage)
        projected = policy.action_matrix(est.stage, H)
        report["stages"].append(
            {
                "stage": est.stage,
                "deviation_fraction": float(np.mean(projected != est.baseline_action)),
                "pointwise_flip_fraction": float(
                    np.mean(est.improved_action != est.baseline_action)
                ),
                "n_repaired": est.n_repaired,
                "tree": policy_doc["stages"][est.stage - 1],
            }
        )
    if config.get("report"):
        _dump_json(report, config["report"])
    return 0


def _as_list(value) -> list:
    return list(value) if isinstance(value, (list, tuple)) else [value]


def cmd_simulate(config: dict) -> int:
    replications = int(config.get("replications", 100))
    if replications < 1:
        raise ConfigError("replications must be >= 1")
    try:
        lam = _weight_spec(config, 2)
        cells = [
            SimConfig(
                c1=float(c1),
                xi=float(xi),
                n_train=int(config.get("n_train", 1000)),
                seed=int(config.get("seed", 0)),
                lam=lam,
                depth=int(config.get("depth", 2)),
                replications=replications,
                n_eval=int(config.get("n_eval", 100_000)),
                crossfit_m=int(config.get("crossfit", 0)),
                threads=int(config.get("threads", 1)),
            )
            for xi in _as_list(config.get("xi", 1.0))
            for c1 in _as_list(config.get("c1", 4.0))
        ]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    results = [run_cell(cell) for cell in cells]

    if config.get("out_csv"):
        with open(config["out_csv"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["c1", "xi", "rep", "regime", "value"])
            for cell, result in zip(cells, results):
                for rep, regime, value in result.rows:
                    writer.writerow([cell.c1, cell.xi, rep, regime, f"{value:.10f}"])
    summary_doc = {
        "cells": [
            {"c1": cell.c1, "xi": cell.xi, "n_train": cell.n_train,
             "replications": cell.replications, "summary": result.summary}
            for cell, result in zip(cells, results)
        ]
    }
    _dump_json(summary_doc, config.get("out_json") or config.get("out"))
    return 0


def cmd_evaluate(config: dict) -> int:
    spec = str(_require(config, "policy"))
    if spec == "std":
        policy = constant_dtr(-1, 2, kind="std")
    elif spec == "prosp":
        policy = constant_dtr(1, 2, kind="prosp")
    else:
        try:
            with open(spec, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"policy file not found: {spec}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"policy is not valid JSON: {exc}") from None
        try:
            policy = dtr_from_json(doc)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"malformed policy JSON: {exc}") from None

    try:
        sim_config = SimConfig(
            c1=float(config.get("c1", 4.0)),
            xi=float(config.get("xi", 1.0)),
            seed=int(config.get("seed", 0)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    n_eval = int(config.get("n_eval", 100_000))
    rng = np.random.default_rng(sim_config.seed)
    report = true_value(policy, sim_config, n_eval, rng)
    _dump_json(
        {
            "raw_value": report.raw_value,
            "normalized_value": report.normalized_value,
            "monte_carlo_se": report.monte_carlo_se,
            "n_eval": report.n_eval,
        },
        config.get("out"),
    )
    return 0


_COMMANDS = {
    "fit": cmd_fit,
    "improve": cmd_improve,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivdtr",
        description="Estimate, improve, and evaluate instrument-informed treatment regimes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--data", help="trajectory CSV path")
        p.add_argument("--lambda", dest="lam", help="weight spec: w|b|m|float|const:stage:value")
        p.add_argument("--depth", type=int, help="tree depth")
        p.add_argument("--crossfit", type=int, help="number of cross-fitting batches (0/1 off)")
        p.add_argument("--baseline", help="baseline policy: std|prosp|sra|path")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--out", help="output path for the policy/summary JSON")
        p.add_argument("--threads", type=int, help="worker process cap")
        if name == "evaluate":
            p.add_argument("--policy", help="policy JSON path or std|prosp")
    return parser


def run(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args.config, args.command)
        config = _apply_overrides(config, args)
        return _COMMANDS[args.command](config)
    except (ConfigError, DataError, ValueError) as exc:
        json.dump({"error": str(exc), "code": 2}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except NumericalError as exc:
        json.dump({"error": str(exc), "code": 3}, sys.stderr)
        sys.stderr.write("\n")
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
