"""Command-line front end.

Subcommands: simulate | fit | predict | bench, each driven by a JSON or TOML
config file plus a mandatory --seed. Config parsing is strict: unknown keys
abort with exit code 2 so hyperparameter typos never pass silently. All file
writes are atomic (write to a temp name, then rename) and numbers are
serialized at full round-trip precision.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np
import pandas as pd

from ._rng import derive_seed
from .bootstrap import BootstrapConfig
from .forest import (
    ForestConfig,
    NoSupport,
    fit_forest,
    forest_weights_batch,
    load_forest,
    save_forest,
)
from .functionals import (
    cond_cdf,
    conditional_summary,
    mahalanobis_score,
    tolerance_threshold,
    weighted_quantile,
)
from .kernels import KernelSpec, WeightedDistribution
from .simbench import (
    SimConfig,
    apply_survey,
    generate_population,
    measure_of_size,
    run_experiment,
)
from .survey import (
    InvalidWeights,
    SchemaError,
    TwoStageDesign,
    design_diagnostics,
    read_sample_csv,
    write_sample_csv,
)

__all__ = ["main"]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_SCHEMA = 2


class ConfigError(ValueError):
    """Config file violates the expected schema."""


def _write_atomic_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_atomic_csv(frame: pd.DataFrame, path: str) -> None:
    _write_atomic_text(path, frame.to_csv(index=False))


def _write_atomic_json(obj, path: str) -> None:
    _write_atomic_text(path, json.dumps(obj, indent=1) + "\n")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        if path.endswith(".toml"):
            return tomllib.load(fh)
        return json.load(fh)


def _check_keys(section: dict, allowed: dict, where: str) -> None:
    for key, value in section.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r} in {where}")
        sub = allowed[key]
        if isinstance(sub, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} in {where} must be a table")
            _check_keys(value, sub, f"{where}.{key}")


_FOREST_KEYS = {
    "n_trees": None,
    "honesty_prob": None,
    "max_depth": None,
    "min_node_size": None,
    "max_weight_ratio": None,
    "mtry": None,
    "threshold_grid": None,
    "rff_dim": None,
    "bandwidth": None,
    "resampling": None,
}
_BOOTSTRAP_KEYS = {"scheme": None, "skip_second_stage": None, "average_M": None}
_SIM_KEYS = {
    "n_population": None,
    "n_features": None,
    "n_strata": None,
    "psus_per_stratum": None,
    "psus_selected_per_stratum": None,
    "second_stage_fraction": None,
    "zero_mean_dgp": None,
}
_SCHEMAS = {
    "simulate": dict(_SIM_KEYS),
    "fit": {"sample": None, "forest": _FOREST_KEYS, "bootstrap": _BOOTSTRAP_KEYS,
            "design": {"kind": None}},
    "predict": {"model": None, "queries": None, "quantile_levels": None,
                "cdf_point": None, "tolerance_alpha": None},
    "bench": {**_SIM_KEYS, "n_trees": None, "seeds": None, "methods": None,
              "eval_grid_size": None, "reference_draws": None, "rmse_grid_size": None,
              "forest": _FOREST_KEYS, "bootstrap": _BOOTSTRAP_KEYS},
}


def _forest_config(cfg: dict, seed: int) -> ForestConfig:
    forest_keys = dict(cfg.get("forest", {}))
    boot_keys = dict(cfg.get("bootstrap", {}))
    bandwidth = forest_keys.pop("bandwidth", None)
    kwargs = dict(forest_keys)
    if bandwidth is not None:
        kwargs["kernel"] = KernelSpec(
            bandwidth=float(bandwidth),
            rff_dim=int(forest_keys.get("rff_dim", 256)),
            rff_seed=seed,
        )
    if boot_keys:
        kwargs["bootstrap"] = BootstrapConfig(
            scheme=boot_keys.get("scheme", "multinomial"),
            skip_second_stage=bool(boot_keys.get("skip_second_stage", False)),
            average_m=int(boot_keys.get("average_M", 1)),
        )
    kwargs["master_seed"] = seed
    return ForestConfig(**kwargs)


def _sim_config(cfg: dict, seed: int, extra: dict | None = None) -> SimConfig:
    kwargs = {k: cfg[k] for k in _SIM_KEYS if k in cfg}
    if extra:
        kwargs.update(extra)
    return SimConfig(**kwargs)


def cmd_simulate(cfg: dict, seed: int, out_dir: str, workers: int) -> int:
    sim = _sim_config(cfg, seed)
    pop = generate_population(sim, (seed, "pop"))
    sample = apply_survey(pop, sim, (seed, "survey"))
    os.makedirs(out_dir, exist_ok=True)

    pop_cols: dict[str, np.ndarray] = {}
    for k in range(pop.X.shape[1]):
        pop_cols[f"x{k + 1}"] = pop.X[:, k]
    for k in range(pop.Y.shape[1]):
        pop_cols[f"y{k + 1}"] = pop.Y[:, k]
    pop_cols["z"] = pop.Z
    pop_cols["stratum"] = pop.stratum
    pop_cols["psu"] = pop.psu
    _write_atomic_csv(pd.DataFrame(pop_cols), os.path.join(out_dir, "population.csv"))

    sample_path = os.path.join(out_dir, "sample.csv")
    tmp_sample = sample_path + ".part"
    write_sample_csv(sample, tmp_sample)
    os.replace(tmp_sample, sample_path)

    diag = design_diagnostics(sample, pop.size)
    _write_atomic_json(
        {
            "n_population": pop.size,
            "n_sample": sample.n,
            "lln_gap": diag.lln_gap,
            "n_eff": diag.n_eff,
            "pi_min": diag.pi_min,
            "pi_max": diag.pi_max,
            "sampling_fraction": diag.sampling_fraction,
        },
        os.path.join(out_dir, "diagnostics.json"),
    )
    print(f"simulate: wrote population.csv, sample.csv, diagnostics.json to {out_dir}")
    return EXIT_OK


def cmd_fit(cfg: dict, seed: int, out_dir: str, workers: int) -> int:
    sample_path = cfg.get("sample")
    if not sample_path:
        raise ConfigError("fit config needs a 'sample' path")
    sample = read_sample_csv(sample_path)
    config = _forest_config(cfg, seed)
    forest = fit_forest(sample, config, design=None, workers=workers)
    os.makedirs(out_dir, exist_ok=True)
    model_path = os.path.join(out_dir, "model.json")
    tmp = model_path + ".part"
    save_forest(forest, tmp)
    os.replace(tmp, model_path)
    log = [
        {
            "tree": b,
            "depth": tree.depth,
            "n_leaves": tree.n_leaves,
            "split_psus": len(tree.partition.split_psus),
            "est_psus": len(tree.partition.est_psus),
        }
        for b, tree in enumerate(forest.trees)
    ]
    _write_atomic_json(log, os.path.join(out_dir, "fit_log.json"))
    depths = [t.depth for t in forest.trees]
    print(
        f"fit: {forest.n_trees} trees on {sample.n} units; "
        f"depth range {min(depths)}..{max(depths)}; model.json written to {out_dir}"
    )
    return EXIT_OK


def _predict_row(forest, x, levels, cdf_point, region):
    weights, contrib = forest_weights_batch(forest, x[None, :])
    row: dict[str, float] = {}
    if contrib[0] == 0:
        row["supported"] = 0
        return row
    row["supported"] = 1
    w = weights[0]
    keep = w > 0
    dist = WeightedDistribution(forest.sample.Y[keep], w[keep] / w[keep].sum())
    summ = conditional_summary(dist)
    d = dist.dim
    for k in range(d):
        row[f"mean_y{k + 1}"] = summ.mean[k]
    for i in range(d):
        for j in range(i, d):
            row[f"cov_y{i + 1}{j + 1}"] = summ.covariance[i, j]
    for tau in levels:
        for k in range(d):
            row[f"q{tau:g}_y{k + 1}"] = weighted_quantile(dist.points[:, k], dist.weights, tau)
    if cdf_point is not None:
        row["cdf"] = cond_cdf(dist, cdf_point)
    if region is not None:
        row["tolerance_score"] = mahalanobis_score(summ, region["y"])
        row["tolerance_inside"] = int(row["tolerance_score"] <= region["threshold"])
    return row


def cmd_predict(cfg: dict, seed: int, out_dir: str, workers: int) -> int:
    model_path = cfg.get("model")
    query_path = cfg.get("queries")
    if not model_path or not query_path:
        raise ConfigError("predict config needs 'model' and 'queries' paths")
    forest = load_forest(model_path)
    queries = pd.read_csv(query_path, encoding="utf-8")
    p = forest.sample.X.shape[1]
    d = forest.sample.Y.shape[1]
    x_cols = [f"x{k + 1}" for k in range(p)]
    for col in x_cols:
        if col not in queries.columns:
            raise SchemaError(f"missing required column {col!r}")
    levels = [float(t) for t in cfg.get("quantile_levels", [0.5])]
    cdf_point = cfg.get("cdf_point")
    if cdf_point is not None:
        cdf_point = np.asarray(cdf_point, dtype=float)

    alpha = cfg.get("tolerance_alpha")
    tolerance_cfg = None
    y_cols = [f"y{k + 1}" for k in range(d)]
    if alpha is not None:
        for col in y_cols:
            if col not in queries.columns:
                raise SchemaError(
                    f"tolerance membership needs outcome column {col!r} in the query file"
                )
        region = tolerance_threshold(forest, forest.sample, float(alpha))
        tolerance_cfg = {"threshold": region.threshold}

    rows = []
    X = queries[x_cols].to_numpy(dtype=float) if len(queries) else np.empty((0, p))
    for i in range(len(queries)):
        spec = dict(tolerance_cfg) if tolerance_cfg is not None else None
        if spec is not None:
            spec["y"] = queries.loc[i, y_cols].to_numpy(dtype=float)
        rows.append(_predict_row(forest, X[i], levels, cdf_point, spec))
    out = pd.DataFrame(rows)
    if len(queries) == 0:
        # empty input still produces a header
        out = pd.DataFrame(columns=["supported"])
    result = pd.concat([queries, out], axis=1)
    os.makedirs(out_dir, exist_ok=True)
    _write_atomic_csv(result, os.path.join(out_dir, "predictions.csv"))
    n_unsupported = int((out["supported"] == 0).sum()) if len(out) else 0
    print(f"predict: {len(queries)} queries, {n_unsupported} unsupported; predictions.csv written")
    return EXIT_OK


def cmd_bench(cfg: dict, seed: int, out_dir: str, workers: int) -> int:
    extra: dict = {}
    if "n_trees" in cfg:
        extra["n_trees"] = int(cfg["n_trees"])
    if "seeds" in cfg:
        extra["seeds"] = tuple(int(s) for s in cfg["seeds"])
    else:
        extra["seeds"] = tuple(derive_seed(seed, "bench", i) % 10**6 for i in range(3))
    if "methods" in cfg:
        extra["methods"] = tuple(cfg["methods"])
    for key in ("eval_grid_size", "reference_draws", "rmse_grid_size"):
        if key in cfg:
            extra[key] = int(cfg[key])
    overrides = dict(cfg.get("forest", {}))
    overrides.pop("bandwidth", None)
    if cfg.get("bootstrap"):
        overrides["bootstrap"] = BootstrapConfig(
            scheme=cfg["bootstrap"].get("scheme", "multinomial"),
            skip_second_stage=bool(cfg["bootstrap"].get("skip_second_stage", False)),
            average_m=int(cfg["bootstrap"].get("average_M", 1)),
        )
    if overrides:
        extra["forest_overrides"] = overrides
    sim = _sim_config(cfg, seed, extra)
    report = run_experiment(sim, workers=workers)
    os.makedirs(out_dir, exist_ok=True)
    _write_atomic_csv(report.rows, os.path.join(out_dir, "metrics.csv"))
    _write_atomic_json(report.aggregate, os.path.join(out_dir, "aggregate.json"))
    _write_atomic_csv(report.pointwise, os.path.join(out_dir, "pointwise.csv"))
    print(
        f"bench: {len(report.rows)} rows over {len(sim.seeds)} seeds; "
        f"metrics.csv, aggregate.json, pointwise.csv written to {out_dir}"
    )
    return EXIT_OK


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "bench": cmd_bench,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdrf",
        description="Design-aware distributional random forests for survey samples.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="JSON or TOML config file")
        cmd.add_argument("--seed", type=int, required=True, help="master seed (mandatory)")
        cmd.add_argument("--workers", type=int, default=1)
        cmd.add_argument("--out", default=".", help="output directory")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        _check_keys(cfg, _SCHEMAS[args.command], args.command)
        return _COMMANDS[args.command](cfg, args.seed, args.out, args.workers)
    except (ConfigError, SchemaError, InvalidWeights) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ValueError, TypeError) as err:
        print(f"error: invalid configuration: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    except NoSupport as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
