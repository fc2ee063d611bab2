"""Command-line front end.

Subcommands: gen-data, train, calibrate, decide, sweep, validate. Parameter
precedence is flags > JSON config file (``--config``) > built-in defaults.
All randomness is funneled through one master seed per command; outputs
embed the hash of the resolved configuration so reruns are byte-identical
and mismatched artifacts are refused.

Exit codes: 0 success, 1 usage or configuration error, 2 validation failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from spikecp import io
from spikecp.conformal import SpikeCPConfig, calibrate_dc_threshold, cm_pool
from spikecp.experiments import (
    DEFAULT_DC_GRID,
    SyntheticSpec,
    calibration_from_losses,
    decide_batch,
    ensemble_scores,
    generate_dataset,
    merging_validity_monte_carlo,
    plot_sweep,
    pm_pool,
    stack_examples,
    sweep,
    validity_monte_carlo,
)
from spikecp.snn import Architecture
from spikecp.training import TrainConfig, sample_ensemble, train_deep_ensemble, train_single, train_vi


class UsageError(Exception):
    """Configuration or input problem; maps to exit code 1."""


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v != ""]


def _parse_ints(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v != ""]


def _parse_r(value) -> float:
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).strip().lower()
    if text in ("inf", "+inf", "max"):
        return math.inf
    if text in ("-inf", "min"):
        return -math.inf
    return float(text)


def _resolve(args: argparse.Namespace, defaults: dict, optional: tuple = ()) -> dict:
    """Merge flags over config-file values over defaults.

    A resolved value of None is an error unless the key is listed in
    ``optional`` (either-or settings validated downstream).
    """
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(open(args.config).read())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}")
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = default
    missing = [k for k, v in resolved.items() if v is None and k not in optional]
    if missing:
        raise UsageError(f"missing required settings: {missing}")
    return resolved


def _load_members(cfg: dict):
    """Ensemble from an ensemble file or by sampling a posterior file."""
    if cfg.get("ensemble"):
        return io.load_ensemble(cfg["ensemble"])
    if cfg.get("posterior"):
        posterior = io.load_posterior(cfg["posterior"])
        return posterior, int(cfg["k"] or 1)
    raise UsageError("either --ensemble or --posterior is required")


def _dataset_arrays(path):
    try:
        examples = io.load_dataset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load dataset {path}: {exc}")
    return stack_examples(examples)


def _hash_settings(cfg: dict) -> str:
    """Config hash over everything except output destinations."""
    return io.config_hash({k: v for k, v in cfg.items() if k not in ("out", "out_prefix")})


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _resolve(
        args,
        {
            "out": None,
            "count": 600,
            "classes": 4,
            "channels": 40,
            "steps": 80,
            "base_rate": 0.1,
            "active_rate": 0.3,
            "difficulty": "0.3,1.0",
            "seed": 0,
        },
    )
    lo, hi = _parse_floats(cfg["difficulty"])
    spec = SyntheticSpec(
        num_classes=int(cfg["classes"]),
        num_channels=int(cfg["channels"]),
        num_steps=int(cfg["steps"]),
        base_rate=float(cfg["base_rate"]),
        active_rate=float(cfg["active_rate"]),
        difficulty_range=(lo, hi),
        seed=int(cfg["seed"]),
    )
    examples = generate_dataset(spec, int(cfg["count"]))
    meta = dict(spec.descriptor(), config_hash=_hash_settings(cfg))
    io.save_dataset(cfg["out"], examples, spec_meta=meta)
    print(f"wrote {len(examples)} examples to {cfg['out']} (config {meta['config_hash']})")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(
        args,
        {
            "data": None,
            "out": None,
            "mode": "de",
            "k": 6,
            "hidden": "32",
            "epochs": 50,
            "batch_size": 64,
            "lr": 1e-3,
            "kappa": 5.0,
            "prior_var": 0.03,
            "beta_syn": 0.9,
            "beta_mem": 0.9,
            "threshold": 1.0,
            "seed": 0,
        },
    )
    samples, labels = _dataset_arrays(cfg["data"])
    if np.any(labels < 0):
        raise UsageError(f"training data {cfg['data']} has unlabeled examples")
    n_classes = int(labels.max()) + 1
    layers = [samples.shape[2], *_parse_ints(cfg["hidden"]), n_classes]
    arch = Architecture(
        layer_sizes=tuple(layers),
        beta_syn=float(cfg["beta_syn"]),
        beta_mem=float(cfg["beta_mem"]),
        threshold=float(cfg["threshold"]),
    )
    train_cfg = TrainConfig(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["lr"]),
        surrogate_slope=float(cfg["kappa"]),
        weight_variance=float(cfg["prior_var"]),
        seed=int(cfg["seed"]),
    )
    cfg_hash = _hash_settings(cfg)
    data = (samples, labels)
    mode = str(cfg["mode"])
    if mode == "de":
        ensemble = train_deep_ensemble(data, arch, train_cfg, int(cfg["k"]))
        io.save_ensemble(cfg["out"], ensemble, cfg_hash)
        print(f"wrote {len(ensemble)}-member ensemble to {cfg['out']} (config {cfg_hash})")
    elif mode == "vi":
        posterior = train_vi(data, arch, train_cfg)
        io.save_posterior(cfg["out"], posterior, cfg_hash)
        print(f"wrote posterior to {cfg['out']} (config {cfg_hash})")
    elif mode == "single":
        model = train_single(data, arch, train_cfg)
        io.save_model(cfg["out"], model, cfg_hash)
        print(f"wrote model to {cfg['out']} (config {cfg_hash})")
    else:
        raise UsageError(f"unknown training mode {mode!r} (expected de, vi, or single)")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _resolve(
        args,
        {
            "data": None,
            "out": None,
            "ensemble": None,
            "posterior": None,
            "k": None,
            "sample_seed": 0,
            "checkpoints": "20,40,60,80",
        },
        optional=("ensemble", "posterior", "k"),
    )
    members = _load_members(cfg)
    if isinstance(members, tuple):
        posterior, k = members
        members = sample_ensemble(posterior, k, int(cfg["sample_seed"]))
    samples, labels = _dataset_arrays(cfg["data"])
    if np.any(labels < 0):
        raise UsageError("calibration data must be fully labeled")
    ckpts = _parse_ints(cfg["checkpoints"])
    if max(ckpts) > samples.shape[1]:
        raise UsageError(
            f"checkpoint {max(ckpts)} exceeds the data horizon {samples.shape[1]}"
        )
    _, losses = ensemble_scores(members, samples, np.asarray(ckpts, dtype=np.int64))
    table = calibration_from_losses(
        losses, labels, ckpts, members.arch.num_classes, model_hash=io.arch_hash(members.arch)
    )
    io.write_calibration_csv(cfg["out"], table, labels)
    print(
        f"wrote calibration table ({table.num_models} models x "
        f"{len(ckpts)} checkpoints x {table.num_examples} examples) to {cfg['out']}"
    )
    return 0


def cmd_decide(args) -> int:
    cfg = _resolve(
        args,
        {
            "data": None,
            "cal": None,
            "out": None,
            "ensemble": None,
            "posterior": None,
            "k": None,
            "sample_seed": 0,
            "merge": "cm",
            "r": None,
            "p_targ": 0.9,
            "i_th": 3,
            "baseline": None,
            "p_th": None,
            "cal_data": None,
            "dc_every_step": False,
        },
        optional=("ensemble", "posterior", "k", "r", "baseline", "p_th", "cal_data"),
    )
    members = _load_members(cfg)
    if isinstance(members, tuple):
        posterior, k = members
        members = sample_ensemble(posterior, k, int(cfg["sample_seed"]))
    table, _cal_labels = io.read_calibration_csv(cfg["cal"])
    if table.model_hash and table.model_hash != io.arch_hash(members.arch):
        raise UsageError(
            f"calibration table {cfg['cal']} was built for architecture hash "
            f"{table.model_hash}, ensemble has {io.arch_hash(members.arch)}"
        )
    if table.num_models != len(members):
        raise UsageError(
            f"calibration table has {table.num_models} models, ensemble has {len(members)}"
        )
    samples, labels = _dataset_arrays(cfg["data"])
    if samples.shape[2] != members.arch.num_inputs:
        raise UsageError(
            f"data has {samples.shape[2]} channels, models expect {members.arch.num_inputs}"
        )
    horizon = samples.shape[1]
    labeled = not np.any(labels < 0)
    cfg_hash = _hash_settings(cfg)

    if cfg["baseline"] == "dc":
        records, summary = _decide_dc(cfg, members, samples, labels, labeled, horizon, table)
    elif cfg["baseline"] is None:
        default_r = 1.0 if cfg["merge"] == "cm" else 45.0
        spike_cfg = SpikeCPConfig(
            p_targ=float(cfg["p_targ"]),
            checkpoints=table.checkpoints,
            set_size_threshold=int(cfg["i_th"]),
            merge=str(cfg["merge"]),
            pool_exponent=_parse_r(cfg["r"]) if cfg["r"] is not None else default_r,
        )
        _, losses = ensemble_scores(members, samples, np.asarray(table.checkpoints, dtype=np.int64))
        stop_idx, set_size, pvals = decide_batch(losses, table, spike_cfg)
        ckpts = np.asarray(table.checkpoints)
        records = []
        for i in range(samples.shape[0]):
            pset = [int(c) for c in np.flatnonzero(pvals[i, stop_idx[i]] > spike_cfg.alpha)]
            rec = {
                "example": i,
                "stop_time": int(ckpts[stop_idx[i]]),
                "set": pset,
                "set_size": int(set_size[i]),
                "p_values": [
                    [round(float(p), 6) for p in pvals[i, ti]]
                    for ti in range(stop_idx[i] + 1)
                ],
            }
            if labeled:
                rec["covered"] = bool(pvals[i, stop_idx[i], labels[i]] > spike_cfg.alpha)
            records.append(rec)
        summary = {
            "examples": len(records),
            "mean_latency": float(np.mean(ckpts[stop_idx]) / horizon),
            "mean_set_size": float(np.mean(set_size)),
        }
        if labeled:
            summary["coverage"] = float(np.mean([r["covered"] for r in records]))
    else:
        raise UsageError(f"unknown baseline {cfg['baseline']!r} (expected dc)")

    io.write_decisions_jsonl(cfg["out"], records, cfg_hash)
    print(io.canonical_json(summary))
    return 0


def _decide_dc(cfg, members, samples, labels, labeled, horizon, table):
    """Confidence-threshold baseline decisions (model-averaged members)."""
    if cfg["dc_every_step"]:
        times = list(range(1, horizon + 1))
    else:
        times = list(table.checkpoints)
    conf, _ = ensemble_scores(members, samples, np.asarray(times, dtype=np.int64))
    pooled = cm_pool(conf, 1.0, axis=0)  # (B, n_times, C)

    if cfg["p_th"] in (None, "auto"):
        if not cfg["cal_data"]:
            raise UsageError("--p-th auto needs --cal-data (a labeled calibration dataset)")
        cal_samples, cal_labels = _dataset_arrays(cfg["cal_data"])
        if np.any(cal_labels < 0):
            raise UsageError("calibration data must be fully labeled")
        cal_conf, _ = ensemble_scores(members, cal_samples, np.asarray(times, dtype=np.int64))
        p_th = calibrate_dc_threshold(
            cm_pool(cal_conf, 1.0, axis=0),
            cal_labels,
            float(cfg["p_targ"]),
            DEFAULT_DC_GRID,
            times,
            horizon,
        )
    else:
        p_th = float(cfg["p_th"])

    max_conf = pooled.max(axis=2)
    crossed = max_conf >= p_th
    any_cross = crossed.any(axis=1)
    idx = np.where(any_cross, crossed.argmax(axis=1), len(times) - 1)
    stop_times = np.where(any_cross, np.asarray(times)[idx], horizon)
    rows = np.arange(samples.shape[0])
    final = pooled[rows, idx]
    top_k = int(cfg["i_th"])
    top = np.argsort(-final, axis=1, kind="stable")[:, :top_k]
    records = []
    for i in rows:
        rec = {
            "example": int(i),
            "stop_time": int(stop_times[i]),
            "label": int(np.argmax(final[i])),
            "set": sorted(int(c) for c in top[i]),
            "confidence": round(float(max_conf[i, idx[i]]), 6),
        }
        if labeled:
            rec["covered"] = bool((top[i] == labels[i]).any())
            rec["correct"] = bool(np.argmax(final[i]) == labels[i])
        records.append(rec)
    summary = {
        "examples": len(records),
        "p_th": float(p_th),
        "mean_latency": float(np.mean(stop_times) / horizon),
    }
    if labeled:
        summary["coverage"] = float(np.mean([r["covered"] for r in records]))
        summary["accuracy"] = float(np.mean([r["correct"] for r in records]))
    return records, summary


def cmd_sweep(args) -> int:
    cfg = _resolve(
        args,
        {
            "param": None,
            "values": None,
            "pool": None,
            "ensemble": None,
            "posterior": None,
            "k": 6,
            "merge": "cm",
            "r": None,
            "p_targ": 0.9,
            "i_th": 3,
            "checkpoints": "20,40,60,80",
            "resamples": 20,
            "cal_size": 50,
            "test_size": None,
            "seed": 0,
            "resample_members": False,
            "include_dc": False,
            "out_prefix": "sweep",
        },
        optional=("ensemble", "posterior", "r", "test_size"),
    )
    param = str(cfg["param"]).replace("-", "_")
    if param not in ("p_targ", "k", "r"):
        raise UsageError(f"--param must be one of p-targ, k, r (got {cfg['param']!r})")
    values = _parse_ints(cfg["values"]) if param == "k" else [
        _parse_r(v) for v in str(cfg["values"]).split(",")
    ]
    models = _load_members(cfg)
    ensemble_size = None
    if isinstance(models, tuple):
        models, ensemble_size = models
    pool = _dataset_arrays(cfg["pool"])
    if np.any(pool[1] < 0):
        raise UsageError("sweep pool must be fully labeled")
    default_r = 1.0 if cfg["merge"] == "cm" else 45.0
    spike_cfg = SpikeCPConfig(
        p_targ=float(cfg["p_targ"]),
        checkpoints=tuple(_parse_ints(cfg["checkpoints"])),
        set_size_threshold=int(cfg["i_th"]),
        merge=str(cfg["merge"]),
        pool_exponent=_parse_r(cfg["r"]) if cfg["r"] is not None else default_r,
    )
    reports = sweep(
        param,
        values,
        models=models,
        pool=pool,
        cfg=spike_cfg,
        resamples=int(cfg["resamples"]),
        cal_size=int(cfg["cal_size"]),
        test_size=None if cfg["test_size"] is None else int(cfg["test_size"]),
        seed=int(cfg["seed"]),
        ensemble_size=ensemble_size,
        resample_members=bool(cfg["resample_members"]),
        include_dc=bool(cfg["include_dc"]),
    )
    cfg_hash = _hash_settings(cfg)
    prefix = str(cfg["out_prefix"])
    rows = []
    for value, report in zip(values, reports):
        for row in report.summary_rows():
            rows.append(dict(row, **{"k" if param == "k" else param: value}))
        report.write(f"{prefix}_records_{value}.csv", f"{prefix}_summary_{value}.csv")
    io.write_summary_csv(f"{prefix}_summary.csv", rows, cfg_hash)
    plot_sweep(reports, param, values, f"{prefix}_plot.svg")
    for row in rows:
        print(
            f"{row['mode']:>4} {param}={row[param] if param in row else row['k']:<6} "
            f"coverage={row['coverage']:.4f} latency={row['latency']:.4f} "
            f"set_size={row['set_size']:.3f}"
        )
    print(f"wrote {prefix}_summary.csv and {prefix}_plot.svg (config {cfg_hash})")
    return 0


def cmd_validate(args) -> int:
    cfg = _resolve(
        args,
        {
            "trials": 10000,
            "cal": 50,
            "alphas": "0.05,0.1,0.25,0.5",
            "k": 6,
            "merge_trials": 100000,
            "tolerance": 0.02,
            "seed": 0,
            "out": None,
        },
        optional=("out",),
    )
    alphas = _parse_floats(cfg["alphas"])
    tol = float(cfg["tolerance"])
    failures = []
    lines = []

    rates = validity_monte_carlo(int(cfg["trials"]), int(cfg["cal"]), alphas, seed=int(cfg["seed"]))
    for a, rate in rates.items():
        ok = rate <= a + tol
        lines.append(f"p-variable    alpha={a:<5} rate={rate:.4f} bound={a + tol:.4f} {'ok' if ok else 'FAIL'}")
        if not ok:
            failures.append(f"p-variable exceedance at alpha={a}: {rate:.4f}")

    exponents = [-math.inf, math.inf, 45.0]
    merged_rates = merging_validity_monte_carlo(
        int(cfg["merge_trials"]) // 10, int(cfg["k"]), alphas, exponents, seed=int(cfg["seed"]) + 1
    )
    for (r, a), rate in merged_rates.items():
        ok = rate <= a + tol
        lines.append(
            f"p-merging r={r:<6} alpha={a:<5} rate={rate:.4f} bound={a + tol:.4f} {'ok' if ok else 'FAIL'}"
        )
        if not ok:
            failures.append(f"p-merging exceedance at r={r}, alpha={a}: {rate:.4f}")

    rng = np.random.default_rng(np.random.SeedSequence(int(cfg["seed"]) + 2))
    p = rng.random((int(cfg["merge_trials"]), int(cfg["k"])))
    dominated = pm_pool(p, 45.0, axis=1) >= p.max(axis=1)
    ok = bool(dominated.all())
    lines.append(f"p-merging r=45 dominates max on {p.shape[0]} draws: {'ok' if ok else 'FAIL'}")
    if not ok:
        failures.append("r=45 merge fell below the member maximum")

    text = "\n".join(lines)
    print(text)
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            fh.write(text + "\n")
    if failures:
        print("\n".join(f"violation: {f}" for f in failures), file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikecp",
        description="Conformal early-exit inference for spiking-network ensembles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic labeled dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--base-rate", dest="base_rate", type=float)
    p.add_argument("--active-rate", dest="active_rate", type=float)
    p.add_argument("--difficulty", help="lo,hi difficulty range")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model, ensemble, or posterior")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["de", "vi", "single"])
    p.add_argument("--k", type=int)
    p.add_argument("--hidden", help="comma-separated hidden layer sizes")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--prior-var", dest="prior_var", type=float)
    p.add_argument("--beta-syn", dest="beta_syn", type=float)
    p.add_argument("--beta-mem", dest="beta_mem", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="score a labeled dataset into a calibration table")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ensemble")
    p.add_argument("--posterior")
    p.add_argument("--k", type=int)
    p.add_argument("--sample-seed", dest="sample_seed", type=int)
    p.add_argument("--checkpoints")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("decide", help="adaptive decisions for a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--cal", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ensemble")
    p.add_argument("--posterior")
    p.add_argument("--k", type=int)
    p.add_argument("--sample-seed", dest="sample_seed", type=int)
    p.add_argument("--merge", choices=["cm", "pm"])
    p.add_argument("--r", help="pooling exponent (number, inf, or -inf)")
    p.add_argument("--p-targ", dest="p_targ", type=float)
    p.add_argument("--i-th", dest="i_th", type=int)
    p.add_argument("--baseline", choices=["dc"])
    p.add_argument("--p-th", dest="p_th", help="confidence threshold or 'auto'")
    p.add_argument("--cal-data", dest="cal_data", help="labeled dataset for --p-th auto")
    p.add_argument("--dc-every-step", dest="dc_every_step", action="store_const", const=True)
    p.set_defaults(func=cmd_decide)

    p = sub.add_parser("sweep", help="parameter sweep with summary table and plot")
    _add_common(p)
    p.add_argument("--param", help="one of: p-targ, k, r")
    p.add_argument("--values", help="comma-separated values")
    p.add_argument("--pool", help="labeled dataset resampled into cal/test")
    p.add_argument("--ensemble")
    p.add_argument("--posterior")
    p.add_argument("--k", type=int)
    p.add_argument("--merge", choices=["cm", "pm"])
    p.add_argument("--r")
    p.add_argument("--p-targ", dest="p_targ", type=float)
    p.add_argument("--i-th", dest="i_th", type=int)
    p.add_argument("--checkpoints")
    p.add_argument("--resamples", type=int)
    p.add_argument("--cal-size", dest="cal_size", type=int)
    p.add_argument("--test-size", dest="test_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resample-members", dest="resample_members", action="store_const", const=True)
    p.add_argument("--include-dc", dest="include_dc", action="store_const", const=True)
    p.add_argument("--out-prefix", dest="out_prefix")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="Monte Carlo p-variable and p-merging checks")
    _add_common(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--cal", type=int)
    p.add_argument("--alphas")
    p.add_argument("--k", type=int)
    p.add_argument("--merge-trials", dest="merge_trials", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
