"""Synthetic data, experiment runner, and statistical validity suites.

Datasets are drawn i.i.d. from a class-conditional Bernoulli spike model
(exchangeability holds by construction), so the coverage guarantee of the
conformal predictor is directly testable by Monte Carlo: resample
calibration/test splits, decide every test example, and compare empirical
coverage against the target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from spikecp import io
from spikecp.conformal import (
    CalibrationTable,
    SpikeCPConfig,
    calibrate_dc_threshold,
    cm_pool,
    merged_test_losses,
    pm_pool,
)
from spikecp.snn import InputSequence, confidence, forward_counts, losses_from_confidence
from spikecp.training import Ensemble, VariationalPosterior, derive_seed, sample_ensemble

DEFAULT_DC_GRID = np.round(np.arange(0.0, 1.0, 0.01), 2)


def make_class_rates(
    num_classes: int, num_channels: int, base_rate: float, active_rate: float
) -> np.ndarray:
    """Per-class firing-rate patterns: each class elevates one disjoint
    channel group above the shared base rate."""
    rates = np.full((num_classes, num_channels), base_rate)
    group = num_channels // num_classes
    for c in range(num_classes):
        rates[c, c * group : (c + 1) * group] = active_rate
    return rates


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator for exchangeable spiking classification data.

    Each example draws a uniform label, a difficulty scalar from
    ``difficulty_range``, and Bernoulli spikes at ``rate * difficulty`` per
    channel and step. Difficulty scales signal-to-noise, so early stopping
    has something to adapt to.
    """

    num_classes: int = 4
    num_channels: int = 40
    num_steps: int = 80
    base_rate: float = 0.1
    active_rate: float = 0.3
    difficulty_range: tuple[float, float] = (0.3, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.num_channels < 1 or self.num_steps < 1:
            raise ValueError("spec dimensions out of range")
        if not (0.0 <= self.base_rate <= 1.0 and 0.0 <= self.active_rate <= 1.0):
            raise ValueError("rates must lie in [0, 1]")
        lo, hi = self.difficulty_range
        if not 0.0 <= lo <= hi:
            raise ValueError("difficulty range must be ordered and non-negative")

    @property
    def class_rates(self) -> np.ndarray:
        return make_class_rates(
            self.num_classes, self.num_channels, self.base_rate, self.active_rate
        )

    def descriptor(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "num_channels": self.num_channels,
            "num_steps": self.num_steps,
            "base_rate": self.base_rate,
            "active_rate": self.active_rate,
            "difficulty_range": list(self.difficulty_range),
            "seed": self.seed,
        }


def generate_batch(spec: SyntheticSpec, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Array form of :func:`generate_dataset`: (count, T, N) samples, labels."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    labels = rng.integers(0, spec.num_classes, size=count)
    difficulty = rng.uniform(*spec.difficulty_range, size=count)
    rates = spec.class_rates[labels] * difficulty[:, None]  # (count, N)
    probs = np.clip(rates, 0.0, 1.0)[:, None, :]
    samples = (
        rng.random((count, spec.num_steps, spec.num_channels)) < probs
    ).astype(np.float64)
    return samples, labels


def generate_dataset(spec: SyntheticSpec, count: int) -> list[InputSequence]:
    samples, labels = generate_batch(spec, count)
    return [InputSequence(samples=s, label=int(l)) for s, l in zip(samples, labels)]


def stack_examples(examples: list[InputSequence]) -> tuple[np.ndarray, np.ndarray]:
    samples = np.stack([ex.samples for ex in examples])
    labels = np.asarray(
        [-1 if ex.label is None else ex.label for ex in examples], dtype=np.int64
    )
    return samples, labels


def split_indices(pool_size: int, cal_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if cal_size >= pool_size:
        raise ValueError(f"calibration size {cal_size} must be below pool size {pool_size}")
    if cal_size < 1:
        raise ValueError("calibration size must be at least 1")
    perm = np.random.default_rng(np.random.SeedSequence(seed)).permutation(pool_size)
    return np.sort(perm[:cal_size]), np.sort(perm[cal_size:])


def split_cal_test(
    pool: list[InputSequence], cal_size: int, seed: int
) -> tuple[list[InputSequence], list[InputSequence]]:
    """Uniform without-replacement split into (calibration, test)."""
    cal_idx, test_idx = split_indices(len(pool), cal_size, seed)
    return [pool[i] for i in cal_idx], [pool[i] for i in test_idx]


# ---------------------------------------------------------------------------
# vectorized scoring and decisions


def ensemble_scores(
    ensemble: Ensemble, samples: np.ndarray, checkpoints
) -> tuple[np.ndarray, np.ndarray]:
    """Confidences and losses of every example under every member.

    Returns arrays of shape (K, B, n_checkpoints, C).
    """
    confs = []
    for member in ensemble.members:
        counts = forward_counts(samples, member, checkpoints)
        confs.append(confidence(counts))
    conf = np.stack(confs)
    return conf, losses_from_confidence(conf)


def calibration_from_losses(
    losses: np.ndarray, labels: np.ndarray, checkpoints, num_classes: int, model_hash: str = ""
) -> CalibrationTable:
    """Calibration table from per-member all-class losses (K, n, T, C)."""
    idx = np.arange(labels.size)
    # mixed slice/fancy indexing puts the broadcast axis first: (n, K, T)
    true_losses = losses[:, idx, :, labels[idx]]
    return CalibrationTable(
        checkpoints=tuple(int(t) for t in checkpoints),
        losses=np.transpose(true_losses, (1, 2, 0)).copy(),
        num_classes=num_classes,
        model_hash=model_hash,
    )


def _batch_p_values(test_losses: np.ndarray, cal_losses: np.ndarray) -> np.ndarray:
    """p-variables of many test losses against one calibration vector."""
    cal_sorted = np.sort(cal_losses)
    count = cal_sorted.size - np.searchsorted(cal_sorted, test_losses, side="left")
    return (1.0 + count) / (cal_sorted.size + 1.0)


def decide_batch(
    losses: np.ndarray,
    cal: CalibrationTable,
    cfg: SpikeCPConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized adaptive decisions for a batch of examples.

    ``losses`` has shape (K, B, n_checkpoints, C). Returns
    (stop_index, set_size, p_values) with p_values of shape
    (B, n_checkpoints, C). Matches :func:`spikecp.conformal.spikecp_decide`
    example by example.
    """
    n_ckpt = len(cfg.checkpoints)
    if cfg.merge == "cm":
        pooled = merged_test_losses(losses, cfg.pool_exponent)
        cal_pooled = cal.merged_losses(cfg.pool_exponent)
        pvals = np.empty_like(pooled)
        for ti in range(n_ckpt):
            pvals[:, ti, :] = _batch_p_values(pooled[:, ti, :], cal_pooled[ti])
    else:
        member_p = np.empty_like(losses)
        for k in range(losses.shape[0]):
            for ti in range(n_ckpt):
                member_p[k, :, ti, :] = _batch_p_values(
                    losses[k, :, ti, :], cal.losses[k, ti]
                )
        pvals = pm_pool(member_p, cfg.pool_exponent, axis=0)
    sizes = (pvals > cfg.alpha).sum(axis=2)  # (B, n_checkpoints)
    small_enough = sizes <= cfg.set_size_threshold
    stopped = small_enough.any(axis=1)
    stop_index = np.where(stopped, small_enough.argmax(axis=1), n_ckpt - 1)
    set_size = sizes[np.arange(sizes.shape[0]), stop_index]
    return stop_index, set_size, pvals


@dataclass
class ExperimentReport:
    """Metrics and raw per-example records of one experiment configuration."""

    config: dict
    records: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return io.config_hash(self.config)

    def _method_mask(self, method: str) -> np.ndarray:
        return self.records["method"] == method

    def methods(self) -> list[str]:
        seen = []
        for m in self.records["method"]:
            if m not in seen:
                seen.append(m)
        return seen

    def summary_row(self, method: str = "spikecp") -> dict:
        mask = self._method_mask(method)
        horizon = self.config["horizon"]
        covered = self.records["covered"][mask]
        latency = self.records["stop_time"][mask] / horizon
        sizes = self.records["set_size"][mask]
        resample = self.records["resample"][mask]
        per_resample = np.array(
            [covered[resample == j].mean() for j in np.unique(resample)]
        )
        ci = 0.0
        if per_resample.size > 1:
            ci = 1.96 * per_resample.std(ddof=1) / np.sqrt(per_resample.size)
        mode = self.config["merge"] if method == "spikecp" else "dc"
        return {
            "mode": mode,
            "k": self.config["k"],
            "r": self.config["r"],
            "p_targ": self.config["p_targ"],
            "coverage": float(covered.mean()),
            "latency": float(latency.mean()),
            "set_size": float(sizes.mean()),
            "ci_halfwidth": float(ci),
        }

    def summary_rows(self) -> list[dict]:
        return [self.summary_row(m) for m in self.methods()]

    def write(self, records_path, summary_path) -> None:
        rows = [
            {
                "method": str(self.records["method"][i]),
                "resample": int(self.records["resample"][i]),
                "example": int(self.records["example"][i]),
                "stop_time": int(self.records["stop_time"][i]),
                "set_size": int(self.records["set_size"][i]),
                "covered": int(self.records["covered"][i]),
            }
            for i in range(self.records["method"].size)
        ]
        import csv

        with open(records_path, "w", newline="") as fh:
            fh.write(
                "# "
                + io.canonical_json(
                    {"kind": "records", "config": self.config, "config_hash": self.config_hash}
                )
                + "\n"
            )
            writer = csv.DictWriter(
                fh, fieldnames=["method", "resample", "example", "stop_time", "set_size", "covered"]
            )
            writer.writeheader()
            writer.writerows(rows)
        io.write_summary_csv(summary_path, self.summary_rows(), self.config_hash)

    @classmethod
    def read(cls, records_path) -> "ExperimentReport":
        import csv
        import json

        with open(records_path, newline="") as fh:
            header = json.loads(fh.readline()[2:])
            reader = csv.DictReader(fh)
            rows = list(reader)
        records = {
            "method": np.array([r["method"] for r in rows]),
            "resample": np.array([int(r["resample"]) for r in rows], dtype=np.int64),
            "example": np.array([int(r["example"]) for r in rows], dtype=np.int64),
            "stop_time": np.array([int(r["stop_time"]) for r in rows], dtype=np.int64),
            "set_size": np.array([int(r["set_size"]) for r in rows], dtype=np.int64),
            "covered": np.array([bool(int(r["covered"])) for r in rows]),
        }
        return cls(config=header["config"], records=records)


def _resolve_members(models, ensemble_size, resample_seed) -> Ensemble:
    if isinstance(models, Ensemble):
        return models if ensemble_size is None else models.take(ensemble_size)
    if isinstance(models, VariationalPosterior):
        if ensemble_size is None:
            raise ValueError("ensemble_size is required when deciding from a posterior")
        return sample_ensemble(models, ensemble_size, resample_seed)
    raise TypeError(f"expected an Ensemble or VariationalPosterior, got {type(models)!r}")


def run_experiment(
    models,
    pool,
    cfg: SpikeCPConfig,
    *,
    resamples: int = 20,
    cal_size: int = 50,
    test_size: int | None = None,
    seed: int = 0,
    ensemble_size: int | None = None,
    resample_members: bool = False,
    include_dc: bool = False,
    dc_grid: np.ndarray | None = None,
    horizon: int | None = None,
) -> ExperimentReport:
    """Coverage/latency experiment over repeated calibration/test splits.

    ``models`` is a fixed :class:`Ensemble` or a :class:`VariationalPosterior`
    (sampled once, or per realization with ``resample_members=True``). Every
    resample splits the pool, builds the calibration table, and decides
    ``test_size`` test examples (all remaining ones when None); the optional
    confidence-threshold baseline (``include_dc``) is calibrated per resample
    on model-averaged confidences.
    """
    if resamples < 1:
        raise ValueError("at least one resample is required")
    samples, labels = pool if isinstance(pool, tuple) else stack_examples(pool)
    if np.any(labels < 0):
        raise ValueError("experiment pools must be fully labeled")
    n_pool = samples.shape[0]
    if test_size is not None and cal_size + test_size > n_pool:
        raise ValueError(
            f"cal_size={cal_size} plus test_size={test_size} exceeds the pool ({n_pool})"
        )
    horizon = int(horizon if horizon is not None else samples.shape[1])
    dc_grid = DEFAULT_DC_GRID if dc_grid is None else np.asarray(dc_grid, dtype=np.float64)

    ensemble = _resolve_members(models, ensemble_size, derive_seed(seed, 11, 0))
    # redrawing members only makes sense when they come from a posterior
    resample_members = resample_members and isinstance(models, VariationalPosterior)
    conf = losses = None
    ckpts = np.asarray(cfg.checkpoints, dtype=np.int64)

    out: dict[str, list] = {k: [] for k in ("method", "resample", "example", "stop_time", "set_size", "covered")}

    def record(method, j, examples, stop_times, sizes, covered):
        out["method"].extend([method] * examples.size)
        out["resample"].extend([j] * examples.size)
        out["example"].extend(examples.tolist())
        out["stop_time"].extend(np.asarray(stop_times).tolist())
        out["set_size"].extend(np.asarray(sizes).tolist())
        out["covered"].extend(np.asarray(covered).tolist())

    for j in range(resamples):
        if conf is None or resample_members:
            if resample_members and j > 0:
                ensemble = _resolve_members(models, ensemble_size, derive_seed(seed, 11, j))
            conf, losses = ensemble_scores(ensemble, samples, ckpts)
        cal_idx, test_idx = split_indices(n_pool, cal_size, derive_seed(seed, 10, j))
        if test_size is not None:
            # the split permutation is uniform, so any fixed-size prefix of
            # the test part is again a uniform draw
            rng = np.random.default_rng(np.random.SeedSequence(derive_seed(seed, 12, j)))
            test_idx = np.sort(rng.permutation(test_idx)[:test_size])
        cal = calibration_from_losses(
            losses[:, cal_idx], labels[cal_idx], cfg.checkpoints, conf.shape[-1]
        )
        stop_idx, set_size, pvals = decide_batch(losses[:, test_idx], cal, cfg)
        test_labels = labels[test_idx]
        rows = np.arange(test_idx.size)
        covered = pvals[rows, stop_idx, test_labels] > cfg.alpha
        record("spikecp", j, test_idx, ckpts[stop_idx], set_size, covered)

        if include_dc:
            pooled = cm_pool(conf, 1.0, axis=0)  # model averaging
            p_th = calibrate_dc_threshold(
                pooled[cal_idx], labels[cal_idx], cfg.p_targ, dc_grid, cfg.checkpoints, horizon
            )
            max_conf = pooled[test_idx].max(axis=2)
            crossed = max_conf >= p_th
            any_cross = crossed.any(axis=1)
            dc_idx = np.where(any_cross, crossed.argmax(axis=1), len(cfg.checkpoints) - 1)
            dc_time = np.where(any_cross, ckpts[dc_idx], horizon)
            final = pooled[test_idx, dc_idx]
            top = np.argsort(-final, axis=1, kind="stable")[:, : cfg.set_size_threshold]
            dc_cov = (top == test_labels[:, None]).any(axis=1)
            record("dc", j, test_idx, dc_time, np.full(test_idx.size, top.shape[1]), dc_cov)

    config = {
        "p_targ": cfg.p_targ,
        "checkpoints": list(cfg.checkpoints),
        "i_th": cfg.set_size_threshold,
        "merge": cfg.merge,
        "r": cfg.pool_exponent,
        "resamples": resamples,
        "cal_size": cal_size,
        "test_size": test_size,
        "seed": seed,
        "k": len(ensemble),
        "provenance": ensemble.provenance,
        "resample_members": resample_members,
        "n_pool": n_pool,
        "horizon": horizon,
    }
    records = {
        "method": np.array(out["method"]),
        "resample": np.array(out["resample"], dtype=np.int64),
        "example": np.array(out["example"], dtype=np.int64),
        "stop_time": np.array(out["stop_time"], dtype=np.int64),
        "set_size": np.array(out["set_size"], dtype=np.int64),
        "covered": np.array(out["covered"], dtype=bool),
    }
    return ExperimentReport(config=config, records=records)


def validity_monte_carlo(
    trials: int, n_cal: int, alphas, seed: int = 0
) -> dict[float, float]:
    """Empirical ``Pr(p <= alpha)`` with i.i.d. continuous losses.

    Each trial draws one test loss and ``n_cal`` calibration losses from a
    standard normal; validity requires every rate to stay at or below its
    alpha (up to Monte Carlo noise).
    """
    if trials < 1000:
        raise ValueError("use at least 1000 trials for a meaningful rate")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    draws = rng.standard_normal((trials, n_cal + 1))
    count = (draws[:, :1] <= draws[:, 1:]).sum(axis=1)
    p = (1.0 + count) / (n_cal + 1.0)
    return {float(a): float(np.mean(p <= a)) for a in alphas}


def merging_validity_monte_carlo(
    trials: int, k: int, alphas, exponents, seed: int = 0
) -> dict[tuple[float, float], float]:
    """Empirical exceedance of merged p-variables built from i.i.d. uniform
    (hence valid) member p-variables, keyed by (exponent, alpha)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    u = rng.random((trials, k))
    rates = {}
    for r in exponents:
        merged = pm_pool(u, r, axis=1)
        for a in alphas:
            rates[(float(r), float(a))] = float(np.mean(merged <= a))
    return rates


SWEEPABLE = ("p_targ", "k", "r")


def sweep(parameter: str, values, *, models, pool, cfg: SpikeCPConfig, **kwargs) -> list[ExperimentReport]:
    """One report per swept value; everything else (including seeds) fixed."""
    if parameter not in SWEEPABLE:
        raise ValueError(f"unknown sweep parameter {parameter!r}; expected one of {SWEEPABLE}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    reports = []
    for value in values:
        run_cfg = cfg
        run_models = models
        run_kwargs = dict(kwargs)
        if parameter == "p_targ":
            run_cfg = cfg.with_(p_targ=float(value))
        elif parameter == "r":
            run_cfg = cfg.with_(pool_exponent=float(value))
        else:
            if isinstance(models, Ensemble):
                run_models = models.take(int(value))
            else:
                run_kwargs["ensemble_size"] = int(value)
        reports.append(run_experiment(run_models, pool, run_cfg, **run_kwargs))
    return reports


def plot_sweep(reports: list[ExperimentReport], parameter: str, values, path) -> None:
    """Static vector-graphics summary: coverage and latency vs the swept value."""
    import matplotlib

    matplotlib.use("svg")
    matplotlib.rcParams["svg.hashsalt"] = "spikecp"
    import matplotlib.pyplot as plt

    values = list(values)
    methods = reports[0].methods()
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for method in methods:
        rows = [rep.summary_row(method) for rep in reports]
        label = rows[0]["mode"]
        axes[0].plot(values, [r["coverage"] for r in rows], marker="o", label=label)
        axes[1].plot(values, [r["latency"] for r in rows], marker="o", label=label)
    targets = [rep.config["p_targ"] for rep in reports]
    if parameter == "p_targ":
        axes[0].plot(values, targets, linestyle="--", color="gray", label="target")
    else:
        axes[0].axhline(targets[0], linestyle="--", color="gray", label="target")
    axes[0].set_xlabel(parameter)
    axes[0].set_ylabel("coverage")
    axes[0].legend()
    axes[1].set_xlabel(parameter)
    axes[1].set_ylabel("normalized latency")
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
