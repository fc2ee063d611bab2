"""Artifact files: models, ensembles, posteriors, datasets, calibration
tables, decision records, summary tables.

Binary artifacts are numpy ``.npz`` containers with a JSON metadata entry
(bit-exact round trips for float64 payloads). Tabular artifacts are plain
CSV with a single ``#``-prefixed JSON header line. Every artifact embeds a
format version and, where applicable, the hash of the configuration that
produced it plus the architecture hash used for compatibility checks.
"""

from __future__ import annotations

import csv
import hashlib
import io as _stdio
import json
from pathlib import Path

import numpy as np

from spikecp.conformal import CalibrationTable
from spikecp.snn import Architecture, InputSequence, ModelParams, ScoreTrace
from spikecp.training import Ensemble, VariationalPosterior

FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    """Stable short hash of a configuration mapping."""
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def arch_hash(arch: Architecture) -> str:
    return config_hash(arch.descriptor())


def _write_npz(path, meta: dict, **arrays) -> None:
    meta = dict(meta, format_version=FORMAT_VERSION)
    np.savez_compressed(path, _meta=np.frombuffer(canonical_json(meta).encode(), dtype=np.uint8), **arrays)


def _read_npz(path, expected_kind: str):
    with np.load(path) as data:
        meta = json.loads(bytes(data["_meta"]).decode())
        if meta.get("kind") != expected_kind:
            raise ValueError(
                f"{path} holds a {meta.get('kind')!r} artifact, expected {expected_kind!r}"
            )
        arrays = {k: data[k] for k in data.files if k != "_meta"}
    return meta, arrays


def _arch_from_meta(meta: dict) -> Architecture:
    return Architecture(
        layer_sizes=tuple(meta["layer_sizes"]),
        beta_syn=meta["beta_syn"],
        beta_mem=meta["beta_mem"],
        threshold=meta["threshold"],
    )


def save_model(path, model: ModelParams, cfg_hash: str = "") -> None:
    meta = dict(model.arch.descriptor(), kind="model", config_hash=cfg_hash,
                arch_hash=arch_hash(model.arch))
    _write_npz(path, meta, theta=model.theta)


def load_model(path) -> ModelParams:
    meta, arrays = _read_npz(path, "model")
    return ModelParams(arch=_arch_from_meta(meta), theta=arrays["theta"])


def save_ensemble(path, ensemble: Ensemble, cfg_hash: str = "") -> None:
    meta = dict(
        ensemble.arch.descriptor(),
        kind="ensemble",
        provenance=ensemble.provenance,
        seeds=list(ensemble.seeds),
        config_hash=cfg_hash,
        arch_hash=arch_hash(ensemble.arch),
    )
    members = np.stack([m.theta for m in ensemble.members])
    _write_npz(path, meta, members=members)


def load_ensemble(path) -> Ensemble:
    meta, arrays = _read_npz(path, "ensemble")
    arch = _arch_from_meta(meta)
    members = tuple(ModelParams(arch=arch, theta=row) for row in arrays["members"])
    return Ensemble(members=members, provenance=meta["provenance"], seeds=tuple(meta["seeds"]))


def save_posterior(path, posterior: VariationalPosterior, cfg_hash: str = "") -> None:
    meta = dict(
        posterior.arch.descriptor(),
        kind="posterior",
        config_hash=cfg_hash,
        arch_hash=arch_hash(posterior.arch),
    )
    _write_npz(path, meta, mu=posterior.mu, rho=posterior.rho)


def load_posterior(path) -> VariationalPosterior:
    meta, arrays = _read_npz(path, "posterior")
    return VariationalPosterior(arch=_arch_from_meta(meta), mu=arrays["mu"], rho=arrays["rho"])


def save_dataset(path, examples: list[InputSequence], spec_meta: dict | None = None) -> None:
    labels = np.asarray(
        [-1 if ex.label is None else int(ex.label) for ex in examples], dtype=np.int64
    )
    samples = np.stack([ex.samples for ex in examples])
    meta = {"kind": "dataset", "spec": spec_meta or {}}
    _write_npz(path, meta, samples=samples, labels=labels)


def load_dataset(path) -> list[InputSequence]:
    _, arrays = _read_npz(path, "dataset")
    return [
        InputSequence(samples=s, label=None if lab < 0 else int(lab))
        for s, lab in zip(arrays["samples"], arrays["labels"])
    ]


def read_artifact_meta(path) -> dict:
    with np.load(path) as data:
        return json.loads(bytes(data["_meta"]).decode())


# ---------------------------------------------------------------------------
# tabular artifacts


def _header_line(header: dict) -> str:
    return "# " + canonical_json(dict(header, format_version=FORMAT_VERSION))


def _parse_header(line: str) -> dict:
    if not line.startswith("# "):
        raise ValueError("missing JSON header line")
    return json.loads(line[2:])


def write_calibration_csv(path, table: CalibrationTable, labels: np.ndarray) -> None:
    """Columnar calibration table keyed by (model, checkpoint, example, class).

    The class key is the example's true label; the value is that label's
    log-loss under the given model at the given checkpoint.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size != table.num_examples:
        raise ValueError("one label per calibration example is required")
    header = {
        "kind": "calibration",
        "n_cal": table.num_examples,
        "n_models": table.num_models,
        "checkpoints": list(table.checkpoints),
        "n_classes": table.num_classes,
        "model_hash": table.model_hash,
    }
    with open(path, "w", newline="") as fh:
        fh.write(_header_line(header) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["model", "checkpoint", "example", "class", "loss"])
        for k in range(table.num_models):
            for ti, t in enumerate(table.checkpoints):
                for i in range(table.num_examples):
                    # plain-float repr round-trips float64 exactly
                    writer.writerow([k, t, i, int(labels[i]), repr(float(table.losses[k, ti, i]))])


def read_calibration_csv(path) -> tuple[CalibrationTable, np.ndarray]:
    with open(path, newline="") as fh:
        header = _parse_header(fh.readline())
        if header.get("kind") != "calibration":
            raise ValueError(f"{path} is not a calibration table")
        reader = csv.reader(fh)
        next(reader)  # column names
        ckpts = [int(t) for t in header["checkpoints"]]
        losses = np.empty((header["n_models"], len(ckpts), header["n_cal"]))
        labels = np.empty(header["n_cal"], dtype=np.int64)
        ckpt_index = {t: ti for ti, t in enumerate(ckpts)}
        for row in reader:
            k, t, i, cls, loss = int(row[0]), int(row[1]), int(row[2]), int(row[3]), float(row[4])
            losses[k, ckpt_index[t], i] = loss
            labels[i] = cls
    table = CalibrationTable(
        checkpoints=tuple(ckpts),
        losses=losses,
        num_classes=header["n_classes"],
        model_hash=header.get("model_hash", ""),
    )
    return table, labels


def write_scoretrace_csv(path, traces: list[ScoreTrace], model_hash: str = "") -> None:
    """Score traces of one example under each model, keyed by
    (model, checkpoint, class)."""
    header = {
        "kind": "scoretrace",
        "n_models": len(traces),
        "checkpoints": list(traces[0].checkpoints),
        "n_classes": traces[0].num_classes,
        "model_hash": model_hash,
    }
    with open(path, "w", newline="") as fh:
        fh.write(_header_line(header) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["model", "checkpoint", "class", "loss"])
        for k, tr in enumerate(traces):
            for ti, t in enumerate(tr.checkpoints):
                for c in range(tr.num_classes):
                    writer.writerow([k, t, c, repr(float(tr.losses[ti, c]))])


def read_scoretrace_csv(path) -> np.ndarray:
    """Losses array (n_models, n_checkpoints, n_classes) from a trace file."""
    with open(path, newline="") as fh:
        header = _parse_header(fh.readline())
        if header.get("kind") != "scoretrace":
            raise ValueError(f"{path} is not a score-trace file")
        reader = csv.reader(fh)
        next(reader)
        ckpt_index = {int(t): ti for ti, t in enumerate(header["checkpoints"])}
        losses = np.empty((header["n_models"], len(ckpt_index), header["n_classes"]))
        for row in reader:
            losses[int(row[0]), ckpt_index[int(row[1])], int(row[2])] = float(row[3])
    return losses


def write_summary_csv(path, rows: list[dict], cfg_hash: str) -> None:
    """Delimited summary table with a config-hash header."""
    columns = ["mode", "k", "r", "p_targ", "coverage", "latency", "set_size", "ci_halfwidth"]
    buf = _stdio.StringIO()
    buf.write(_header_line({"kind": "summary", "config_hash": cfg_hash}) + "\n")
    writer = csv.writer(buf)
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format_cell(row[c]) for c in columns])
    Path(path).write_text(buf.getvalue())


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def read_summary_csv(path) -> tuple[list[dict], str]:
    with open(path, newline="") as fh:
        header = _parse_header(fh.readline())
        reader = csv.DictReader(fh)
        rows = list(reader)
    return rows, header.get("config_hash", "")


def write_decisions_jsonl(path, records: list[dict], cfg_hash: str) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json({"kind": "decisions", "config_hash": cfg_hash}) + "\n")
        for rec in records:
            fh.write(canonical_json(rec) + "\n")


def read_decisions_jsonl(path) -> tuple[list[dict], dict]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        records = [json.loads(line) for line in fh if line.strip()]
    return records, header
