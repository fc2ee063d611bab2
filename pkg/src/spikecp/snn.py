"""Discrete-time spike response network with rate decoding.

A network is a stack of fully connected spiking layers. Each neuron keeps a
synaptic trace (first-order filter of its weighted input, decay ``beta_syn``)
and a membrane potential (first-order filter of the trace, decay
``beta_mem``) with soft reset: the threshold is subtracted whenever the
neuron spiked on the previous step. Classification confidence is the softmax
of the read-out spike counts accumulated so far, and the per-class loss is
the corresponding log-loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spikecp import backend

DEFAULT_BETA_SYN = 0.9
DEFAULT_BETA_MEM = 0.9
DEFAULT_THRESHOLD = 1.0

# Softmax output is mathematically positive; the clamp only guards against
# underflow on fused/pooled paths before the logarithm.
CONFIDENCE_FLOOR = 1e-12


@dataclass(frozen=True)
class Architecture:
    """Layer sizes ``[N, H1, ..., C]`` plus shared neuron hyperparameters."""

    layer_sizes: tuple[int, ...]
    beta_syn: float = DEFAULT_BETA_SYN
    beta_mem: float = DEFAULT_BETA_MEM
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("architecture needs at least input and output layers")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive: {self.layer_sizes}")
        if not (0.0 < self.beta_syn < 1.0 and 0.0 < self.beta_mem < 1.0):
            raise ValueError("decay factors must lie strictly inside (0, 1)")
        if self.threshold <= 0.0:
            raise ValueError("firing threshold must be positive")

    @property
    def num_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        """Per-layer weight shapes ``(fan_out, fan_in)``."""
        sizes = self.layer_sizes
        return tuple((sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1))

    @property
    def param_count(self) -> int:
        return sum(o * i for o, i in self.layer_shapes)

    def descriptor(self) -> dict:
        """JSON-serializable description, stable across sessions."""
        return {
            "layer_sizes": list(self.layer_sizes),
            "beta_syn": self.beta_syn,
            "beta_mem": self.beta_mem,
            "threshold": self.threshold,
        }


@dataclass(frozen=True)
class ModelParams:
    """One network: an architecture and its flat synaptic weight vector."""

    arch: Architecture
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim != 1 or theta.size != self.arch.param_count:
            raise ValueError(
                f"weight vector has length {theta.size}, "
                f"architecture expects {self.arch.param_count}"
            )
        if not np.all(np.isfinite(theta)):
            raise ValueError("weight vector contains non-finite entries")
        object.__setattr__(self, "theta", theta)

    def layer_weights(self) -> list[np.ndarray]:
        """Per-layer ``(fan_out, fan_in)`` views into the flat vector."""
        return unflatten_weights(self.theta, self.arch)


def unflatten_weights(theta: np.ndarray, arch: Architecture) -> list[np.ndarray]:
    weights = []
    offset = 0
    for n_out, n_in in arch.layer_shapes:
        block = theta[offset : offset + n_out * n_in]
        weights.append(np.ascontiguousarray(block.reshape(n_out, n_in)))
        offset += n_out * n_in
    return weights


def flatten_weights(weights: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(w, dtype=np.float64).ravel() for w in weights])


@dataclass(frozen=True)
class InputSequence:
    """One classification example: a T x N time-sample matrix, optional label."""

    samples: np.ndarray
    label: int | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
            raise ValueError(f"samples must be a T x N matrix, got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)

    @property
    def num_steps(self) -> int:
        return self.samples.shape[0]


@dataclass
class NeuronState:
    """Mutable per-layer state of one forward pass (all-zero at reset)."""

    trace: np.ndarray
    potential: np.ndarray
    last_spike: np.ndarray

    @classmethod
    def zeros(cls, num_neurons: int) -> "NeuronState":
        return cls(
            trace=np.zeros(num_neurons),
            potential=np.zeros(num_neurons),
            last_spike=np.zeros(num_neurons),
        )


def srm_step(
    state: NeuronState,
    input_spikes: np.ndarray,
    weights: np.ndarray,
    beta_syn: float = DEFAULT_BETA_SYN,
    beta_mem: float = DEFAULT_BETA_MEM,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[NeuronState, np.ndarray]:
    """Advance one layer by one time step.

    Update order: trace first, then potential (with soft reset gated by the
    previous spike), then the threshold test.
    """
    input_spikes = np.asarray(input_spikes, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or input_spikes.shape != (weights.shape[1],):
        raise ValueError(
            f"input of shape {input_spikes.shape} does not match "
            f"layer fan-in {weights.shape}"
        )
    trace = beta_syn * state.trace + weights @ input_spikes
    potential = beta_mem * state.potential + trace - threshold * state.last_spike
    spikes = (potential >= threshold).astype(np.float64)
    return NeuronState(trace=trace, potential=potential, last_spike=spikes), spikes


@dataclass(frozen=True)
class ScoreTrace:
    """Per-checkpoint read-out statistics of one example under one model."""

    checkpoints: tuple[int, ...]
    counts: np.ndarray  # (n_checkpoints, C) int64 spike counts
    confidences: np.ndarray  # (n_checkpoints, C) softmax of counts
    losses: np.ndarray  # (n_checkpoints, C) log-losses

    @property
    def num_classes(self) -> int:
        return self.counts.shape[1]


def _validate_checkpoints(checkpoints, horizon: int) -> np.ndarray:
    ckpts = np.asarray(list(checkpoints), dtype=np.int64)
    if ckpts.size == 0:
        raise ValueError("at least one checkpoint is required")
    if np.any(np.diff(ckpts) <= 0):
        raise ValueError(f"checkpoints must be strictly increasing: {ckpts.tolist()}")
    if ckpts[0] < 1 or ckpts[-1] > horizon:
        raise ValueError(
            f"checkpoints {ckpts.tolist()} out of range for horizon {horizon}"
        )
    return ckpts


def spike_count(y: np.ndarray) -> np.ndarray:
    """Cumulative spike count per read-out neuron: column sums of a T' x C
    binary spike train."""
    y = np.asarray(y)
    if y.ndim != 2:
        raise ValueError(f"spike train must be 2-D, got shape {y.shape}")
    return y.sum(axis=0).astype(np.int64)


def confidence(counts: np.ndarray) -> np.ndarray:
    """Softmax of spike counts, computed with max-subtraction so large
    counts cannot overflow."""
    counts = np.asarray(counts, dtype=np.float64)
    shifted = counts - counts.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_loss(confidences: np.ndarray, label: int) -> float:
    """Log-loss of one class: ``-log f_c`` with the confidence clamped to
    ``[CONFIDENCE_FLOOR, 1]`` so the result stays finite."""
    f = np.asarray(confidences, dtype=np.float64)[..., label]
    return float(-np.log(np.clip(f, CONFIDENCE_FLOOR, 1.0)))


def losses_from_confidence(confidences: np.ndarray) -> np.ndarray:
    """Elementwise log-loss vector (same clamp as :func:`log_loss`)."""
    f = np.clip(np.asarray(confidences, dtype=np.float64), CONFIDENCE_FLOOR, 1.0)
    return -np.log(f)


def forward_counts(
    inputs: np.ndarray, model: ModelParams, checkpoints
) -> np.ndarray:
    """Batched simulation: (B, T, N) inputs -> (B, n_checkpoints, C) counts.

    Single incremental pass up to the last checkpoint; no re-simulation per
    checkpoint. Uses the compiled kernel when available.
    """
    inputs = np.ascontiguousarray(inputs, dtype=np.float64)
    if inputs.ndim != 3:
        raise ValueError(f"expected (batch, T, N) inputs, got shape {inputs.shape}")
    if inputs.shape[2] != model.arch.num_inputs:
        raise ValueError(
            f"input has {inputs.shape[2]} channels, "
            f"architecture expects {model.arch.num_inputs}"
        )
    ckpts = _validate_checkpoints(checkpoints, inputs.shape[1])
    arch = model.arch
    return backend.simulate_counts(
        inputs,
        model.layer_weights(),
        arch.beta_syn,
        arch.beta_mem,
        arch.threshold,
        ckpts,
    )


def forward(x: InputSequence | np.ndarray, model: ModelParams, checkpoints) -> ScoreTrace:
    """Simulate one example and score it at every checkpoint."""
    samples = x.samples if isinstance(x, InputSequence) else np.asarray(x)
    counts = forward_counts(samples[None, :, :], model, checkpoints)[0]
    confs = confidence(counts)
    return ScoreTrace(
        checkpoints=tuple(int(t) for t in checkpoints),
        counts=counts,
        confidences=confs,
        losses=losses_from_confidence(confs),
    )
