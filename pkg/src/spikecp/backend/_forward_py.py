"""Pure-numpy simulation kernel: batched multi-layer SRM forward pass.

Reference implementation of the hot loop; the compiled Cython kernel in
``_forward_cy`` mirrors these update equations exactly.
"""

from __future__ import annotations

import numpy as np


def simulate_counts(
    inputs: np.ndarray,
    weights: list[np.ndarray],
    beta_syn: float,
    beta_mem: float,
    threshold: float,
    checkpoints: np.ndarray,
) -> np.ndarray:
    """Simulate a layered SRM network and count read-out spikes.

    Per layer and time step: synaptic trace is a first-order filter of the
    weighted input, membrane potential a first-order filter of the trace with
    soft reset (threshold subtraction gated by the previous output spike),
    and a spike is emitted whenever the potential reaches the threshold.
    Layers propagate within a step (layer l consumes layer l-1's current
    spikes).

    Parameters
    ----------
    inputs : (B, T, N) float64 array of input samples (typically binary).
    weights : per-layer (fan_out, fan_in) float64 matrices.
    beta_syn, beta_mem : decay factors in (0, 1).
    threshold : firing threshold.
    checkpoints : strictly increasing int64 array, max <= T.

    Returns
    -------
    (B, len(checkpoints), C) int64 array of cumulative read-out spike counts.
    """
    batch, horizon, _ = inputs.shape
    n_out = weights[-1].shape[0]
    n_ckpt = len(checkpoints)

    traces = [np.zeros((batch, w.shape[0])) for w in weights]
    pots = [np.zeros((batch, w.shape[0])) for w in weights]
    spikes = [np.zeros((batch, w.shape[0])) for w in weights]

    counts = np.zeros((batch, n_out))
    out = np.empty((batch, n_ckpt, n_out), dtype=np.int64)

    ckpt_pos = 0
    t_max = int(checkpoints[-1])
    for t in range(t_max):
        x = inputs[:, t, :]
        for l, w in enumerate(weights):
            traces[l] = beta_syn * traces[l] + x @ w.T
            pots[l] = beta_mem * pots[l] + traces[l] - threshold * spikes[l]
            spikes[l] = (pots[l] >= threshold).astype(np.float64)
            x = spikes[l]
        counts += spikes[-1]
        if t + 1 == checkpoints[ckpt_pos]:
            out[:, ckpt_pos, :] = counts.astype(np.int64)
            ckpt_pos += 1
    return out
