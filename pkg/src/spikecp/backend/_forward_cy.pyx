# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled simulation kernel: batched multi-layer SRM forward pass.

Mirrors the update equations of ``_forward_py.simulate_counts``. The
per-step input currents go through BLAS dgemm (same as numpy's matmul);
the trace/potential/reset/threshold updates are fused into a single C loop
with no temporaries, which is what makes this kernel worthwhile: one call
simulates the whole horizon without per-step Python dispatch.
"""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _input_currents(
    double[:, ::1] x, double[:, ::1] w, double[:, ::1] out
) noexcept nogil:
    """out (B, H) = x (B, F) @ w (H, F)^T via dgemm on the C-order buffers.

    In column-major terms: out^T (H, B) = (w-buffer)^T (H, F) @ x^T (F, B).
    The leading dimensions are the row strides of the C-order buffers; the
    input slice of a (B, T, N) array has row stride T*N, not N.
    """
    cdef int batch = <int> x.shape[0]
    cdef int fan_in = <int> x.shape[1]
    cdef int n_out = <int> w.shape[0]
    cdef int lda = <int> (w.strides[0] // sizeof(double))
    cdef int ldb = <int> (x.strides[0] // sizeof(double))
    cdef int ldc = <int> (out.strides[0] // sizeof(double))
    cdef double one = 1.0, zero = 0.0
    cdef char trans_a = b"T", trans_b = b"N"
    dgemm(
        &trans_a, &trans_b, &n_out, &batch, &fan_in,
        &one, &w[0, 0], &lda, &x[0, 0], &ldb,
        &zero, &out[0, 0], &ldc,
    )


cdef void _state_update(
    double[:, ::1] current,
    double[:, ::1] trace,
    double[:, ::1] pot,
    double[:, ::1] spk,
    double beta_syn,
    double beta_mem,
    double threshold,
) noexcept nogil:
    cdef Py_ssize_t n = current.shape[0] * current.shape[1]
    cdef double* cur = &current[0, 0]
    cdef double* tr = &trace[0, 0]
    cdef double* po = &pot[0, 0]
    cdef double* sp = &spk[0, 0]
    cdef Py_ssize_t i
    cdef double t, p
    for i in range(n):
        t = beta_syn * tr[i] + cur[i]
        tr[i] = t
        # sp[i] still holds the previous step's spike here
        p = beta_mem * po[i] + t - threshold * sp[i]
        po[i] = p
        sp[i] = 1.0 if p >= threshold else 0.0


def simulate_counts(
    double[:, :, ::1] inputs,
    list weights,
    double beta_syn,
    double beta_mem,
    double threshold,
    cnp.int64_t[::1] checkpoints,
):
    """Drop-in compiled equivalent of ``_forward_py.simulate_counts``."""
    cdef Py_ssize_t batch = inputs.shape[0]
    cdef Py_ssize_t n_layers = len(weights)
    cdef Py_ssize_t n_ckpt = checkpoints.shape[0]
    cdef Py_ssize_t t_max = checkpoints[n_ckpt - 1]

    w_arrays = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
    cdef Py_ssize_t n_out = (<object> w_arrays[n_layers - 1]).shape[0]
    traces = [np.zeros((batch, w.shape[0])) for w in w_arrays]
    pots = [np.zeros((batch, w.shape[0])) for w in w_arrays]
    spks = [np.zeros((batch, w.shape[0])) for w in w_arrays]
    currents = [np.empty((batch, w.shape[0])) for w in w_arrays]

    counts_arr = np.zeros((batch, n_out))
    out_arr = np.empty((batch, n_ckpt, n_out), dtype=np.int64)

    cdef double[:, ::1] counts = counts_arr
    cdef cnp.int64_t[:, :, ::1] out = out_arr
    cdef double[:, ::1] x, w_v, cur_v, tr_v, pot_v, spk_v, last_spk
    cdef Py_ssize_t t, l, b, c, ckpt_pos = 0

    for t in range(t_max):
        x = inputs[:, t, :]
        for l in range(n_layers):
            w_v = w_arrays[l]
            cur_v = currents[l]
            tr_v = traces[l]
            pot_v = pots[l]
            spk_v = spks[l]
            _input_currents(x, w_v, cur_v)
            _state_update(cur_v, tr_v, pot_v, spk_v, beta_syn, beta_mem, threshold)
            x = spk_v
        last_spk = spks[n_layers - 1]
        for b in range(batch):
            for c in range(n_out):
                counts[b, c] += last_spk[b, c]
        if t + 1 == checkpoints[ckpt_pos]:
            for b in range(batch):
                for c in range(n_out):
                    out[b, ckpt_pos, c] = <cnp.int64_t> counts[b, c]
            ckpt_pos += 1
    return out_arr
