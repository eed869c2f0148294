# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled Bellman kernels over a CSR transition matrix.

Rows are ordered ``s * n_actions + a``; each row's sum runs in stored column
order so results match the NumPy fallback up to rounding of identical sums.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


cdef void _expect(const cnp.int64_t[:] indptr, const cnp.int64_t[:] indices,
                  const double[:] probs, const double[:] rewards, double gamma,
                  const double[:] v, double[:] out) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(out.shape[0]):
        acc = 0.0
        for j in range(indptr[i], indptr[i + 1]):
            acc = acc + probs[j] * v[indices[j]]
        out[i] = rewards[i] + gamma * acc


cdef void _row_max(const double[:] q, Py_ssize_t n_actions, double[:] v) noexcept nogil:
    cdef Py_ssize_t s, a
    cdef double m
    for s in range(v.shape[0]):
        m = q[s * n_actions]
        for a in range(1, n_actions):
            if q[s * n_actions + a] > m:
                m = q[s * n_actions + a]
        v[s] = m


def greedy_values(q):
    """Row-wise max of a ``(n_states, n_actions)`` table."""
    cdef double[:, ::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    v = np.empty(qv.shape[0])
    _row_max(np.asarray(qv).reshape(-1), qv.shape[1], v)
    return v


def expectation_sweep(indptr, indices, probs, rewards, double gamma, v):
    """``rewards + gamma * P @ v`` for flat ``rewards`` of length ``n_rows``."""
    out = np.empty(len(indptr) - 1)
    _expect(indptr, indices, probs, np.ascontiguousarray(rewards, dtype=np.float64).reshape(-1),
            gamma, np.ascontiguousarray(v, dtype=np.float64), out)
    return out


def bellman_sweep(indptr, indices, probs, rewards, double gamma, q):
    """Apply the Bellman optimality operator to ``q`` of shape ``(n_states, n_actions)``."""
    q = np.ascontiguousarray(q, dtype=np.float64)
    v = greedy_values(q)
    return expectation_sweep(indptr, indices, probs, rewards, gamma, v).reshape(q.shape)


def value_iteration(indptr, indices, probs, rewards, double gamma, q0,
                    double tol, Py_ssize_t max_iter):
    """Iterate the Bellman operator until the sup-norm step is ``<= tol``.

    Returns ``(q, deltas, converged)`` with ``deltas[k] = |Q_{k+1} - Q_k|_inf``.
    """
    cdef cnp.int64_t[:] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef cnp.int64_t[:] ix = np.ascontiguousarray(indices, dtype=np.int64)
    cdef double[:] pr = np.ascontiguousarray(probs, dtype=np.float64)
    cdef double[:] rw = np.ascontiguousarray(rewards, dtype=np.float64).reshape(-1)
    q_arr = np.array(q0, dtype=np.float64, order="C")
    shape = q_arr.shape
    cdef Py_ssize_t n_actions = shape[1]
    cdef double[:] q = q_arr.reshape(-1)
    cdef double[:] q_new = np.empty_like(q_arr).reshape(-1)
    cdef double[:] v = np.empty(shape[0])
    cdef double[:] tmp
    deltas = np.empty(max_iter)
    cdef double[:] dl = deltas
    cdef Py_ssize_t k = 0, i
    cdef double d
    cdef bint converged = False
    with nogil:
        while k < max_iter:
            _row_max(q, n_actions, v)
            _expect(ip, ix, pr, rw, gamma, v, q_new)
            d = 0.0
            for i in range(q.shape[0]):
                if fabs(q_new[i] - q[i]) > d:
                    d = fabs(q_new[i] - q[i])
            dl[k] = d
            k += 1
            tmp = q
            q = q_new
            q_new = tmp
            if d <= tol:
                converged = True
                break
    return np.asarray(q).reshape(shape).copy(), deltas[:k].copy(), converged


def backward_induction(indptr, indices, probs, rewards, double gamma, terminal,
                       Py_ssize_t n_steps):
    """Finite-horizon recursion ``Q_k = r + gamma P V_{k+1}``, ``V_N = terminal``."""
    rw = np.ascontiguousarray(rewards, dtype=np.float64)
    n_states, n_actions = rw.shape
    Q = np.empty((n_steps, n_states, n_actions))
    V = np.empty((n_steps + 1, n_states))
    V[n_steps] = terminal
    cdef Py_ssize_t k
    for k in range(n_steps - 1, -1, -1):
        Q[k] = expectation_sweep(indptr, indices, probs, rw, gamma, V[k + 1]).reshape(n_states, n_actions)
        V[k] = greedy_values(Q[k])
    return Q, V
