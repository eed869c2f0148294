"""NumPy implementation of the Bellman kernels (used when the extension is absent)."""
import numpy as np


def greedy_values(q):
    return np.max(np.asarray(q, dtype=np.float64), axis=1)


def expectation_sweep(indptr, indices, probs, rewards, gamma, v):
    v = np.asarray(v, dtype=np.float64)
    acc = np.add.reduceat(probs * v[indices], indptr[:-1])
    return np.asarray(rewards, dtype=np.float64).reshape(-1) + gamma * acc


def bellman_sweep(indptr, indices, probs, rewards, gamma, q):
    q = np.asarray(q, dtype=np.float64)
    return expectation_sweep(indptr, indices, probs, rewards, gamma, greedy_values(q)).reshape(q.shape)


def value_iteration(indptr, indices, probs, rewards, gamma, q0, tol, max_iter):
    q = np.array(q0, dtype=np.float64)
    deltas = []
    converged = False
    while len(deltas) < max_iter:
        q_new = bellman_sweep(indptr, indices, probs, rewards, gamma, q)
        d = float(np.max(np.abs(q_new - q)))
        deltas.append(d)
        q = q_new
        if d <= tol:
            converged = True
            break
    return q, np.array(deltas), converged


def backward_induction(indptr, indices, probs, rewards, gamma, terminal, n_steps):
    rw = np.asarray(rewards, dtype=np.float64)
    n_states, n_actions = rw.shape
    Q = np.empty((n_steps, n_states, n_actions))
    V = np.empty((n_steps + 1, n_states))
    V[n_steps] = terminal
    for k in range(n_steps - 1, -1, -1):
        Q[k] = expectation_sweep(indptr, indices, probs, rw, gamma, V[k + 1]).reshape(n_states, n_actions)
        V[k] = greedy_values(Q[k])
    return Q, V
