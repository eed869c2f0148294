"""Finite-MDP ground truth for the controlled SDE.

One Euler-Maruyama step is integrated against the Gaussian noise with
Gauss-Hermite quadrature; each landing point is clipped to the state box and
its mass assigned to the grid (nearest point by default, or split linearly
between the two bracketing points). The transition kernel is stored as CSR
with rows ordered ``s * n_actions + a``.

Reward handling follows the two target conventions used in training:

* ``"discrete_gamma"``: per-step reward ``r``, discount ``gamma``;
* ``"continuous_exp"``: reward ``r * dt``, discount ``exp(-gamma * dt)``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import kernels
from .sde_env import DiscreteActions, SdeModel

__all__ = [
    "GridMdp",
    "OracleError",
    "build_grid_mdp",
    "bellman_apply",
    "solve_q_star",
    "SolveResult",
    "contraction_ratio",
    "ContractionRatio",
    "hjb_residual",
    "sup_error",
    "random_mdp",
]

MODES = ("discrete_gamma", "continuous_exp")


class OracleError(RuntimeError):
    """Internal invariant violation (e.g. value iteration exceeding its a-priori bound)."""


@dataclass(frozen=True, eq=False)
class GridMdp:
    state_grid: np.ndarray
    actions: DiscreteActions
    indptr: np.ndarray
    indices: np.ndarray
    probs: np.ndarray
    rewards: np.ndarray
    gamma_eff: float
    terminal: np.ndarray
    mode: str = "discrete_gamma"
    dt: float = 1.0
    discount_rate: float = 0.0
    horizon_steps: Optional[int] = None

    @property
    def n_states(self) -> int:
        return self.state_grid.shape[0]

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def row(self, s: int, a: int):
        """``(next_state_indices, probabilities)`` for one state-action pair."""
        i = s * self.n_actions + a
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.probs[lo:hi]

    def dense_kernel(self) -> np.ndarray:
        P = np.zeros((self.n_states, self.n_actions, self.n_states))
        flat = P.reshape(-1, self.n_states)
        for i in range(flat.shape[0]):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            np.add.at(flat[i], self.indices[lo:hi], self.probs[lo:hi])
        return P


def _gauss_hermite(n_nodes: int, noise_dim: int):
    z, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    w = w / w.sum()
    if noise_dim == 1:
        return z[:, None], w
    nodes = np.array(list(itertools.product(z, repeat=noise_dim)))
    weights = np.array([math.prod(c) for c in itertools.product(w, repeat=noise_dim)])
    return nodes, weights / weights.sum()


def _project(x, grid, projection):
    """Grid indices and weights carrying unit mass at each point of ``x``."""
    n = grid.shape[0]
    j = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, n - 2)
    lo, hi = grid[j], grid[j + 1]
    frac = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    if projection == "nearest":
        idx = np.where(frac > 0.5, j + 1, j)
        return idx[:, None], np.ones((x.shape[0], 1))
    if projection == "linear":
        return np.stack([j, j + 1], axis=1), np.stack([1.0 - frac, frac], axis=1)
    raise ValueError(f"unknown projection {projection!r}")


def build_grid_mdp(
    model: SdeModel,
    actions: DiscreteActions,
    n_states: int,
    dt: float,
    quad_nodes: int = 11,
    mode: str = "discrete_gamma",
    gamma: Optional[float] = None,
    projection: str = "nearest",
    horizon_steps: Optional[int] = None,
    state_grid=None,
    bounds=None,
) -> GridMdp:
    """Discretize ``model`` on a 1-D state grid.

    ``gamma`` defaults to ``model.discount_rate``. The grid defaults to
    ``n_states`` uniform points over the clip box (or ``bounds``).
    """
    if model.state_dim != 1:
        raise NotImplementedError("the grid oracle supports 1-D states only")
    if not isinstance(actions, DiscreteActions):
        raise TypeError("the grid oracle enumerates a discrete action set")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if quad_nodes < 3 or quad_nodes % 2 == 0:
        raise ValueError("quad_nodes must be odd and >= 3")
    if not dt > 0:
        raise ValueError("dt must be positive")
    gamma = model.discount_rate if gamma is None else float(gamma)

    if state_grid is None:
        if n_states < 3:
            raise ValueError("n_states must be >= 3")
        if bounds is None:
            if model.state_clip is None:
                raise ValueError("unclipped models need explicit bounds")
            bounds = (model.state_clip[0][0], model.state_clip[1][0])
        grid = np.linspace(bounds[0], bounds[1], n_states)
    else:
        grid = np.asarray(state_grid, dtype=float).reshape(-1)
    if grid.shape[0] < 3:
        raise ValueError("n_states must be >= 3")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("degenerate grid: points must be strictly increasing")

    nodes, weights = _gauss_hermite(quad_nodes, model.noise_dim)
    nS, nA = grid.shape[0], len(actions)
    S = grid[:, None]
    counts, indices, probs = [], [], []
    rewards = np.empty((nS, nA))
    sq = math.sqrt(dt)
    for a_idx in range(nA):
        a = actions[a_idx]
        A = np.broadcast_to(a, (nS, actions.dim))
        if model.batched:
            H = np.asarray(model.drift(0.0, S, A), dtype=float).reshape(nS)
            Sig = np.asarray(model.diffusion(0.0, S, A), dtype=float).reshape(nS, model.noise_dim)
            R = np.asarray(model.reward(0.0, S, A), dtype=float).reshape(nS)
        else:
            H = np.array([float(np.ravel(model.drift(0.0, S[i], a))[0]) for i in range(nS)])
            Sig = np.array([np.ravel(model.diffusion(0.0, S[i], a)) for i in range(nS)]).reshape(nS, -1)
            R = np.array([float(model.reward(0.0, S[i], a)) for i in range(nS)])
        rewards[:, a_idx] = R
        # landing[i, q] for state i and quadrature node q
        landing = grid[:, None] + H[:, None] * dt + (Sig @ nodes.T) * sq
        if model.state_clip is not None:
            landing = np.clip(landing, model.state_clip[0][0], model.state_clip[1][0])
        landing = np.clip(landing, grid[0], grid[-1])
        if not np.all(np.isfinite(landing)):
            raise ValueError("non-finite landing point while building the kernel")
        for i in range(nS):
            idx, w = _project(landing[i], grid, projection)
            mass = (w * weights[:, None]).reshape(-1)
            idx = idx.reshape(-1)
            uniq, inv = np.unique(idx, return_inverse=True)
            p = np.zeros(uniq.shape[0])
            np.add.at(p, inv, mass)
            keep = p > 0
            indices.append(uniq[keep])
            probs.append(p[keep])
            counts.append(int(keep.sum()))

    # rows were built action-major; CSR is state-major
    counts = np.array(counts)
    order = np.arange(nA * nS).reshape(nA, nS).T.reshape(-1)
    ip = np.zeros(nS * nA + 1, dtype=np.int64)
    ip[1:] = np.cumsum(counts[order])
    ind = np.concatenate([indices[k] for k in order]).astype(np.int64)
    pr = np.concatenate([probs[k] for k in order])
    row_sums = np.add.reduceat(pr, ip[:-1])
    pr = pr / row_sums[np.repeat(np.arange(nS * nA), np.diff(ip))]

    if mode == "continuous_exp":
        rewards = rewards * dt
        gamma_eff = math.exp(-gamma * dt)
    else:
        gamma_eff = gamma
    if not 0.0 < gamma_eff < 1.0:
        raise ValueError("effective discount must lie in (0, 1)")
    if model.batched:
        terminal = np.asarray(model.terminal_reward(S), dtype=float)
    else:
        terminal = np.array([float(model.terminal_reward(S[i])) for i in range(nS)])
    terminal = np.broadcast_to(terminal, (nS,)).copy()
    return GridMdp(
        state_grid=grid,
        actions=actions,
        indptr=ip,
        indices=ind,
        probs=pr,
        rewards=rewards,
        gamma_eff=float(gamma_eff),
        terminal=terminal,
        mode=mode,
        dt=float(dt),
        discount_rate=float(gamma),
        horizon_steps=horizon_steps,
    )


def random_mdp(n_states: int, n_actions: int, rng, gamma_eff: float = 0.9, density: float = 0.6) -> GridMdp:
    """Random finite MDP with sparse stochastic rows, for operator checks."""
    grid = np.arange(n_states, dtype=float)
    ip, ind, pr = [0], [], []
    for _ in range(n_states * n_actions):
        mask = rng.random(n_states) < density
        if not mask.any():
            mask[rng.integers(n_states)] = True
        cols = np.flatnonzero(mask)
        w = rng.random(cols.size) + 1e-3
        ind.append(cols)
        pr.append(w / w.sum())
        ip.append(ip[-1] + cols.size)
    return GridMdp(
        state_grid=grid,
        actions=DiscreteActions(np.arange(n_actions, dtype=float)),
        indptr=np.array(ip, dtype=np.int64),
        indices=np.concatenate(ind).astype(np.int64),
        probs=np.concatenate(pr),
        rewards=rng.normal(size=(n_states, n_actions)),
        gamma_eff=gamma_eff,
        terminal=np.zeros(n_states),
    )


def _check_q(grid: GridMdp, q):
    q = np.asarray(q, dtype=float)
    if q.shape != (grid.n_states, grid.n_actions):
        raise ValueError(f"Q table shape {q.shape} does not match grid {(grid.n_states, grid.n_actions)}")
    return q


def bellman_apply(grid: GridMdp, q) -> np.ndarray:
    """``(TQ)[s,a] = r[s,a] + gamma_eff * sum_s' P[s,a,s'] max_a' Q[s',a']``."""
    q = _check_q(grid, q)
    return kernels.bellman_sweep(grid.indptr, grid.indices, grid.probs, grid.rewards, grid.gamma_eff, q)


class SolveResult(NamedTuple):
    q: np.ndarray
    v: np.ndarray
    iterations: int
    deltas: np.ndarray


def _iteration_bound(tol, gamma, first_delta):
    if first_delta <= tol:
        return 1
    return int(math.ceil(math.log(tol * (1.0 - gamma) / first_delta) / math.log(gamma))) + 1


def solve_q_star(grid: GridMdp, tol: float = 1e-10, mode: str = "stationary", q0=None) -> SolveResult:
    """Q* and V* = max_a Q* by value iteration or backward induction.

    Stationary mode records ``deltas[k] = |Q_{k+1} - Q_k|_inf`` and raises
    :class:`OracleError` if the iteration count exceeds the a-priori geometric
    bound. Finite-horizon mode returns ``q`` of shape ``(N, S, A)`` and ``v`` of
    shape ``(N + 1, S)`` with ``v[N]`` the terminal reward.
    """
    if mode == "finite_horizon":
        if not grid.horizon_steps:
            raise ValueError("finite_horizon mode needs grid.horizon_steps")
        Q, V = kernels.backward_induction(
            grid.indptr, grid.indices, grid.probs, grid.rewards, grid.gamma_eff, grid.terminal, grid.horizon_steps
        )
        return SolveResult(Q, V, grid.horizon_steps, np.empty(0))
    if mode != "stationary":
        raise ValueError("mode must be 'stationary' or 'finite_horizon'")
    if not tol > 0:
        raise ValueError("tol must be positive")
    q0 = np.zeros((grid.n_states, grid.n_actions)) if q0 is None else _check_q(grid, q0)
    first = float(np.max(np.abs(bellman_apply(grid, q0) - q0)))
    bound = _iteration_bound(tol, grid.gamma_eff, first)
    q, deltas, converged = kernels.value_iteration(
        grid.indptr, grid.indices, grid.probs, grid.rewards, grid.gamma_eff, q0, tol, bound
    )
    if not converged:
        raise OracleError(f"value iteration did not reach tol={tol} within the a-priori bound of {bound} sweeps")
    return SolveResult(q, kernels.greedy_values(q), len(deltas), deltas)


class ContractionRatio(NamedTuple):
    ratio: float
    degenerate: bool


def contraction_ratio(grid: GridMdp, q1, q2) -> ContractionRatio:
    """``|Tq1 - Tq2|_inf / |q1 - q2|_inf``; flagged degenerate (ratio 0) when q1 == q2."""
    q1, q2 = _check_q(grid, q1), _check_q(grid, q2)
    den = float(np.max(np.abs(q1 - q2)))
    if den == 0.0:
        return ContractionRatio(0.0, True)
    num = float(np.max(np.abs(bellman_apply(grid, q1) - bellman_apply(grid, q2))))
    return ContractionRatio(num / den, False)


class HjbResidual(NamedTuple):
    max_abs_residual: float
    residuals: np.ndarray
    interior: np.ndarray


def hjb_residual(grid: GridMdp, v, model: SdeModel) -> HjbResidual:
    """Pointwise residual of ``-V_t + gamma V - max_a {r + h V_s + sigma^2 V_ss / 2}``.

    ``v`` is a finite-horizon value table of shape ``(N + 1, S)`` on a uniform
    grid with spacing ``ds`` and time step ``grid.dt``. The time derivative is
    the forward difference ``(V[k+1] - V[k]) / dt``; spatial derivatives are
    central differences of ``V[k+1]`` at interior points. Returns the field of
    shape ``(N, S - 2)`` for grid points ``1 .. S-2``.
    """
    v = np.asarray(v, dtype=float)
    s = grid.state_grid
    if v.ndim != 2 or v.shape[1] != s.shape[0]:
        raise ValueError("v must have shape (N + 1, n_states)")
    if s.shape[0] - 2 < 5:
        raise ValueError("grid too coarse: need at least 5 interior points")
    ds = s[1] - s[0]
    if not np.allclose(np.diff(s), ds, rtol=1e-9, atol=0.0):
        raise ValueError("hjb_residual needs a uniform grid")
    dt = grid.dt
    gamma = grid.discount_rate
    v_next, v_now = v[1:], v[:-1]
    vt = (v_next - v_now) / dt
    vs = (v_next[:, 2:] - v_next[:, :-2]) / (2.0 * ds)
    vss = (v_next[:, 2:] - 2.0 * v_next[:, 1:-1] + v_next[:, :-2]) / (ds * ds)
    si = s[1:-1][:, None]
    n = si.shape[0]
    ham = np.full(vs.shape, -np.inf)
    for a_idx in range(len(grid.actions)):
        a = grid.actions[a_idx]
        A = np.broadcast_to(a, (n, grid.actions.dim))
        if model.batched:
            h = np.asarray(model.drift(0.0, si, A), dtype=float).reshape(n)
            sig = np.asarray(model.diffusion(0.0, si, A), dtype=float).reshape(n, -1)
            r = np.asarray(model.reward(0.0, si, A), dtype=float).reshape(n)
        else:
            h = np.array([float(np.ravel(model.drift(0.0, si[i], a))[0]) for i in range(n)])
            sig = np.array([np.ravel(model.diffusion(0.0, si[i], a)) for i in range(n)]).reshape(n, -1)
            r = np.array([float(model.reward(0.0, si[i], a)) for i in range(n)])
        diff = np.sum(sig * sig, axis=1)
        ham = np.maximum(ham, r + h * vs + 0.5 * diff * vss)
    res = -vt[:, 1:-1] + gamma * v_now[:, 1:-1] - ham
    return HjbResidual(float(np.max(np.abs(res))), res, s[1:-1])


def sup_error(net, grid: GridMdp, q_star, radius: float, t: float = 0.0) -> float:
    """``max |Q_net(s, a) - Q*(s, a)|`` over grid states with ``|s| <= radius`` and all actions."""
    from .resnet_q import q_table

    q_star = _check_q(grid, q_star)
    mask = np.abs(grid.state_grid) <= radius
    if not mask.any():
        raise ValueError(f"no grid points inside radius {radius}")
    q_net = q_table(net, grid.state_grid[mask][:, None], grid.actions, t=t)
    return float(np.max(np.abs(q_net - q_star[mask])))
