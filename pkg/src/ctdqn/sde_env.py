"""Controlled SDE models, Euler-Maruyama stepping and large-deviation radii.

The driving noise is a standard Brownian motion, so a model is fully described
by its drift ``h(t, s, a)``, diffusion ``sigma(t, s, a)`` (an ``n x d``
matrix), running reward, terminal reward, discount rate and horizon.

Models flagged ``batched=True`` accept a leading batch axis in ``s`` and ``a``
and return the batched results; :func:`empirical_exceedance` uses this to
simulate many trajectories at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np

__all__ = [
    "StepFailure",
    "DegenerateConstantsError",
    "DiscreteActions",
    "BoxActions",
    "SdeModel",
    "Transition",
    "LdpConstants",
    "episode_rng",
    "euler_maruyama_step",
    "make_stabilization_env",
    "simulate_episode",
    "ldp_radius",
    "ldp_tail_bound",
    "empirical_exceedance",
]


class StepFailure(ArithmeticError):
    """An Euler-Maruyama step produced a non-finite state."""

    def __init__(self, t, s, a):
        self.t = t
        self.s = np.array(s, copy=True)
        self.a = np.array(a, copy=True)
        super().__init__(f"non-finite Euler-Maruyama step at t={t}, s={self.s}, a={self.a}")


class DegenerateConstantsError(ValueError):
    """Large-deviation constants are undefined when L_h = L_sigma = 0."""


@dataclass(frozen=True, eq=False)
class DiscreteActions:
    """Finite action set; ``values`` has shape ``(k, m)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] == 0:
            raise ValueError("action set must be a non-empty list of action vectors")
        if not np.all(np.isfinite(v)):
            raise ValueError("actions must be finite")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i):
        return self.values[i]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def radius(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    def index_of(self, a) -> int:
        a = np.atleast_1d(np.asarray(a, dtype=float))
        hits = np.flatnonzero(np.all(self.values == a, axis=1))
        if hits.size == 0:
            raise ValueError(f"{a} is not a member of the action set")
        return int(hits[0])


@dataclass(frozen=True, eq=False)
class BoxActions:
    """Compact box of continuous actions."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.low, dtype=float))
        hi = np.atleast_1d(np.asarray(self.high, dtype=float))
        if lo.shape != hi.shape or lo.size == 0:
            raise ValueError("box bounds must be non-empty and of equal shape")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "low", lo)
        object.__setattr__(self, "high", hi)

    @property
    def dim(self) -> int:
        return self.low.size

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(np.maximum(np.abs(self.low), np.abs(self.high))))


ActionSet = Union[DiscreteActions, BoxActions]


@dataclass(frozen=True, eq=False)
class SdeModel:
    state_dim: int
    drift: Callable
    diffusion: Callable
    reward: Callable
    terminal_reward: Callable
    discount_rate: float
    horizon: float
    state_clip: Optional[tuple] = None
    noise_dim: int = 1
    batched: bool = False

    def __post_init__(self):
        if self.state_dim < 1 or self.noise_dim < 1:
            raise ValueError("state_dim and noise_dim must be positive")
        if not 0.0 < self.discount_rate < 1.0:
            raise ValueError(f"discount_rate must lie in (0, 1), got {self.discount_rate}")
        if not self.horizon > 0.0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.state_clip is not None:
            lo, hi = self.state_clip
            lo = np.broadcast_to(np.asarray(lo, dtype=float), (self.state_dim,)).copy()
            hi = np.broadcast_to(np.asarray(hi, dtype=float), (self.state_dim,)).copy()
            if np.any(lo >= hi):
                raise ValueError("state_clip lower bound must be below the upper bound")
            object.__setattr__(self, "state_clip", (lo, hi))

    def unclipped(self) -> "SdeModel":
        return replace(self, state_clip=None)

    def clip(self, s):
        if self.state_clip is None:
            return s
        return np.clip(s, self.state_clip[0], self.state_clip[1])


@dataclass(frozen=True, eq=False)
class Transition:
    """One sampled step. ``a`` is an action index for discrete sets, else a vector."""

    t: float
    s: np.ndarray
    a: Union[int, np.ndarray]
    r: float
    s_next: np.ndarray
    truncated: bool = False


@dataclass(frozen=True)
class LdpConstants:
    c1: float
    c2: float
    c3: float
    r1: float
    lipschitz_h: float
    lipschitz_sigma: float
    growth_k: float
    dim: int
    horizon: float
    start_norm: float
    delta: float

    @property
    def bound(self) -> float:
        """Tail probability bound evaluated at ``r1`` (capped at 1)."""
        return ldp_tail_bound(self, self.r1)


def episode_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``; order of generation is irrelevant."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def _vec(x, n):
    return np.asarray(x, dtype=float).reshape(n)


def euler_maruyama_step(model: SdeModel, t: float, s, a, z, dt: float) -> np.ndarray:
    """One step ``clip(s + h dt + sigma sqrt(dt) z)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    n, d = model.state_dim, model.noise_dim
    s = _vec(s, n)
    a = np.atleast_1d(np.asarray(a, dtype=float))
    z = _vec(z, d)
    h = _vec(model.drift(t, s, a), n)
    sig = np.asarray(model.diffusion(t, s, a), dtype=float).reshape(n, d)
    out = s + h * dt + (sig @ z) * math.sqrt(dt)
    if not np.all(np.isfinite(out)):
        raise StepFailure(t, s, a)
    return model.clip(out)


def _euler_maruyama_batch(model: SdeModel, t, S, A, Z, dt):
    n, d = model.state_dim, model.noise_dim
    B = S.shape[0]
    H = np.asarray(model.drift(t, S, A), dtype=float).reshape(B, n)
    Sig = np.asarray(model.diffusion(t, S, A), dtype=float).reshape(B, n, d)
    out = S + H * dt + np.einsum("bij,bj->bi", Sig, Z) * math.sqrt(dt)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(out), axis=1))[0])
        raise StepFailure(t, S[bad], A[bad])
    return model.clip(out)


def make_stabilization_env(
    sigma: float = 0.1,
    action_cost: float = 0.01,
    dt: float = 0.1,
    max_t: int = 200,
    clip: bool = True,
    discount_rate: float = 0.99,
):
    """1-D stabilization task ``ds = a dt + sigma dW`` on ``[-1, 1]``.

    Reward is ``-s^2 - c a^2``, actions are ``{-1, 0, +1}`` and the horizon is
    ``max_t * dt``.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if not dt > 0:
        raise ValueError("dt must be positive")
    sigma = float(sigma)
    c = float(action_cost)

    def drift(t, s, a):
        return np.broadcast_to(np.asarray(a, dtype=float), np.shape(s))

    def diffusion(t, s, a):
        return np.full(np.shape(s) + (1,), sigma)

    def reward(t, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        return -np.sum(s * s, axis=-1) - c * np.sum(a * a, axis=-1)

    def terminal_reward(s):
        return np.zeros(np.shape(s)[:-1]) if np.ndim(s) > 1 else 0.0

    model = SdeModel(
        state_dim=1,
        drift=drift,
        diffusion=diffusion,
        reward=reward,
        terminal_reward=terminal_reward,
        discount_rate=discount_rate,
        horizon=max_t * dt,
        state_clip=(-1.0, 1.0) if clip else None,
        noise_dim=1,
        batched=True,
    )
    return model, DiscreteActions(np.array([[-1.0], [0.0], [1.0]]))


def _n_steps(model, max_steps, dt):
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    return min(int(max_steps), max(1, int(round(model.horizon / dt))))


def _initial_state(model, rng, s0):
    if s0 is not None:
        return _vec(s0, model.state_dim)
    if model.state_clip is None:
        return np.zeros(model.state_dim)
    lo, hi = model.state_clip
    return rng.uniform(lo, hi)


def simulate_episode(
    model: SdeModel,
    actions: ActionSet,
    policy: Callable,
    rng_seed: int,
    max_steps: int,
    dt: float,
    s0=None,
    episode: int = 0,
) -> list:
    """Roll out ``policy(t, s) -> action`` for at most ``max_steps`` steps.

    With ``s0=None`` the start is drawn uniformly from the clip box (the origin
    for unclipped models). The last transition is flagged ``truncated`` iff the
    step cap ended the episode rather than the horizon.
    """
    rng = episode_rng(rng_seed, episode)
    n_steps = _n_steps(model, max_steps, dt)
    capped = n_steps == int(max_steps)
    s = _initial_state(model, rng, s0)
    out = []
    for k in range(n_steps):
        t = k * dt
        a = np.atleast_1d(np.asarray(policy(t, s), dtype=float))
        if isinstance(actions, DiscreteActions):
            a_rec = actions.index_of(a)
        else:
            a = np.clip(a, actions.low, actions.high)
            a_rec = a
        z = rng.standard_normal(model.noise_dim)
        s_next = euler_maruyama_step(model, t, s, a, z, dt)
        r = float(model.reward(t, s, a))
        out.append(Transition(t, s, a_rec, r, s_next, truncated=capped and k == n_steps - 1))
        s = s_next
    return out


def ldp_radius(
    lipschitz_h: float,
    lipschitz_sigma: float,
    growth_k: float,
    dim: int,
    horizon: float,
    start_norm: float,
    delta: float,
) -> LdpConstants:
    """Explicit constants of the large-deviation bound and the radius ``R1``.

    ``P(sup |s_t| > R) <= c1 exp(-c2 (R - c3 (1 + |x|))^2 / T)``; ``r1`` is the
    smallest radius making the right side ``<= delta``.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    lsq = lipschitz_h**2 + lipschitz_sigma**2
    if lsq == 0.0:
        raise DegenerateConstantsError("L_h = L_sigma = 0: c2 is undefined and the bound is vacuous")
    c1 = 2.0 * math.exp(2.0 * (1.0 + horizon * lsq))
    c2 = 1.0 / (8.0 * dim * lsq)
    c3 = float(growth_k)
    r1 = c3 * (1.0 + start_norm) + math.sqrt((horizon / c2) * max(0.0, math.log(c1 / delta)))
    return LdpConstants(
        c1=c1,
        c2=c2,
        c3=c3,
        r1=r1,
        lipschitz_h=float(lipschitz_h),
        lipschitz_sigma=float(lipschitz_sigma),
        growth_k=float(growth_k),
        dim=int(dim),
        horizon=float(horizon),
        start_norm=float(start_norm),
        delta=float(delta),
    )


def ldp_tail_bound(consts: LdpConstants, radius: float) -> float:
    """``min(1, c1 exp(-c2 (R - c3(1+|x|))_+^2 / T))``."""
    gap = max(0.0, radius - consts.c3 * (1.0 + consts.start_norm))
    return min(1.0, consts.c1 * math.exp(-consts.c2 * gap * gap / consts.horizon))


def _batch_actions(a, n_trials, m):
    a = np.asarray(a, dtype=float)
    if a.size == m:
        return np.broadcast_to(a.reshape(m), (n_trials, m))
    return a.reshape(n_trials, m)


def empirical_exceedance(
    model: SdeModel,
    actions: ActionSet,
    policy: Callable,
    r1: float,
    n_trials: int,
    rng_seed: int,
    max_steps: int,
    dt: float,
    s0=None,
) -> float:
    """Fraction of trajectories whose running sup-norm exceeds ``r1``.

    Trial ``i`` draws its noise from ``episode_rng(rng_seed, i)``, so batched and
    sequential simulation agree. For batched models ``policy`` receives the
    whole ``(trials, n)`` state array.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if model.state_clip is not None:
        raise ValueError("exceedance must be measured on unclipped dynamics; use model.unclipped()")
    n, d = model.state_dim, model.noise_dim
    n_steps = _n_steps(model, max_steps, dt)
    x0 = np.zeros(n) if s0 is None else _vec(s0, n)

    if not model.batched:
        hits = 0
        for i in range(n_trials):
            path = simulate_episode(model, actions, policy, rng_seed, n_steps, dt, s0=x0, episode=i)
            sup = max([np.linalg.norm(x0)] + [np.linalg.norm(tr.s_next) for tr in path])
            hits += sup > r1
        return hits / n_trials

    Z = np.stack([episode_rng(rng_seed, i).standard_normal((n_steps, d)) for i in range(n_trials)])
    S = np.tile(x0, (n_trials, 1))
    sup = np.linalg.norm(S, axis=1)
    for k in range(n_steps):
        t = k * dt
        A = _batch_actions(policy(t, S), n_trials, actions.dim)
        S = _euler_maruyama_batch(model, t, S, A, Z[:, k, :], dt)
        np.maximum(sup, np.linalg.norm(S, axis=1), out=sup)
    return float(np.count_nonzero(sup > r1)) / n_trials
