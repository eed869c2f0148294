"""Semi-gradient Q-learning with replay, a hard-synced target network and epsilon-greedy acting.

Two TD target conventions are supported:

* ``"discrete_gamma"``:  ``y = r + gamma * max_a' Q_target(t + dt, s', a')``
* ``"continuous_exp"``:  ``y = r * dt + exp(-gamma * dt) * max_a' Q_target(t + dt, s', a')``

The update is ``theta += alpha * mean_i (y_i - Q(x_i)) grad Q(x_i)`` with the
target held fixed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .optim import Adam, Sgd
from .resnet_q import QNetwork, backward_batch, forward_batch, init_network, q_table
from .sde_env import DiscreteActions, Transition, euler_maruyama_step, make_stabilization_env

__all__ = [
    "TrainingDivergence",
    "ReplayBuffer",
    "Batch",
    "LearningRateSchedule",
    "EpisodeRecord",
    "CheckpointRecord",
    "TrainLog",
    "select_action",
    "td_target",
    "td_targets",
    "apply_update",
    "train_run",
    "epsilon_at",
    "lr_schedule_diagnostics",
    "ScheduleDiagnostics",
]

TARGET_MODES = ("discrete_gamma", "continuous_exp")


class TrainingDivergence(FloatingPointError):
    def __init__(self, step: int, what: str = "parameter update"):
        self.step = step
        super().__init__(f"non-finite {what} at step {step}")


@dataclass(eq=False)
class Batch:
    t: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    truncated: np.ndarray

    def __len__(self):
        return self.t.shape[0]

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "Batch":
        if len(transitions) == 0:
            raise ValueError("empty batch")
        return cls(
            t=np.array([tr.t for tr in transitions], dtype=float),
            s=np.array([np.ravel(tr.s) for tr in transitions], dtype=float),
            a=np.array([tr.a for tr in transitions], dtype=np.int64),
            r=np.array([tr.r for tr in transitions], dtype=float),
            s_next=np.array([np.ravel(tr.s_next) for tr in transitions], dtype=float),
            truncated=np.array([tr.truncated for tr in transitions], dtype=bool),
        )


def _as_batch(batch) -> Batch:
    if isinstance(batch, Batch):
        return batch
    if isinstance(batch, Transition):
        return Batch.from_transitions([batch])
    return Batch.from_transitions(list(batch))


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with discrete action indices."""

    def __init__(self, capacity: int, state_dim: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.state_dim = state_dim
        self._t = np.empty(capacity)
        self._s = np.empty((capacity, state_dim))
        self._a = np.empty(capacity, dtype=np.int64)
        self._r = np.empty(capacity)
        self._s2 = np.empty((capacity, state_dim))
        self._trunc = np.empty(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, tr: Transition) -> None:
        i = self._next
        self._t[i] = tr.t
        self._s[i] = np.ravel(tr.s)
        self._a[i] = int(tr.a)
        self._r[i] = tr.r
        self._s2[i] = np.ravel(tr.s_next)
        self._trunc[i] = tr.truncated
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _slot(self, k: int) -> int:
        """Storage slot of the ``k``-th oldest stored item."""
        start = (self._next - self._size) % self.capacity
        return (start + k) % self.capacity

    def __getitem__(self, k: int) -> Transition:
        if not 0 <= k < self._size:
            raise IndexError(k)
        i = self._slot(k)
        return Transition(float(self._t[i]), self._s[i].copy(), int(self._a[i]), float(self._r[i]), self._s2[i].copy(), bool(self._trunc[i]))

    def sample_indices(self, batch_size: int, rng) -> Optional[np.ndarray]:
        if self._size < batch_size:
            return None
        return rng.choice(self._size, size=batch_size, replace=False)

    def sample(self, batch_size: int, rng) -> Optional[Batch]:
        """Uniform batch without replacement, or ``None`` while the buffer is too small."""
        ks = self.sample_indices(batch_size, rng)
        if ks is None:
            return None
        i = (((self._next - self._size) % self.capacity) + ks) % self.capacity
        return Batch(self._t[i], self._s[i], self._a[i], self._r[i], self._s2[i], self._trunc[i])


def replay_push(buffer: ReplayBuffer, tr: Transition) -> None:
    buffer.push(tr)


def replay_sample(buffer: ReplayBuffer, batch_size: int, rng) -> Optional[Batch]:
    return buffer.sample(batch_size, rng)


@dataclass(frozen=True)
class LearningRateSchedule:
    """``constant``: ``alpha``; ``robbins_monro``: ``alpha / k**exponent`` for update ``k >= 1``."""

    kind: str = "constant"
    alpha: float = 5e-4
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "robbins_monro"):
            raise ValueError("kind must be 'constant' or 'robbins_monro'")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.kind == "robbins_monro" and not 0.5 < self.exponent <= 1.0:
            raise ValueError("Robbins-Monro exponent must lie in (0.5, 1]")

    def value(self, k: int) -> float:
        if self.kind == "constant":
            return self.alpha
        return self.alpha / float(k) ** self.exponent

    def values(self, k_start: int, k_stop: int) -> np.ndarray:
        k = np.arange(k_start, k_stop, dtype=float)
        if self.kind == "constant":
            return np.full(k.shape, self.alpha)
        return self.alpha / k**self.exponent

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "exponent": self.exponent}


class ScheduleDiagnostics(NamedTuple):
    partial_sum: float
    partial_sum_squares: float
    divergence_slope: float
    sum_decade_ratio: float
    squares_decade_ratio: float
    tail_increment: float
    sum_diverges: bool
    squares_converge: bool

    @property
    def compliant(self) -> bool:
        return self.sum_diverges and self.squares_converge


def lr_schedule_diagnostics(schedule: LearningRateSchedule, horizon_k: int, chunk: int = 1 << 20) -> ScheduleDiagnostics:
    """Numerical Robbins-Monro check up to ``horizon_k``.

    Both partial sums are compared over their last two decades: with
    ``D(K) = S(K) - S(K/10)``, a series whose decade increments shrink
    geometrically (``D(K)/D(K/10) < 0.99``) is flagged convergent, and a sum whose
    decade increments do not shrink (ratio ``>= 0.99``) is flagged divergent.
    ``divergence_slope`` is the log-log slope of ``S`` over the last decade.
    """
    K = int(horizon_k)
    if K < 100:
        raise ValueError("horizon_k must be >= 100")
    marks = [K // 100, K // 10, K]
    s1 = s2 = 0.0
    at = {}
    k = 1
    for mark in marks:
        while k <= mark:
            stop = min(mark, k + chunk - 1) + 1
            v = schedule.values(k, stop)
            s1 += float(np.sum(v))
            s2 += float(np.sum(v * v))
            k = stop
        at[mark] = (s1, s2)
    (a1, a2), (b1, b2), (c1, c2) = (at[m] for m in marks)
    ratio1 = (c1 - b1) / (b1 - a1)
    ratio2 = (c2 - b2) / (b2 - a2)
    slope = math.log(c1 / b1) / math.log(K / (K // 10))
    tail = schedule.value(K) ** 2
    return ScheduleDiagnostics(c1, c2, slope, ratio1, ratio2, tail, ratio1 >= 0.99, ratio2 < 0.99)


def select_action(net: QNetwork, t, s, epsilon: float, actions: DiscreteActions, rng) -> int:
    """Epsilon-greedy index; greedy ties go to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(len(actions)))
    q = q_table(net, np.reshape(s, (1, -1)), actions, t=t)[0]
    return int(np.argmax(q))


def _discount(gamma, dt, mode):
    if mode == "discrete_gamma":
        return gamma, 1.0
    if mode == "continuous_exp":
        if not dt > 0:
            raise ValueError("dt must be positive in continuous_exp mode")
        return math.exp(-gamma * dt), dt
    raise ValueError(f"mode must be one of {TARGET_MODES}")


def td_targets(target_net: QNetwork, batch, gamma: float, dt: float, mode: str = "discrete_gamma", bootstrap_on_truncation: bool = True, actions: Optional[DiscreteActions] = None) -> np.ndarray:
    """Vectorized TD targets for a :class:`Batch` (or list of transitions)."""
    b = _as_batch(batch)
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    disc, scale = _discount(gamma, dt, mode)
    if actions is None:
        actions = DiscreteActions(np.arange(target_net.arch.n_out, dtype=float))
    q_next = q_table(target_net, b.s_next, actions, t=b.t + dt)
    boot = disc * np.max(q_next, axis=1)
    if not bootstrap_on_truncation:
        boot = np.where(b.truncated, 0.0, boot)
    return b.r * scale + boot


def td_target(target_net: QNetwork, tr: Transition, gamma: float, dt: float, mode: str = "discrete_gamma", bootstrap_on_truncation: bool = True, actions: Optional[DiscreteActions] = None) -> float:
    return float(td_targets(target_net, [tr], gamma, dt, mode, bootstrap_on_truncation, actions)[0])


def _online_q(net, b, actions):
    """Q(t_i, s_i, a_i) for the batch with its tape and upstream layout."""
    if net.arch.mode == "multi_head":
        out, tape = forward_batch(net, b.t, b.s)
        rows = np.arange(len(b))
        return out[rows, b.a], tape
    A = actions.values[b.a]
    out, tape = forward_batch(net, b.t, b.s, A)
    return out[:, 0], tape


def apply_update(
    net: QNetwork,
    batch,
    target_net: Optional[QNetwork],
    alpha: float,
    gamma: float,
    dt: float,
    mode: str = "discrete_gamma",
    bootstrap_on_truncation: bool = True,
    optimizer=None,
    actions: Optional[DiscreteActions] = None,
    targets=None,
    step: int = 0,
    inplace: bool = False,
):
    """One semi-gradient step; returns ``(net', mean squared TD error)``.

    ``target_net=None`` bootstraps from ``net`` itself. ``targets`` may supply
    precomputed ``y`` values. ``optimizer`` defaults to plain SGD with step
    ``alpha``; pass an :class:`~ctdqn.optim.Adam` instance for adaptive steps.
    """
    b = _as_batch(batch)
    if actions is None:
        actions = DiscreteActions(np.arange(net.arch.n_out, dtype=float))
    y = targets
    if y is None:
        y = td_targets(target_net if target_net is not None else net, b, gamma, dt, mode, bootstrap_on_truncation, actions)
    q, tape = _online_q(net, b, actions)
    delta = y - q
    G = np.zeros_like(tape.out)
    w = delta / len(b)
    if net.arch.mode == "multi_head":
        G[np.arange(len(b)), b.a] = w
    else:
        G[:, 0] = w
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite values are reported below
        loss = float(np.mean(delta * delta))
        direction = backward_batch(net, tape, G)
    if not (math.isfinite(loss) and np.all(np.isfinite(direction))):
        raise TrainingDivergence(step)
    out = net if inplace else net.copy()
    if not np.any(direction):
        return out, loss
    if optimizer is None:
        optimizer = Sgd(alpha)
    optimizer.lr = alpha
    with np.errstate(over="ignore", invalid="ignore"):
        optimizer.ascend(out.theta, direction)
    if not np.all(np.isfinite(out.theta)):
        raise TrainingDivergence(step)
    return out, loss


def epsilon_at(episode: int, eps_start: float = 1.0, eps_end: float = 0.01, decay: float = 0.99) -> float:
    return max(eps_end, eps_start * decay**episode)


@dataclass
class EpisodeRecord:
    episode: int
    total_reward: float
    mean_loss: float
    epsilon: float


@dataclass
class CheckpointRecord:
    step: int
    episode: int
    theta: np.ndarray = field(repr=False)
    sup_error: Optional[float] = None


@dataclass
class TrainLog:
    episodes: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    net: Optional[QNetwork] = None
    steps: int = 0
    updates: int = 0
    failed: bool = False
    failure_step: Optional[int] = None
    failure: str = ""

    @property
    def total_rewards(self) -> np.ndarray:
        return np.array([e.total_reward for e in self.episodes])


def train_run(config, rng_seed: Optional[int] = None, oracle=None, on_checkpoint=None) -> TrainLog:
    """Run DQN training for ``config`` (a :class:`~ctdqn.harness.RunConfig`).

    ``oracle`` is an optional ``(grid, q_star)`` pair; when given, each
    checkpoint records its sup error over ``|s| <= oracle_radius``.
    ``on_checkpoint(record, net)`` is called for every checkpoint.
    """
    from .dp_oracle import sup_error

    seed = config.seed if rng_seed is None else int(rng_seed)
    env, net_cfg, tc = config.env, config.net, config.train
    model, actions = make_stabilization_env(env.sigma, env.action_cost, env.dt, env.max_t)
    arch = net_cfg.architecture(model.state_dim, len(actions), time_scale=model.horizon)
    net = init_network(arch, seed, zero_init_residual=net_cfg.zero_init_residual)
    target = net.copy()
    schedule = tc.schedule()
    optimizer = Adam(net.n_params, lr=schedule.value(1)) if tc.optimizer_mode == "adam" else Sgd(schedule.value(1))
    buffer = ReplayBuffer(tc.buffer_size, model.state_dim)
    log = TrainLog(net=net)
    step = 0

    def checkpoint(ep):
        err = None
        if oracle is not None:
            grid, q_star = oracle
            err = sup_error(net, grid, q_star, tc.oracle_radius)
        rec = CheckpointRecord(step, ep, net.theta.copy(), err)
        log.checkpoints.append(rec)
        if on_checkpoint is not None:
            on_checkpoint(rec, net)

    for ep in range(tc.n_episodes):
        eps = epsilon_at(ep, tc.eps_start, tc.eps_end, tc.eps_decay_factor)
        root = np.random.SeedSequence([seed, 1, ep])
        env_rng, act_rng, replay_rng = (np.random.default_rng(c) for c in root.spawn(3))
        s = env_rng.uniform(model.state_clip[0], model.state_clip[1])
        total, losses = 0.0, []
        try:
            for k in range(env.max_t):
                t = k * env.dt
                a_idx = select_action(net, t, s, eps, actions, act_rng)
                a = actions[a_idx]
                z = env_rng.standard_normal(model.noise_dim)
                s_next = euler_maruyama_step(model, t, s, a, z, env.dt)
                r = float(model.reward(t, s, a))
                buffer.push(Transition(t, s, a_idx, r, s_next, truncated=k == env.max_t - 1))
                total += r
                s = s_next
                step += 1
                batch = buffer.sample(tc.batch_size, replay_rng)
                if batch is not None:
                    log.updates += 1
                    _, loss = apply_update(
                        net,
                        batch,
                        target,
                        schedule.value(log.updates),
                        tc.gamma,
                        env.dt,
                        tc.target_mode,
                        tc.bootstrap_on_truncation,
                        optimizer=optimizer,
                        actions=actions,
                        step=step,
                        inplace=True,
                    )
                    losses.append(loss)
                if step % tc.target_update == 0:
                    target = net.copy()
        except (TrainingDivergence, FloatingPointError, ArithmeticError) as exc:
            log.failed = True
            log.failure_step = step
            log.failure = str(exc)
            break
        finally:
            log.steps = step
        log.episodes.append(EpisodeRecord(ep, total, float(np.mean(losses)) if losses else float("nan"), eps))
        if (ep + 1) % tc.checkpoint_every == 0 or ep == tc.n_episodes - 1:
            checkpoint(ep)
    return log
