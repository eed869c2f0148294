"""Experiment orchestration for the 1-D stabilization task.

Checkpoint files (``*.params``) are laid out as::

    8 bytes   little-endian uint64 header length H
    H bytes   UTF-8 JSON header {"format": "ctdqn-params", "version": 1,
              "architecture": {...}, "n_params": P, "actions": [...], ...}
    8*P bytes little-endian float64 parameters in the network's flat order
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .dp_oracle import build_grid_mdp, solve_q_star
from .qlearn import LearningRateSchedule, TrainLog, train_run
from .resnet_q import Architecture, QNetwork, q_table
from .sde_env import DiscreteActions, make_stabilization_env

__all__ = [
    "EnvConfig",
    "NetConfig",
    "TrainConfig",
    "RunConfig",
    "BUILTIN_NAMES",
    "builtin_config",
    "run_config",
    "RunResult",
    "smooth_rewards",
    "extract_policy",
    "compare_configs",
    "ComparisonReport",
    "save_checkpoint",
    "load_checkpoint",
    "stationary_oracle",
]

BUILTIN_NAMES = ("Baseline", "High LR", "Fewer ResBlocks", "High Noise", "Slow Target Update")
SMOOTHING_WINDOW = 20


@dataclass
class EnvConfig:
    sigma: float = 0.1
    action_cost: float = 0.01
    dt: float = 0.1
    max_t: int = 200


@dataclass
class NetConfig:
    hidden_dim: int = 64
    n_blocks: int = 2
    activation: str = "relu"
    mode: str = "multi_head"
    time_feature: bool = False
    block_scale: float = 1.0
    couple_depth_to_time: bool = False
    zero_init_residual: bool = False

    def architecture(self, state_dim: int, n_actions: int, time_scale: float = 1.0) -> Architecture:
        dt = self.block_scale
        if self.couple_depth_to_time and self.n_blocks > 0:
            dt = time_scale / self.n_blocks
        if self.mode == "multi_head":
            return Architecture(
                state_dim=state_dim,
                hidden_dim=self.hidden_dim,
                n_blocks=self.n_blocks,
                n_out=n_actions,
                activation=self.activation,
                time_feature=self.time_feature,
                dt=dt,
                time_scale=time_scale,
            )
        return Architecture(
            state_dim=state_dim,
            hidden_dim=self.hidden_dim,
            n_blocks=self.n_blocks,
            n_out=1,
            mode="action_in",
            action_dim=1,
            activation=self.activation,
            time_feature=self.time_feature,
            dt=dt,
            time_scale=time_scale,
        )


@dataclass
class TrainConfig:
    lr_schedule: dict = field(default_factory=lambda: {"kind": "constant", "alpha": 5e-4, "exponent": 1.0})
    gamma: float = 0.99
    buffer_size: int = 10_000
    batch_size: int = 64
    target_update: int = 100
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_decay_factor: float = 0.99
    n_episodes: int = 300
    target_mode: str = "discrete_gamma"
    bootstrap_on_truncation: bool = True
    optimizer_mode: str = "sgd"
    checkpoint_every: int = 10
    oracle_radius: float = 1.0

    def schedule(self) -> LearningRateSchedule:
        return LearningRateSchedule(**self.lr_schedule)


_GROUPS = {"env": EnvConfig, "net": NetConfig, "train": TrainConfig}


@dataclass
class RunConfig:
    name: str = "Baseline"
    env: EnvConfig = field(default_factory=EnvConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 42

    def to_dict(self) -> dict:
        return asdict(self)

    def to_flat_dict(self) -> dict:
        """The flat file layout: group fields hoisted next to ``name`` and ``seed``."""
        out = {"name": self.name, "seed": self.seed}
        for key in _GROUPS:
            out.update(asdict(getattr(self, key)))
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_flat_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Accepts the nested layout of :meth:`to_dict` or a flat key/value mapping."""
        d = dict(d)
        groups = {}
        for key, kind in _GROUPS.items():
            sub = d.pop(key, None) or {}
            names = {f.name for f in fields(kind)}
            for k in list(d):
                if k in names:
                    sub[k] = d.pop(k)
            unknown = set(sub) - names
            if unknown:
                raise ValueError(f"unknown {key} keys: {sorted(unknown)}")
            groups[key] = kind(**sub)
        unknown = set(d) - {"name", "seed"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(name=d.get("name", "Baseline"), seed=int(d.get("seed", 42)), **groups)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _canonical(name: str) -> str:
    return "".join(name.split()).lower()


def builtin_config(name: str) -> RunConfig:
    """One of the five comparison configurations; every other field is Baseline."""
    key = _canonical(name)
    cfg = RunConfig()
    if key == "baseline":
        return cfg
    if key == "highlr":
        cfg.train.lr_schedule = {"kind": "constant", "alpha": 1e-3, "exponent": 1.0}
    elif key == "fewerresblocks":
        cfg.net.n_blocks = 0
    elif key == "highnoise":
        cfg.env.sigma = 0.3
    elif key == "slowtargetupdate":
        cfg.train.target_update = 500
    else:
        raise ValueError(f"unknown configuration {name!r}; valid names: {', '.join(BUILTIN_NAMES)}")
    cfg.name = next(n for n in BUILTIN_NAMES if _canonical(n) == key)
    return cfg


def smooth_rewards(rewards, window: int = SMOOTHING_WINDOW) -> list:
    """Trailing moving average; the first ``window - 1`` entries average the available prefix."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(rewards, dtype=float)
    if x.size == 0:
        return []
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    out = (c[idx] - c[lo]) / (idx - lo)
    if window == 1:
        out = x.copy()
    return out.tolist()


def extract_policy(net: QNetwork, n_points: int = 201, actions: Optional[DiscreteActions] = None, t: float = 0.0) -> list:
    """Greedy action index on a uniform grid over ``[-1, 1]`` as ``(state, index)`` pairs."""
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    if actions is None:
        actions = DiscreteActions(np.arange(net.arch.n_out, dtype=float))
    s = np.linspace(-1.0, 1.0, n_points)
    q = q_table(net, s[:, None], actions, t=t)
    return list(zip(s.tolist(), np.argmax(q, axis=1).tolist()))


def save_checkpoint(path, net: QNetwork, actions: Optional[DiscreteActions] = None, **meta) -> None:
    header = {
        "format": "ctdqn-params",
        "version": 1,
        "dtype": "<f8",
        "architecture": net.arch.to_dict(),
        "n_params": net.n_params,
        **meta,
    }
    if actions is not None:
        header["actions"] = actions.values.tolist()
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        f.write(net.theta.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(net, header)``."""
    data = Path(path).read_bytes()
    (n,) = struct.unpack_from("<Q", data, 0)
    header = json.loads(data[8 : 8 + n].decode("utf-8"))
    if header.get("format") != "ctdqn-params":
        raise ValueError(f"{path}: not a ctdqn parameter file")
    theta = np.frombuffer(data, dtype="<f8", offset=8 + n).astype(np.float64)
    arch = Architecture.from_dict(header["architecture"])
    if theta.size != header["n_params"]:
        raise ValueError(f"{path}: expected {header['n_params']} parameters, found {theta.size}")
    return QNetwork(arch, theta), header


def stationary_oracle(config: RunConfig, n_states: int = 201, tol: float = 1e-10):
    """``(grid, q_star)`` of the discounted problem matching ``config``'s TD targets."""
    model, actions = make_stabilization_env(config.env.sigma, config.env.action_cost, config.env.dt, config.env.max_t)
    grid = build_grid_mdp(model, actions, n_states, config.env.dt, mode=config.train.target_mode, gamma=config.train.gamma)
    return grid, solve_q_star(grid, tol=tol).q


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


@dataclass
class RunResult:
    config: RunConfig
    log: TrainLog
    out_dir: Optional[Path]
    smoothed: list
    policy: list

    @property
    def final_smoothed_reward(self) -> float:
        return self.smoothed[-1] if self.smoothed else float("nan")


def run_config(config: RunConfig, out_dir=None, oracle=None, policy_points: int = 201) -> RunResult:
    """Train ``config`` and write ``config.json``, ``episodes.csv``, ``policy.csv`` and checkpoints.

    ``oracle`` may be ``(grid, q_star)`` or ``True`` to build the stationary
    oracle for sup-error checkpoints.
    """
    if oracle is True:
        oracle = stationary_oracle(config)
    elif oracle is False:
        oracle = None
    out = Path(out_dir) if out_dir is not None else None
    _, actions = make_stabilization_env()
    def write_checkpoint(rec, net):
        save_checkpoint(out / "checkpoints" / f"step_{rec.step}.params", net, actions, step=rec.step, episode=rec.episode)

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(config.to_json() + "\n", encoding="utf-8")
    log = train_run(config, oracle=oracle, on_checkpoint=write_checkpoint if out is not None else None)
    smoothed = smooth_rewards(log.total_rewards)
    policy = extract_policy(log.net, policy_points, actions) if log.episodes else []
    if out is not None:
        _write_csv(
            out / "episodes.csv",
            ["episode", "total_reward", "smoothed_reward", "mean_loss", "epsilon"],
            [[e.episode, _fmt(e.total_reward), _fmt(sm), _fmt(e.mean_loss), _fmt(e.epsilon)] for e, sm in zip(log.episodes, smoothed)],
        )
        _write_csv(out / "policy.csv", ["s", "action"], [[_fmt(s), _fmt(actions[i][0])] for s, i in policy])
        if log.checkpoints:
            _write_csv(
                out / "checkpoints.csv",
                ["step", "episode", "sup_error"],
                [[c.step, c.episode, "" if c.sup_error is None else _fmt(c.sup_error)] for c in log.checkpoints],
            )
        if log.failed:
            (out / "FAILED").write_text(f"step {log.failure_step}: {log.failure}\n", encoding="utf-8")
    return RunResult(config, log, out, smoothed, policy)


@dataclass
class ComparisonReport:
    runs: dict
    failures: dict

    def final_smoothed(self) -> dict:
        return {k: r.final_smoothed_reward for k, r in self.runs.items()}


def compare_configs(
    names, out_dir=None, oracle: bool = False, base_seed: int = 42, n_episodes: Optional[int] = None
) -> ComparisonReport:
    """Run each named configuration with the shared seed and write ``comparison.csv``.

    ``n_episodes`` overrides the episode count of every member (for quick looks).
    """
    configs = [builtin_config(n) for n in names]
    if len({c.name for c in configs}) != len(configs):
        raise ValueError("configuration names must be unique within a comparison")
    runs, failures = {}, {}
    out = Path(out_dir) if out_dir is not None else None
    for cfg in configs:
        cfg.seed = base_seed
        if n_episodes is not None:
            cfg.train.n_episodes = n_episodes
        sub = out / "".join(cfg.name.split()) if out is not None else None
        try:
            res = run_config(cfg, sub, oracle=oracle)
        except Exception as exc:  # noqa: BLE001 - recorded per config
            failures[cfg.name] = str(exc)
            continue
        if res.log.failed:
            failures[cfg.name] = res.log.failure
        runs[cfg.name] = res
    if out is not None:
        rows = []
        for name, res in runs.items():
            for e, sm in zip(res.log.episodes, res.smoothed):
                rows.append([name, e.episode, _fmt(sm), _fmt(e.mean_loss)])
        _write_csv(out / "comparison.csv", ["config", "episode", "smoothed_reward", "mean_loss"], rows)
    return ComparisonReport(runs, failures)
