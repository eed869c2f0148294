"""Command-line entry point: ``ctdqn <command> ...``.

Commands: ``ldp``, ``gradcheck``, ``uat``, ``train``, ``oracle`` (with the
``contraction`` action) and ``compare``. CSV output goes to stdout unless
``--out`` is given.
"""
from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from .dp_oracle import build_grid_mdp, contraction_ratio, solve_q_star
from .harness import BUILTIN_NAMES, RunConfig, builtin_config, compare_configs, run_config
from .resnet_q import Architecture, fit_supervised, gradient_check, init_network
from .sde_env import empirical_exceedance, ldp_radius, ldp_tail_bound, make_stabilization_env

UAT_TARGETS = {
    "sin3s+a": lambda X: np.sin(3.0 * X[:, 0]) + X[:, 1],
    "abs_s+a": lambda X: np.abs(X[:, 0]) + X[:, 1],
    "sin3s": lambda X: np.sin(3.0 * X[:, 0]),
}

_ARCH_ALIASES = {
    "hidden": "hidden_dim",
    "blocks": "n_blocks",
    "out": "n_out",
    "width": "block_width",
    "act": "activation",
}


def parse_arch(spec: str) -> Architecture:
    """``key=value`` pairs separated by commas, e.g. ``hidden=8,blocks=2,activation=tanh``."""
    kw = {"state_dim": 1, "hidden_dim": 8, "n_blocks": 2, "n_out": 3}
    for item in filter(None, (p.strip() for p in spec.split(","))):
        if "=" not in item:
            raise ValueError(f"bad architecture item {item!r}; expected key=value")
        k, v = (x.strip() for x in item.split("=", 1))
        k = _ARCH_ALIASES.get(k, k)
        kw[k] = _coerce(v)
    if kw.get("mode") == "action_in":
        kw.setdefault("action_dim", 1)
        kw["n_out"] = 1
    return Architecture(**kw)


def _coerce(v: str):
    low = v.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def _writer(out):
    if out is None:
        return csv.writer(sys.stdout, lineterminator="\n"), None
    f = open(out, "w", newline="", encoding="utf-8")
    return csv.writer(f, lineterminator="\n"), f


def cmd_ldp(args) -> int:
    c = ldp_radius(args.lh, args.lsigma, args.k, args.n, args.t, abs(args.x0), args.delta)
    empirical = ""
    if args.mc_trials:
        model, actions = make_stabilization_env(sigma=args.sigma, dt=args.dt, max_t=max(1, round(args.t / args.dt)))
        model = model.unclipped()
        freq = empirical_exceedance(
            model,
            actions,
            lambda t, S: -np.sign(S),
            c.r1,
            args.mc_trials,
            args.seed,
            max_steps=round(args.t / args.dt),
            dt=args.dt,
            s0=[args.x0],
        )
        empirical = repr(freq)
    w, _ = _writer(None)
    w.writerow(["c1", "c2", "c3", "r1", "bound", "empirical"])
    w.writerow([repr(c.c1), repr(c.c2), repr(c.c3), repr(c.r1), repr(ldp_tail_bound(c, c.r1)), empirical])
    return 0


def cmd_gradcheck(args) -> int:
    arch = parse_arch(args.arch)
    net = init_network(arch, args.seed)
    rng = np.random.default_rng(args.seed)
    s = rng.uniform(-1.0, 1.0, arch.state_dim)
    t = float(rng.uniform(0.0, arch.time_scale))
    if arch.mode == "multi_head":
        a = int(rng.integers(arch.n_out))
    else:
        a = rng.uniform(-1.0, 1.0, arch.action_dim)
    res = gradient_check(net, t, s, a)
    print(f"max_rel_error={res.max_rel_error:.3e} checked={res.n_checked} kink_excluded={res.n_kink_excluded}")
    return 0


def cmd_uat(args) -> int:
    if args.target not in UAT_TARGETS:
        raise ValueError(f"unknown target {args.target!r}; choose from {', '.join(UAT_TARGETS)}")
    target = UAT_TARGETS[args.target]
    box = (np.full(2, -1.0), np.full(2, 1.0))
    w, f = _writer(args.out)
    w.writerow(["depth", "width", "sup_error"])
    for depth in (int(d) for d in args.depths.split(",")):
        r = fit_supervised(target, box, depth, args.width, args.budget, args.seed)
        w.writerow([depth, args.width, repr(r.sup_error)])
    if f:
        f.close()
    return 0


def _load_config(path, seed=None) -> RunConfig:
    cfg = RunConfig.load(path) if path else builtin_config("Baseline")
    if seed is not None:
        cfg.seed = seed
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    if args.episodes is not None:
        cfg.train.n_episodes = args.episodes
    res = run_config(cfg, args.out, oracle=args.oracle)
    log = res.log
    print(f"episodes={len(log.episodes)} steps={log.steps} updates={log.updates} final_smoothed_reward={res.final_smoothed_reward:.6g}")
    if log.failed:
        print(f"training failed at step {log.failure_step}: {log.failure}", file=sys.stderr)
        return 1
    return 0


def _oracle_grid(cfg: RunConfig, n_states: int, mode: str):
    model, actions = make_stabilization_env(cfg.env.sigma, cfg.env.action_cost, cfg.env.dt, cfg.env.max_t)
    grid = build_grid_mdp(
        model,
        actions,
        n_states,
        cfg.env.dt,
        mode=cfg.train.target_mode,
        gamma=cfg.train.gamma,
        horizon_steps=cfg.env.max_t if mode == "finite_horizon" else None,
    )
    return grid, actions


def cmd_oracle(args) -> int:
    cfg = _load_config(args.config)
    grid, actions = _oracle_grid(cfg, args.states, args.mode)
    if args.action == "contraction":
        rng = np.random.default_rng(args.seed)
        worst = 0.0
        for _ in range(args.pairs):
            q1 = rng.normal(scale=10.0, size=(grid.n_states, grid.n_actions))
            q2 = rng.normal(scale=10.0, size=q1.shape)
            worst = max(worst, contraction_ratio(grid, q1, q2).ratio)
        print(f"max_ratio={worst!r} gamma_eff={grid.gamma_eff!r}")
        return 0
    res = solve_q_star(grid, tol=args.tol, mode=args.mode)
    q, v = (res.q[0], res.v[0]) if args.mode == "finite_horizon" else (res.q, res.v)
    w, f = _writer(args.out)
    w.writerow(["s", "a", "q_star", "v_star"])
    for i, s in enumerate(grid.state_grid):
        for j in range(grid.n_actions):
            w.writerow([repr(float(s)), repr(float(actions[j][0])), repr(float(q[i, j])), repr(float(v[i]))])
    if f:
        f.close()
    return 0


def cmd_compare(args) -> int:
    names = [n.strip() for n in args.configs.split(",") if n.strip()]
    rep = compare_configs(names, args.out, oracle=args.oracle, base_seed=args.seed, n_episodes=args.episodes)
    for name, value in rep.final_smoothed().items():
        print(f"{name}: final_smoothed_reward={value:.6g}")
    for name, err in rep.failures.items():
        print(f"{name}: FAILED {err}", file=sys.stderr)
    return 1 if rep.failures else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctdqn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("ldp", help="large-deviation constants and optional Monte-Carlo exceedance")
    q.add_argument("--lh", type=float, required=True)
    q.add_argument("--lsigma", type=float, required=True)
    q.add_argument("--k", type=float, required=True)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--t", type=float, required=True)
    q.add_argument("--x0", type=float, default=0.0)
    q.add_argument("--delta", type=float, required=True)
    q.add_argument("--mc-trials", type=int, default=0, help="trajectories of the unclipped stabilization env")
    q.add_argument("--sigma", type=float, default=0.1)
    q.add_argument("--dt", type=float, default=0.1)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_ldp)

    q = sub.add_parser("gradcheck", help="analytic vs central-difference gradient of a random network")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--arch", default="", help="e.g. hidden=8,blocks=2,activation=tanh")
    q.set_defaults(func=cmd_gradcheck)

    q = sub.add_parser("uat", help="depth sweep of supervised fits")
    q.add_argument("--target", default="sin3s+a")
    q.add_argument("--depths", default="1,2,4,8")
    q.add_argument("--width", type=int, default=16)
    q.add_argument("--budget", type=int, default=200_000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q.set_defaults(func=cmd_uat)

    q = sub.add_parser("train", help="train one configuration")
    q.add_argument("--config", help="flat JSON config (default: Baseline)")
    q.add_argument("--seed", type=int)
    q.add_argument("--out", required=True)
    q.add_argument("--episodes", type=int)
    q.add_argument("--oracle", action="store_true", help="record sup error against the grid oracle at checkpoints")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("oracle", help="grid Q* or contraction check")
    q.add_argument("action", nargs="?", choices=("solve", "contraction"), default="solve")
    q.add_argument("--config")
    q.add_argument("--states", type=int, default=201)
    q.add_argument("--mode", choices=("stationary", "finite_horizon"), default="stationary")
    q.add_argument("--tol", type=float, default=1e-10)
    q.add_argument("--pairs", type=int, default=100)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q.set_defaults(func=cmd_oracle)

    q = sub.add_parser("compare", help="run built-in configurations side by side")
    q.add_argument("--configs", default=",".join("".join(n.split()) for n in BUILTIN_NAMES))
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=42)
    q.add_argument("--episodes", type=int, help="override the episode count of every configuration")
    q.add_argument("--oracle", action="store_true")
    q.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
