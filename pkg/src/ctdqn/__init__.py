"""Continuous-time deep Q-network testbench.

Modules: :mod:`~ctdqn.sde_env` (controlled SDE simulation and large-deviation
radii), :mod:`~ctdqn.resnet_q` (residual Q-network with manual backprop),
:mod:`~ctdqn.qlearn` (replay, TD targets, training loop),
:mod:`~ctdqn.dp_oracle` (grid MDP ground truth) and :mod:`~ctdqn.harness`
(configurations, runs and comparisons).
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
