"""Small exactly solvable test problems.

ToyChain(T): scalar state starting at 0, actions in [0, 1], equiprobable
noise xi in {-1, +1}, dynamics s' = s + a * xi, zero stage rewards and
terminal reward R(s) = s (maximization). Every non-anticipative policy has
value 0; the anticipative (perfect information) value is T/2 per unit of
allowed action. Toy-T1 is the T = 1 case.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from ..control import ActionSpace, ControlProblem, FiniteNoise
from ..errors import ConfigurationError

MAX_TOY_HORIZON = 4  # enumeration of 2^T paths stays trivial


def _box_space(T: int) -> ActionSpace:
    def project_sequence(a):
        return np.clip(a, 0.0, 1.0)

    def project_stage(t, states, actions):
        return np.clip(actions, 0.0, 1.0)

    def constraints(a):
        a = np.asarray(a, dtype=float).ravel()
        return np.empty(0), np.concatenate([a, 1.0 - a])

    return ActionSpace(
        action_dim=1,
        project_sequence=project_sequence,
        project_stage=project_stage,
        uniform_sequence=np.full((T, 1), 0.5),
        random_sequence=lambda gen: gen.random((T, 1)),
        sequence_constraints=constraints,
    )


def make_toy_chain(T: int, terminal: Optional[Callable] = None,
                   terminal_grad: Optional[Callable] = None) -> ControlProblem:
    """Chain of T identical stages; ``terminal`` overrides R(s) = s."""
    if not 1 <= T <= MAX_TOY_HORIZON:
        raise ConfigurationError(
            f"toy chain horizon must be in 1..{MAX_TOY_HORIZON} (got {T})")

    def dynamics(t, S, A, Xi):
        return S + A * Xi

    def stage_reward(t, S, A, Xi):
        return np.zeros(S.shape[0])

    if terminal is None:
        terminal = lambda S: S[:, 0].copy()
        terminal_grad = lambda S: np.ones_like(S)
    elif terminal_grad is None:
        raise ConfigurationError("custom terminal reward needs terminal_grad")

    B1 = lambda S: np.ones((S.shape[0], 1, 1))
    return ControlProblem(
        horizon=T,
        state_dim=1,
        action_dim=1,
        noise_dim=1,
        initial_state=np.zeros(1),
        dynamics=dynamics,
        stage_reward=stage_reward,
        terminal_reward=terminal,
        actions=_box_space(T),
        noise=FiniteNoise(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5])),
        sense="max",
        dynamics_jac_state=lambda t, S, A, Xi: B1(S),
        dynamics_jac_action=lambda t, S, A, Xi: Xi[:, :, None].copy(),
        reward_grad_state=lambda t, S, A, Xi: np.zeros_like(S),
        reward_grad_action=lambda t, S, A, Xi: np.zeros_like(A),
        terminal_grad=terminal_grad,
        name=f"toy-chain-{T}",
    )


def make_toy_t1() -> ControlProblem:
    """The single-stage toy: V* = 0, perfect-information value 1/2."""
    return make_toy_chain(1)
