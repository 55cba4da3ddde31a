"""Finite-horizon controlled stochastic systems.

A problem is a horizon ``T`` with decisions at stages ``t = 0..T-1``, state
recursion ``s_{t+1} = f_t(s_t, a_t, xi_{t+1})``, stage rewards
``r_t(s_t, a_t, xi_{t+1})`` (the noise argument lets cost models charge the
post-transition price), and a terminal reward ``R(s_T)``.

Conventions used throughout the toolkit:

* All problem callables are batched: states ``(B, m)``, actions ``(B, n)``
  and noise ``(B, d)`` in, ``(B, ...)`` out.
* Rewards are stored in the problem's native sense (costs for minimization).
  The optimization engine works on the internal maximization form
  ``sign * reward`` where ``sign`` is +1 for "max" and -1 for "min"; every
  user-facing value is translated back to the native sense.
* Policies are callables ``(t, states (B, m)) -> actions (B, n)``.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, EvaluationError, ModelError
from .rng import stream

Policy = Callable[[int, np.ndarray], np.ndarray]

_PROB_TOL = 1e-12


# ---------------------------------------------------------------------------
# noise models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FiniteNoise:
    """Finite-support distribution: atom k has probability probs[k]."""

    atoms: np.ndarray  # (K, d)
    probs: np.ndarray  # (K,)

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        probs = np.asarray(self.probs, dtype=float)
        if atoms.shape[0] != probs.shape[0]:
            raise ModelError("finite noise atoms/probs length mismatch")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > _PROB_TOL:
            raise ModelError("finite noise probabilities must be >=0 and sum to 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "_cum", np.cumsum(probs))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def finite(self) -> bool:
        return True

    def draw(self, gen: np.random.Generator, size: int) -> np.ndarray:
        idx = np.searchsorted(self._cum, gen.random(size), side="right")
        return self.atoms[np.minimum(idx, len(self.probs) - 1)]


@dataclass(frozen=True)
class GaussianNoise:
    """Zero-mean Gaussian with covariance ``cov`` (PSD, possibly singular)."""

    cov: np.ndarray

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape[0] != cov.shape[1]:
            raise ModelError("covariance must be square")
        sym_err = np.max(np.abs(cov - cov.T))
        if sym_err > 1e-10 * (1.0 + np.max(np.abs(cov))):
            raise ModelError("covariance must be symmetric")
        w, v = np.linalg.eigh((cov + cov.T) / 2.0)
        if w.min() < -1e-10 * max(1.0, w.max()):
            raise ModelError("degenerate covariance: negative eigenvalue %g" % w.min())
        factor = v * np.sqrt(np.clip(w, 0.0, None))
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_factor", factor)

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    @property
    def finite(self) -> bool:
        return False

    def draw(self, gen: np.random.Generator, size: int) -> np.ndarray:
        return gen.standard_normal((size, self.dim)) @ self._factor.T


# ---------------------------------------------------------------------------
# action spaces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionSpace:
    """Feasible set of action sequences with exact projections.

    ``project_sequence`` maps proposals of shape ``(..., T, n)`` onto the
    feasible set of whole sequences (used by the pathwise inner solver).
    ``project_stage`` enforces the per-stage feasible set given the current
    state (used by policies); it must be idempotent and is applied to every
    policy output before simulation.
    ``sequence_constraints`` returns (equalities, inequalities) arrays for a
    single (T, n) sequence; feasibility means eq == 0 and ineq >= 0.
    """

    action_dim: int
    project_sequence: Callable[[np.ndarray], np.ndarray]
    project_stage: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    uniform_sequence: np.ndarray  # (T, n) feasible reference schedule
    random_sequence: Callable[[np.random.Generator], np.ndarray]
    sequence_constraints: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]

    def violation(self, actions: np.ndarray) -> float:
        """Max constraint violation of a (T, n) sequence."""
        eq, ineq = self.sequence_constraints(np.asarray(actions, dtype=float))
        worst = 0.0
        if eq.size:
            worst = max(worst, float(np.max(np.abs(eq))))
        if ineq.size:
            worst = max(worst, float(np.max(-np.minimum(ineq, 0.0))))
        return worst


# ---------------------------------------------------------------------------
# the control problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlProblem:
    """Immutable description of one finite-horizon control instance."""

    horizon: int
    state_dim: int
    action_dim: int
    noise_dim: int
    initial_state: np.ndarray
    dynamics: Callable  # (t, S, A, Xi) -> S'
    stage_reward: Callable  # (t, S, A, Xi) -> (B,), native sense
    terminal_reward: Callable  # (S,) -> (B,), native sense
    actions: ActionSpace
    noise: FiniteNoise | GaussianNoise
    sense: str = "max"
    # analytic derivatives of the native-sense rewards and of the dynamics
    dynamics_jac_state: Optional[Callable] = None  # (t,S,A,Xi) -> (B,m,m)
    dynamics_jac_action: Optional[Callable] = None  # (t,S,A,Xi) -> (B,m,n)
    reward_grad_state: Optional[Callable] = None  # (t,S,A,Xi) -> (B,m)
    reward_grad_action: Optional[Callable] = None  # (t,S,A,Xi) -> (B,n)
    terminal_grad: Optional[Callable] = None  # (S,) -> (B,m)
    name: str = "problem"

    def __post_init__(self):
        if self.sense not in ("max", "min"):
            raise ConfigurationError("sense must be 'max' or 'min'")
        for label, v in (("horizon", self.horizon), ("state_dim", self.state_dim),
                         ("action_dim", self.action_dim), ("noise_dim", self.noise_dim)):
            if int(v) <= 0:
                raise ConfigurationError(f"{label} must be positive")
        s0 = np.asarray(self.initial_state, dtype=float).reshape(self.state_dim)
        object.__setattr__(self, "initial_state", s0)
        if self.noise.dim != self.noise_dim:
            raise ModelError("noise model dimension does not match noise_dim")

    @property
    def sign(self) -> float:
        """+1 for maximization, -1 for minimization (internal form factor)."""
        return 1.0 if self.sense == "max" else -1.0

    def has_jacobians(self) -> bool:
        return all(f is not None for f in (
            self.dynamics_jac_state, self.dynamics_jac_action,
            self.reward_grad_state, self.reward_grad_action, self.terminal_grad))


# ---------------------------------------------------------------------------
# noise paths and datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoisePath:
    """One realization xi_1..xi_T with its provenance id."""

    entries: np.ndarray  # (T, d)
    path_id: int


@dataclass(frozen=True)
class NoiseDataset:
    """A set of noise paths partitioned into consecutive disjoint batches.

    ``probs`` is set only for enumerated finite-support datasets, in which
    case expectations over the dataset are exact.
    """

    entries: np.ndarray  # (N, T, d)
    path_ids: np.ndarray  # (N,)
    batch_size: int
    seed: Optional[int] = None
    probs: Optional[np.ndarray] = None

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        if entries.ndim != 3:
            raise ConfigurationError("dataset entries must have shape (N, T, d)")
        if len(self.path_ids) != entries.shape[0]:
            raise ConfigurationError("path_ids length mismatch")
        if entries.shape[0] % self.batch_size != 0:
            raise ConfigurationError("path count must be divisible by batch size")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "path_ids", np.asarray(self.path_ids, dtype=np.int64))
        if self.probs is not None:
            p = np.asarray(self.probs, dtype=float)
            if abs(p.sum() - 1.0) > _PROB_TOL:
                raise ConfigurationError("enumerated dataset probabilities must sum to 1")
            object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return self.entries.shape[0]

    @property
    def horizon(self) -> int:
        return self.entries.shape[1]

    @property
    def noise_dim(self) -> int:
        return self.entries.shape[2]

    def path(self, i: int) -> NoisePath:
        return NoisePath(self.entries[i], int(self.path_ids[i]))

    @property
    def batches(self) -> tuple[np.ndarray, ...]:
        n = len(self)
        return tuple(np.arange(b, b + self.batch_size)
                     for b in range(0, n, self.batch_size))

    def weights(self) -> np.ndarray:
        """Per-path expectation weights (probabilities or 1/N)."""
        if self.probs is not None:
            return self.probs
        return np.full(len(self), 1.0 / len(self))


def sample_noise_dataset(problem: ControlProblem, count: int, batch_size: int,
                         seed: int, epoch: int = 0) -> NoiseDataset:
    """Draw ``count`` i.i.d. noise paths from the problem's noise model.

    Path i uses its own stream keyed by (seed, "xi", epoch, i), so datasets
    are reproducible and independent of generation order.
    """
    if count <= 0 or batch_size <= 0 or count % batch_size != 0:
        raise ConfigurationError(
            f"count {count} must be a positive multiple of batch_size {batch_size}")
    T, d = problem.horizon, problem.noise_dim
    entries = np.empty((count, T, d))
    for i in range(count):
        entries[i] = problem.noise.draw(stream(seed, "xi", epoch, i), T)
    return NoiseDataset(entries, np.arange(count), batch_size, seed=seed)


def enumerate_noise_dataset(problem: ControlProblem, max_paths: int = 100_000) -> NoiseDataset:
    """All noise paths of a finite-support problem with exact probabilities."""
    if not problem.noise.finite:
        raise ConfigurationError("enumeration requires finite-support noise")
    atoms, probs = problem.noise.atoms, problem.noise.probs
    K, T = atoms.shape[0], problem.horizon
    total = K ** T
    if total > max_paths:
        raise ConfigurationError(f"enumeration of {total} paths exceeds limit {max_paths}")
    entries = np.empty((total, T, atoms.shape[1]))
    path_probs = np.ones(total)
    for i, combo in enumerate(itertools.product(range(K), repeat=T)):
        entries[i] = atoms[list(combo)]
        path_probs[i] = probs[list(combo)].prod()
    return NoiseDataset(entries, np.arange(total), batch_size=total, probs=path_probs)


# ---------------------------------------------------------------------------
# trajectories and policy evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """One simulated path: states s_0..s_T, actions a_0..a_{T-1}, rewards."""

    states: np.ndarray  # (T+1, m)
    actions: np.ndarray  # (T, n)
    rewards: np.ndarray  # (T,), native sense
    terminal: float
    total: float


@dataclass(frozen=True)
class PolicyValue:
    mean: float
    stderr: float
    totals: np.ndarray  # per-path totals, native sense


def _rollout_batch(problem: ControlProblem, policy: Policy,
                   entries: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Simulate all paths stage-synchronously. Returns (states, actions, totals)."""
    N, T, _ = entries.shape
    m, n = problem.state_dim, problem.action_dim
    states = np.empty((N, T + 1, m))
    actions = np.empty((N, T, n))
    rewards = np.zeros((N, T))
    states[:, 0] = problem.initial_state
    for t in range(T):
        S = states[:, t]
        A = np.asarray(policy(t, S), dtype=float).reshape(N, n)
        if not np.all(np.isfinite(A)):
            bad = int(np.argmax(~np.isfinite(A).all(axis=1)))
            raise EvaluationError(
                f"policy produced a non-finite action at t={t}, state={S[bad]}")
        A = problem.actions.project_stage(t, S, A)
        Xi = entries[:, t]
        rewards[:, t] = problem.stage_reward(t, S, A, Xi)
        states[:, t + 1] = problem.dynamics(t, S, A, Xi)
        actions[:, t] = A
    totals = rewards.sum(axis=1) + problem.terminal_reward(states[:, T])
    return states, actions, totals


def rollout(problem: ControlProblem, policy: Policy, path: NoisePath) -> Trajectory:
    """Simulate one path under a (possibly infeasible) policy.

    Policy outputs are passed through the per-stage projector, so the stored
    actions always satisfy the stage constraints.
    """
    states, actions, totals = _rollout_batch(problem, policy, path.entries[None])
    m = problem.state_dim
    S = states[0]
    A = actions[0]
    rewards = np.empty(problem.horizon)
    for t in range(problem.horizon):
        rewards[t] = problem.stage_reward(
            t, S[t][None], A[t][None], path.entries[t][None])[0]
    terminal = float(problem.terminal_reward(S[-1][None])[0])
    return Trajectory(S.reshape(-1, m), A, rewards, terminal, float(totals[0]))


def evaluate_policy(problem: ControlProblem, policy: Policy,
                    dataset: NoiseDataset) -> PolicyValue:
    """Mean total reward of a policy over a dataset, in the native sense.

    On enumerated datasets this is the exact probability-weighted expectation
    (standard error 0); otherwise the sample mean with its unbiased standard
    error (variance divided by N-1).
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot evaluate a policy on an empty dataset")
    _, _, totals = _rollout_batch(problem, policy, dataset.entries)
    if dataset.probs is not None:
        return PolicyValue(float(dataset.probs @ totals), 0.0, totals)
    mean = float(totals.mean())
    stderr = 0.0
    if len(totals) > 1:
        stderr = float(totals.std(ddof=1) / np.sqrt(len(totals)))
    return PolicyValue(mean, stderr, totals)


# ---------------------------------------------------------------------------
# dataset serialization
# ---------------------------------------------------------------------------


def save_dataset_csv(dataset: NoiseDataset, path: str) -> None:
    """CSV layout: header comment (count, T, d, seed), then one row per (path, t)."""
    T, d = dataset.horizon, dataset.noise_dim
    with open(path, "w", newline="") as fh:
        fh.write(f"# count={len(dataset)} T={T} d={d} "
                 f"seed={dataset.seed if dataset.seed is not None else -1} "
                 f"batch_size={dataset.batch_size}\n")
        writer = csv.writer(fh)
        writer.writerow(["path_id", "t"] + [f"xi_{j+1}" for j in range(d)])
        for i in range(len(dataset)):
            pid = int(dataset.path_ids[i])
            for t in range(T):
                writer.writerow([pid, t] + [repr(x) for x in dataset.entries[i, t]])


def load_dataset_csv(path: str) -> NoiseDataset:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ConfigurationError("dataset file missing header line")
        meta = dict(kv.split("=") for kv in header[1:].split())
        count, T, d = int(meta["count"]), int(meta["T"]), int(meta["d"])
        seed = int(meta.get("seed", -1))
        batch = int(meta.get("batch_size", count))
        reader = csv.reader(fh)
        next(reader)  # column names
        entries = np.empty((count, T, d))
        ids = np.empty(count, dtype=np.int64)
        row_index = {}
        for row in reader:
            pid, t = int(row[0]), int(row[1])
            if pid not in row_index:
                row_index[pid] = len(row_index)
            i = row_index[pid]
            ids[i] = pid
            entries[i, t] = [float(x) for x in row[2:2 + d]]
    return NoiseDataset(entries, ids, batch, seed=None if seed < 0 else seed)
