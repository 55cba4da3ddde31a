"""Information-relaxation machinery: penalties, pathwise inner maximization,
and Monte Carlo dual bounds.

Given a generating function W = (W_0..W_T), each stage contributes the
martingale-difference penalty

    z_t = W_{t+1}(s_{t+1}) - E[W_{t+1}(f_t(s_t, a_t, eta))],

whose expectation vanishes under every non-anticipative policy. The pathwise
objective Y(a, xi) = total internal reward - sum_t z_t is maximized over the
whole feasible action sequence separately on each noise path (the action
sequence may look ahead); averaging the per-path maxima gives a bound on the
optimal value: an upper bound for maximization problems, a lower bound for
minimization once translated back to the native sense.

All values in this module are in the internal maximization sense unless a
result type says otherwise. The inner expectation over eta uses a sample
frozen per (seed, iteration, t): common random numbers make each per-path
problem deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .control import ControlProblem, NoiseDataset, NoisePath
from .errors import ConfigurationError, FeasibilityError
from .neural import GeneratingFunction
from .rng import stream

FEAS_TOL = 1e-9
GRAD_TOL = 1e-6
ACCEPT_TOL = 1e-3
MAX_ITER = 500
START_LABELS = ("warm", "uniform", "random")


@dataclass(frozen=True)
class PenaltyContext:
    """A generating function plus the frozen inner-expectation scheme."""

    problem: ControlProblem
    gen: GeneratingFunction
    scheme: str  # "exact" | "mc"
    eta_atoms: tuple  # per t: (K_t, d) sample/support for the inner expectation
    eta_weights: tuple  # per t: (K_t,) weights summing to 1
    seed: int = 0
    iteration: int = 0

    @property
    def horizon(self) -> int:
        return self.problem.horizon


def make_penalty_context(problem: ControlProblem, gen: GeneratingFunction,
                         scheme: str = "exact", n_inner: int = 2000,
                         seed: int = 0, iteration: int = 0) -> PenaltyContext:
    """Freeze the eta sample used inside penalty expectations.

    "exact" enumerates the (finite) noise support with its probabilities;
    "mc" draws n_inner points per stage from the stream keyed by
    (seed, "eta", iteration, t), independent of all outer path noise.
    """
    if gen.horizon != problem.horizon:
        raise ConfigurationError("generating function horizon mismatch")
    T = problem.horizon
    if scheme == "exact":
        if not problem.noise.finite:
            raise ConfigurationError("exact expectations need finite-support noise")
        atoms = tuple(problem.noise.atoms for _ in range(T))
        weights = tuple(problem.noise.probs for _ in range(T))
    elif scheme == "mc":
        if n_inner <= 0:
            raise ConfigurationError("n_inner must be positive")
        atoms, weights = [], []
        for t in range(T):
            atoms.append(problem.noise.draw(stream(seed, "eta", iteration, t), n_inner))
            weights.append(np.full(n_inner, 1.0 / n_inner))
        atoms, weights = tuple(atoms), tuple(weights)
    else:
        raise ConfigurationError(f"unknown expectation scheme {scheme!r}")
    return PenaltyContext(problem, gen, scheme, atoms, weights, seed, iteration)


def _tile_for_eta(ctx: PenaltyContext, t: int, S: np.ndarray, A: np.ndarray):
    K = ctx.eta_atoms[t].shape[0]
    B = S.shape[0]
    S_rep = np.repeat(S, K, axis=0)
    A_rep = np.repeat(A, K, axis=0)
    E = np.tile(ctx.eta_atoms[t], (B, 1))
    return S_rep, A_rep, E, K


def _expected_w_next(ctx: PenaltyContext, t: int, S: np.ndarray, A: np.ndarray) -> np.ndarray:
    """E[W_{t+1}(f_t(s, a, eta))] under the frozen sample, batched over rows."""
    S_rep, A_rep, E, K = _tile_for_eta(ctx, t, S, A)
    nxt = ctx.problem.dynamics(t, S_rep, A_rep, E)
    vals = ctx.gen.value(t + 1, nxt).reshape(S.shape[0], K)
    return vals @ ctx.eta_weights[t]


def _jac_T_vec(J: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rows of J^T v for batched Jacobians; constant (broadcast) J uses BLAS."""
    if J.ndim == 3 and J.strides[0] == 0:
        return v @ J[0]
    return np.einsum("bij,bi->bj", J, v)


def _expected_w_next_grads(ctx: PenaltyContext, t: int, S: np.ndarray, A: np.ndarray):
    """Value plus gradients of E[W_{t+1}(f(s, a, eta))] w.r.t. s and a."""
    p = ctx.problem
    S_rep, A_rep, E, K = _tile_for_eta(ctx, t, S, A)
    nxt = p.dynamics(t, S_rep, A_rep, E)
    raw_vals, gW = ctx.gen.value_and_grad_state(t + 1, nxt)
    vals = raw_vals.reshape(S.shape[0], K)
    Js = p.dynamics_jac_state(t, S_rep, A_rep, E)
    Ja = p.dynamics_jac_action(t, S_rep, A_rep, E)
    gs = _jac_T_vec(Js, gW).reshape(S.shape[0], K, -1)
    ga = _jac_T_vec(Ja, gW).reshape(S.shape[0], K, -1)
    w = ctx.eta_weights[t]
    return vals @ w, np.einsum("bkj,k->bj", gs, w), np.einsum("bkj,k->bj", ga, w)


def penalty_term(ctx: PenaltyContext, t: int, s_t, a_t, s_next) -> float:
    """One martingale-difference penalty term z_t (scalar convenience form)."""
    if not 0 <= t < ctx.horizon:
        raise IndexError(f"penalty terms exist for t in 0..{ctx.horizon - 1}, got {t}")
    S = np.atleast_2d(np.asarray(s_t, dtype=float))
    A = np.atleast_2d(np.asarray(a_t, dtype=float))
    Snext = np.atleast_2d(np.asarray(s_next, dtype=float))
    w_next = ctx.gen.value(t + 1, Snext)
    return float(w_next[0] - _expected_w_next(ctx, t, S, A)[0])


# ---------------------------------------------------------------------------
# pathwise objective
# ---------------------------------------------------------------------------


def _objective_batch(ctx: PenaltyContext, entries: np.ndarray, A: np.ndarray):
    """Y, per-stage penalties, and states for a batch of (path, action) rows.

    entries: (R, T, d) noise paths; A: (R, T, n) action sequences.
    """
    p = ctx.problem
    R, T = entries.shape[0], ctx.horizon
    states = np.empty((R, T + 1, p.state_dim))
    states[:, 0] = p.initial_state
    Z = np.empty((R, T))
    Y = np.zeros(R)
    sign = p.sign
    for t in range(T):
        S, At, Xi = states[:, t], A[:, t], entries[:, t]
        Y += sign * p.stage_reward(t, S, At, Xi)
        states[:, t + 1] = p.dynamics(t, S, At, Xi)
        Z[:, t] = ctx.gen.value(t + 1, states[:, t + 1]) - _expected_w_next(ctx, t, S, At)
    Y += sign * p.terminal_reward(states[:, T]) - Z.sum(axis=1)
    return Y, Z, states


def _gradient_batch(ctx: PenaltyContext, entries: np.ndarray, A: np.ndarray,
                    states: np.ndarray) -> np.ndarray:
    """dY/dA by the adjoint recursion through dynamics and W networks."""
    p = ctx.problem
    R, T = entries.shape[0], ctx.horizon
    sign = p.sign
    G = np.empty_like(A)
    lam = sign * p.terminal_grad(states[:, T]) - ctx.gen.grad_state(T, states[:, T])
    for t in range(T - 1, -1, -1):
        S, At, Xi = states[:, t], A[:, t], entries[:, t]
        _, egrad_s, egrad_a = _expected_w_next_grads(ctx, t, S, At)
        Ja = p.dynamics_jac_action(t, S, At, Xi)
        G[:, t] = (sign * p.reward_grad_action(t, S, At, Xi) + egrad_a
                   + _jac_T_vec(Ja, lam))
        if t > 0:
            Js = p.dynamics_jac_state(t, S, At, Xi)
            lam = (sign * p.reward_grad_state(t, S, At, Xi) + egrad_s
                   - ctx.gen.grad_state(t, S)
                   + _jac_T_vec(Js, lam))
    return G


def pathwise_objective(ctx: PenaltyContext, actions: np.ndarray, path: NoisePath):
    """Y(a, xi) with its per-stage penalties and the generated trajectory.

    ``actions`` must already be feasible (tolerance 1e-9); Y is reported in
    the internal maximization sense.
    """
    A = np.asarray(actions, dtype=float).reshape(ctx.horizon, ctx.problem.action_dim)
    viol = ctx.problem.actions.violation(A)
    if viol > FEAS_TOL:
        raise FeasibilityError(f"action sequence infeasible: max violation {viol:g}")
    Y, Z, states = _objective_batch(ctx, path.entries[None], A[None])
    p = ctx.problem
    rewards = np.array([
        p.stage_reward(t, states[0, t][None], A[t][None], path.entries[t][None])[0]
        for t in range(ctx.horizon)])
    from .control import Trajectory  # local import: avoid cycles in type-only use
    traj = Trajectory(states[0], A, rewards,
                      float(p.terminal_reward(states[0, -1][None])[0]),
                      float(rewards.sum() + p.terminal_reward(states[0, -1][None])[0]))
    return float(Y[0]), Z[0], traj


# ---------------------------------------------------------------------------
# projected-gradient inner solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DualSolveResult:
    """Per-path inner maximization outcome (internal sense)."""

    actions: np.ndarray  # (T, n)
    objective: float  # Y* = max_a Y(a, xi)
    penalties: np.ndarray  # (T,) z_t at the maximizer
    iterations: int
    kkt_residual: float
    start_label: str
    converged: bool
    path_id: int = -1


def _pg_maximize(ctx: PenaltyContext, entries: np.ndarray, starts: np.ndarray,
                 max_iter: int = MAX_ITER, tol: float = GRAD_TOL):
    """Projected-gradient ascent with Armijo backtracking, batched over rows.

    Every row is an independent deterministic problem (its own noise path and
    start). Returns (actions, objectives, iterations, residuals).
    """
    project = ctx.problem.actions.project_sequence
    A = project(np.array(starts, dtype=float))
    R = A.shape[0]
    Y, _, states = _objective_batch(ctx, entries, A)
    bad = ~np.isfinite(Y)
    Y = np.where(bad, -np.inf, Y)
    iters = np.zeros(R, dtype=int)
    residual = np.full(R, np.inf)
    active = np.arange(R)[~bad]
    residual[bad] = np.inf
    step = np.ones(R)
    for _ in range(max_iter):
        if active.size == 0:
            break
        idx = active
        G = _gradient_batch(ctx, entries[idx], A[idx], states[idx])
        # KKT residual: distance moved by a unit projected-gradient step
        probe = project(A[idx] + G)
        res = np.max(np.abs(probe - A[idx]), axis=(1, 2))
        residual[idx] = res
        done = res <= tol
        if np.any(done):
            keep = ~done
            idx = idx[keep]
            G = G[keep]
            if idx.size == 0:
                break
        iters[idx] += 1
        # Armijo backtracking along the projection arc, per row
        trial = np.minimum(step[idx] * 2.0, 1e3)
        remaining = np.arange(idx.size)
        newA = A[idx].copy()
        newY = Y[idx].copy()
        newS = states[idx].copy()
        for _ls in range(40):
            if remaining.size == 0:
                break
            rows = idx[remaining]
            cand = project(A[rows] + trial[remaining, None, None] * G[remaining])
            Yc, _, Sc = _objective_batch(ctx, entries[rows], cand)
            Yc = np.where(np.isfinite(Yc), Yc, -np.inf)
            gain = np.einsum("rij,rij->r", G[remaining], cand - A[rows])
            ok = Yc >= Y[rows] + 1e-4 * gain
            stalled = trial[remaining] < 1e-14
            accept = ok | stalled
            improved = remaining[ok]
            newA[improved] = cand[ok]
            newY[improved] = Yc[ok]
            newS[improved] = Sc[ok]
            step[idx[remaining[accept]]] = trial[remaining[accept]]
            trial[remaining[~accept]] *= 0.5
            remaining = remaining[~accept]
        moved = np.max(np.abs(newA - A[idx]), axis=(1, 2))
        A[idx] = newA
        Y[idx] = newY
        states[idx] = newS
        # rows that stalled (no movement possible) are finished
        active = idx[moved > 0.0]
    if active.size:
        G = _gradient_batch(ctx, entries[active], A[active], states[active])
        probe = project(A[active] + G)
        residual[active] = np.max(np.abs(probe - A[active]), axis=(1, 2))
    return A, Y, iters, residual


def _build_starts(ctx: PenaltyContext, path_ids: Sequence[int],
                  warm: Optional[np.ndarray]) -> np.ndarray:
    """(P, 3, T, n) stack: warm (zeros proposal if absent), uniform, random."""
    p = ctx.problem
    space = p.actions
    P = len(path_ids)
    T, n = p.horizon, p.action_dim
    starts = np.empty((P, 3, T, n))
    zeros = space.project_sequence(np.zeros((T, n)))
    uniform = np.asarray(space.uniform_sequence, dtype=float)
    for i, pid in enumerate(path_ids):
        starts[i, 0] = zeros if warm is None else warm[i]
        starts[i, 1] = uniform
        starts[i, 2] = space.random_sequence(
            stream(ctx.seed, "inner-start", ctx.iteration, int(pid)))
    return starts


def solve_paths(ctx: PenaltyContext, entries: np.ndarray,
                path_ids: Optional[Sequence[int]] = None,
                warm: Optional[np.ndarray] = None,
                max_iter: int = MAX_ITER) -> list[DualSolveResult]:
    """Inner maximization for a batch of paths with three starts each.

    The best objective wins; exact ties go to the earliest start in the
    order (warm, uniform, random), which pins down maximizers when the
    objective is flat.
    """
    P, T, _ = entries.shape
    n = ctx.problem.action_dim
    if path_ids is None:
        path_ids = list(range(P))
    starts = _build_starts(ctx, path_ids, warm)
    flat_entries = np.repeat(entries, 3, axis=0)
    A, Y, iters, residual = _pg_maximize(
        ctx, flat_entries, starts.reshape(P * 3, T, n), max_iter=max_iter)
    results = []
    for i in range(P):
        block = slice(3 * i, 3 * i + 3)
        Yi = Y[block]
        best = 0
        for s in range(1, 3):
            if Yi[s] > Yi[best]:
                best = s
        row = 3 * i + best
        a_star = A[row]
        _, Z, _ = _objective_batch(ctx, entries[i][None], a_star[None])
        results.append(DualSolveResult(
            actions=a_star,
            objective=float(Y[row]),
            penalties=Z[0],
            iterations=int(iters[row]),
            kkt_residual=float(residual[row]),
            start_label=START_LABELS[best],
            converged=bool(residual[row] <= ACCEPT_TOL and np.isfinite(Y[row])),
            path_id=int(path_ids[i]),
        ))
    return results


def inner_solve(ctx: PenaltyContext, path: NoisePath,
                warm_start: Optional[np.ndarray] = None) -> DualSolveResult:
    """Deterministic inner maximization along one noise path."""
    warm = None
    if warm_start is not None:
        warm = np.asarray(warm_start, dtype=float).reshape(
            1, ctx.horizon, ctx.problem.action_dim)
    return solve_paths(ctx, path.entries[None], [path.path_id], warm)[0]


# ---------------------------------------------------------------------------
# Monte Carlo dual values
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DualValue:
    """Dual bound estimate in the problem's native sense."""

    mean: float
    stderr: float
    per_path: np.ndarray
    iterations: np.ndarray
    residuals: np.ndarray
    n_not_converged: int

    def ci95(self) -> tuple[float, float]:
        half = 1.959963984540054 * self.stderr
        return (self.mean - half, self.mean + half)


def dual_value(ctx: PenaltyContext, dataset: NoiseDataset,
               warm: Optional[np.ndarray] = None, chunk: int = 64,
               workers: int = 1, max_iter: int = MAX_ITER) -> DualValue:
    """Average pathwise inner maximum over a dataset, with standard error.

    Enumerated datasets give the exact probability-weighted expectation
    (standard error 0). Work is split into fixed-size chunks so results do
    not depend on the worker count.
    """
    if len(dataset) == 0:
        raise ConfigurationError("dual value needs a nonempty dataset")
    N = len(dataset)
    Y = np.empty(N)
    iters = np.empty(N, dtype=int)
    residuals = np.empty(N)
    flags = np.zeros(N, dtype=bool)

    def run_chunk(lo: int) -> None:
        hi = min(lo + chunk, N)
        w = None if warm is None else warm[lo:hi]
        res = solve_paths(ctx, dataset.entries[lo:hi],
                          dataset.path_ids[lo:hi], w, max_iter=max_iter)
        for j, r in enumerate(res):
            Y[lo + j] = r.objective
            iters[lo + j] = r.iterations
            residuals[lo + j] = r.kkt_residual
            flags[lo + j] = not r.converged

    offsets = list(range(0, N, chunk))
    if workers > 1 and len(offsets) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_chunk, offsets))
    else:
        for lo in offsets:
            run_chunk(lo)
    sign = ctx.problem.sign
    native = sign * Y
    if dataset.probs is not None:
        mean, stderr = float(dataset.probs @ native), 0.0
    else:
        mean = float(native.mean())
        stderr = float(native.std(ddof=1) / np.sqrt(N)) if N > 1 else 0.0
    return DualValue(mean, stderr, native, iters, residuals, int(flags.sum()))
