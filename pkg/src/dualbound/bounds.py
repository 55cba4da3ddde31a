"""Everything downstream of a trained generating function: greedy policies,
primal/dual bound reports, exact oracles, and the empirical-risk baseline.

The sandwich logic: the greedy one-step-lookahead policy is non-anticipative,
so its simulated value bounds the optimum from the suboptimal side; the dual
value bounds it from the other side; the relative gap between the two
certifies how close the policy is to optimal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .control import (ControlProblem, NoiseDataset, enumerate_noise_dataset,
                      evaluate_policy, sample_noise_dataset)
from .duality import dual_value, make_penalty_context
from .envs.execution import TradeExecModel, make_exec_problem
from .errors import ConfigurationError, EvaluationError, ModelError
from .neural import (FeatureMap, GeneratingFunction, MlpParams, mlp_forward,
                     mlp_init, mlp_vjp, params_from_flat, params_to_flat)
from .rng import stream
from .training import AdamState, adam_update, checkpoint_hash, stream_key

GAP_FLOOR = 1e-9
Z95 = 1.959963984540054


def relative_gap(primal: float, dual: float) -> float:
    """|primal - dual| / |dual|, floored at |dual| = 1e-9 so that exactly
    tight bounds on problems with optimal value 0 report a zero gap."""
    return abs(primal - dual) / max(abs(dual), GAP_FLOOR)


# ---------------------------------------------------------------------------
# greedy one-step-lookahead policy
# ---------------------------------------------------------------------------


class GreedyPolicy:
    """argmax_a r_t(s, a) + E[W_{t+1}(f_t(s, a, xi))], batched over states.

    The lookahead expectation uses a sample frozen per stage (keyed by
    (seed, "greedy", t)), so repeated queries are deterministic. The
    per-state argmax runs the same projected-gradient engine as the inner
    solver, restricted to one stage, from three starts (zero proposal,
    uniform schedule share, random feasible); exact ties keep the earliest
    start. Per-call solver diagnostics land in ``last_residuals``.
    """

    def __init__(self, problem: ControlProblem, gen: GeneratingFunction,
                 scheme: str = "mc", n_samples: int = 2000, seed: int = 0,
                 max_iter: int = 100, tol: float = 1e-6):
        if scheme == "exact" and not problem.noise.finite:
            raise ConfigurationError("exact lookahead needs finite-support noise")
        if scheme not in ("exact", "mc"):
            raise ConfigurationError(f"unknown expectation scheme {scheme!r}")
        self.problem = problem
        self.gen = gen
        self.scheme = scheme
        self.n_samples = int(n_samples)
        self.seed = int(seed)
        self.max_iter = int(max_iter)
        self.tol = float(tol)
        self.last_residuals: Optional[np.ndarray] = None
        self.flagged_queries = 0
        self._xi: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _stage_sample(self, t: int):
        if t not in self._xi:
            noise = self.problem.noise
            if self.scheme == "exact":
                self._xi[t] = (noise.atoms, noise.probs)
            else:
                atoms = noise.draw(stream(self.seed, "greedy", t), self.n_samples)
                self._xi[t] = (atoms, np.full(self.n_samples, 1.0 / self.n_samples))
        return self._xi[t]

    def _value_grad(self, t, states, actions, xi, w, need_grad=True):
        p = self.problem
        R, K = states.shape[0], xi.shape[0]
        S_rep = np.repeat(states, K, axis=0)
        A_rep = np.repeat(actions, K, axis=0)
        Xi = np.tile(xi, (R, 1))
        sign = p.sign
        r = sign * p.stage_reward(t, S_rep, A_rep, Xi)
        nxt = p.dynamics(t, S_rep, A_rep, Xi)
        vals = (r + self.gen.value(t + 1, nxt)).reshape(R, K) @ w
        if not need_grad:
            return vals, None
        gW = self.gen.grad_state(t + 1, nxt)
        Ja = p.dynamics_jac_action(t, S_rep, A_rep, Xi)
        ga = (sign * p.reward_grad_action(t, S_rep, A_rep, Xi)
              + np.einsum("bij,bi->bj", Ja, gW))
        grads = np.einsum("bkj,k->bj", ga.reshape(R, K, -1), w)
        return vals, grads

    def greedy_action(self, t: int, state: np.ndarray) -> np.ndarray:
        """Single-state convenience wrapper."""
        return self(t, np.atleast_2d(np.asarray(state, dtype=float)))[0]

    def __call__(self, t: int, states: np.ndarray) -> np.ndarray:
        p = self.problem
        if not 0 <= t < p.horizon:
            raise ConfigurationError(f"greedy stage {t} outside 0..{p.horizon - 1}")
        states = np.atleast_2d(np.asarray(states, dtype=float))
        B, n = states.shape[0], p.action_dim
        xi, w = self._stage_sample(t)
        project = p.actions.project_stage
        starts = np.empty((B, 3, n))
        starts[:, 0] = project(t, states, np.zeros((B, n)))
        uniform = np.asarray(p.actions.uniform_sequence[t], dtype=float)
        starts[:, 1] = project(t, states, np.broadcast_to(uniform, (B, n)).copy())
        rnd = stream(self.seed, "greedy-start", t).normal(size=(B, n))
        starts[:, 2] = project(t, states, starts[:, 1] + np.abs(uniform).max() * rnd)
        S3 = np.repeat(states, 3, axis=0)
        A = starts.reshape(B * 3, n)
        Y, G = self._value_grad(t, S3, A, xi, w)
        bad = ~np.isfinite(Y)
        Y[bad] = -np.inf
        step = np.ones(B * 3)
        residual = np.full(B * 3, np.inf)
        for _ in range(self.max_iter):
            probe = project(t, S3, A + G)
            residual = np.max(np.abs(probe - A), axis=1)
            active = residual > self.tol
            if not np.any(active):
                break
            trial = np.minimum(step * 2.0, 1e3)
            newA, newY = A.copy(), Y.copy()
            remaining = np.flatnonzero(active)
            for _ls in range(40):
                if remaining.size == 0:
                    break
                cand = project(t, S3[remaining],
                               A[remaining] + trial[remaining, None] * G[remaining])
                Yc, _ = self._value_grad(t, S3[remaining], cand, xi, w, need_grad=False)
                Yc = np.where(np.isfinite(Yc), Yc, -np.inf)
                gain = np.einsum("rj,rj->r", G[remaining], cand - A[remaining])
                ok = Yc >= Y[remaining] + 1e-4 * gain
                stalled = trial[remaining] < 1e-14
                accept = ok | stalled
                rows = remaining[accept]
                newA[rows] = np.where(ok[accept, None], cand[accept], A[rows])
                newY[rows] = np.where(ok[accept], Yc[accept], Y[rows])
                step[rows] = trial[rows]
                trial[remaining[~accept]] *= 0.5
                remaining = remaining[~accept]
            if np.max(np.abs(newA - A)) == 0.0:
                break
            A, Y = newA, newY
            _, G = self._value_grad(t, S3, A, xi, w)
        probe = project(t, S3, A + G)
        residual = np.max(np.abs(probe - A), axis=1)
        Y3 = Y.reshape(B, 3)
        best = np.zeros(B, dtype=int)
        for s in (1, 2):
            better = Y3[:, s] > Y3[np.arange(B), best]
            best = np.where(better, s, best)
        rows = np.arange(B) * 3 + best
        self.last_residuals = residual[rows]
        self.flagged_queries += int(np.sum(self.last_residuals > 1e-3))
        return A[rows]


def greedy_action(policy: GreedyPolicy, t: int, state: np.ndarray) -> np.ndarray:
    return policy.greedy_action(t, state)


# ---------------------------------------------------------------------------
# least-squares policy surrogate
# ---------------------------------------------------------------------------


@dataclass
class SurrogatePolicy:
    """Linear-in-features action map fitted to greedy actions."""

    problem: ControlProblem
    features: FeatureMap
    coefs: list  # per t: (F, n)
    rmse: float
    ridge_stages: tuple = ()

    def __call__(self, t: int, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        raw = self.features.apply(states) @ self.coefs[t]
        return self.problem.actions.project_stage(t, states, raw)


def fit_policy_surrogate(policy, problem: ControlProblem, features: FeatureMap,
                         states_per_t: Sequence[np.ndarray],
                         ridge: float = 1e-6) -> SurrogatePolicy:
    """Ordinary least squares from features to greedy actions, per stage.

    Falls back to a ridge solve (lambda = 1e-6) when the design matrix is
    rank deficient; surrogate outputs are projected to feasibility on use.
    """
    if len(states_per_t) != problem.horizon:
        raise ConfigurationError("need one state sample block per stage")
    coefs, ridge_stages, sse, count = [], [], 0.0, 0
    for t, states in enumerate(states_per_t):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        X = features.apply(states)
        if X.shape[0] < X.shape[1]:
            raise ConfigurationError(
                f"stage {t}: need at least {X.shape[1]} samples, got {X.shape[0]}")
        Y = np.atleast_2d(policy(t, states))
        coef, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
        if rank < X.shape[1]:
            coef = np.linalg.solve(X.T @ X + ridge * np.eye(X.shape[1]), X.T @ Y)
            ridge_stages.append(t)
        coefs.append(coef)
        resid = X @ coef - Y
        sse += float(np.sum(resid ** 2))
        count += resid.size
    return SurrogatePolicy(problem, features, coefs,
                           rmse=math.sqrt(sse / max(count, 1)),
                           ridge_stages=tuple(ridge_stages))


# ---------------------------------------------------------------------------
# bound reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundReport:
    """Dual and primal bounds with confidence intervals, native sense."""

    sense: str
    dual_mean: float
    dual_se: float
    dual_ci: tuple
    primal_mean: float
    primal_se: float
    primal_ci: tuple
    gap: float
    duality_violation: bool
    checkpoint: str
    seeds: dict
    dual_not_converged: int
    greedy_flagged: int

    def lower(self) -> float:
        return self.dual_mean if self.sense == "min" else self.primal_mean

    def upper(self) -> float:
        return self.primal_mean if self.sense == "min" else self.dual_mean

    def summary(self) -> str:
        lines = [
            f"sense = {self.sense}",
            f"dual_mean = {self.dual_mean!r}",
            f"dual_se = {self.dual_se!r}",
            f"dual_ci95 = ({self.dual_ci[0]!r}, {self.dual_ci[1]!r})",
            f"primal_mean = {self.primal_mean!r}",
            f"primal_se = {self.primal_se!r}",
            f"primal_ci95 = ({self.primal_ci[0]!r}, {self.primal_ci[1]!r})",
            f"gap = {self.gap!r}",
            f"duality_violation = {self.duality_violation}",
            f"checkpoint = {self.checkpoint}",
            f"dual_not_converged = {self.dual_not_converged}",
            f"greedy_flagged = {self.greedy_flagged}",
        ]
        lines += [f"seed_{k} = {v}" for k, v in sorted(self.seeds.items())]
        return "\n".join(lines) + "\n"


def bound_report(problem: ControlProblem, gen: GeneratingFunction,
                 dual_paths: int = 256, primal_paths: int = 256,
                 seed_dual: int = 101, seed_primal: int = 202,
                 scheme: str = "mc", n_inner: int = 2000,
                 greedy_samples: int = 2000, greedy_seed: int = 303,
                 exact: bool = False, workers: int = 1,
                 inner_max_iter: int = 500) -> BoundReport:
    """Dual bound plus greedy-policy value on independent datasets.

    With ``exact`` (finite-support problems) both sides are enumerated and
    every expectation is exact. The duality-violation flag fires when the
    bounds cross by more than four combined standard errors.
    """
    if exact:
        ds_dual = enumerate_noise_dataset(problem)
        ds_primal = ds_dual
        scheme = "exact"
    else:
        ds_dual = sample_noise_dataset(problem, dual_paths, dual_paths, seed_dual)
        ds_primal = sample_noise_dataset(problem, primal_paths, primal_paths, seed_primal)
    ctx = make_penalty_context(problem, gen, scheme, n_inner, seed=seed_dual,
                               iteration=0)
    dual = dual_value(ctx, ds_dual, workers=workers, max_iter=inner_max_iter)
    greedy_scheme = "exact" if scheme == "exact" else "mc"
    greedy = GreedyPolicy(problem, gen, greedy_scheme, greedy_samples, greedy_seed)
    primal = evaluate_policy(problem, greedy, ds_primal)
    combined = math.hypot(dual.stderr, primal.stderr)
    if problem.sense == "min":
        violation = dual.mean - primal.mean > 4.0 * combined + 1e-12
    else:
        violation = primal.mean - dual.mean > 4.0 * combined + 1e-12
    half_d, half_p = Z95 * dual.stderr, Z95 * primal.stderr
    return BoundReport(
        sense=problem.sense,
        dual_mean=dual.mean, dual_se=dual.stderr,
        dual_ci=(dual.mean - half_d, dual.mean + half_d),
        primal_mean=primal.mean, primal_se=primal.stderr,
        primal_ci=(primal.mean - half_p, primal.mean + half_p),
        gap=relative_gap(primal.mean, dual.mean),
        duality_violation=bool(violation),
        checkpoint=checkpoint_hash(gen),
        seeds={"dual": seed_dual, "primal": seed_primal, "greedy": greedy_seed},
        dual_not_converged=dual.n_not_converged,
        greedy_flagged=greedy.flagged_queries,
    )


# ---------------------------------------------------------------------------
# exact dynamic-programming oracle (finite support, tiny horizons)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DpOracleResult:
    values: dict  # (t, state key) -> internal optimal value
    policy: dict  # (t, state key) -> action row index into the grid
    action_grid: np.ndarray
    v0: float  # internal sense
    v0_native: float

    def state_key(self, t: int, state) -> tuple:
        return (t, tuple(np.round(np.asarray(state, dtype=float).ravel(), 12)))


MAX_ORACLE_HORIZON = 4
MAX_ORACLE_NODES = 10_000_000


def dp_oracle_discrete(problem: ControlProblem, action_grid: np.ndarray) -> DpOracleResult:
    """Exact backward induction over the reachable tree of a finite problem.

    ``action_grid`` is a (G, n) array of candidate actions, assumed feasible
    at every stage; ties in the argmax go to the smallest grid index. Guards:
    horizon <= 4, grid <= 21 points per action dimension, at most 1e7 visited
    nodes.
    """
    if problem.horizon > MAX_ORACLE_HORIZON:
        raise ConfigurationError(f"oracle horizon capped at {MAX_ORACLE_HORIZON}")
    if not problem.noise.finite:
        raise ConfigurationError("oracle needs finite-support noise")
    grid = np.atleast_2d(np.asarray(action_grid, dtype=float))
    if grid.shape[1] != problem.action_dim:
        raise ConfigurationError("action grid width must equal action_dim")
    if grid.shape[0] > 21 ** problem.action_dim:
        raise ConfigurationError("action grid too fine (max 21 points per dimension)")
    atoms, probs = problem.noise.atoms, problem.noise.probs
    K, G = atoms.shape[0], grid.shape[0]
    sign = problem.sign
    values: dict = {}
    policy: dict = {}
    nodes = 0

    def key_of(t, s):
        return (t, tuple(np.round(s, 12)))

    def solve(t: int, s: np.ndarray) -> float:
        nonlocal nodes
        key = key_of(t, s)
        if key in values:
            return values[key]
        nodes += 1
        if nodes > MAX_ORACLE_NODES:
            raise ConfigurationError("oracle enumeration exceeds the node limit")
        if t == problem.horizon:
            v = sign * float(problem.terminal_reward(s[None])[0])
            values[key] = v
            return v
        S_rep = np.repeat(s[None], G * K, axis=0)
        A_rep = np.repeat(grid, K, axis=0)
        Xi = np.tile(atoms, (G, 1))
        r = sign * problem.stage_reward(t, S_rep, A_rep, Xi)
        nxt = problem.dynamics(t, S_rep, A_rep, Xi)
        q = np.zeros(G)
        for g in range(G):
            total = 0.0
            for k in range(K):
                row = g * K + k
                total += probs[k] * (r[row] + solve(t + 1, nxt[row]))
            q[g] = total
        best = int(np.argmax(q))  # first maximum: smallest grid index on ties
        values[key] = float(q[best])
        policy[key] = best
        return values[key]

    v0 = solve(0, problem.initial_state.copy())
    return DpOracleResult(values, policy, grid, v0, sign * v0)


# ---------------------------------------------------------------------------
# closed-form execution (shorting allowed)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClosedFormSolution:
    """Linear feedback a_t = K_t s + k_t and the optimal expected cost."""

    expected_cost: float
    feedback: tuple  # per t < T-1: (K_t, k_t); the last trade is forced
    value_quadratics: tuple  # per t: (M, b, c) with V_t(s) = s'Ms + b's + c

    def as_policy(self, model: TradeExecModel):
        T = model.horizon

        def policy(t, states):
            states = np.atleast_2d(np.asarray(states, dtype=float))
            if t >= T - 1:
                _, _, R = model.split_state(states)
                return R.copy()
            K, k = self.feedback[t]
            return states @ K.T + k

        return policy


def exec_closed_form(model: TradeExecModel) -> ClosedFormSolution:
    """Backward induction on the quadratic value-function parameterization.

    Without the no-shorting constraint the cost-to-go stays an exact
    quadratic in the state: each stage minimizes a quadratic in the trade,
    giving linear feedback. The recursion is numeric (no transcription of
    published coefficient formulas) so it is testable against simulation.
    """
    if model.no_shorting:
        raise ModelError("closed form requires the unconstrained model")
    n, m = model.n_assets, model.signal_dim
    D = model.state_dim
    T = model.horizon
    A, Bm, C = model.impact, model.signal_load, model.signal_ar
    F = np.zeros((D, D))
    F[:n, :n] = np.eye(n)
    F[:n, n:n + m] = Bm
    F[n:n + m, n:n + m] = C
    F[n + m:, n + m:] = np.eye(n)
    G = np.zeros((D, n))
    G[:n] = A
    G[n + m:] = -np.eye(n)
    L = np.zeros((D, n))
    L[:n] = np.eye(n)
    L[n:n + m] = Bm.T
    Sw = np.zeros((D, D))
    Sw[:n, :n] = model.cov_eps
    Sw[n:n + m, n:n + m] = model.cov_eta
    E_R = np.zeros((n, D))
    E_R[:, n + m:] = np.eye(n)

    # final stage: forced trade a = R
    M = E_R.T @ A @ E_R + 0.5 * (L @ E_R + E_R.T @ L.T)
    M = 0.5 * (M + M.T)
    b = np.zeros(D)
    c = 0.0
    quadratics = [(M, b, c)]
    feedback = []
    for _t in range(T - 2, -1, -1):
        H = A + G.T @ M @ G
        H = 0.5 * (H + H.T)
        if np.linalg.eigvalsh(H).min() <= 0:
            raise ModelError("stage quadratic is not positive definite")
        K_l = L.T + 2.0 * G.T @ M @ F  # l(s) = K_l s + g_l
        g_l = G.T @ b
        Hinv_Kl = np.linalg.solve(H, K_l)
        Hinv_gl = np.linalg.solve(H, g_l)
        K_t = -0.5 * Hinv_Kl
        k_t = -0.5 * Hinv_gl
        M_new = F.T @ M @ F - 0.25 * K_l.T @ Hinv_Kl
        M_new = 0.5 * (M_new + M_new.T)
        b_new = F.T @ b - 0.5 * K_l.T @ Hinv_gl
        c_new = c + float(np.sum(M * Sw)) - 0.25 * float(g_l @ Hinv_gl)
        feedback.append((K_t, k_t))
        M, b, c = M_new, b_new, c_new
        quadratics.append((M, b, c))
    feedback.reverse()
    quadratics.reverse()
    s0 = np.concatenate([model.initial_price, np.zeros(m), model.target])
    cost = float(s0 @ M @ s0 + b @ s0 + c)
    return ClosedFormSolution(cost, tuple(feedback), tuple(quadratics))


def uniform_schedule_cost(theta: float, target: float, price0: float, T: int) -> float:
    """Single-asset, signal-free expected cost of the uniform schedule."""
    return target * price0 + theta * target ** 2 * (T + 1) / (2.0 * T)


# ---------------------------------------------------------------------------
# deep empirical risk minimization baseline
# ---------------------------------------------------------------------------


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True)
class DermRecord:
    iteration: int
    train_loss: float
    eval_loss: float  # nan between evaluation cadences


@dataclass
class DermResult:
    policies: list  # per stage t < T-1: MlpParams
    trace: list  # DermRecord
    overfit_iteration: Optional[int] = None  # first train loss below the dual bound

    def as_policy(self, model: TradeExecModel):
        return _derm_policy(model, self.policies)


def _derm_policy(model: TradeExecModel, policies):
    T = model.horizon

    def policy(t, states):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        _, _, R = model.split_state(states)
        if t >= T - 1:
            return R.copy()
        u = mlp_forward(policies[t], states)
        return R * _sigmoid(u)

    return policy


def _derm_loss_and_grads(model: TradeExecModel, policies, entries, need_grads):
    """Mean execution cost of the network policy, with exact BPTT gradients.

    The policy trades the sigmoid fraction of the remaining position, so the
    rollout is smooth in the parameters and feasibility (nonnegative trades
    summing to the target) holds by construction.
    """
    n, m = model.n_assets, model.signal_dim
    A, Bm, C = model.impact, model.signal_load, model.signal_ar
    B, T, _ = entries.shape
    S = np.tile(np.concatenate([model.initial_price, np.zeros(m), model.target]),
                (B, 1))
    caches = []
    cost = np.zeros(B)
    for t in range(T):
        P, X, R = model.split_state(S)
        if t < T - 1:
            u = mlp_forward(policies[t], S)
            f = _sigmoid(u)
            a = R * f
        else:
            u = f = None
            a = R.copy()
        eps, eta = model.split_noise(entries[:, t])
        post = P + a @ A.T + X @ Bm.T + eps
        cost += np.sum(post * a, axis=1)
        caches.append((S, a, f, post))
        S_next = np.empty_like(S)
        S_next[:, :n] = post
        S_next[:, n:n + m] = X @ C.T + eta
        S_next[:, n + m:] = R - a
        S = S_next
    loss = float(cost.mean())
    if not need_grads:
        return loss, None
    grads = [None] * (T - 1)
    lam = np.zeros((B, S.shape[1]))
    for t in range(T - 1, -1, -1):
        S, a, f, post = caches[t]
        dLda = (post + a @ A.T) / B
        dLda += lam[:, :n] @ A - lam[:, n + m:]
        new_lam = np.zeros_like(lam)
        new_lam[:, :n] = a / B + lam[:, :n]
        new_lam[:, n:n + m] = (a / B) @ Bm + lam[:, :n] @ Bm + lam[:, n:n + m] @ C
        new_lam[:, n + m:] = lam[:, n + m:]
        if t == T - 1:
            new_lam[:, n + m:] += dLda
        else:
            _, _, R = model.split_state(S)
            dLdf = dLda * R
            new_lam[:, n + m:] += dLda * f
            du = dLdf * f * (1.0 - f)
            g, dS = mlp_vjp(policies[t], S, du)
            grads[t] = g
            new_lam += dS
        lam = new_lam
    flat = np.concatenate([
        np.concatenate([w.ravel() for pair in zip(g.weights, g.biases) for w in pair])
        for g in grads])
    return loss, flat


def derm_train(model: TradeExecModel, dataset: NoiseDataset, iterations: int,
               hidden: Sequence[int] = (256, 256), lr: float = 1e-3,
               optimizer: str = "adam", activation: str = "relu",
               eval_every: int = 50, eval_paths: int = 256,
               seed: int = 0, dual_bound: Optional[float] = None) -> DermResult:
    """Train feedback policy networks on a fixed dataset by pathwise descent.

    The empirical risk is the in-sample mean execution cost; gradients are
    exact reverse-mode through the full rollout. Out-of-sample cost on a
    fresh fixed dataset is recorded at the evaluation cadence. When
    ``dual_bound`` (the native lower bound) is supplied, the result records
    the first iteration whose in-sample loss drops below it, the signature
    of the policy exploiting path-specific noise.
    """
    if not model.no_shorting:
        raise ModelError("the empirical-risk baseline targets the constrained model")
    T = model.horizon
    problem = make_exec_problem(model)
    D = model.state_dim
    policies = []
    for t in range(T - 1):
        gen = stream(seed, "derm-init", t)
        net = mlp_init((D, *hidden, model.n_assets), activation, gen,
                       zero_output=False)
        # small output head: start near the uniform fraction regime
        head_limit = 1.0 / math.sqrt(hidden[-1])
        ws = list(net.weights)
        ws[-1] = gen.uniform(-head_limit, head_limit, size=ws[-1].shape) * 0.1
        bs = list(net.biases)
        # bias the initial fraction toward 1/(T-t): sigmoid(b) = 1/(T-t)
        frac = 1.0 / (T - t)
        bs[-1] = np.full(model.n_assets, math.log(frac / (1.0 - frac)))
        policies.append(MlpParams(tuple(ws), tuple(bs), activation))
    eval_ds = sample_noise_dataset(problem, eval_paths, eval_paths,
                                   seed=stream_key(seed, "derm-eval"))
    sizes = [p.n_params for p in policies]
    flat = np.concatenate([params_to_flat(p) for p in policies]) if policies else np.empty(0)
    adam = AdamState.fresh(flat.size, lr)
    trace: list[DermRecord] = []
    overfit_iteration = None

    def unpack(vec):
        out, k = [], 0
        for p, s in zip(policies, sizes):
            out.append(params_from_flat(p, vec[k:k + s]))
            k += s
        return out

    nets = unpack(flat) if policies else []

    def eval_loss(nets_now):
        pv = evaluate_policy(problem, _derm_policy(model, nets_now), eval_ds)
        return pv.mean

    loss, _ = _derm_loss_and_grads(model, nets, dataset.entries, need_grads=False)
    trace.append(DermRecord(0, loss, eval_loss(nets)))
    if dual_bound is not None and loss < dual_bound:
        overfit_iteration = 0
    for b in range(1, iterations + 1):
        loss, grad = _derm_loss_and_grads(model, nets, dataset.entries, need_grads=True)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise EvaluationError(f"non-finite empirical risk at iteration {b}")
        if optimizer == "adam":
            flat, adam = adam_update(adam, flat, grad, b)
        elif optimizer == "sgd":
            flat = flat - lr * grad
        else:
            raise ConfigurationError("optimizer must be 'adam' or 'sgd'")
        nets = unpack(flat)
        train_loss, _ = _derm_loss_and_grads(model, nets, dataset.entries,
                                             need_grads=False)
        ev = eval_loss(nets) if (eval_every > 0 and b % eval_every == 0) else float("nan")
        trace.append(DermRecord(b, train_loss, ev))
        if overfit_iteration is None and dual_bound is not None \
                and train_loss < dual_bound:
            overfit_iteration = b
    return DermResult(nets, trace, overfit_iteration)


@dataclass(frozen=True)
class StopDecision:
    iteration: Optional[int]
    overfit_warning: bool
    message: str


def derm_stopping_rule(trace: Sequence[DermRecord], dual_bound: float,
                       primal_bound: float) -> StopDecision:
    """Earliest recorded iteration whose in-sample loss sits inside
    [dual bound, primal bound] (minimization sense).

    If the loss jumps from above the bracket to below the dual bound without
    a recorded point inside, the last iteration before the crossing is
    returned with an overfit warning; if the bracket is never reached, no
    stop is recommended.
    """
    lo, hi = dual_bound, primal_bound
    prev = None
    for rec in trace:
        if lo <= rec.train_loss <= hi:
            return StopDecision(rec.iteration, False,
                                f"loss {rec.train_loss:.6g} inside [{lo:.6g}, {hi:.6g}]")
        if rec.train_loss < lo:
            if prev is None:
                return StopDecision(None, True,
                                    "first recorded loss already below the dual bound")
            return StopDecision(prev.iteration, True,
                                "loss crossed below the dual bound between records")
        prev = rec
    return StopDecision(None, False, "bounds never bracketed")
