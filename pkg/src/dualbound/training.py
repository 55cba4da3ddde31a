"""Outer minimization over penalty parameters: the adversarial stage.

Each iteration freezes the current penalty, solves the pathwise inner
maximization on a minibatch (Action Stage), then steps the parameters along
an estimated gradient of the dual objective (Adversarial Stage). Two
estimators are provided:

* ``rm_gradient``: the unbiased pathwise estimator. By the envelope theorem
  the maximizer needs no differentiating; the gradient of the dual objective
  is the expectation of -sum_t d(z_t)/d(phi) evaluated at each path's inner
  maximizer.
* ``spsa_gradient``: simultaneous-perturbation finite differences. One
  random +/-1 direction perturbs every parameter at once; two inner solves
  per path estimate the directional derivative regardless of the parameter
  count.

The estimator choice also fixes the update rule: Robbins-Monro gradients are
fed to Adam with a constant base step; the finite-difference estimator uses
the classical decaying schedules gamma_b = gamma0/(b + A_s)^0.602 and
c_b = c0/b^0.101, whose exponents satisfy the usual summability conditions
(c_b -> 0, sum gamma_b c_b < inf, sum gamma_b^2 / c_b^2 < inf).
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .control import ControlProblem, NoiseDataset, sample_noise_dataset
from .duality import PenaltyContext, dual_value, make_penalty_context, solve_paths
from .errors import ConfigurationError, EvaluationError
from .neural import GeneratingFunction
from .rng import rademacher, stream


class IterationAborted(EvaluationError):
    """Raised when too many paths in a minibatch fail to solve."""


MAX_EXCLUDED_FRACTION = 0.2


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 8
    estimator: str = "rm"  # "rm" | "spsa"
    # Adam hyperparameters (used with the RM estimator)
    adam_step: float = 2e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # SPSA schedules (used with the finite-difference estimator)
    spsa_gamma0: float = 0.05
    spsa_c0: float = 0.01
    spsa_step_exponent: float = 0.602
    spsa_perturb_exponent: float = 0.101
    spsa_stability: Optional[float] = None  # default: 10% of iterations
    # data handling
    seed: int = 0
    train_paths: int = 256  # paths per epoch
    freeze_dataset: bool = False  # reuse epoch-0 paths forever
    scheme: str = "mc"  # inner expectation scheme
    n_inner: int = 2000
    freeze_eta: bool = False  # keep the eta sample of iteration 1 forever
    # evaluation / checkpoint cadence
    eval_every: int = 500
    eval_paths: int = 128
    greedy_samples: int = 2000
    checkpoint_every: int = 0  # 0: never (final state returned anyway)
    inner_max_iter: int = 500
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size <= 0:
            raise ConfigurationError("iterations must be >= 0 and batch_size > 0")
        if self.estimator not in ("rm", "spsa"):
            raise ConfigurationError("estimator must be 'rm' or 'spsa'")
        if self.train_paths % self.batch_size != 0:
            raise ConfigurationError("train_paths must be a multiple of batch_size")
        a, g = self.spsa_step_exponent, self.spsa_perturb_exponent
        # classical decay pattern: c_b -> 0, sum gamma_b = inf,
        # sum gamma_b^2 / c_b^2 < inf
        if not (g > 0 and a <= 1.0 and 2 * a - 2 * g > 1.0):
            raise ConfigurationError("SPSA exponents violate the summability pattern")

    def spsa_schedules(self, b: int) -> tuple[float, float]:
        """(gamma_b, c_b) for 1-based iteration b."""
        A_s = self.spsa_stability
        if A_s is None:
            A_s = 0.1 * max(1, self.iterations)
        gamma_b = self.spsa_gamma0 / (b + A_s) ** self.spsa_step_exponent
        c_b = self.spsa_c0 / b ** self.spsa_perturb_exponent
        return gamma_b, c_b


# ---------------------------------------------------------------------------
# gradient estimators
# ---------------------------------------------------------------------------


def _batch_weights(dataset: NoiseDataset, idx: np.ndarray) -> np.ndarray:
    w = dataset.weights()[idx]
    return w / w.sum()


def rm_gradient(ctx: PenaltyContext, entries: np.ndarray,
                weights: Optional[np.ndarray] = None,
                warm: Optional[np.ndarray] = None,
                path_ids=None, max_iter: int = 500):
    """Pathwise gradient of the dual objective at the current parameters.

    For each path the inner problem is solved first; then
    d(z_t)/d(phi_{t+1}) = grad phi_{t+1}(s_{t+1}) - E[grad phi_{t+1}(f(s_t, a*_t, eta))]
    is accumulated with the same frozen eta sample used by the penalty, and
    the batch average of -sum_t d(z_t)/d(phi) is returned.

    Returns (flat gradient, solve results, number of excluded paths). Paths
    whose inner solve did not converge are excluded and the weights
    renormalized; more than 20% exclusions abort the iteration.
    """
    P = entries.shape[0]
    if weights is None:
        weights = np.full(P, 1.0 / P)
    results = solve_paths(ctx, entries, path_ids, warm, max_iter=max_iter)
    ok = np.array([r.converged for r in results])
    n_excluded = int((~ok).sum())
    if n_excluded > MAX_EXCLUDED_FRACTION * P:
        raise IterationAborted(
            f"{n_excluded}/{P} inner solves failed to converge")
    w = weights * ok
    w = w / w.sum()
    gen = ctx.gen
    grad = np.zeros(gen.n_params)
    T = ctx.horizon
    for i, r in enumerate(results):
        if not ok[i] or w[i] == 0.0:
            continue
        _, _, states = _states_for(ctx, entries[i], r.actions)
        for t in range(T):
            s_t = states[t][None]
            a_t = r.actions[t][None]
            K = ctx.eta_atoms[t].shape[0]
            nxt = ctx.problem.dynamics(
                t, np.repeat(s_t, K, axis=0), np.repeat(a_t, K, axis=0),
                ctx.eta_atoms[t])
            stack = np.concatenate([states[t + 1][None], nxt], axis=0)
            wvec = np.concatenate([[1.0], -ctx.eta_weights[t]]) * (-w[i])
            grad += gen.param_grad(t + 1, stack, wvec)
    return grad, results, n_excluded


def _states_for(ctx: PenaltyContext, entries_one: np.ndarray, actions: np.ndarray):
    p = ctx.problem
    T = ctx.horizon
    states = np.empty((T + 1, p.state_dim))
    states[0] = p.initial_state
    for t in range(T):
        states[t + 1] = p.dynamics(t, states[t][None], actions[t][None],
                                   entries_one[t][None])[0]
    return None, None, states


def spsa_gradient(ctx: PenaltyContext, entries: np.ndarray, c_b: float,
                  direction_seed: int, iteration: int = 0,
                  weights: Optional[np.ndarray] = None,
                  warm: Optional[np.ndarray] = None,
                  path_ids=None, max_iter: int = 500):
    """Simultaneous-perturbation estimate of the dual objective gradient.

    Draws one +/-1 direction Delta over all parameters, solves every path at
    phi + c_b Delta and phi - c_b Delta (two inner solves per path however
    many parameters there are), and returns the symmetric difference scaled
    by the elementwise inverse of Delta (equal to Delta for +/-1 entries).
    """
    if c_b <= 0:
        raise ConfigurationError("SPSA needs a positive perturbation size")
    P = entries.shape[0]
    if weights is None:
        weights = np.full(P, 1.0 / P)
    gen = ctx.gen
    phi = gen.flat()
    delta = rademacher(stream(direction_seed, "spsa-direction", iteration), phi.shape)
    means = []
    excluded = 0
    for sgn in (+1.0, -1.0):
        shifted = replace_params(ctx, gen.with_flat(phi + sgn * c_b * delta))
        results = solve_paths(shifted, entries, path_ids, warm, max_iter=max_iter)
        ok = np.array([r.converged for r in results])
        excluded = max(excluded, int((~ok).sum()))
        if excluded > MAX_EXCLUDED_FRACTION * P:
            raise IterationAborted(f"{excluded}/{P} inner solves failed to converge")
        w = weights * ok
        w = w / w.sum()
        means.append(float(np.dot(w, [r.objective for r in results])))
    est = (means[0] - means[1]) / (2.0 * c_b) * delta
    return est, delta, excluded


def replace_params(ctx: PenaltyContext, gen: GeneratingFunction) -> PenaltyContext:
    """Same frozen eta sample, different generating function."""
    return PenaltyContext(ctx.problem, gen, ctx.scheme, ctx.eta_atoms,
                          ctx.eta_weights, ctx.seed, ctx.iteration)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: float
    beta1: float
    beta2: float
    eps: float

    @staticmethod
    def fresh(n_params: int, step: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return AdamState(np.zeros(n_params), np.zeros(n_params),
                         step, beta1, beta2, eps)


def adam_update(state: AdamState, params: np.ndarray, gradient: np.ndarray,
                iteration: int) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected adaptive-moment descent step (1-based iteration)."""
    if not np.all(np.isfinite(gradient)):
        raise EvaluationError("non-finite gradient entries; iteration rejected")
    m = state.beta1 * state.m + (1.0 - state.beta1) * gradient
    v = state.beta2 * state.v + (1.0 - state.beta2) * gradient ** 2
    m_hat = m / (1.0 - state.beta1 ** iteration)
    v_hat = v / (1.0 - state.beta2 ** iteration)
    new = params - state.step * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, state.step, state.beta1, state.beta2, state.eps)


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    batch_objective: float  # minibatch mean of per-path inner maxima, native sense
    grad_norm: float
    checkpoint_hash: str
    wall_clock: float
    n_excluded: int = 0


@dataclass(frozen=True)
class EvalRecord:
    iteration: int
    dual_mean: float
    dual_se: float
    primal_mean: float
    primal_se: float
    gap: float
    checkpoint_hash: str
    wall_clock: float


@dataclass
class TrainTrace:
    iterations: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    halted: Optional[str] = None

    def to_csv(self, path: str, include_wall_clock: bool = True) -> None:
        """One row per iteration; evaluation columns filled at cadence rows."""
        evals = {e.iteration: e for e in self.evals}
        cols = ["iter", "batch_obj", "grad_norm", "dual_mean", "dual_se",
                "primal_mean", "primal_se", "gap", "checkpoint"]
        if include_wall_clock:
            cols.append("wall_clock_s")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for rec in self.iterations:
                e = evals.get(rec.iteration)
                row = [rec.iteration, repr(rec.batch_objective), repr(rec.grad_norm)]
                row += ([repr(e.dual_mean), repr(e.dual_se), repr(e.primal_mean),
                         repr(e.primal_se), repr(e.gap)] if e else [""] * 5)
                row.append(rec.checkpoint_hash[:16])
                if include_wall_clock:
                    row.append(f"{rec.wall_clock:.3f}")
                writer.writerow(row)


def checkpoint_hash(gen: GeneratingFunction) -> str:
    h = hashlib.sha256()
    describe = getattr(gen, "describe", None)
    if describe is not None:
        h.update(repr(sorted(describe().items())).encode())
    h.update(np.ascontiguousarray(gen.flat()).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# the full loop
# ---------------------------------------------------------------------------


def train_adrl(problem: ControlProblem, gen: GeneratingFunction,
               config: TrainConfig, eval_hook=None,
               checkpoint_hook=None) -> tuple[GeneratingFunction, TrainTrace]:
    """Alternate Action and Adversarial stages for ``config.iterations`` rounds.

    Minibatches cycle through a per-epoch dataset (fresh paths per epoch
    unless frozen); the eta sample for penalty expectations is redrawn each
    iteration unless frozen. ``eval_hook(gen, iteration) -> EvalRecord`` runs
    at the evaluation cadence (the CLI wires it to a dual/primal bound
    report). Training halts early after three consecutive aborted
    iterations, returning the trace accumulated so far.
    """
    trace = TrainTrace()
    start_time = time.perf_counter()
    n_batches = config.train_paths // config.batch_size
    phi = gen.flat()
    adam = AdamState.fresh(phi.size, config.adam_step, config.adam_beta1,
                           config.adam_beta2, config.adam_eps)
    warm_cache: dict[int, np.ndarray] = {}
    dataset = None
    consecutive_aborts = 0
    sign = problem.sign

    def out_of(b):  # 1-based iteration -> (epoch, batch index)
        return (b - 1) // n_batches, (b - 1) % n_batches

    for b in range(1, config.iterations + 1):
        epoch, k = out_of(b)
        if k == 0:
            ds_epoch = 0 if config.freeze_dataset else epoch
            dataset = sample_noise_dataset(problem, config.train_paths,
                                           config.batch_size, config.seed,
                                           epoch=ds_epoch)
            if not config.freeze_dataset:
                warm_cache.clear()
        idx = dataset.batches[k]
        entries = dataset.entries[idx]
        pids = [int(i) for i in dataset.path_ids[idx]]
        weights = _batch_weights(dataset, idx)
        eta_iter = 1 if config.freeze_eta else b
        ctx = make_penalty_context(problem, gen, config.scheme, config.n_inner,
                                   seed=config.seed, iteration=eta_iter)
        warm = None
        if all(pid in warm_cache for pid in pids):
            warm = np.stack([warm_cache[pid] for pid in pids])
        try:
            if config.estimator == "rm":
                grad, results, n_exc = rm_gradient(
                    ctx, entries, weights, warm, pids,
                    max_iter=config.inner_max_iter)
                phi, adam = adam_update(adam, phi, grad, b)
            else:
                grad, _, n_exc = spsa_gradient(
                    ctx, entries, config.spsa_schedules(b)[1], config.seed,
                    iteration=b, weights=weights, warm=warm, path_ids=pids,
                    max_iter=config.inner_max_iter)
                results = solve_paths(ctx, entries, pids, warm,
                                      max_iter=config.inner_max_iter)
                gamma_b, _ = config.spsa_schedules(b)
                if not np.all(np.isfinite(grad)):
                    raise EvaluationError("non-finite SPSA gradient")
                phi = phi - gamma_b * grad
            consecutive_aborts = 0
        except (IterationAborted, EvaluationError) as exc:
            consecutive_aborts += 1
            trace.iterations.append(IterationRecord(
                b, float("nan"), float("nan"), checkpoint_hash(gen),
                time.perf_counter() - start_time,
                n_excluded=config.batch_size))
            if consecutive_aborts >= 3:
                trace.halted = f"halted at iteration {b}: {exc}"
                break
            continue
        for r in results:
            warm_cache[r.path_id] = r.actions
        gen = gen.with_flat(phi)
        chash = checkpoint_hash(gen)
        batch_native = sign * float(np.dot(weights, [r.objective for r in results]))
        trace.iterations.append(IterationRecord(
            b, batch_native, float(np.linalg.norm(grad)), chash,
            time.perf_counter() - start_time, n_exc))
        if eval_hook is not None and config.eval_every > 0 and b % config.eval_every == 0:
            trace.evals.append(eval_hook(gen, b))
        if checkpoint_hook is not None and config.checkpoint_every > 0 \
                and b % config.checkpoint_every == 0:
            checkpoint_hook(gen, b)
    return gen, trace


def held_out_dual(problem: ControlProblem, gen: GeneratingFunction,
                  config: TrainConfig, iteration: int = 0,
                  warm: Optional[np.ndarray] = None):
    """Dual bound on the fixed held-out dataset keyed by (seed, "eval")."""
    ds = sample_noise_dataset(
        problem, config.eval_paths, config.eval_paths,
        seed=stream_key(config.seed, "eval"), epoch=0)
    ctx = make_penalty_context(problem, gen, config.scheme, config.n_inner,
                               seed=config.seed, iteration=0)
    return dual_value(ctx, ds, warm=warm, workers=config.workers,
                      max_iter=config.inner_max_iter), ds


def stream_key(seed: int, tag: str) -> int:
    """Derived integer seed for a named substream."""
    return int(stream(seed, tag).integers(0, 2 ** 62))
