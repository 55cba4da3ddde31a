"""Multi-asset order execution with permanent linear price impact.

A trader must acquire a fixed block of shares per asset over T periods.
Buying a_t moves prices persistently (P_t = P_{t-1} + A a_t + B X_t + eps_t),
an AR(1) signal X carries predictive information, and the objective is the
expected total purchase cost sum_t P_t . a_t (a minimization problem; the
toolkit's internal convention negates it).

State vector layout: [price P_{t-1} (n) | signal X_t (m) | remaining R_t (n)].
Stages are 0-based; the last trade is forced to the remaining position, which
makes every schedule that satisfies the stage constraints land on R = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..control import ActionSpace, ControlProblem, GaussianNoise
from ..errors import ModelError
from ..rng import rademacher, stream
from .projection import project_box_hyperplane, project_hyperplane, project_simplex


@dataclass(frozen=True)
class TradeExecModel:
    n_assets: int
    signal_dim: int
    horizon: int
    impact: np.ndarray        # (n, n) symmetric positive definite
    signal_load: np.ndarray   # (n, m)
    signal_ar: np.ndarray     # (m, m), spectral radius < 1
    cov_eps: np.ndarray       # (n, n) PSD
    cov_eta: np.ndarray       # (m, m) PSD
    initial_price: np.ndarray  # (n,)
    target: np.ndarray        # (n,) shares to acquire
    no_shorting: bool = True

    def __post_init__(self):
        n, m = self.n_assets, self.signal_dim
        A = np.asarray(self.impact, dtype=float).reshape(n, n)
        if np.max(np.abs(A - A.T)) > 1e-10 * (1.0 + np.max(np.abs(A))):
            raise ModelError("impact matrix must be symmetric")
        A = (A + A.T) / 2.0
        if np.linalg.eigvalsh(A).min() <= 0:
            raise ModelError("impact matrix must be positive definite")
        C = np.asarray(self.signal_ar, dtype=float).reshape(m, m)
        if np.max(np.abs(np.linalg.eigvals(C))) >= 1.0:
            raise ModelError("signal AR matrix must have spectral radius < 1")
        tgt = np.asarray(self.target, dtype=float).reshape(n)
        if self.no_shorting and np.any(tgt < 0):
            raise ModelError("negative share target is infeasible under no-shorting")
        object.__setattr__(self, "impact", A)
        object.__setattr__(self, "signal_load",
                           np.asarray(self.signal_load, dtype=float).reshape(n, m))
        object.__setattr__(self, "signal_ar", C)
        object.__setattr__(self, "cov_eps", np.asarray(self.cov_eps, dtype=float).reshape(n, n))
        object.__setattr__(self, "cov_eta", np.asarray(self.cov_eta, dtype=float).reshape(m, m))
        object.__setattr__(self, "initial_price",
                           np.asarray(self.initial_price, dtype=float).reshape(n))
        object.__setattr__(self, "target", tgt)
        # validates PSD-ness of both covariance blocks
        GaussianNoise(self.cov_eps)
        GaussianNoise(self.cov_eta)

    @property
    def state_dim(self) -> int:
        return 2 * self.n_assets + self.signal_dim

    @property
    def noise_dim(self) -> int:
        return self.n_assets + self.signal_dim

    def split_state(self, S: np.ndarray):
        """(B, D) -> price (B, n), signal (B, m), remaining (B, n)."""
        n, m = self.n_assets, self.signal_dim
        return S[..., :n], S[..., n:n + m], S[..., n + m:]

    def split_noise(self, Xi: np.ndarray):
        n = self.n_assets
        return Xi[..., :n], Xi[..., n:]


@dataclass(frozen=True)
class ExecState:
    """Typed view of one state: pre-trade price, current signal, open shares."""

    price: np.ndarray
    signal: np.ndarray
    remaining: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.price), np.ravel(self.signal),
                               np.ravel(self.remaining)])

    @staticmethod
    def from_vector(model: TradeExecModel, s: np.ndarray) -> "ExecState":
        p, x, r = model.split_state(np.asarray(s, dtype=float))
        return ExecState(p.copy(), x.copy(), r.copy())


def exec_dynamics(model: TradeExecModel, state: ExecState, action: np.ndarray,
                  noise: np.ndarray) -> ExecState:
    """One transition: post-impact price, AR(1) signal update, share depletion."""
    a = np.asarray(action, dtype=float).reshape(model.n_assets)
    eps, eta = model.split_noise(np.asarray(noise, dtype=float).reshape(model.noise_dim))
    price = state.price + model.impact @ a + model.signal_load @ state.signal + eps
    signal = model.signal_ar @ state.signal + eta
    return ExecState(price, signal, state.remaining - a)


def exec_stage_cost(model: TradeExecModel, state: ExecState, action: np.ndarray,
                    noise: Optional[np.ndarray] = None) -> float:
    """Cash paid this period: post-impact price dotted with the trade.

    The action's own impact is included (the price used is the one produced
    by this period's transition). ``noise`` defaults to zero innovations.
    """
    if noise is None:
        noise = np.zeros(model.noise_dim)
    post = exec_dynamics(model, state, action, noise)
    return float(post.price @ np.asarray(action, dtype=float).reshape(model.n_assets))


def project_schedule(model: TradeExecModel, proposal: np.ndarray) -> np.ndarray:
    """Exact projection of a (T, n) schedule onto the feasible set.

    Per asset j the schedule column is projected onto
    {x in R^T : sum(x) = target_j, x >= 0 if no_shorting}: the scaled-simplex
    sort projection, or the uniform shift onto the hyperplane when shorting
    is allowed. Idempotent.
    """
    prop = np.asarray(proposal, dtype=float)
    if not np.all(np.isfinite(prop)):
        raise ModelError("schedule proposal contains non-finite entries")
    cols = np.swapaxes(prop, -1, -2)  # (..., n, T)
    if model.no_shorting:
        out = project_simplex(cols, model.target)
    else:
        out = project_hyperplane(cols, model.target)
    return np.swapaxes(out, -1, -2)


def _exec_action_space(model: TradeExecModel) -> ActionSpace:
    T, n = model.horizon, model.n_assets
    # compact solver domain (never active at reasonable schedules)
    big = 5.0 * max(1.0, float(np.max(np.abs(model.target))))

    def project_sequence(a):
        cols = np.swapaxes(np.asarray(a, dtype=float), -1, -2)
        if model.no_shorting:
            out = project_simplex(cols, model.target)
        else:
            out = project_box_hyperplane(cols, -big, big, model.target)
        return np.swapaxes(out, -1, -2)

    def project_stage(t, states, actions):
        _, _, R = model.split_state(states)
        if t == T - 1:
            return R.copy()
        if model.no_shorting:
            return np.clip(actions, 0.0, np.maximum(R, 0.0))
        return np.clip(actions, -big, big)

    def constraints(a):
        a = np.asarray(a, dtype=float)
        eq = a.sum(axis=0) - model.target
        ineq = a.ravel() if model.no_shorting else np.empty(0)
        return eq, ineq

    uniform = np.tile(model.target / T, (T, 1))

    def random_sequence(gen):
        scale = np.maximum(np.abs(model.target), 1.0) / T
        return project_sequence(gen.normal(loc=model.target / T,
                                           scale=scale, size=(T, n)))

    return ActionSpace(
        action_dim=n,
        project_sequence=project_sequence,
        project_stage=project_stage,
        uniform_sequence=uniform,
        random_sequence=random_sequence,
        sequence_constraints=constraints,
    )


def make_exec_problem(model: TradeExecModel) -> ControlProblem:
    """Wrap the execution model as a generic minimization problem."""
    A, Bm, C = model.impact, model.signal_load, model.signal_ar
    n, m, D = model.n_assets, model.signal_dim, model.state_dim

    def dynamics(t, S, Act, Xi):
        P, X, R = model.split_state(S)
        eps, eta = model.split_noise(Xi)
        out = np.empty(S.shape)
        out[..., :n] = P + Act @ A.T + X @ Bm.T + eps
        out[..., n:n + m] = X @ C.T + eta
        out[..., n + m:] = R - Act
        return out

    def stage_reward(t, S, Act, Xi):
        P, X, _ = model.split_state(S)
        eps, _ = model.split_noise(Xi)
        post = P + Act @ A.T + X @ Bm.T + eps
        return np.sum(post * Act, axis=-1)

    jac_s = np.zeros((D, D))
    jac_s[:n, :n] = np.eye(n)
    jac_s[:n, n:n + m] = Bm
    jac_s[n:n + m, n:n + m] = C
    jac_s[n + m:, n + m:] = np.eye(n)
    jac_a = np.zeros((D, n))
    jac_a[:n] = A
    jac_a[n + m:] = -np.eye(n)

    def reward_grad_state(t, S, Act, Xi):
        g = np.zeros(S.shape)
        g[..., :n] = Act
        g[..., n:n + m] = Act @ Bm
        return g

    def reward_grad_action(t, S, Act, Xi):
        P, X, _ = model.split_state(S)
        eps, _ = model.split_noise(Xi)
        post = P + Act @ A.T + X @ Bm.T + eps
        return post + Act @ A.T

    noise = GaussianNoise(_block_diag(model.cov_eps, model.cov_eta))
    s0 = np.concatenate([model.initial_price, np.zeros(m), model.target])
    return ControlProblem(
        horizon=model.horizon,
        state_dim=D,
        action_dim=n,
        noise_dim=model.noise_dim,
        initial_state=s0,
        dynamics=dynamics,
        stage_reward=stage_reward,
        terminal_reward=lambda S: np.zeros(S.shape[0]),
        actions=_exec_action_space(model),
        noise=noise,
        sense="min",
        dynamics_jac_state=lambda t, S, Act, Xi: np.broadcast_to(jac_s, S.shape[:-1] + (D, D)),
        dynamics_jac_action=lambda t, S, Act, Xi: np.broadcast_to(jac_a, S.shape[:-1] + (D, n)),
        reward_grad_state=reward_grad_state,
        reward_grad_action=reward_grad_action,
        terminal_grad=lambda S: np.zeros(S.shape),
        name="trade-execution",
    )


def _block_diag(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + b.shape[0], a.shape[1] + b.shape[1]))
    out[:a.shape[0], :a.shape[1]] = a
    out[a.shape[0]:, a.shape[1]:] = b
    return out


def signal_stationary_cov(model: TradeExecModel) -> np.ndarray:
    """Solve Sigma = C Sigma C' + Sigma_eta for the AR(1) signal."""
    m = model.signal_dim
    C = model.signal_ar
    lhs = np.eye(m * m) - np.kron(C, C)
    return np.linalg.solve(lhs, model.cov_eta.ravel()).reshape(m, m)


def feature_scales(model: TradeExecModel):
    """Deterministic affine normalization (offset, scale) for the state parts.

    Prices are centered at P_0 and scaled by the typical price excursion
    (impact of the full block plus diffusion over the horizon); signals by
    their stationary standard deviation; remaining shares by the target.
    """
    n, m = model.n_assets, model.signal_dim
    diffusion = np.sqrt(np.clip(np.diag(model.cov_eps), 0.0, None) * model.horizon)
    p_scale = np.abs(model.impact @ model.target) + diffusion
    p_scale = np.maximum(p_scale, 1e-8)
    x_var = np.clip(np.diag(signal_stationary_cov(model)), 0.0, None)
    x_scale = np.maximum(np.sqrt(x_var), 1e-8)
    r_scale = np.maximum(np.abs(model.target), 1.0)
    offset = np.concatenate([model.initial_price, np.zeros(m), np.zeros(n)])
    scale = np.concatenate([p_scale, x_scale, r_scale])
    return offset, scale


def cost_scale(model: TradeExecModel) -> float:
    """Rough magnitude of total execution cost, used to scale value outputs."""
    return max(1.0, float(np.abs(model.initial_price @ model.target)))


# ---------------------------------------------------------------------------
# model construction from flat configs
# ---------------------------------------------------------------------------

_DEFAULTS = {
    "n_assets": 3,
    "signal_dim": 2,
    "horizon": 5,
    "no_shorting": True,
    "model_seed": 7,
    "impact_scale": 0.005,
    "impact_offdiag": 0.3,
    "signal_load_scale": 0.02,
    "signal_ar_decay": 0.5,
    "sigma_eps": 0.05,
    "sigma_eta": 0.1,
    "price0": 50.0,
    "target_shares": 10.0,
}


def resolve_model(config: Optional[dict] = None) -> TradeExecModel:
    """Build a model from a flat config, filling pinned desk-scale defaults.

    Scalar knobs generate the default structured matrices; explicit matrix
    keys (impact, signal_load, signal_ar, cov_eps, cov_eta, initial_price,
    target) override them entry for entry.
    """
    cfg = dict(_DEFAULTS)
    if config:
        unknown = set(config) - set(_DEFAULTS) - {
            "impact", "signal_load", "signal_ar", "cov_eps", "cov_eta",
            "initial_price", "target"}
        if unknown:
            raise ModelError(f"unknown model config keys: {sorted(unknown)}")
        cfg.update(config)
    n, m, T = int(cfg["n_assets"]), int(cfg["signal_dim"]), int(cfg["horizon"])
    w = float(cfg["impact_offdiag"])
    impact = cfg.get("impact")
    if impact is None:
        impact = cfg["impact_scale"] * (np.eye(n) + w * np.ones((n, n))) / (1.0 + w)
    load = cfg.get("signal_load")
    if load is None:
        gen = stream(int(cfg["model_seed"]), "signal-load")
        load = cfg["signal_load_scale"] * rademacher(gen, (n, m))
    ar = cfg.get("signal_ar")
    if ar is None:
        ar = float(cfg["signal_ar_decay"]) * np.eye(m)
    cov_eps = cfg.get("cov_eps")
    if cov_eps is None:
        cov_eps = float(cfg["sigma_eps"]) ** 2 * np.eye(n)
    cov_eta = cfg.get("cov_eta")
    if cov_eta is None:
        cov_eta = float(cfg["sigma_eta"]) ** 2 * np.eye(m)
    price0 = cfg.get("initial_price")
    if price0 is None:
        price0 = float(cfg["price0"]) * np.ones(n)
    target = cfg.get("target")
    if target is None:
        target = float(cfg["target_shares"]) * np.ones(n)
    return TradeExecModel(
        n_assets=n, signal_dim=m, horizon=T,
        impact=np.asarray(impact, dtype=float),
        signal_load=np.asarray(load, dtype=float),
        signal_ar=np.asarray(ar, dtype=float),
        cov_eps=np.asarray(cov_eps, dtype=float),
        cov_eta=np.asarray(cov_eta, dtype=float),
        initial_price=np.asarray(price0, dtype=float),
        target=np.asarray(target, dtype=float),
        no_shorting=bool(cfg["no_shorting"]),
    )


def dump_model_csv(model: TradeExecModel) -> str:
    """Fully resolved model as labeled CSV blocks (self-describing reports)."""
    lines = [
        f"n_assets,{model.n_assets}",
        f"signal_dim,{model.signal_dim}",
        f"horizon,{model.horizon}",
        f"no_shorting,{int(model.no_shorting)}",
    ]

    def block(name, arr):
        arr = np.atleast_2d(arr)
        for i, row in enumerate(arr):
            lines.append(f"{name},{i}," + ",".join(repr(float(x)) for x in row))

    block("impact", model.impact)
    block("signal_load", model.signal_load)
    block("signal_ar", model.signal_ar)
    block("cov_eps", model.cov_eps)
    block("cov_eta", model.cov_eta)
    block("initial_price", model.initial_price)
    block("target", model.target)
    offset, scale = feature_scales(model)
    block("feature_offset", offset)
    block("feature_scale", scale)
    return "\n".join(lines) + "\n"
