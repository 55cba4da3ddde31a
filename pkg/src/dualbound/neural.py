"""Feedforward networks with exact reverse-mode gradients, feature maps, and
the per-stage value-function stacks used as penalty generators.

Everything is plain numpy and batch-first: inputs are (B, dim). Gradients are
hand-rolled vector-Jacobian products so that both parameter gradients (for
the outer training loop) and input gradients (for chain rules through the
dynamics) come out of one backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ModelError

SOFTPLUS_BETA = 10.0


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_prime(z):
    # subgradient 0 at the kink; bool mask upcasts on multiply
    return z > 0


def _softplus(z):
    return np.logaddexp(0.0, SOFTPLUS_BETA * z) / SOFTPLUS_BETA


def _softplus_prime(z):
    bz = SOFTPLUS_BETA * z
    out = np.empty_like(bz)
    pos = bz >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-bz[pos]))
    e = np.exp(bz[~pos])
    out[~pos] = e / (1.0 + e)
    return out


_ACT = {"relu": (_relu, _relu_prime), "softplus": (_softplus, _softplus_prime)}


# ---------------------------------------------------------------------------
# multilayer perceptron
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpParams:
    """Affine layers h_1..h_N followed by an affine output head.

    weights[i] has shape (out_i, in_i); the activation is applied after every
    layer except the last.
    """

    weights: tuple
    biases: tuple
    activation: str = "softplus"

    def __post_init__(self):
        if self.activation not in _ACT:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        ws = tuple(np.asarray(w, dtype=float) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=float).ravel() for b in self.biases)
        if len(ws) != len(bs) or not ws:
            raise ModelError("weights/biases layer count mismatch")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or w.shape[0] != b.shape[0]:
                raise ModelError(f"layer {i}: weight/bias shapes inconsistent")
            if i > 0 and w.shape[1] != ws[i - 1].shape[0]:
                raise ModelError(f"layer {i}: dimension chain broken")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ModelError(f"layer {i}: non-finite parameter entries")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def dim_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def dim_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def layer_sizes(self) -> tuple:
        return (self.dim_in,) + tuple(w.shape[0] for w in self.weights)


@dataclass(frozen=True)
class MlpGrads:
    """Parameter gradients, laid out exactly like MlpParams."""

    weights: tuple
    biases: tuple


def mlp_init(layer_sizes: Sequence[int], activation: str = "softplus",
             gen: Optional[np.random.Generator] = None,
             zero_output: bool = True) -> MlpParams:
    """He-uniform hidden layers (scaled by fan-in), zero biases.

    With ``zero_output`` the output head starts at exactly zero, so the
    network is the zero function initially.
    """
    if gen is None:
        gen = np.random.default_rng(0)
    ws, bs = [], []
    for i in range(len(layer_sizes) - 1):
        fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
        last = i == len(layer_sizes) - 2
        if last and zero_output:
            w = np.zeros((fan_out, fan_in))
        else:
            limit = np.sqrt(6.0 / fan_in)
            w = gen.uniform(-limit, limit, size=(fan_out, fan_in))
        ws.append(w)
        bs.append(np.zeros(fan_out))
    return MlpParams(tuple(ws), tuple(bs), activation)


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ModelError(f"input dimension {x.shape[0]} != expected {dim}")
        return x[None, :], True
    if x.shape[-1] != dim:
        raise ModelError(f"input dimension {x.shape[-1]} != expected {dim}")
    return x, False


def _forward_cached(params: MlpParams, X: np.ndarray):
    act, _ = _ACT[params.activation]
    inputs = []  # layer inputs a_0..a_{L-1}
    pre = []  # hidden pre-activations
    a = X
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w.T + b
        if i < n_layers - 1:
            pre.append(z)
            a = act(z)
        else:
            a = z
    return a, inputs, pre


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """F(x) = h_o(act(...act(h_1(x))...)); accepts (in,) or (B, in)."""
    X, single = _as_batch(x, params.dim_in)
    out, _, _ = _forward_cached(params, X)
    return out[0] if single else out


def mlp_vjp(params: MlpParams, x: np.ndarray, upstream: np.ndarray):
    """Backward pass: gradients of sum_b <upstream_b, F(x_b)>.

    Returns (MlpGrads, input gradient of shape (B, in)).
    """
    X, single = _as_batch(x, params.dim_in)
    _, inputs, pre = _forward_cached(params, X)
    _, act_prime = _ACT[params.activation]
    g = np.asarray(upstream, dtype=float)
    if g.ndim == 1:
        g = g[None, :] if single else g[:, None]
    dws = [None] * len(params.weights)
    dbs = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        dws[i] = g.T @ inputs[i]
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i]
        if i > 0:
            g = g * act_prime(pre[i - 1])
    grads = MlpGrads(tuple(dws), tuple(dbs))
    return grads, (g[0] if single else g)


def mlp_grad_params(params: MlpParams, x: np.ndarray, weight=1.0) -> MlpGrads:
    """Gradient of sum_b weight_b * F(x_b) (scalar-output networks)."""
    if params.dim_out != 1:
        raise ModelError("mlp_grad_params expects a scalar-output network")
    X, _ = _as_batch(x, params.dim_in)
    w = np.broadcast_to(np.asarray(weight, dtype=float), (X.shape[0],))
    grads, _ = mlp_vjp(params, X, w[:, None])
    return grads


def mlp_grad_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Per-row gradient of the scalar output with respect to the input."""
    if params.dim_out != 1:
        raise ModelError("mlp_grad_input expects a scalar-output network")
    X, single = _as_batch(x, params.dim_in)
    _, dx = mlp_vjp(params, X, np.ones((X.shape[0], 1)))
    return dx[0] if single else dx


def mlp_value_and_grad_input(params: MlpParams, X: np.ndarray):
    """Scalar outputs plus per-row input gradients from one forward pass."""
    out, inputs, pre = _forward_cached(params, X)
    _, act_prime = _ACT[params.activation]
    g = np.ones((X.shape[0], 1))
    for i in range(len(params.weights) - 1, -1, -1):
        g = g @ params.weights[i]
        if i > 0:
            g = g * act_prime(pre[i - 1])
    return out[:, 0], g


def grads_to_flat(grads: MlpGrads) -> np.ndarray:
    parts = []
    for w, b in zip(grads.weights, grads.biases):
        parts.append(np.asarray(w, dtype=float).ravel())
        parts.append(np.asarray(b, dtype=float).ravel())
    return np.concatenate(parts)


def params_to_flat(params: MlpParams) -> np.ndarray:
    return grads_to_flat(MlpGrads(params.weights, params.biases))


def params_from_flat(template: MlpParams, vec: np.ndarray) -> MlpParams:
    ws, bs, k = [], [], 0
    for w, b in zip(template.weights, template.biases):
        ws.append(vec[k:k + w.size].reshape(w.shape))
        k += w.size
        bs.append(vec[k:k + b.size])
        k += b.size
    if k != vec.size:
        raise ModelError("flat parameter vector has the wrong length")
    return MlpParams(tuple(ws), tuple(bs), template.activation)


# ---------------------------------------------------------------------------
# feature maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureMap:
    """State-to-feature transform with an exact transposed-Jacobian product.

    ``vjp(S, U)`` returns d/dS of sum_f U[., f] * feature_f(S), row by row;
    ``descriptor`` is a plain dict that round-trips through checkpoints.
    """

    dim_in: int
    dim_out: int
    apply: Callable
    vjp: Callable
    descriptor: dict

    def jacobian(self, S: np.ndarray) -> np.ndarray:
        """Dense (B, F, D) Jacobian, assembled column by column (test use)."""
        S = np.atleast_2d(np.asarray(S, dtype=float))
        B = S.shape[0]
        J = np.empty((B, self.dim_out, self.dim_in))
        for f in range(self.dim_out):
            U = np.zeros((B, self.dim_out))
            U[:, f] = 1.0
            J[:, f, :] = self.vjp(S, U)
        return J


def identity_features(dim: int) -> FeatureMap:
    return FeatureMap(
        dim_in=dim,
        dim_out=dim,
        apply=lambda S: np.asarray(S, dtype=float),
        vjp=lambda S, U: np.asarray(U, dtype=float),
        descriptor={"kind": "identity", "dim": dim},
    )


def quadratic_feature_dim(n: int, m: int) -> int:
    return 1 + 2 * n + m + m * m + 2 * n * n + n * m


def quadratic_features(P, X, R) -> np.ndarray:
    """Quadratic feature vector (1, P, X, R, XX', RR', PR', XR') flattened.

    For n = 10 assets and a 3-dimensional signal this is 263-dimensional
    (constant, 10 + 3 + 10 linear, 9 + 100 + 100 + 30 products).
    """
    P = np.asarray(P, dtype=float).ravel()
    X = np.asarray(X, dtype=float).ravel()
    R = np.asarray(R, dtype=float).ravel()
    fmap = quadratic_feature_map(P.size, X.size)
    return fmap.apply(np.concatenate([P, X, R])[None, :])[0]


def quadratic_feature_map(n: int, m: int, offset=None, scale=None) -> FeatureMap:
    """Quadratic features of a state laid out as [price | signal | remaining].

    ``offset``/``scale`` apply an affine normalization to the state before
    the products are formed (identity by default).
    """
    D = 2 * n + m
    F = quadratic_feature_dim(n, m)
    offset = np.zeros(D) if offset is None else np.asarray(offset, dtype=float).reshape(D)
    scale = np.ones(D) if scale is None else np.asarray(scale, dtype=float).reshape(D)
    if np.any(scale <= 0):
        raise ModelError("feature scales must be positive")
    sl_p, sl_x, sl_r = slice(0, n), slice(n, n + m), slice(n + m, D)

    def apply(S):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        Z = (S - offset) / scale
        p, x, r = Z[:, sl_p], Z[:, sl_x], Z[:, sl_r]
        B = Z.shape[0]
        out = np.empty((B, F))
        out[:, 0] = 1.0
        k = 1
        out[:, k:k + n] = p; k += n
        out[:, k:k + m] = x; k += m
        out[:, k:k + n] = r; k += n
        np.multiply(x[:, :, None], x[:, None, :],
                    out=out[:, k:k + m * m].reshape(B, m, m)); k += m * m
        np.multiply(r[:, :, None], r[:, None, :],
                    out=out[:, k:k + n * n].reshape(B, n, n)); k += n * n
        np.multiply(p[:, :, None], r[:, None, :],
                    out=out[:, k:k + n * n].reshape(B, n, n)); k += n * n
        np.multiply(x[:, :, None], r[:, None, :],
                    out=out[:, k:k + m * n].reshape(B, m, n))
        return out

    def vjp(S, U):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        Z = (S - offset) / scale
        p, x, r = Z[:, sl_p], Z[:, sl_x], Z[:, sl_r]
        B = Z.shape[0]
        k = 1
        u_p = U[:, k:k + n]; k += n
        u_x = U[:, k:k + m]; k += m
        u_r = U[:, k:k + n]; k += n
        u_xx = U[:, k:k + m * m].reshape(B, m, m); k += m * m
        u_rr = U[:, k:k + n * n].reshape(B, n, n); k += n * n
        u_pr = U[:, k:k + n * n].reshape(B, n, n); k += n * n
        u_xr = U[:, k:k + m * n].reshape(B, m, n); k += m * n
        g = np.zeros((B, D))
        g[:, sl_p] = u_p + np.einsum("bij,bj->bi", u_pr, r)
        g[:, sl_x] = (u_x
                      + np.einsum("bij,bj->bi", u_xx, x)
                      + np.einsum("bij,bi->bj", u_xx, x)
                      + np.einsum("bij,bj->bi", u_xr, r))
        g[:, sl_r] = (u_r
                      + np.einsum("bij,bj->bi", u_rr, r)
                      + np.einsum("bij,bi->bj", u_rr, r)
                      + np.einsum("bij,bi->bj", u_pr, p)
                      + np.einsum("bij,bi->bj", u_xr, x))
        return g / scale

    return FeatureMap(
        dim_in=D, dim_out=F, apply=apply, vjp=vjp,
        descriptor={"kind": "quadratic", "n": n, "m": m,
                    "offset": offset.tolist(), "scale": scale.tolist()},
    )


def feature_map_from_descriptor(desc: dict) -> FeatureMap:
    if desc["kind"] == "identity":
        return identity_features(int(desc["dim"]))
    if desc["kind"] == "quadratic":
        return quadratic_feature_map(int(desc["n"]), int(desc["m"]),
                                     offset=desc.get("offset"),
                                     scale=desc.get("scale"))
    raise ConfigurationError(f"unknown feature map kind {desc.get('kind')!r}")


# ---------------------------------------------------------------------------
# penalty generating functions W = (W_0..W_T)
# ---------------------------------------------------------------------------


class GeneratingFunction:
    """Stack of per-stage state functions W_t used to build penalties.

    Subclasses expose batched ``value(t, S) -> (B,)`` and
    ``grad_state(t, S) -> (B, D)``; trainable variants additionally pack
    their parameters into one flat vector (``flat``/``with_flat``) and
    provide ``param_grad``. Values are in the engine's internal
    maximization sense.
    """

    horizon: int
    n_params: int = 0

    def value(self, t: int, S: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_state(self, t: int, S: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value_and_grad_state(self, t: int, S: np.ndarray):
        return self.value(t, S), self.grad_state(t, S)

    def flat(self) -> np.ndarray:
        return np.empty(0)

    def with_flat(self, vec: np.ndarray) -> "GeneratingFunction":
        if len(vec):
            raise ConfigurationError("this generating function has no parameters")
        return self

    def param_grad(self, t: int, S: np.ndarray, weights) -> np.ndarray:
        return np.zeros(self.n_params)


class CallableGeneratingFunction(GeneratingFunction):
    """Fixed W given as (value, grad) callable pairs per stage, t = 0..T."""

    def __init__(self, horizon: int, pairs: Sequence[tuple]):
        if len(pairs) != horizon + 1:
            raise ConfigurationError("need one (value, grad) pair per stage 0..T")
        self.horizon = horizon
        self._pairs = tuple(pairs)
        self.n_params = 0

    def value(self, t, S):
        return np.asarray(self._pairs[t][0](np.atleast_2d(S)), dtype=float)

    def grad_state(self, t, S):
        return np.asarray(self._pairs[t][1](np.atleast_2d(S)), dtype=float)


class ZeroGeneratingFunction(CallableGeneratingFunction):
    """W identically zero: the pure perfect-information relaxation."""

    def __init__(self, horizon: int, state_dim: int):
        pair = (lambda S: np.zeros(S.shape[0]), lambda S: np.zeros(S.shape))
        super().__init__(horizon, [pair] * (horizon + 1))


class MlpGeneratingFunction(GeneratingFunction):
    """One scalar-output network per stage over a shared feature map.

    ``blocks`` has length T+1. The stage-0 block is allocated for layout
    fidelity but never trained (W_0 enters no penalty term and no greedy
    lookup). With ``pin_terminal`` the stage-T function is the internal-sense
    terminal reward itself instead of a network, which is exact for the
    optimal generating function. ``output_scale`` multiplies every network
    output so that unit-scale parameters can represent values of the
    problem's natural magnitude.
    """

    def __init__(self, horizon: int, blocks: Sequence[Optional[MlpParams]],
                 features: FeatureMap, pin_terminal: bool = True,
                 terminal_value: Optional[Callable] = None,
                 terminal_grad: Optional[Callable] = None,
                 output_scale: float = 1.0):
        if len(blocks) != horizon + 1:
            raise ConfigurationError("need one parameter block per stage 0..T")
        self.horizon = horizon
        self.blocks = tuple(blocks)
        self.features = features
        self.pin_terminal = bool(pin_terminal)
        self.terminal_value = terminal_value
        self.terminal_grad = terminal_grad
        self.output_scale = float(output_scale)
        if self.pin_terminal and (terminal_value is None or terminal_grad is None):
            raise ConfigurationError("pinned terminal requires value and grad callables")
        archs = {b.layer_sizes() for b in self.blocks if b is not None}
        if len(archs) > 1:
            raise ConfigurationError("all parameter blocks must share one architecture")
        self._trainable = tuple(
            t for t in range(1, horizon + (0 if self.pin_terminal else 1))
            if self.blocks[t] is not None)
        offsets, k = {}, 0
        for t in self._trainable:
            size = self.blocks[t].n_params
            offsets[t] = (k, size)
            k += size
        self._offsets = offsets
        self.n_params = k

    @property
    def trainable_stages(self) -> tuple:
        return self._trainable

    def value(self, t, S):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        if t == self.horizon and self.pin_terminal:
            return np.asarray(self.terminal_value(S), dtype=float)
        return mlp_forward(self.blocks[t], self.features.apply(S))[:, 0] * self.output_scale

    def grad_state(self, t, S):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        if t == self.horizon and self.pin_terminal:
            return np.asarray(self.terminal_grad(S), dtype=float)
        u = mlp_grad_input(self.blocks[t], self.features.apply(S))
        return self.features.vjp(S, u) * self.output_scale

    def value_and_grad_state(self, t, S):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        if t == self.horizon and self.pin_terminal:
            return (np.asarray(self.terminal_value(S), dtype=float),
                    np.asarray(self.terminal_grad(S), dtype=float))
        feats = self.features.apply(S)
        vals, u = mlp_value_and_grad_input(self.blocks[t], feats)
        return vals * self.output_scale, self.features.vjp(S, u) * self.output_scale

    def flat(self):
        if not self._trainable:
            return np.empty(0)
        return np.concatenate([params_to_flat(self.blocks[t]) for t in self._trainable])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ConfigurationError("flat vector length mismatch")
        blocks = list(self.blocks)
        for t in self._trainable:
            k, size = self._offsets[t]
            blocks[t] = params_from_flat(self.blocks[t], vec[k:k + size])
        out = MlpGeneratingFunction(
            self.horizon, blocks, self.features, self.pin_terminal,
            self.terminal_value, self.terminal_grad, self.output_scale)
        return out

    def param_grad(self, t, S, weights):
        out = np.zeros(self.n_params)
        if t not in self._offsets:
            return out
        S = np.atleast_2d(np.asarray(S, dtype=float))
        w = np.broadcast_to(np.asarray(weights, dtype=float), (S.shape[0],))
        grads = mlp_grad_params(self.blocks[t], self.features.apply(S),
                                w * self.output_scale)
        k, size = self._offsets[t]
        out[k:k + size] = grads_to_flat(grads)
        return out

    def describe(self) -> dict:
        block = next(b for b in self.blocks if b is not None)
        return {
            "horizon": self.horizon,
            "layers": list(block.layer_sizes()),
            "activation": block.activation,
            "pin_terminal": self.pin_terminal,
            "output_scale": self.output_scale,
            "features": self.features.descriptor,
        }


class LinearGeneratingFunction(GeneratingFunction):
    """W_t(s) = <coefs_t, features(s)>: the classical linear-basis penalty.

    Mostly used in tests and as a cheap baseline; shares the trainable
    interface of the network variant.
    """

    def __init__(self, horizon: int, features: FeatureMap,
                 coefs: Optional[Sequence[Optional[np.ndarray]]] = None,
                 pin_terminal: bool = False,
                 terminal_value: Optional[Callable] = None,
                 terminal_grad: Optional[Callable] = None):
        self.horizon = horizon
        self.features = features
        self.pin_terminal = bool(pin_terminal)
        self.terminal_value = terminal_value
        self.terminal_grad = terminal_grad
        if coefs is None:
            coefs = [np.zeros(features.dim_out) for _ in range(horizon + 1)]
        if len(coefs) != horizon + 1:
            raise ConfigurationError("need one coefficient vector per stage 0..T")
        self.coefs = tuple(
            None if c is None else np.asarray(c, dtype=float).reshape(features.dim_out)
            for c in coefs)
        self._trainable = tuple(
            t for t in range(1, horizon + (0 if self.pin_terminal else 1))
            if self.coefs[t] is not None)
        self.n_params = features.dim_out * len(self._trainable)

    def value(self, t, S):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        if t == self.horizon and self.pin_terminal:
            return np.asarray(self.terminal_value(S), dtype=float)
        return self.features.apply(S) @ self.coefs[t]

    def grad_state(self, t, S):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        if t == self.horizon and self.pin_terminal:
            return np.asarray(self.terminal_grad(S), dtype=float)
        U = np.broadcast_to(self.coefs[t], (S.shape[0], self.features.dim_out))
        return self.features.vjp(S, U)

    def flat(self):
        if not self._trainable:
            return np.empty(0)
        return np.concatenate([self.coefs[t] for t in self._trainable])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ConfigurationError("flat vector length mismatch")
        F = self.features.dim_out
        coefs = list(self.coefs)
        for i, t in enumerate(self._trainable):
            coefs[t] = vec[i * F:(i + 1) * F]
        return LinearGeneratingFunction(self.horizon, self.features, coefs,
                                        self.pin_terminal, self.terminal_value,
                                        self.terminal_grad)

    def param_grad(self, t, S, weights):
        out = np.zeros(self.n_params)
        if t not in self._trainable:
            return out
        S = np.atleast_2d(np.asarray(S, dtype=float))
        w = np.broadcast_to(np.asarray(weights, dtype=float), (S.shape[0],))
        i = self._trainable.index(t)
        F = self.features.dim_out
        out[i * F:(i + 1) * F] = w @ self.features.apply(S)
        return out


def init_mlp_generating_function(problem, features: FeatureMap,
                                 hidden: Sequence[int] = (16, 16),
                                 activation: str = "softplus", seed: int = 0,
                                 pin_terminal: bool = True,
                                 output_scale: float = 1.0,
                                 randomize: bool = False) -> MlpGeneratingFunction:
    """Fresh generating function for a problem; starts as the zero penalty.

    Per-stage blocks get independent seeded initializations. ``randomize``
    also fills the output head (for tests that need a nonzero W).
    """
    from .rng import stream  # local import to avoid a cycle at module load

    sizes = (features.dim_out, *hidden, 1)
    blocks = []
    for t in range(problem.horizon + 1):
        gen = stream(seed, "init-w", t)
        blocks.append(mlp_init(sizes, activation, gen, zero_output=not randomize))
    sign = problem.sign
    tval = lambda S: sign * np.asarray(problem.terminal_reward(S), dtype=float)
    tgrad = lambda S: sign * np.asarray(problem.terminal_grad(S), dtype=float)
    if problem.terminal_grad is None:
        raise ConfigurationError("problem must provide terminal_grad to pin W_T")
    return MlpGeneratingFunction(problem.horizon, blocks, features,
                                 pin_terminal=pin_terminal,
                                 terminal_value=tval, terminal_grad=tgrad,
                                 output_scale=output_scale)
