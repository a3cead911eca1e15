"""Conservative latency surrogate: attention encoder, multi-head predictor, Adam.

Everything is plain numpy with a hand-written backward pass. Per-parameter
embeddings go through pre-norm single-head self-attention blocks, get
flattened (optionally with a context vector appended) and feed ``M`` scalar
prediction heads whose outputs are mixed by a softmax-weighted gating network.
The mixed value is mapped to latency units by a fixed affine (fit to the
training targets) and clipped to ``[-clip_bound, clip_bound]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .design_space import AcceleratorConfig, DesignSpace

LN_EPS = 1e-5


class SurrogateError(ValueError):
    pass


@dataclass(frozen=True)
class SurrogateArchitecture:
    embed_dim: int = 64
    attention_layers: int = 2
    prediction_heads: int = 7
    head_hidden: int = 64
    mixing_hidden: tuple[int, ...] = (256, 256)
    clip_bound: float = 10000.0
    context_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mixing_hidden", tuple(int(h) for h in self.mixing_hidden))
        if self.embed_dim < 1 or self.attention_layers < 0 or self.prediction_heads < 1:
            raise SurrogateError("need embed_dim >= 1, attention_layers >= 0, prediction_heads >= 1")
        if self.head_hidden < 1 or any(h < 1 for h in self.mixing_hidden):
            raise SurrogateError("hidden sizes must be positive")
        if not self.clip_bound > 0:
            raise SurrogateError("clip_bound must be positive")
        if self.context_dim < 0:
            raise SurrogateError("context_dim must be >= 0")

    def with_context(self, d: int) -> "SurrogateArchitecture":
        return replace(self, context_dim=d)

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "attention_layers": self.attention_layers,
            "prediction_heads": self.prediction_heads,
            "head_hidden": self.head_hidden,
            "mixing_hidden": list(self.mixing_hidden),
            "clip_bound": self.clip_bound,
            "context_dim": self.context_dim,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SurrogateArchitecture":
        return cls(**{**d, "mixing_hidden": tuple(d["mixing_hidden"])})


def param_shapes(cardinalities: Sequence[int], arch: SurrogateArchitecture) -> dict[str, tuple]:
    """Ordered name -> shape map; the parameter layout is a pure function of its inputs."""
    E, M, Hh = arch.embed_dim, arch.prediction_heads, arch.head_hidden
    D = len(cardinalities) * E + arch.context_dim
    shapes: dict[str, tuple] = {}
    for k, card in enumerate(cardinalities):
        shapes[f"emb{k}"] = (card, E)
    for l in range(arch.attention_layers):
        shapes[f"l{l}.ln1_g"] = (E,)
        shapes[f"l{l}.ln1_b"] = (E,)
        for n in "qkvo":
            shapes[f"l{l}.W{n}"] = (E, E)
            shapes[f"l{l}.b{n}"] = (E,)
        shapes[f"l{l}.ln2_g"] = (E,)
        shapes[f"l{l}.ln2_b"] = (E,)
        shapes[f"l{l}.W1"] = (E, 2 * E)
        shapes[f"l{l}.b1"] = (2 * E,)
        shapes[f"l{l}.W2"] = (2 * E, E)
        shapes[f"l{l}.b2"] = (E,)
    shapes["head.W1"] = (D, M, Hh)
    shapes["head.b1"] = (M, Hh)
    shapes["head.W2"] = (M, Hh)
    shapes["head.b2"] = (M,)
    fan = D
    for i, h in enumerate(arch.mixing_hidden):
        shapes[f"mix.W{i}"] = (fan, h)
        shapes[f"mix.b{i}"] = (h,)
        fan = h
    shapes["mix.Wout"] = (fan, M)
    shapes["mix.bout"] = (M,)
    return shapes


@dataclass
class SurrogateParams:
    arch: SurrogateArchitecture
    cardinalities: tuple[int, ...]
    tensors: dict[str, np.ndarray]
    output_shift: float = 0.0
    output_scale: float = 1.0

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "SurrogateParams":
        return SurrogateParams(self.arch, self.cardinalities,
                               {k: v.copy() for k, v in self.tensors.items()},
                               self.output_shift, self.output_scale)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors.values()])

    def with_flat(self, vec: np.ndarray) -> "SurrogateParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise SurrogateError(f"flat vector has {vec.size} entries, expected {self.n_params}")
        out, i = {}, 0
        for k, t in self.tensors.items():
            out[k] = vec[i : i + t.size].reshape(t.shape).copy()
            i += t.size
        return SurrogateParams(self.arch, self.cardinalities, out, self.output_shift, self.output_scale)

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors.values())


def init_params(space: DesignSpace, arch: SurrogateArchitecture, rng_seed) -> SurrogateParams:
    rng = np.random.default_rng(rng_seed)
    tensors = {}
    for name, shape in param_shapes(space.cardinalities, arch).items():
        leaf = name.split(".")[-1]
        if leaf.startswith(("ln1_g", "ln2_g")):
            tensors[name] = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = shape[1] if name == "head.W2" else shape[0]
            tensors[name] = rng.standard_normal(shape) / np.sqrt(fan_in)
    return SurrogateParams(arch, tuple(space.cardinalities), tensors)


# ---------------------------------------------------------------- forward / backward


def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_back(dout, g, cache):
    xhat, inv = cache
    dxhat = dout * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, (dout * xhat).reshape(-1, g.size).sum(0), dout.reshape(-1, g.size).sum(0)


def _lin(x, W, b=None):
    """Apply a linear map over the last axis through a single 2-D matmul."""
    y = x.reshape(-1, x.shape[-1]) @ W
    if b is not None:
        y += b
    return y.reshape(*x.shape[:-1], W.shape[1])


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _check_inputs(params: SurrogateParams, X, C):
    X = np.asarray(X, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != len(params.cardinalities):
        raise SurrogateError(f"expected index matrix (n, {len(params.cardinalities)}), got {X.shape}")
    card = np.asarray(params.cardinalities)
    if ((X < 0) | (X >= card)).any():
        raise SurrogateError("config index out of range for the design space")
    d = params.arch.context_dim
    if d == 0:
        if C is not None:
            raise SurrogateError("non-contextual surrogate was given a context")
        return X, None
    if C is None:
        raise SurrogateError("contextual surrogate needs a context")
    C = np.asarray(C, dtype=np.float64)
    if C.ndim == 1:
        C = np.broadcast_to(C, (X.shape[0], d))
    if C.shape != (X.shape[0], d):
        raise SurrogateError(f"context shape {C.shape} does not match ({X.shape[0]}, {d})")
    return X, C


def _forward(params: SurrogateParams, X, C, keep: bool):
    T, arch = params.tensors, params.arch
    B, K = X.shape
    E = arch.embed_dim
    cache: dict = {"X": X}
    H = np.stack([T[f"emb{k}"][X[:, k]] for k in range(K)], axis=1)
    layers = []
    scale = 1.0 / np.sqrt(E)
    for l in range(arch.attention_layers):
        p = f"l{l}."
        U, ln1 = _layernorm(H, T[p + "ln1_g"], T[p + "ln1_b"])
        Q = _lin(U, T[p + "Wq"], T[p + "bq"])
        Kt = _lin(U, T[p + "Wk"], T[p + "bk"])
        V = _lin(U, T[p + "Wv"], T[p + "bv"])
        A = _softmax(np.matmul(Q, Kt.transpose(0, 2, 1)) * scale)
        Cx = np.matmul(A, V)
        H1 = H + _lin(Cx, T[p + "Wo"], T[p + "bo"])
        U2, ln2 = _layernorm(H1, T[p + "ln2_g"], T[p + "ln2_b"])
        Z1 = _lin(U2, T[p + "W1"], T[p + "b1"])
        R = np.maximum(Z1, 0.0)
        H = H1 + _lin(R, T[p + "W2"], T[p + "b2"])
        if keep:
            layers.append((U, ln1, Q, Kt, V, A, Cx, U2, ln2, Z1, R))
    cache["layers"] = layers
    z = H.reshape(B, K * E)
    if C is not None:
        z = np.concatenate([z, C], axis=1)
    D = z.shape[1]
    M, Hh = arch.prediction_heads, arch.head_hidden
    hz = (z @ T["head.W1"].reshape(D, M * Hh)).reshape(B, M, Hh) + T["head.b1"]
    hr = np.maximum(hz, 0.0)
    head_out = np.einsum("bmh,mh->bm", hr, T["head.W2"]) + T["head.b2"]
    acts = [z]
    a = z
    for i in range(len(arch.mixing_hidden)):
        a = np.maximum(a @ T[f"mix.W{i}"] + T[f"mix.b{i}"], 0.0)
        acts.append(a)
    w = _softmax(a @ T["mix.Wout"] + T["mix.bout"])
    s = (w * head_out).sum(1)
    y = params.output_shift + params.output_scale * s
    out = np.clip(y, -arch.clip_bound, arch.clip_bound)
    if keep:
        cache.update(z=z, hz=hz, hr=hr, head_out=head_out, acts=acts, w=w, y=y)
    return out, w, head_out, cache


def _backward(params: SurrogateParams, cache, dout) -> dict[str, np.ndarray]:
    T, arch = params.tensors, params.arch
    X = cache["X"]
    B, K = X.shape
    E, M, Hh = arch.embed_dim, arch.prediction_heads, arch.head_hidden
    g = {k: np.zeros_like(v) for k, v in T.items()}

    inside = np.abs(cache["y"]) <= arch.clip_bound
    ds = dout * inside * params.output_scale
    w, head_out = cache["w"], cache["head_out"]
    dhead = ds[:, None] * w
    dw = ds[:, None] * head_out
    dlogits = w * (dw - (dw * w).sum(1, keepdims=True))

    acts = cache["acts"]
    g["mix.Wout"] = acts[-1].T @ dlogits
    g["mix.bout"] = dlogits.sum(0)
    da = dlogits @ T["mix.Wout"].T
    for i in reversed(range(len(arch.mixing_hidden))):
        da = da * (acts[i + 1] > 0)
        g[f"mix.W{i}"] = acts[i].T @ da
        g[f"mix.b{i}"] = da.sum(0)
        da = da @ T[f"mix.W{i}"].T
    dz = da

    z, hz, hr = cache["z"], cache["hz"], cache["hr"]
    D = z.shape[1]
    g["head.b2"] = dhead.sum(0)
    g["head.W2"] = np.einsum("bm,bmh->mh", dhead, hr)
    dhz = dhead[:, :, None] * T["head.W2"][None] * (hz > 0)
    g["head.b1"] = dhz.sum(0)
    dhz2 = dhz.reshape(B, M * Hh)
    g["head.W1"] = (z.T @ dhz2).reshape(D, M, Hh)
    dz = dz + dhz2 @ T["head.W1"].reshape(D, M * Hh).T

    dH = dz[:, : K * E].reshape(B, K, E)
    scale = 1.0 / np.sqrt(E)
    for l in reversed(range(arch.attention_layers)):
        p = f"l{l}."
        U, ln1, Q, Kt, V, A, Cx, U2, ln2, Z1, R = cache["layers"][l]
        # feed-forward sub-block
        g[p + "b2"] = dH.sum((0, 1))
        g[p + "W2"] = R.reshape(-1, 2 * E).T @ dH.reshape(-1, E)
        dZ1 = _lin(dH, T[p + "W2"].T) * (Z1 > 0)
        g[p + "b1"] = dZ1.sum((0, 1))
        g[p + "W1"] = U2.reshape(-1, E).T @ dZ1.reshape(-1, 2 * E)
        dU2 = _lin(dZ1, T[p + "W1"].T)
        dx, g[p + "ln2_g"], g[p + "ln2_b"] = _layernorm_back(dU2, T[p + "ln2_g"], ln2)
        dH1 = dH + dx
        # attention sub-block
        g[p + "bo"] = dH1.sum((0, 1))
        g[p + "Wo"] = Cx.reshape(-1, E).T @ dH1.reshape(-1, E)
        dC = _lin(dH1, T[p + "Wo"].T)
        dA = np.matmul(dC, V.transpose(0, 2, 1))
        dV = np.matmul(A.transpose(0, 2, 1), dC)
        dS = A * (dA - (dA * A).sum(-1, keepdims=True)) * scale
        dQ = np.matmul(dS, Kt)
        dK = np.matmul(dS.transpose(0, 2, 1), Q)
        Uf = U.reshape(-1, E)
        dU = np.zeros_like(U)
        for n, dP in (("q", dQ), ("k", dK), ("v", dV)):
            g[p + "W" + n] = Uf.T @ dP.reshape(-1, E)
            g[p + "b" + n] = dP.sum((0, 1))
            dU += _lin(dP, T[p + "W" + n].T)
        dx, g[p + "ln1_g"], g[p + "ln1_b"] = _layernorm_back(dU, T[p + "ln1_g"], ln1)
        dH = dH1 + dx
    for k in range(K):
        np.add.at(g[f"emb{k}"], X[:, k], dH[:, k, :])
    return g


def predict(params: SurrogateParams, X, C=None) -> np.ndarray:
    """Clipped latency predictions for an (n, K) index matrix (and (n, d) or (d,) contexts)."""
    X, C = _check_inputs(params, X, C)
    return _forward(params, X, C, keep=False)[0]


def mixing_weights(params: SurrogateParams, X, C=None) -> np.ndarray:
    X, C = _check_inputs(params, X, C)
    return _forward(params, X, C, keep=False)[1]


def forward(params: SurrogateParams, space: DesignSpace, config: AcceleratorConfig,
            context=None) -> float:
    config = space.validate(config)
    return float(predict(params, np.asarray([config.indices]), context)[0])


# ---------------------------------------------------------------- conservative loss


@dataclass
class LossBatch:
    """Index matrices (and per-row contexts, when the surrogate is contextual)."""

    feasible_x: np.ndarray
    feasible_y: np.ndarray
    negative_x: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    infeasible_x: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    feasible_c: np.ndarray | None = None
    negative_c: np.ndarray | None = None
    infeasible_c: np.ndarray | None = None


@dataclass(frozen=True)
class LossTerms:
    total: float
    mse: float
    negative: float
    infeasible: float


def _stack(params: SurrogateParams, batch: LossBatch):
    K = len(params.cardinalities)
    parts = [(np.asarray(batch.feasible_x, dtype=np.int64).reshape(-1, K), batch.feasible_c)]
    for x, c in ((batch.negative_x, batch.negative_c), (batch.infeasible_x, batch.infeasible_c)):
        x = np.asarray(x, dtype=np.int64)
        parts.append((x.reshape(-1, K) if x.size else np.zeros((0, K), dtype=np.int64), c))
    sizes = [len(x) for x, _ in parts]
    X = np.concatenate([x for x, _ in parts])
    if params.arch.context_dim:
        d = params.arch.context_dim
        cs = []
        for (x, c) in parts:
            if len(x) == 0:
                cs.append(np.zeros((0, d)))
            elif c is None:
                raise SurrogateError("contextual surrogate needs contexts for every batch part")
            else:
                cs.append(np.broadcast_to(np.asarray(c, dtype=np.float64), (len(x), d)))
        C = np.concatenate(cs)
    else:
        C = None
    return X, C, sizes


def _loss_and_dout(params, batch, alpha, beta, keep):
    if alpha < 0 or beta < 0:
        raise SurrogateError("alpha and beta must be non-negative")
    X, C, (nf, nn, ni) = _stack(params, batch)
    X, C = _check_inputs(params, X, C)
    out, _, _, cache = _forward(params, X, C, keep=keep)
    y = np.asarray(batch.feasible_y, dtype=np.float64).reshape(-1)
    if y.shape[0] != nf:
        raise SurrogateError("feasible_x and feasible_y lengths differ")
    # Terms are measured in standardized units, (latency - shift) / scale, so the
    # penalty weights do not depend on the latency range of the application.
    z = (out - params.output_shift) / params.output_scale
    yz = (y - params.output_shift) / params.output_scale
    pf, pn, pi = z[:nf], z[nf : nf + nn], z[nf + nn :]
    dz = np.zeros_like(z)
    mse = float(np.mean((pf - yz) ** 2)) if nf else 0.0
    if nf:
        dz[:nf] = 2.0 * (pf - yz) / nf
    neg = float(pn.mean()) if nn else 0.0
    if nn:
        dz[nf : nf + nn] = -alpha / nn
    inf = float(pi.mean()) if ni else 0.0
    if ni:
        dz[nf + nn :] = -beta / ni
    dout = dz / params.output_scale
    terms = LossTerms(mse - alpha * neg - beta * inf, mse, neg, inf)
    return terms, dout, cache


def loss_terms(params: SurrogateParams, batch: LossBatch, alpha: float, beta: float) -> LossTerms:
    return _loss_and_dout(params, batch, alpha, beta, keep=False)[0]


def loss(params: SurrogateParams, batch: LossBatch, alpha: float, beta: float) -> float:
    """Standardized MSE on feasible pairs minus alpha * mean negative prediction
    minus beta * mean infeasible prediction (predictions also standardized)."""
    return loss_terms(params, batch, alpha, beta).total


def value_and_gradient(params: SurrogateParams, batch: LossBatch, alpha: float, beta: float):
    terms, dout, cache = _loss_and_dout(params, batch, alpha, beta, keep=True)
    return terms, _backward(params, cache, dout)


def gradient(params: SurrogateParams, batch: LossBatch, alpha: float, beta: float) -> dict[str, np.ndarray]:
    return value_and_gradient(params, batch, alpha, beta)[1]


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: SurrogateParams) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()},
                   {k: np.zeros_like(v) for k, v in params.tensors.items()})


def adam_step(params: SurrogateParams, grad: Mapping[str, np.ndarray], state: AdamState,
              lr: float = 1e-4, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    if set(grad) != set(params.tensors) or set(state.m) != set(params.tensors):
        raise SurrogateError("gradient/state keys do not match parameters")
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.tensors.items():
        g = grad[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise SurrogateError(f"shape mismatch for {k}: {g.shape} vs {p.shape}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state
