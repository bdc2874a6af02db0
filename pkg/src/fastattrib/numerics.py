"""Dense numerics shared by every stage: RNG streams, Jacobi eigensolver,
a small MLP with analytic backprop, and AdamW.

Everything is float64. Parameter vectors are laid out block by block; inside
a block the bias-augmented weight ``[W | b]`` is flattened column-major, so the
gradient of one layer for a single example is ``vec(g a^T) = a (x) g``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np


class PreconditionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# RNG

def make_rng(seed: int, *labels) -> np.random.Generator:
    """Philox stream keyed by ``(seed, *labels)``.

    Labels may be ints or strings. A child stream depends only on its key, so
    draws for one example never depend on how many draws happened elsewhere.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for lab in labels:
        if isinstance(lab, str):
            words.extend(lab.encode())
        else:
            words.append(int(lab) & 0xFFFFFFFFFFFFFFFF)
    ss = np.random.SeedSequence(words)
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))


# ---------------------------------------------------------------------------
# linear algebra

def vec_col(m: np.ndarray) -> np.ndarray:
    """Column-major flatten."""
    return np.asarray(m).reshape(-1, order="F")


def unvec_col(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return np.asarray(v).reshape((rows, cols), order="F")


def sym_eigh(m, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are scheduled round-robin so each round touches disjoint index
    pairs and can be applied to all of them at once.

    Returns ``(U, s)`` with eigenvalues ``s`` sorted descending and the
    matching eigenvectors in the columns of ``U``.
    """
    a = np.array(m, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise PreconditionError(f"sym_eigh needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    scale = np.linalg.norm(a)
    if not np.all(np.isfinite(a)):
        raise NumericError("sym_eigh input has non-finite entries")
    if np.linalg.norm(a - a.T) > 1e-9 * max(scale, np.finfo(float).tiny):
        raise PreconditionError("sym_eigh input is not symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if n == 1 or scale == 0.0:
        return v, np.diag(a).copy()

    slots = n + (n % 2)
    players = np.arange(slots)
    for sweep in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * scale:
            break
        for _ in range(slots - 1):
            left = players[: slots // 2]
            right = players[slots // 2:][::-1]
            keep = (left < n) & (right < n)
            p = np.minimum(left[keep], right[keep])
            q = np.maximum(left[keep], right[keep])
            apq = a[p, q]
            live = np.abs(apq) > 1e-18 * scale
            a[p[~live], q[~live]] = 0.0
            a[q[~live], p[~live]] = 0.0
            if np.any(live):
                p, q, apq = p[live], q[live], apq[live]
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                t[theta == 0.0] = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c[:, None] * rp - s[:, None] * rq
                a[q, :] = s[:, None] * rp + c[:, None] * rq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
            players = np.concatenate(([players[0]], np.roll(players[1:], 1)))
    else:
        raise NumericError(f"sym_eigh did not converge after {max_sweeps} sweeps")

    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return v[:, order], vals[order]


# ---------------------------------------------------------------------------
# MLP

@dataclass
class MlpParams:
    weights: list
    biases: list
    activations: list  # "relu" or None per layer

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise PreconditionError("layer lists differ in length")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise PreconditionError(f"layer {i} input does not chain with layer {i - 1}")
        if self.activations and self.activations[-1] is not None:
            raise PreconditionError("final layer must be linear")

    @property
    def dims(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpParams":
        return copy.deepcopy(self)

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases],
                         list(self.activations))

    def flat(self) -> np.ndarray:
        """Layers in order, each as column-major ``vec([W | b])``."""
        return np.concatenate([vec_col(np.column_stack([w, b]))
                               for w, b in zip(self.weights, self.biases)])

    def with_flat(self, v: np.ndarray) -> "MlpParams":
        """Same architecture with weights taken from ``v`` (as views, no copy)."""
        v = np.asarray(v, dtype=np.float64)
        if v.size != self.n_params:
            raise PreconditionError(f"flat vector has {v.size} entries, expected {self.n_params}")
        ws, bs, off = [], [], 0
        for w in self.weights:
            rows, cols = w.shape
            m = unvec_col(v[off: off + rows * (cols + 1)], rows, cols + 1)
            ws.append(m[:, :cols])
            bs.append(m[:, cols])
            off += rows * (cols + 1)
        return MlpParams(ws, bs, list(self.activations))


def init_mlp(dims, rng: np.random.Generator, scale: float | None = None) -> MlpParams:
    """He-style init; ReLU on every layer except the last."""
    ws, bs, acts = [], [], []
    for i in range(len(dims) - 1):
        std = scale if scale is not None else np.sqrt(2.0 / dims[i])
        ws.append(rng.standard_normal((dims[i + 1], dims[i])) * std)
        bs.append(np.zeros(dims[i + 1]))
        acts.append("relu" if i < len(dims) - 2 else None)
    return MlpParams(ws, bs, acts)


@dataclass
class MlpCache:
    params: MlpParams
    inputs: list = field(default_factory=list)  # a_{i-1} per layer
    pre: list = field(default_factory=list)     # s_i per layer


def mlp_forward(p: MlpParams, x):
    """Evaluate on a single vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != p.weights[0].shape[1]:
        raise PreconditionError(f"input width {a.shape[1]} != {p.weights[0].shape[1]}")
    cache = MlpCache(p)
    for w, b, act in zip(p.weights, p.biases, p.activations):
        cache.inputs.append(a)
        s = a @ w.T + b
        cache.pre.append(s)
        a = np.maximum(s, 0.0) if act == "relu" else s
    return (a[0] if single else a), cache


def mlp_backward(p: MlpParams, cache: MlpCache, output_grad):
    """Backprop ``output_grad`` through the cached forward pass.

    Returns ``(param_grads, input_grad, per_layer)`` where ``per_layer`` holds
    the ``(a_{i-1}, g_i)`` row batches, ``g_i`` being the gradient with respect
    to the pre-activation of layer ``i``.
    """
    if cache.params is not p or len(cache.inputs) != len(p.weights):
        raise PreconditionError("cache does not belong to these parameters")
    g = np.asarray(output_grad, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None, :]
    if g.shape != cache.pre[-1].shape:
        raise PreconditionError(f"output grad shape {g.shape} != {cache.pre[-1].shape}")
    n_layers = len(p.weights)
    gw, gb, per_layer = [None] * n_layers, [None] * n_layers, [None] * n_layers
    for i in reversed(range(n_layers)):
        if p.activations[i] == "relu":
            g = g * (cache.pre[i] > 0.0)
        a = cache.inputs[i]
        gw[i] = g.T @ a
        gb[i] = g.sum(axis=0)
        per_layer[i] = (a, g)
        g = g @ p.weights[i]
    grads = MlpParams(gw, gb, list(p.activations))
    if single:
        per_layer = [(a[0], gg[0]) for a, gg in per_layer]
        g = g[0]
    return grads, g, per_layer


# ---------------------------------------------------------------------------
# AdamW

@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adamw_update(x: np.ndarray, g: np.ndarray, state: AdamWState, names=None) -> np.ndarray:
    """One decoupled-weight-decay Adam step on a flat vector; mutates ``state``."""
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        where = names(bad) if names is not None else f"entry {bad}"
        raise NumericError(f"non-finite gradient in {where}")
    if state.m is None:
        state.m = np.zeros_like(x)
        state.v = np.zeros_like(x)
    if state.m.shape != x.shape:
        raise PreconditionError("optimizer state does not match parameter count")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return x - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * x)


def adamw_step(p: MlpParams, grads: MlpParams, state: AdamWState) -> MlpParams:
    if p.dims != grads.dims:
        raise PreconditionError("gradient shapes do not match parameters")
    sizes = [w.size + b.size for w, b in zip(p.weights, p.biases)]
    bounds = np.cumsum(sizes)

    def layer_of(i):
        return f"layer {int(np.searchsorted(bounds, i, side='right'))}"

    return p.with_flat(adamw_update(p.flat(), grads.flat(), state, names=layer_of))
