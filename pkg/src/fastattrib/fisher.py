"""Empirical Fisher approximations for the denoiser: diagonal, K-FAC, EKFAC.

All estimators consume the same pinned sample stream: for every example, a
fixed set of (timestep, noise) draws keyed by ``(seed, example id)``. Each
sample contributes one rank-one gradient ``g a^T`` per block, which is all the
estimators need, so per-sample gradients are never materialized as vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import DenoiserParams, row_losses_and_pairs
from .numerics import NumericError, PreconditionError, make_rng, sym_eigh, unvec_col, vec_col
from .tensorio import dump_json, load_json, load_tensor, save_tensor


class SingularFisherError(NumericError):
    pass


@dataclass(frozen=True)
class FisherPlan:
    samples_per_example: int = 1
    seed: int = 0
    chunk: int = 512

    def rows(self, theta: DenoiserParams, examples):
        """Yield ``(x0, c, t, eps)`` row batches in dataset order."""
        examples = list(examples)
        if not examples:
            raise PreconditionError("zero samples for Fisher estimation")
        spe = self.samples_per_example
        per_chunk = max(1, self.chunk // spe)
        for s in range(0, len(examples), per_chunk):
            part = examples[s: s + per_chunk]
            xs, cs, ts, es = [], [], [], []
            for z in part:
                rng = make_rng(self.seed, "fisher", z.id)
                ts.append(rng.integers(1, theta.sched.T + 1, size=spe))
                es.append(rng.standard_normal((spe, theta.arch.dim)))
                xs.append(np.broadcast_to(z.x, (spe, theta.arch.dim)))
                cs.append(np.full(spe, z.c))
            yield np.vstack(xs), np.concatenate(cs), np.concatenate(ts), np.vstack(es)


def sample_pairs(theta: DenoiserParams, examples, plan: FisherPlan):
    """Per chunk, the list of per-block ``(a, g)`` row batches."""
    for rows in plan.rows(theta, examples):
        _, pairs = row_losses_and_pairs(theta, *rows)
        yield pairs


# ---------------------------------------------------------------------------
# containers

@dataclass
class FisherDiag:
    diag: np.ndarray
    sample_count: int


@dataclass
class KfacBlock:
    name: str
    A: np.ndarray
    B: np.ndarray
    sample_count: int


@dataclass
class EkfacBlock:
    name: str
    U_A: np.ndarray
    U_B: np.ndarray
    S: np.ndarray  # (d_out, d_in): S[i, j] pairs with U_A[:, j] (x) U_B[:, i]
    sample_count: int

    def stored_floats(self) -> int:
        return self.U_A.size + self.U_B.size + self.S.size


@dataclass
class FisherApprox:
    tag: str                 # "diag" | "kfac" | "ekfac"
    blocks: list             # Block layout of the target parameters
    data: object             # FisherDiag, or dict name -> per-block factors
    damping: float = 0.0
    sample_count: int = 0
    _eig: dict = field(default_factory=dict, repr=False)

    @property
    def n_params(self) -> int:
        return sum(b.size for b in self.blocks)

    def mean_eigenvalue(self) -> float:
        if self.tag == "diag":
            return float(np.mean(self.data.diag))
        vals = [self._block_eigs(b.name)[2] for b in self.blocks]
        return float(np.mean(np.concatenate([v.ravel() for v in vals])))

    def _block_eigs(self, name):
        """``(U_A, U_B, S_mat)`` for the block, computing K-FAC eigen-pairs once."""
        if name not in self._eig:
            blk = self.data[name]
            if self.tag == "ekfac":
                self._eig[name] = (blk.U_A, blk.U_B, blk.S)
            else:
                U_A, s_A = sym_eigh(blk.A)
                U_B, s_B = sym_eigh(blk.B)
                s = np.outer(np.clip(s_B, 0.0, None), np.clip(s_A, 0.0, None))
                self._eig[name] = (U_A, U_B, s)
        return self._eig[name]


def _check_psd(m, what):
    if np.linalg.norm(m - m.T) > 1e-9 * max(np.linalg.norm(m), 1e-300):
        raise NumericError(f"{what} is not symmetric")


# ---------------------------------------------------------------------------
# estimators over generic pair streams

def diag_from_pairs(pair_chunks, blocks) -> FisherDiag:
    acc = [np.zeros((b.rows, b.cols)) for b in blocks]
    n = 0
    for pairs in pair_chunks:
        for k, (a, g) in enumerate(pairs):
            acc[k] += (g * g).T @ (a * a)
        n += pairs[0][0].shape[0]
    if n == 0:
        raise PreconditionError("zero samples for Fisher estimation")
    return FisherDiag(np.concatenate([vec_col(m) for m in acc]) / n, n)


def kfac_from_pairs(pair_chunks, blocks) -> list:
    accA = [np.zeros((b.cols, b.cols)) for b in blocks]
    accB = [np.zeros((b.rows, b.rows)) for b in blocks]
    n = 0
    for pairs in pair_chunks:
        for k, (a, g) in enumerate(pairs):
            accA[k] += a.T @ a
            accB[k] += g.T @ g
        n += pairs[0][0].shape[0]
    if n == 0:
        raise PreconditionError("zero samples for Fisher estimation")
    out = []
    for b, A, B in zip(blocks, accA, accB):
        A, B = A / n, B / n
        _check_psd(A, f"A factor of {b.name}")
        _check_psd(B, f"B factor of {b.name}")
        out.append(KfacBlock(b.name, 0.5 * (A + A.T), 0.5 * (B + B.T), n))
    return out


def ekfac_from_pairs(pair_chunks, blocks, kfac: list) -> list:
    bases = []
    for kb in kfac:
        U_A, _ = sym_eigh(kb.A)
        U_B, _ = sym_eigh(kb.B)
        bases.append((U_A, U_B))
    acc = [np.zeros((b.rows, b.cols)) for b in blocks]
    n = 0
    for pairs in pair_chunks:
        for k, (a, g) in enumerate(pairs):
            U_A, U_B = bases[k]
            # per-sample U_B^T (g a^T) U_A = (U_B^T g)(U_A^T a)^T, squared elementwise
            ga, aa = g @ U_B, a @ U_A
            acc[k] += (ga * ga).T @ (aa * aa)
        n += pairs[0][0].shape[0]
    if n == 0:
        raise PreconditionError("zero samples for Fisher estimation")
    # C order so products are bit-identical after a save/load round trip
    return [EkfacBlock(kb.name, np.ascontiguousarray(U_A), np.ascontiguousarray(U_B), S / n, n)
            for kb, (U_A, U_B), S in zip(kfac, bases, acc)]


# ---------------------------------------------------------------------------
# estimators on the denoiser

def estimate_diag(theta: DenoiserParams, examples, plan: FisherPlan) -> FisherDiag:
    return diag_from_pairs(sample_pairs(theta, examples, plan), theta.blocks)


def estimate_kfac(theta: DenoiserParams, examples, plan: FisherPlan) -> list:
    return kfac_from_pairs(sample_pairs(theta, examples, plan), theta.blocks)


def ekfac_correct(theta: DenoiserParams, examples, kfac: list, plan: FisherPlan) -> list:
    return ekfac_from_pairs(sample_pairs(theta, examples, plan), theta.blocks, kfac)


def fit_fisher(theta: DenoiserParams, examples, plan: FisherPlan, tag: str = "ekfac",
               damping: float | None = None, rel_damping: float = 1e-4) -> FisherApprox:
    """Estimate a Fisher approximation. ``damping`` defaults to
    ``rel_damping`` times the mean eigenvalue of the estimate."""
    examples = list(examples)
    if tag == "diag":
        d = estimate_diag(theta, examples, plan)
        F = FisherApprox("diag", theta.blocks, d, 0.0, d.sample_count)
    elif tag in ("kfac", "ekfac"):
        kf = estimate_kfac(theta, examples, plan)
        if tag == "kfac":
            F = FisherApprox("kfac", theta.blocks, {k.name: k for k in kf}, 0.0, kf[0].sample_count)
        else:
            ek = ekfac_correct(theta, examples, kf, plan)
            F = FisherApprox("ekfac", theta.blocks, {e.name: e for e in ek}, 0.0, ek[0].sample_count)
    else:
        raise ValueError(f"unknown Fisher tag {tag!r}")
    F.damping = rel_damping * F.mean_eigenvalue() if damping is None else float(damping)
    return F


# ---------------------------------------------------------------------------
# products

def _blockwise(F: FisherApprox, v, inverse: bool):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (F.n_params,):
        raise PreconditionError(f"vector has shape {v.shape}, expected ({F.n_params},)")
    lam = F.damping
    if F.tag == "diag":
        d = F.data.diag + lam
        if inverse:
            if np.any(d <= 0.0):
                raise SingularFisherError("zero diagonal entry with no damping")
            return v / d
        return v * d
    out = np.empty_like(v)
    for b in F.blocks:
        U_A, U_B, S = F._block_eigs(b.name)
        V = unvec_col(v[b.offset: b.offset + b.size], b.rows, b.cols)
        Vt = U_B.T @ V @ U_A
        denom = S + lam
        if inverse:
            # eigenvalues below the usual numerical-rank tolerance count as zero
            tol = np.finfo(np.float64).eps * max(S.shape) * max(float(S.max()), 0.0)
            if np.any(denom <= tol):
                raise SingularFisherError(f"singular Fisher block {b.name}; add damping")
            Vt = Vt / denom
        else:
            Vt = Vt * denom
        out[b.offset: b.offset + b.size] = vec_col(U_B @ Vt @ U_A.T)
    return out


def fisher_inv_vprod(F: FisherApprox, v) -> np.ndarray:
    """``(F + damping I)^{-1} v`` block by block."""
    return _blockwise(F, v, inverse=True)


def fisher_vprod(F: FisherApprox, v) -> np.ndarray:
    return _blockwise(F, v, inverse=False)


def dense_block(F: FisherApprox, name: str) -> np.ndarray:
    """Materialize one block (without damping); only for small layers."""
    if F.tag == "diag":
        b = next(b for b in F.blocks if b.name == name)
        return np.diag(F.data.diag[b.offset: b.offset + b.size])
    U_A, U_B, S = F._block_eigs(name)
    U = np.kron(U_A, U_B)
    return U @ np.diag(vec_col(S)) @ U.T


def brute_force_fisher(theta: DenoiserParams, examples, plan: FisherPlan, layer_subset=None,
                       max_params: int = 200) -> np.ndarray:
    """Dense mean of per-sample gradient outer products over the selected blocks."""
    names = [b.name for b in theta.blocks] if layer_subset is None else list(layer_subset)
    sel = [k for k, b in enumerate(theta.blocks) if b.name in names]
    size = sum(theta.blocks[k].size for k in sel)
    if size > max_params:
        raise PreconditionError(f"{size} parameters exceeds the dense oracle limit of {max_params}")
    acc = np.zeros((size, size))
    n = 0
    for pairs in sample_pairs(theta, examples, plan):
        rows = pairs[0][0].shape[0]
        grads = np.hstack([np.einsum("ni,nj->nji", pairs[k][1], pairs[k][0]).reshape(rows, -1)
                           for k in sel])
        acc += grads.T @ grads
        n += rows
    return acc / n


# ---------------------------------------------------------------------------
# persistence

def save_fisher(directory, F: FisherApprox) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    if F.tag == "diag":
        save_tensor(d / "diag.fatn", F.data.diag)
    else:
        for b in F.blocks:
            blk = F.data[b.name]
            names.append(b.name)
            parts = {"A": blk.A, "B": blk.B} if F.tag == "kfac" else \
                {"U_A": blk.U_A, "U_B": blk.U_B, "S": blk.S}
            for k, arr in parts.items():
                save_tensor(d / f"{b.name}.{k}.fatn", arr)
    dump_json(d / "fisher.json", {
        "tag": F.tag, "damping": F.damping, "sample_count": F.sample_count, "layers": names,
        "blocks": [[b.name, b.offset, b.rows, b.cols, b.bias] for b in F.blocks]})


def load_fisher(directory) -> FisherApprox:
    from .diffusion import Block

    d = Path(directory)
    meta = load_json(d / "fisher.json")
    blocks = [Block(*b) for b in meta["blocks"]]
    n = meta["sample_count"]
    if meta["tag"] == "diag":
        data = FisherDiag(load_tensor(d / "diag.fatn"), n)
    elif meta["tag"] == "kfac":
        data = {b.name: KfacBlock(b.name, load_tensor(d / f"{b.name}.A.fatn"),
                                  load_tensor(d / f"{b.name}.B.fatn"), n) for b in blocks}
    else:
        data = {b.name: EkfacBlock(b.name, load_tensor(d / f"{b.name}.U_A.fatn"),
                                   load_tensor(d / f"{b.name}.U_B.fatn"),
                                   load_tensor(d / f"{b.name}.S.fatn"), n) for b in blocks}
    return FisherApprox(meta["tag"], blocks, data, meta["damping"], n)
