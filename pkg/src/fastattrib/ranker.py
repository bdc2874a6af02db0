"""Distilled rank predictor: an MLP head over frozen base features whose
cosine similarities, passed through a learned affine sigmoid, regress the
teacher's normalized ranks.

Small normalized rank means influential. The affine scale starts negative so
that higher cosine already maps to a smaller predicted rank; retrieval then
orders candidates by descending cosine.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import map_at_L
from .numerics import (AdamWState, MlpParams, NumericError, PreconditionError, adamw_update,
                       init_mlp, make_rng, mlp_backward, mlp_forward)
from .tensorio import dump_json, load_json, load_tensor, save_tensor


@dataclass(frozen=True)
class LossMode:
    tag: str = "bce"      # "bce" | "ordinal" | "mse"
    bins: int = 10

    def __post_init__(self):
        if self.tag not in ("bce", "ordinal", "mse"):
            raise PreconditionError(f"unknown loss {self.tag!r}")
        if self.tag == "ordinal" and self.bins < 2:
            raise PreconditionError("ordinal loss needs at least 2 bins")

    @property
    def n_affine(self) -> int:
        return self.bins - 1 if self.tag == "ordinal" else 1


@dataclass
class RankerParams:
    head: MlpParams
    a: np.ndarray          # one entry, or one per ordinal threshold
    b: np.ndarray
    mode: LossMode = field(default_factory=LossMode)

    @property
    def in_dim(self) -> int:
        return self.head.weights[0].shape[1]

    @property
    def emb_dim(self) -> int:
        return self.head.weights[-1].shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.head.flat(), self.a, self.b])

    def with_flat(self, v) -> "RankerParams":
        n, k = self.head.n_params, len(self.a)
        return RankerParams(self.head.with_flat(v[:n]), np.array(v[n: n + k]),
                            np.array(v[n + k: n + 2 * k]), self.mode)


def init_ranker(in_dim: int, mode: LossMode = LossMode(), hidden: int = 128, emb_dim: int = 64,
                seed: int = 0, a0: float = -5.0) -> RankerParams:
    """Near-identity head when every width equals ``in_dim``, else He init."""
    dims = [in_dim, hidden, hidden, emb_dim]
    rng = make_rng(seed, "ranker-init")
    if len(set(dims)) == 1:
        head = init_mlp(dims, rng, scale=0.01)
        head = MlpParams([w + np.eye(in_dim) for w in head.weights], head.biases, head.activations)
    else:
        head = init_mlp(dims, rng)
    k = mode.n_affine
    return RankerParams(head, np.full(k, a0), np.zeros(k), mode)


def _unit(u):
    n = np.linalg.norm(u, axis=1, keepdims=True)
    zero = n[:, 0] == 0.0
    if np.any(zero):
        warnings.warn("zero embedding; falling back to the first basis vector")
        u = u.copy()
        u[zero] = 0.0
        u[zero, 0] = 1.0
        n = np.where(zero[:, None], 1.0, n)
    return u / n, n


def embed(r: RankerParams, feats) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    single = feats.ndim == 1
    feats = np.atleast_2d(feats)
    if feats.shape[1] != r.in_dim:
        raise PreconditionError(f"feature width {feats.shape[1]} != {r.in_dim}")
    out, _ = mlp_forward(r.head, feats)
    u, _ = _unit(out)
    return u[0] if single else u


def rank_score(r: RankerParams, f1, f2) -> np.ndarray:
    return np.sum(embed(r, np.atleast_2d(f1)) * embed(r, np.atleast_2d(f2)), axis=1)


# ---------------------------------------------------------------------------
# pointwise losses (per item; all return loss and partials)

def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def bce_loss(pi, r, a, b):
    """BCE of soft target ``pi`` against ``sigmoid(a r + b)``.

    Returns ``(loss, dl/dr, dl/da, dl/db)``; written as softplus(z) - pi z so
    it stays finite for any logit."""
    z = a * r + b
    loss = np.logaddexp(0.0, z) - pi * z
    d = _sigmoid(z) - pi
    return loss, a * d, r * d, d


def mse_rank_loss(pi, r, a, b):
    z = a * r + b
    p = _sigmoid(z)
    d = 2.0 * (p - pi) * p * (1.0 - p)
    return (pi - p) ** 2, a * d, r * d, d


def rank_bin(pi, bins: int):
    return np.clip(np.ceil(np.asarray(pi) * bins - 1e-9).astype(np.int64), 1, bins)


def ordinal_targets(rbin, bins: int) -> np.ndarray:
    """``b^k = 1`` iff ``rbin > k`` for thresholds ``k = 1..bins-1``."""
    rbin = np.atleast_1d(np.asarray(rbin))
    if np.any(rbin < 1) or np.any(rbin > bins):
        raise PreconditionError(f"rank bin outside 1..{bins}")
    return (rbin[:, None] > np.arange(1, bins)[None, :]).astype(np.float64)


def ordinal_loss(rbin, logits):
    """Sum of per-threshold binary cross-entropies. ``logits`` has shape
    ``(n, B-1)`` (or ``(B-1,)``); returns ``(loss, dloss/dlogits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    logits = np.atleast_2d(logits)
    if not np.all(np.isfinite(logits)):
        raise PreconditionError("non-finite logits")
    bk = ordinal_targets(rbin, logits.shape[1] + 1)
    loss = np.sum(np.logaddexp(0.0, logits) - bk * logits, axis=1)
    grad = _sigmoid(logits) - bk
    return (loss[0], grad[0]) if single else (loss, grad)


def ordinal_predict(logits) -> np.ndarray:
    return np.sum(_sigmoid(np.asarray(logits, dtype=np.float64)), axis=-1)


# ---------------------------------------------------------------------------
# batch objective

def pair_loss_and_grad(r: RankerParams, qf, cf, targets):
    """Mean loss over (query feature, candidate feature, target) rows and its
    flat gradient. Gradients reach the head through both embeddings."""
    n = len(targets)
    out, cache = mlp_forward(r.head, np.vstack([qf, cf]))
    u, norms = _unit(out)
    uq, uc = u[:n], u[n:]
    cos = np.sum(uq * uc, axis=1)
    mode = r.mode
    if mode.tag == "ordinal":
        logits = cos[:, None] * r.a[None, :] + r.b[None, :]
        loss, dlog = ordinal_loss(rank_bin(targets, mode.bins), logits)
        dcos = dlog @ r.a
        da = (dlog * cos[:, None]).sum(axis=0)
        db = dlog.sum(axis=0)
    else:
        fn = bce_loss if mode.tag == "bce" else mse_rank_loss
        loss, dcos, da, db = fn(targets, cos, r.a[0], r.b[0])
        da, db = np.array([da.sum()]), np.array([db.sum()])
    # d cos / d u = other unit vector, projected off u and divided by |u|
    du = np.vstack([dcos[:, None] * uc, dcos[:, None] * uq])
    du = (du - np.sum(du * u, axis=1, keepdims=True) * u) / norms
    grads, _, _ = mlp_backward(r.head, cache, du)
    g = np.concatenate([grads.flat(), da, db]) / n
    return float(np.mean(loss)), g


def predicted_order(r: RankerParams, q_feat, cand_feats, cand_ids) -> np.ndarray:
    """Candidate ids from most to least influential according to the ranker."""
    cand_ids = np.asarray(cand_ids)
    cos = embed(r, np.atleast_2d(cand_feats)) @ embed(r, np.asarray(q_feat).reshape(-1))
    if r.mode.tag == "ordinal":
        key = ordinal_predict(cos[:, None] * r.a[None, :] + r.b[None, :])
    else:
        key = -cos if r.a[0] < 0 else cos
    return cand_ids[np.lexsort((cand_ids, key))]


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class RankerConfig:
    epochs: int = 10
    batch: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.01
    p_neg: float = 0.1
    seed: int = 0
    hidden: int = 128
    emb_dim: int = 64
    a0: float = -5.0
    steps_per_epoch: int | None = None
    val_L: tuple = (0.1,)      # ints are absolute, floats a fraction of each query's candidates


def _val_map(r, corpus, qfeat, cfeat, id_pos, L_list):
    """Validation mAP over each val query's scored candidates."""
    out = {}
    for L in L_list:
        aps = []
        for q in corpus.val_ids:
            truth = np.array([rec.candidate_id for rec in corpus.records[q]])
            n_pos = max(1, round(L * len(truth))) if isinstance(L, float) else L
            if n_pos > len(truth):
                continue
            pred = predicted_order(r, qfeat[q], cfeat[id_pos[truth]], truth)
            aps.append(map_at_L(pred, truth, n_pos))
        out[L] = float(np.mean(aps)) if aps else float("nan")
    return out


def train_ranker(corpus, encoder, dataset, mode: LossMode = LossMode(), cfg: RankerConfig = RankerConfig()):
    """AdamW on the pointwise objective; returns ``(best_params, log)`` where
    the checkpoint with the best first validation mAP is kept."""
    from .curation import BatchSampler

    cfeat = encoder.encode(dataset.X, dataset.cond)
    id_pos = np.full(dataset.id_space, -1)
    id_pos[dataset.ids] = np.arange(len(dataset))
    qfeat = {qid: encoder.encode(q.x, q.c)[0] for qid, q in corpus.queries.items()}
    r = init_ranker(cfeat.shape[1], mode, cfg.hidden, cfg.emb_dim, cfg.seed, cfg.a0)
    sampler = BatchSampler(corpus, corpus.train_ids, dataset.ids)
    steps = cfg.steps_per_epoch or max(1, math.ceil(corpus.record_count(corpus.train_ids) / cfg.batch))
    state = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    flat = r.flat()
    log = []
    best, best_score = r, -np.inf
    for epoch in range(cfg.epochs):
        rng = make_rng(cfg.seed, "ranker-batches", epoch)
        total = 0.0
        for step in range(steps):
            qids, cids, targets = sampler(cfg.batch, cfg.p_neg, rng)
            qf = np.stack([qfeat[int(q)] for q in qids])
            loss, g = pair_loss_and_grad(r, qf, cfeat[id_pos[cids]], targets)
            if not np.isfinite(loss):
                raise NumericError(f"ranker loss is NaN at epoch {epoch}, batch {step}")
            total += loss
            flat = adamw_update(flat, g, state)
            r = r.with_flat(flat)
        val = _val_map(r, corpus, qfeat, cfeat, id_pos, cfg.val_L) if corpus.val_ids else {}
        log.append({"epoch": epoch, "train_loss": total / steps,
                    **{f"val_mAP_{L}": v for L, v in val.items()}})
        score = val[cfg.val_L[0]] if val else epoch
        if score > best_score:
            best, best_score = r, score
    return best, log


# ---------------------------------------------------------------------------
# persistence

def save_ranker(directory, r: RankerParams, extra: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, (w, b) in enumerate(zip(r.head.weights, r.head.biases)):
        save_tensor(d / f"head.{i}.W.fatn", w)
        save_tensor(d / f"head.{i}.b.fatn", b)
    save_tensor(d / "affine.fatn", np.stack([r.a, r.b]))
    dump_json(d / "ranker.json", {"mode": asdict(r.mode), "layers": len(r.head.weights),
                                  "dims": r.head.dims, "a": r.a.tolist(), "b": r.b.tolist(),
                                  **(extra or {})})


def load_ranker(directory) -> RankerParams:
    d = Path(directory)
    meta = load_json(d / "ranker.json")
    n = meta["layers"]
    ws = [load_tensor(d / f"head.{i}.W.fatn") for i in range(n)]
    bs = [load_tensor(d / f"head.{i}.b.fatn") for i in range(n)]
    ab = load_tensor(d / "affine.fatn")
    head = MlpParams(ws, bs, ["relu"] * (n - 1) + [None])
    return RankerParams(head, ab[0].copy(), ab[1].copy(), LossMode(**meta["mode"]))
