"""Frozen base features, feature stores and cosine k-NN search (exact and a
k-means inverted-file index)."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import PreconditionError, make_rng, sym_eigh
from .tensorio import dump_json, load_json, load_tensor, save_tensor, tensor_bytes

MODES = ("image", "text", "image+text")


def _unit_rows(m: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(m, axis=-1, keepdims=True)
    return m / np.where(n > 0.0, n, 1.0)


@dataclass
class BaseEncoder:
    """PCA on pixels for the image part, one-hot class for the text part.
    In image+text mode both parts are unit-normalized and concatenated with
    equal weight."""
    mean: np.ndarray
    components: np.ndarray   # (d_img, D), orthonormal rows
    explained: float
    n_classes: int
    mode: str = "image+text"

    @property
    def dim(self) -> int:
        d_img = self.components.shape[0]
        return {"image": d_img, "text": self.n_classes, "image+text": d_img + self.n_classes}[self.mode]

    def with_mode(self, mode: str) -> "BaseEncoder":
        return BaseEncoder(self.mean, self.components, self.explained, self.n_classes, mode)

    def encode_image(self, X) -> np.ndarray:
        return (np.atleast_2d(X) - self.mean) @ self.components.T

    def reconstruct(self, codes) -> np.ndarray:
        return np.atleast_2d(codes) @ self.components + self.mean

    def encode(self, X, cond) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        cond = np.atleast_1d(np.asarray(cond, dtype=np.int64))
        text = np.zeros((len(cond), self.n_classes))
        text[np.arange(len(cond)), cond] = 1.0
        if self.mode == "text":
            return text
        img = self.encode_image(X)
        if self.mode == "image":
            return img
        return np.hstack([_unit_rows(img), text]) / math.sqrt(2.0)

    def content_bytes(self) -> bytes:
        return tensor_bytes(self.mean) + tensor_bytes(self.components) + self.mode.encode()


def fit_encoder(dataset, d_img: int | None = 32, mode: str = "image+text", seed: int = 0) -> BaseEncoder:
    """PCA via the Jacobi eigensolver on the pixel covariance. With
    ``d_img=None`` the smallest dimension reaching 90% explained variance is
    used. ``seed`` only fixes the sign convention of the components."""
    if mode not in MODES:
        raise PreconditionError(f"unknown encoder mode {mode!r}")
    X = np.asarray(dataset.X, dtype=np.float64)
    mean = X.mean(axis=0)
    Xc = X - mean
    U, s = sym_eigh(Xc.T @ Xc / len(X))
    s = np.clip(s, 0.0, None)
    rank = int(np.sum(s > 1e-12 * max(s[0], 1e-300)))
    if d_img is None:
        d_img = int(np.searchsorted(np.cumsum(s) / s.sum(), 0.9) + 1)
    if d_img > rank or len(X) <= d_img:
        raise PreconditionError(f"d_img={d_img} exceeds data rank {rank}")
    comps = U[:, :d_img].T.copy()
    # deterministic sign: largest-magnitude loading positive, ties broken by a seeded flip
    flip = make_rng(seed, "pca-sign").random(d_img) < 0.0
    for i in range(d_img):
        j = int(np.argmax(np.abs(comps[i])))
        if (comps[i, j] < 0) != flip[i]:
            comps[i] = -comps[i]
    return BaseEncoder(mean, comps, float(s[:d_img].sum() / s.sum()), dataset.n_classes, mode)


@dataclass
class FeatureStore:
    ids: np.ndarray
    vectors: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.normalized:
            self.vectors = _unit_rows(self.vectors)

    def __len__(self):
        return len(self.ids)

    def nbytes(self) -> int:
        return self.vectors.nbytes + self.ids.nbytes


def build_store(encoder: BaseEncoder, dataset) -> FeatureStore:
    return FeatureStore(dataset.ids, encoder.encode(dataset.X, dataset.cond), normalized=True)


def _ordered(ids, cos, K):
    order = np.lexsort((ids, -cos))[:K]
    return [(int(ids[j]), float(cos[j])) for j in order]


def knn_exact(store: FeatureStore, q, K: int) -> list:
    if not store.normalized:
        raise PreconditionError("store must be normalized")
    if K > len(store):
        raise PreconditionError(f"K={K} exceeds store size {len(store)}")
    q = np.asarray(q, dtype=np.float64)
    nq = np.linalg.norm(q)
    cos = store.vectors @ (q / nq if nq > 0 else q)
    return _ordered(store.ids, cos, K)


@dataclass
class CoarseIndex:
    centroids: np.ndarray
    cells: list          # per cell, array of store row positions
    n_probe: int

    @property
    def n_cells(self) -> int:
        return len(self.cells)


def build_coarse_index(store: FeatureStore, n_cells: int | None = None, n_probe: int | None = None,
                       seed: int = 0, iters: int = 20) -> CoarseIndex:
    """Spherical k-means with a fixed number of Lloyd iterations."""
    X = store.vectors
    n = len(X)
    n_cells = max(1, int(round(math.sqrt(n)))) if n_cells is None else min(int(n_cells), n)
    n_probe = math.ceil(0.2 * n_cells) if n_probe is None else min(int(n_probe), n_cells)
    rng = make_rng(seed, "kmeans")
    cent = X[rng.choice(n, size=n_cells, replace=False)].copy()
    for _ in range(iters):
        assign = np.argmax(X @ cent.T, axis=1)
        sums = np.zeros_like(cent)
        np.add.at(sums, assign, X)
        counts = np.bincount(assign, minlength=n_cells)
        nz = counts > 0
        cent[nz] = _unit_rows(sums[nz])
    assign = np.argmax(X @ cent.T, axis=1)
    cells = [np.flatnonzero(assign == k) for k in range(n_cells)]
    return CoarseIndex(_unit_rows(cent), cells, n_probe)


def knn_coarse(index: CoarseIndex, store: FeatureStore, q, K: int) -> list:
    q = np.asarray(q, dtype=np.float64)
    nq = np.linalg.norm(q)
    q = q / nq if nq > 0 else q
    probe = np.lexsort((np.arange(index.n_cells), -(index.centroids @ q)))[: index.n_probe]
    rows = np.concatenate([index.cells[k] for k in probe]) if len(probe) else np.array([], int)
    out = _ordered(store.ids[rows], store.vectors[rows] @ q, K)
    if len(out) < K:
        warnings.warn(f"probed cells hold only {len(out)} of the requested {K} neighbors")
    return out


def embed_store(store: FeatureStore, embed_fn) -> FeatureStore:
    return FeatureStore(store.ids, embed_fn(store.vectors), normalized=True)


def rank_all(store: FeatureStore, embed_fn, query) -> np.ndarray:
    """Every id in ``store`` ordered by cosine to ``embed_fn(query)``, ties by
    id. ``store`` holds already-embedded vectors."""
    q = np.asarray(embed_fn(np.atleast_2d(query)), dtype=np.float64).reshape(-1)
    nq = np.linalg.norm(q)
    cos = store.vectors @ (q / nq if nq > 0 else q)
    return store.ids[np.lexsort((store.ids, -cos))]


# ---------------------------------------------------------------------------
# persistence

def save_encoder(directory, enc: BaseEncoder) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "mean.fatn", enc.mean)
    save_tensor(d / "components.fatn", enc.components)
    dump_json(d / "encoder.json", {"mode": enc.mode, "n_classes": enc.n_classes,
                                   "explained": enc.explained})


def load_encoder(directory) -> BaseEncoder:
    d = Path(directory)
    meta = load_json(d / "encoder.json")
    return BaseEncoder(load_tensor(d / "mean.fatn"), load_tensor(d / "components.fatn"),
                       meta["explained"], meta["n_classes"], meta["mode"])


def save_store(directory, store: FeatureStore) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "vectors.fatn", store.vectors)
    dump_json(d / "ids.json", {"ids": store.ids.tolist(), "normalized": store.normalized})


def load_store(directory) -> FeatureStore:
    d = Path(directory)
    meta = load_json(d / "ids.json")
    store = FeatureStore(meta["ids"], load_tensor(d / "vectors.fatn"), normalized=False)
    # stored rows are already unit length; normalizing again would perturb the last bit
    store.normalized = meta["normalized"]
    return store


def save_index(directory, index: CoarseIndex) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "centroids.fatn", index.centroids)
    dump_json(d / "cells.json", {"cells": [c.tolist() for c in index.cells], "n_probe": index.n_probe})


def load_index(directory) -> CoarseIndex:
    d = Path(directory)
    meta = load_json(d / "cells.json")
    return CoarseIndex(load_tensor(d / "centroids.fatn"),
                       [np.asarray(c, dtype=np.int64) for c in meta["cells"]], meta["n_probe"])
