"""Builds the distillation corpus: k-NN candidates per generated query,
teacher ranks on a seeded subsample, and the training-time batch sampler
with outside-neighbor negatives."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attribution import AttributionRecord, read_records, write_records
from .diffusion import SynthQuery
from .numerics import PreconditionError, make_rng
from .retrieval import knn_coarse, knn_exact
from .tensorio import dump_json, load_json, load_tensor, save_tensor


@dataclass(frozen=True)
class CurationConfig:
    K: int = 200
    subsample_ratio: float = 0.2
    p_neg: float = 0.1
    n_train: int = 200
    n_val: int = 20
    seed: int = 0
    coarse: bool = False

    def __post_init__(self):
        if not 0.0 < self.subsample_ratio <= 1.0:
            raise PreconditionError("subsample ratio must be in (0, 1]")
        if not 0.0 <= self.p_neg < 1.0:
            raise PreconditionError("p_neg must be in [0, 1)")

    @property
    def M(self) -> int:
        return max(1, math.ceil(self.subsample_ratio * self.K - 1e-9))


@dataclass
class QueryRecord:
    query: SynthQuery
    neighbor_ids: np.ndarray
    scored_ids: np.ndarray
    records: list


def candidate_neighbors(query: SynthQuery, encoder, store, index, K: int, coarse: bool) -> np.ndarray:
    if K > len(store):
        raise PreconditionError(f"K={K} exceeds dataset size {len(store)}")
    qf = encoder.encode(query.x, query.c)[0]
    hits = knn_coarse(index, store, qf, K) if coarse else knn_exact(store, qf, K)
    return np.array([i for i, _ in hits], dtype=np.int64)


def curate_query(query: SynthQuery, encoder, store, index, teacher, cfg: CurationConfig) -> QueryRecord:
    """Neighbors from the base features, a seeded uniform M-subset of them,
    and teacher ranks renormalized over that subset."""
    neighbors = candidate_neighbors(query, encoder, store, index, cfg.K, cfg.coarse)
    if cfg.M >= len(neighbors):
        scored = neighbors.copy()
    else:
        rng = make_rng(cfg.seed, "subsample", query.id)
        scored = np.sort(rng.choice(neighbors, size=cfg.M, replace=False))
    return QueryRecord(query, neighbors, scored, teacher.rank(query, scored))


@dataclass
class Corpus:
    queries: dict                       # id -> SynthQuery
    records: dict                       # id -> list[AttributionRecord], best first
    neighbors: dict                     # id -> array of K neighbor ids
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def record_count(self, qids=None) -> int:
        qids = self.records.keys() if qids is None else qids
        return sum(len(self.records[q]) for q in qids)


def split_ids(query_ids, n_train: int, n_val: int, seed: int):
    ids = np.asarray(sorted(query_ids), dtype=np.int64)
    if n_train + n_val > len(ids):
        raise PreconditionError("split sizes exceed query count")
    perm = make_rng(seed, "split").permutation(len(ids))
    return sorted(ids[perm[:n_train]].tolist()), sorted(ids[perm[n_train: n_train + n_val]].tolist())


def save_queries(directory, queries) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "queries.fatn", np.stack([q.x for q in queries]))
    dump_json(d / "queries.json", [{"id": q.id, "c": q.c, "noise_seed": q.noise_seed} for q in queries])


def load_queries(directory) -> list:
    d = Path(directory)
    X = load_tensor(d / "queries.fatn")
    return [SynthQuery(m["id"], X[i], m["c"], m["noise_seed"])
            for i, m in enumerate(load_json(d / "queries.json"))]


def curate_corpus(queries, encoder, store, index, teacher, cfg: CurationConfig, out_dir=None,
                  extra_manifest: dict | None = None) -> Corpus:
    queries = list(queries)
    if not queries:
        raise PreconditionError("no queries to curate")
    ids = [q.id for q in queries]
    if len(set(ids)) != len(ids):
        raise PreconditionError("query ids must be unique")
    train_ids, val_ids = split_ids(ids, cfg.n_train, cfg.n_val, cfg.seed)
    keep = set(train_ids) | set(val_ids)
    corpus = Corpus({}, {}, {}, train_ids, val_ids)
    for q in queries:
        if q.id not in keep:
            continue
        qr = curate_query(q, encoder, store, index, teacher, cfg)
        corpus.queries[q.id] = q
        corpus.records[q.id] = qr.records
        corpus.neighbors[q.id] = qr.neighbor_ids
    corpus.manifest = {"config": asdict(cfg), "train": train_ids, "val": val_ids,
                       "records": corpus.record_count(), **(extra_manifest or {})}
    if out_dir is not None:
        save_corpus(out_dir, corpus)
    return corpus


def save_corpus(out_dir, corpus: Corpus) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    for qid in sorted(corpus.records):
        write_records(d / f"q_{qid}.jsonl", corpus.records[qid])
        dump_json(d / f"neighbors_{qid}.json", [int(i) for i in corpus.neighbors[qid]])
    save_queries(d, [corpus.queries[q] for q in sorted(corpus.queries)])
    dump_json(d / "manifest.json", corpus.manifest)


def load_corpus(out_dir) -> Corpus:
    d = Path(out_dir)
    manifest = load_json(d / "manifest.json")
    queries = {q.id: q for q in load_queries(d)}
    records = {q: read_records(d / f"q_{q}.jsonl") for q in queries}
    neighbors = {q: np.asarray(load_json(d / f"neighbors_{q}.json"), dtype=np.int64) for q in queries}
    return Corpus(queries, records, neighbors, manifest["train"], manifest["val"], manifest)


def sample_batch(corpus: Corpus, train_query_ids, batch_size: int, p_neg: float,
                 rng: np.random.Generator, all_ids):
    """Returns ``(query_ids, candidate_ids, targets)`` arrays.

    Each slot draws a uniform stored (query, candidate) record. With
    probability ``p_neg`` the candidate is then replaced by a uniform training
    id outside that query's neighbor set, with target 1."""
    return BatchSampler(corpus, train_query_ids, all_ids)(batch_size, p_neg, rng)


class BatchSampler:
    """Precomputed flat record arrays and outside-neighbor pools for fast
    repeated ``sample_batch`` calls with identical semantics."""

    def __init__(self, corpus: Corpus, train_query_ids, all_ids):
        self.qids = list(train_query_ids)
        self.flat_q = np.concatenate([np.full(len(corpus.records[q]), q) for q in self.qids])
        self.flat_c = np.concatenate([[r.candidate_id for r in corpus.records[q]] for q in self.qids])
        self.flat_p = np.concatenate([[r.rank_norm for r in corpus.records[q]] for q in self.qids])
        if self.flat_q.size == 0:
            raise PreconditionError("empty corpus")
        all_ids = np.asarray(all_ids, dtype=np.int64)
        self.outside = {q: np.setdiff1d(all_ids, corpus.neighbors[q]) for q in self.qids}

    def __call__(self, batch_size: int, p_neg: float, rng: np.random.Generator):
        neg = rng.random(batch_size) < p_neg
        pick = rng.integers(0, self.flat_q.size, size=batch_size)
        qids, cids, targets = self.flat_q[pick].copy(), self.flat_c[pick].copy(), self.flat_p[pick].copy()
        for slot in np.flatnonzero(neg):
            pool = self.outside[int(qids[slot])]
            if pool.size == 0:
                raise PreconditionError(f"neighbor set of query {qids[slot]} covers the whole training set")
            cids[slot] = pool[rng.integers(pool.size)]
            targets[slot] = 1.0
        return qids, cids, targets


def ground_truth(teacher, queries, dataset, out_dir=None) -> dict:
    """Full-dataset teacher rankings for held-out queries: id -> records."""
    gt = {}
    for q in queries:
        gt[q.id] = teacher.rank(q, dataset.ids)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_records(Path(out_dir) / f"q_{q.id}.jsonl", gt[q.id])
    if out_dir is not None:
        save_queries(out_dir, list(queries))
    return gt


def load_ground_truth(out_dir):
    d = Path(out_dir)
    queries = load_queries(d)
    return queries, {q.id: read_records(d / f"q_{q.id}.jsonl") for q in queries}
