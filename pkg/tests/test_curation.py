import numpy as np
import pytest

from fastattrib.attribution import rank_records
from fastattrib.curation import (BatchSampler, CurationConfig, curate_corpus, curate_query, ground_truth,
                                 load_corpus, load_ground_truth, split_ids)
from fastattrib.diffusion import SynthQuery, make_dataset
from fastattrib.numerics import PreconditionError, make_rng
from fastattrib.retrieval import build_coarse_index, build_store, fit_encoder


class FakeTeacher:
    """Scores candidates by a fixed hash of (query, candidate) ids."""

    def rank(self, query, ids):
        ids = np.asarray(ids)
        return rank_records(query.id, ids, np.sin(ids * 1.7 + query.id))


@pytest.fixture(scope="module")
def setup():
    ds = make_dataset(3, 40, 16, seed=2)
    enc = fit_encoder(ds, 6)
    store = build_store(enc, ds)
    index = build_coarse_index(store)
    rng = np.random.default_rng(0)
    queries = [SynthQuery(1000 + i, np.clip(ds.X[i * 7] + 0.05 * rng.standard_normal(16), -1, 1),
                          int(ds.cond[i * 7]), i) for i in range(12)]
    return ds, enc, store, index, queries


def test_subsample_size():
    assert CurationConfig(K=200, subsample_ratio=0.2).M == 40
    assert CurationConfig(K=10, subsample_ratio=0.01).M == 1
    assert CurationConfig(K=7, subsample_ratio=1.0).M == 7
    with pytest.raises(PreconditionError):
        CurationConfig(subsample_ratio=0.0)
    with pytest.raises(PreconditionError):
        CurationConfig(p_neg=1.0)


def test_curate_query_subset_of_neighbors(setup):
    ds, enc, store, index, queries = setup
    cfg = CurationConfig(K=20, subsample_ratio=0.25)
    qr = curate_query(queries[0], enc, store, index, FakeTeacher(), cfg)
    assert len(qr.neighbor_ids) == 20 and len(qr.scored_ids) == 5
    assert set(qr.scored_ids) <= set(qr.neighbor_ids)
    assert sorted(r.rank_norm for r in qr.records) == [0.2, 0.4, 0.6, 0.8, 1.0]
    again = curate_query(queries[0], enc, store, index, FakeTeacher(), cfg)
    assert np.array_equal(again.scored_ids, qr.scored_ids)
    full = curate_query(queries[0], enc, store, index, FakeTeacher(), CurationConfig(K=20, subsample_ratio=1.0))
    assert np.array_equal(np.sort(full.scored_ids), np.sort(full.neighbor_ids))
    with pytest.raises(PreconditionError):
        curate_query(queries[0], enc, store, index, FakeTeacher(), CurationConfig(K=121))


def test_split_is_disjoint_and_seeded():
    tr, va = split_ids(range(50), 30, 10, seed=1)
    assert len(tr) == 30 and len(va) == 10 and not set(tr) & set(va)
    assert (tr, va) == split_ids(list(range(50))[::-1], 30, 10, seed=1)
    with pytest.raises(PreconditionError):
        split_ids(range(5), 4, 2, 0)


def test_corpus_round_trip(tmp_path, setup):
    ds, enc, store, index, queries = setup
    cfg = CurationConfig(K=20, subsample_ratio=0.5, n_train=8, n_val=2)
    corpus = curate_corpus(queries, enc, store, index, FakeTeacher(), cfg, out_dir=tmp_path / "c")
    assert len(corpus.records) == 10 and corpus.record_count() == 100
    back = load_corpus(tmp_path / "c")
    assert back.train_ids == corpus.train_ids and back.val_ids == corpus.val_ids
    for q in corpus.records:
        assert back.records[q] == corpus.records[q]
        assert np.array_equal(back.neighbors[q], corpus.neighbors[q])
        assert back.queries[q].x.tobytes() == corpus.queries[q].x.tobytes()
    with pytest.raises(PreconditionError):
        curate_corpus(queries + queries[:1], enc, store, index, FakeTeacher(), cfg)


def test_batch_sampler_negatives(setup):
    ds, enc, store, index, queries = setup
    cfg = CurationConfig(K=20, subsample_ratio=0.5, n_train=8, n_val=2)
    corpus = curate_corpus(queries, enc, store, index, FakeTeacher(), cfg)
    sampler = BatchSampler(corpus, corpus.train_ids, ds.ids)
    q, c, t = sampler(4000, 0.3, make_rng(0, "b"))
    neg = np.array([ci not in set(corpus.neighbors[qi]) for qi, ci in zip(q, c)])
    assert np.all(t[neg] == 1.0)
    assert abs(neg.mean() - 0.3) < 0.03
    stored = {(r.query_id, r.candidate_id): r.rank_norm for qq in corpus.train_ids for r in corpus.records[qq]}
    assert all(stored[(qi, ci)] == ti for qi, ci, ti in zip(q[~neg], c[~neg], t[~neg]))
    assert set(q) <= set(corpus.train_ids)
    _, _, t0 = sampler(500, 0.0, make_rng(0, "b"))
    assert t0.max() <= 1.0 and np.any(t0 < 1.0)
    a = sampler(64, 0.1, make_rng(3))
    b = sampler(64, 0.1, make_rng(3))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_ground_truth_round_trip(tmp_path, setup):
    ds, enc, store, index, queries = setup
    gt = ground_truth(FakeTeacher(), queries[:2], ds, out_dir=tmp_path / "gt")
    qs, back = load_ground_truth(tmp_path / "gt")
    assert [q.id for q in qs] == [q.id for q in queries[:2]]
    assert back == gt and len(gt[queries[0].id]) == len(ds)
