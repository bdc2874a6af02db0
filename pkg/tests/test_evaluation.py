import numpy as np
import pytest

from fastattrib.attribution import rank_records
from fastattrib.diffusion import TrainConfig, equally_spaced_plan, generate_queries, make_dataset, train_model
from fastattrib.evaluation import (CounterfactualRow, Reference, bench, compare_methods, counterfactual_eval,
                                   counterfactual_grid, eval_orderings, eval_ranker, random_removal, read_csv,
                                   sign_test, summary_markdown, truth_order, write_csv, rank_report_rows)
from fastattrib.numerics import PreconditionError
from fastattrib.retrieval import fit_encoder


def fake_gt(queries, ids, seed=0):
    rng = np.random.default_rng(seed)
    return {q.id: rank_records(q.id, ids, rng.standard_normal(len(ids))) for q in queries}


class Q:
    def __init__(self, i):
        self.id = i


def test_truth_order_and_perfect_prediction():
    recs = rank_records(0, [4, 8, 2], [0.1, 0.9, 0.5])
    assert truth_order(recs).tolist() == [8, 2, 4]
    qs = [Q(0), Q(1)]
    gt = fake_gt(qs, np.arange(30))
    rep = eval_orderings(lambda q, c: truth_order(gt[q.id]), qs, gt, (5, 10))
    assert rep[5].mean == 1.0 and rep[10].stderr == 0.0 and rep[5].n_queries == 2
    with pytest.raises(PreconditionError):
        eval_orderings(lambda q, c: c, [Q(9)], gt, (5,))


def test_shuffled_predictions_near_chance():
    qs = [Q(i) for i in range(200)]
    n, L = 100, 10
    gt = fake_gt(qs, np.arange(n), seed=1)
    rng = np.random.default_rng(2)
    rep = eval_orderings(lambda q, c: rng.permutation(c), qs, gt, (L,))[L]
    from fastattrib.metrics import random_ap_expectation
    assert abs(rep.mean - random_ap_expectation(n, L)) < 3 * rep.stderr


@pytest.fixture(scope="module")
def tiny_world():
    ds = make_dataset(2, 12, 16, seed=1)
    cfg = TrainConfig(epochs=3, batch=8, T=20, hidden=(16,), cond_dim=2, time_dim=4)
    theta = train_model(ds, cfg, seed=0)
    enc = fit_encoder(ds, 4)
    qs = generate_queries(theta, 2, seed=1, steps=5, first_id=100)
    return ds, cfg, theta, enc, qs


def test_base_baseline_is_feature_cosine(tiny_world):
    ds, cfg, theta, enc, qs = tiny_world
    gt = fake_gt(qs, ds.ids)
    reps = eval_ranker(None, enc, ds, qs, gt, (3,))
    assert 0.0 < reps[3].mean <= 1.0


def test_counterfactual_k0_is_zero(tiny_world):
    ds, cfg, theta, enc, qs = tiny_world
    ref = Reference(theta, 0)
    plan = equally_spaced_plan(20, 4, 2, seed=3)
    row = counterfactual_eval([], qs[0], ds, cfg, ref, plan, enc, "abu", ddim_steps=5)
    assert row.delta_loss == 0.0 and row.delta_g_mse == 0.0 and row.k == 0


def test_counterfactual_deterministic_and_nonzero(tiny_world):
    ds, cfg, theta, enc, qs = tiny_world
    plan = equally_spaced_plan(20, 4, 2, seed=3)
    a = counterfactual_eval([0, 5, 7], qs[0], ds, cfg, Reference(theta, 0), plan, enc, "m", ddim_steps=5)
    b = counterfactual_eval([0, 5, 7], qs[0], ds, cfg, Reference(theta, 0), plan, enc, "m", ddim_steps=5)
    assert a == b and a.delta_loss != 0.0 and a.delta_g_mse > 0.0
    with pytest.raises(PreconditionError):
        counterfactual_eval(ds.ids, qs[0], ds, cfg, Reference(theta, 0), plan, enc)


def test_grid_has_random_rows(tiny_world):
    ds, cfg, theta, enc, qs = tiny_world
    plan = equally_spaced_plan(20, 2, 1, seed=3)
    ranks = {"abu": {q.id: ds.ids[::-1] for q in qs}}
    rows = counterfactual_grid(ranks, qs[:1], ds, cfg, [0], plan, enc, ks=(2,), ddim_steps=3)
    assert sorted(r.method for r in rows) == ["abu", "random"]
    assert rows[0].seed == rows[1].seed == 0


def test_random_removal_seeded():
    ds = make_dataset(2, 20, 16, seed=0)
    a = random_removal(ds, 3, 5, 1)
    assert np.array_equal(a, random_removal(ds, 3, 5, 1)) and len(set(a)) == 5
    assert not np.array_equal(a, random_removal(ds, 4, 5, 1))


def test_sign_test():
    assert sign_test([1, 2, 3], [1, 2, 3]) == 1.0
    assert sign_test(np.ones(10), np.zeros(10)) == pytest.approx(0.5 ** 10)
    assert sign_test(np.zeros(10), np.ones(10)) == pytest.approx(1.0)


def test_compare_methods_pairs_and_direction():
    rows = []
    for q in range(6):
        rows.append(CounterfactualRow(q, "abu", 10, 0, 1.0 + q, 0.2, 0.8))
        rows.append(CounterfactualRow(q, "random", 10, 0, 0.5, 0.1, 0.9))
    (rec,) = compare_methods(rows, "abu")
    assert rec["pairs"] == 6 and rec["delta_loss_abu"] == pytest.approx(3.5)
    assert rec["delta_loss_p"] == pytest.approx(0.5 ** 6)
    assert rec["delta_g_feat_p"] == pytest.approx(0.5 ** 6)


def test_bench_protocol():
    calls = []
    res = bench("x", calls.append, range(5), warm=3, reps=4, bytes_stored=7)
    assert calls == [0, 1, 2, 3, 4, 0, 1] and len(res.times) == 4 and res.bytes_stored == 7
    assert res.median <= res.p95
    with pytest.raises(PreconditionError):
        bench("x", print, [])


def test_csv_round_trip_and_summary(tmp_path):
    rows = [CounterfactualRow(1, "abu", 25, 0, 0.1 + 0.2, 1e-300, -0.5)]
    write_csv(tmp_path / "cf.csv", rows)
    back = read_csv(tmp_path / "cf.csv")
    assert float(back[0]["delta_loss"]) == 0.1 + 0.2 and back[0]["method"] == "abu"
    cf = compare_methods(rows + [CounterfactualRow(1, "random", 25, 0, 0.0, 0.0, 1.0)], "abu")
    text = summary_markdown([{"name": "abu", "median": 0.5, "bytes_stored": 10}], cf, [])
    assert "ΔL k=25" in text and "| abu | 0.5 | 10 |" in text
