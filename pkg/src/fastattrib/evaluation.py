"""Rank-prediction evaluation, leave-k-out counterfactual retraining and
latency/storage benchmarks."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .diffusion import TrainConfig, ddim_sample, mc_loss, train_model
from .metrics import map_at_L, order_to_positions, spearman
from .numerics import PreconditionError, make_rng
from .ranker import embed, predicted_order
from .retrieval import knn_exact, build_store

DEFAULT_L = (20, 50, 100)
DEFAULT_K = (25, 50, 100)


# ---------------------------------------------------------------------------
# rank prediction

@dataclass
class RankEvalReport:
    L: int
    per_query: dict            # query id -> AP
    mean: float
    stderr: float

    @property
    def n_queries(self) -> int:
        return len(self.per_query)


def _report(L, aps: dict) -> RankEvalReport:
    v = np.array(list(aps.values()))
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return RankEvalReport(L, aps, float(v.mean()), se)


def truth_order(records) -> np.ndarray:
    """Candidate ids from most to least influential."""
    return np.array([r.candidate_id for r in sorted(records, key=lambda r: r.rank_norm)], dtype=np.int64)


def eval_orderings(order_fn, queries, gt: dict, L_list=DEFAULT_L) -> dict:
    """``order_fn(query, candidate_ids)`` returns the predicted id order; the
    candidate universe of each query is the id set of its ground truth."""
    aps = {L: {} for L in L_list}
    for q in queries:
        if q.id not in gt:
            raise PreconditionError(f"no ground truth for query {q.id}")
        truth = truth_order(gt[q.id])
        pred = order_fn(q, np.sort(truth))
        for L in L_list:
            aps[L][q.id] = map_at_L(pred, truth, L)
    return {L: _report(L, aps[L]) for L in L_list}


def base_order_fn(encoder, dataset):
    """Untuned baseline: cosine in the frozen base feature space."""
    feats = encoder.encode(dataset.X, dataset.cond)

    def order(q, cand_ids):
        store = build_store(encoder, dataset.take(cand_ids))
        return np.array([i for i, _ in knn_exact(store, encoder.encode(q.x, q.c)[0], len(cand_ids))])
    order.feats = feats
    return order


def ranker_order_fn(ranker, encoder, dataset):
    feats = encoder.encode(dataset.X, dataset.cond)

    def order(q, cand_ids):
        pos = dataset.positions(cand_ids)
        return predicted_order(ranker, encoder.encode(q.x, q.c)[0], feats[pos], np.asarray(cand_ids))
    return order


def eval_ranker(ranker, encoder, dataset, queries, gt: dict, L_list=DEFAULT_L) -> dict:
    """mAP(L) reports; ``ranker=None`` evaluates the untuned base features."""
    fn = base_order_fn(encoder, dataset) if ranker is None else ranker_order_fn(ranker, encoder, dataset)
    return eval_orderings(fn, queries, gt, L_list)


def student_teacher_spearman(ranker, encoder, dataset, queries, gt: dict, K: int = 200) -> dict:
    """Per query Spearman correlation between student and teacher positions
    over the query's K base-feature neighbors (the candidate set curation
    draws supervision from)."""
    store = build_store(encoder, dataset)
    fn = ranker_order_fn(ranker, encoder, dataset) if ranker is not None else base_order_fn(encoder, dataset)
    out = {}
    for q in queries:
        cands = np.array([i for i, _ in knn_exact(store, encoder.encode(q.x, q.c)[0], K)])
        truth = truth_order(gt[q.id])
        truth_c = truth[np.isin(truth, cands)]
        pred = fn(q, np.sort(cands))
        out[q.id] = spearman(order_to_positions(pred, cands), order_to_positions(truth_c, cands))
    return out


# ---------------------------------------------------------------------------
# counterfactual leave-k-out

@dataclass
class CounterfactualRow:
    query_id: int
    method: str
    k: int
    seed: int
    delta_loss: float
    delta_g_mse: float
    delta_g_feat: float       # cosine of base image features; lower means more deviation


def random_removal(dataset, query_id: int, k: int, seed: int) -> np.ndarray:
    rng = make_rng(seed, "random-removal", query_id, k)
    return np.sort(rng.choice(dataset.ids, size=k, replace=False))


def _cos(u, v) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    return float(u @ v / (nu * nv)) if nu > 0 and nv > 0 else 1.0


@dataclass
class Reference:
    """A model trained on the full data with one seed, plus its cached
    per-query losses and regenerations."""
    theta: object
    seed: int
    cache: dict = field(default_factory=dict)

    def query_stats(self, q, eval_plan, encoder, steps):
        if q.id not in self.cache:
            gen = ddim_sample(self.theta, q.c, q.noise_seed, steps)
            self.cache[q.id] = (mc_loss(self.theta, q, eval_plan), gen, encoder.encode_image(gen)[0])
        return self.cache[q.id]


def counterfactual_eval(removal_ids, query, dataset, train_cfg: TrainConfig, ref: Reference,
                        eval_plan, encoder, method: str = "method", ddim_steps: int = 50,
                        theta_retrained=None) -> CounterfactualRow:
    """Retrain from scratch without ``removal_ids`` using the reference seed
    and measure how much the query is forgotten."""
    removal_ids = np.asarray(removal_ids, dtype=np.int64)
    k = removal_ids.size
    if k >= len(dataset):
        raise PreconditionError("cannot remove the whole training set")
    if theta_retrained is None:
        theta_retrained = ref.theta if k == 0 else train_model(dataset.without(removal_ids), train_cfg, ref.seed)
    loss0, gen0, feat0 = ref.query_stats(query, eval_plan, encoder, ddim_steps)
    gen = ddim_sample(theta_retrained, query.c, query.noise_seed, ddim_steps)
    return CounterfactualRow(query.id, method, k, ref.seed,
                             mc_loss(theta_retrained, query, eval_plan) - loss0,
                             float(np.mean((gen - gen0) ** 2)),
                             _cos(encoder.encode_image(gen)[0], feat0))


def counterfactual_grid(rankings: dict, queries, dataset, train_cfg: TrainConfig, seeds, eval_plan, encoder,
                        ks=DEFAULT_K, ddim_steps: int = 50, include_random: bool = True,
                        progress=None) -> list:
    """``rankings`` maps method name to ``{query id: id order, most influential
    first}``. Each (query, k, seed) also gets a random-removal row under the
    same seed when ``include_random`` is set."""
    rows = []
    for seed in seeds:
        ref = Reference(train_model(dataset, train_cfg, seed), seed)
        for q in queries:
            for k in ks:
                sets = {m: np.asarray(r[q.id][:k]) for m, r in rankings.items()}
                if include_random:
                    sets["random"] = random_removal(dataset, q.id, k, seed)
                for m, ids in sets.items():
                    rows.append(counterfactual_eval(ids, q, dataset, train_cfg, ref, eval_plan, encoder,
                                                    m, ddim_steps))
                    if progress is not None:
                        progress(rows[-1])
    return rows


def sign_test(a, b) -> float:
    """One-sided paired sign test p-value for ``a > b``; ties are dropped."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    wins, n = int(np.sum(d > 0)), int(np.sum(d != 0))
    if n == 0:
        return 1.0
    return float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue)


def compare_methods(rows, method: str, baseline: str = "random") -> list:
    """Per k: means of both methods and sign-test p-values over matched
    (query, seed) pairs. ΔG_feat is compared in the lower-is-better direction."""
    by = {(r.method, r.k, r.query_id, r.seed): r for r in rows}
    out = []
    for k in sorted({r.k for r in rows}):
        keys = sorted((q, s) for (m, kk, q, s) in by if m == method and kk == k and (baseline, k, q, s) in by)
        if not keys:
            continue
        A = [by[(method, k, q, s)] for q, s in keys]
        B = [by[(baseline, k, q, s)] for q, s in keys]
        rec = {"k": k, "pairs": len(keys)}
        for name, sign in (("delta_loss", 1), ("delta_g_mse", 1), ("delta_g_feat", -1)):
            a = np.array([getattr(r, name) for r in A])
            b = np.array([getattr(r, name) for r in B])
            rec[f"{name}_{method}"] = float(a.mean())
            rec[f"{name}_{baseline}"] = float(b.mean())
            rec[f"{name}_se_{method}"] = float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else 0.0
            rec[f"{name}_p"] = sign_test(sign * a, sign * b)
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# benchmarks

@dataclass
class BenchResult:
    name: str
    median: float
    mean: float
    p95: float
    times: list
    bytes_stored: int = 0


def bench(name: str, fn, inputs, warm: int = 10, reps: int = 20, bytes_stored: int = 0) -> BenchResult:
    """Calls ``fn`` on ``warm`` inputs untimed, then times ``reps`` further
    calls. ``inputs`` is cycled if shorter than ``warm + reps``."""
    inputs = list(inputs)
    if not inputs:
        raise PreconditionError("bench needs at least one input")
    for i in range(warm):
        fn(inputs[i % len(inputs)])
    times = []
    for i in range(reps):
        x = inputs[(warm + i) % len(inputs)]
        t0 = time.perf_counter()
        fn(x)
        times.append(time.perf_counter() - t0)
    t = np.array(times)
    return BenchResult(name, float(np.median(t)), float(t.mean()), float(np.percentile(t, 95)), times,
                       bytes_stored)


def gradient_dump_bytes(n_candidates: int, n_params: int) -> int:
    """Bytes needed to store one f64 gradient per candidate, which is what
    gradient-similarity methods keep on disk."""
    return 8 * n_candidates * n_params


# ---------------------------------------------------------------------------
# report files

def write_csv(path, rows) -> None:
    rows = [asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r) for r in rows]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def rank_report_rows(label: str, reports: dict) -> list:
    return [{"model": label, "L": L, "mAP": rep.mean, "stderr": rep.stderr, "queries": rep.n_queries}
            for L, rep in sorted(reports.items())]


def summary_markdown(bench_rows, cf_summary, rank_rows) -> str:
    """Table with latency, storage, ΔL, ΔG_mse and ΔG_feat per k, plus the
    rank-prediction table."""
    lines = ["# Attribution summary", ""]
    if cf_summary:
        ks = sorted({r["k"] for r in cf_summary})
        methods = sorted({key[len("delta_loss_"):] for r in cf_summary for key in r
                          if key.startswith("delta_loss_") and not key.startswith("delta_loss_se")
                          and key != "delta_loss_p"})
        head = ["method", "latency (s)", "storage (bytes)"]
        for metric in ("ΔL", "ΔG_mse", "ΔG_feat"):
            head += [f"{metric} k={k}" for k in ks]
        lines += ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        lat = {b["name"]: b for b in bench_rows}
        for m in methods:
            cells = [m, f"{lat[m]['median']:.4g}" if m in lat else "-",
                     str(lat[m]["bytes_stored"]) if m in lat else "-"]
            for key in ("delta_loss", "delta_g_mse", "delta_g_feat"):
                for k in ks:
                    r = next(r for r in cf_summary if r["k"] == k)
                    cells.append(f"{r[f'{key}_{m}']:.4g}")
            lines.append("| " + " | ".join(cells) + " |")
        for name in lat:
            if name not in methods:   # benchmarked but not counterfactually tested
                cells = [name, f"{lat[name]['median']:.4g}", str(lat[name]["bytes_stored"])]
                lines.append("| " + " | ".join(cells + ["-"] * (len(head) - 3)) + " |")
        lines.append("")
    if rank_rows:
        lines += ["| model | L | mAP | stderr |", "|---|---|---|---|"]
        for r in rank_rows:
            lines.append(f"| {r['model']} | {r['L']} | {r['mAP']:.4f} | {r['stderr']:.4f} |")
        lines.append("")
    return "\n".join(lines)
