"""Stage runner behind the command line: each stage reads hash-checked
upstream artifacts, writes its own directory plus a manifest, and is skipped
when its configuration and inputs are unchanged."""
from __future__ import annotations

import hashlib
import json
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .numerics import PreconditionError
from .tensorio import dump_json, load_json

MANIFEST = "manifest.json"


class HashMismatchError(PreconditionError):
    pass


def log_event(event: str, stream=None, **fields) -> None:
    """One JSON object per line on stderr."""
    rec = {"event": event, **fields}
    print(json.dumps(rec, sort_keys=True, default=str), file=stream or sys.stderr, flush=True)


def file_hashes(directory) -> dict:
    d = Path(directory)
    return {str(f.relative_to(d)): hashlib.sha256(f.read_bytes()).hexdigest()
            for f in sorted(d.rglob("*")) if f.is_file() and f.name != MANIFEST}


def combined_hash(files: dict) -> str:
    return hashlib.sha256(json.dumps(files, sort_keys=True).encode()).hexdigest()


def hash_diff(recorded: dict, current: dict) -> list:
    out = []
    for k in sorted(set(recorded) | set(current)):
        if k not in current:
            out.append(f"missing: {k}")
        elif k not in recorded:
            out.append(f"unexpected: {k}")
        elif recorded[k] != current[k]:
            out.append(f"changed: {k} (recorded {recorded[k][:12]}, now {current[k][:12]})")
    return out


@dataclass(frozen=True)
class Stage:
    name: str
    inputs: tuple
    sections: tuple
    build: object        # fn(ctx, out_dir) -> None


@dataclass
class Context:
    cfg: RunConfig
    run_dir: Path
    quiet: bool = False
    _cache: dict = field(default_factory=dict)

    def stage_dir(self, name: str) -> Path:
        return self.run_dir / "stages" / name

    @property
    def report_dir(self) -> Path:
        return self.run_dir / "reports" / self.cfg["run.name"]

    def seed(self, key: str) -> int:
        return int(self.cfg["seed"]) + int(self.cfg[key])

    def log(self, event, **kw):
        if not self.quiet:
            log_event(event, **kw)

    def cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    # -- loaders for upstream artifacts ------------------------------------
    def dataset(self):
        from .diffusion import load_dataset
        return self.cached("dataset", lambda: load_dataset(self.stage_dir("make-data")))

    def model(self):
        from .diffusion import load_model
        return self.cached("model", lambda: load_model(self.stage_dir("train-model")))

    def queries(self, which: str):
        from .curation import load_queries
        return self.cached(("queries", which), lambda: load_queries(self.stage_dir("gen-queries") / which))

    def encoder(self):
        from .retrieval import load_encoder
        return self.cached("encoder", lambda: load_encoder(self.stage_dir("fit-encoder") / "encoder"))

    def store(self):
        from .retrieval import load_store
        return self.cached("store", lambda: load_store(self.stage_dir("fit-encoder") / "store"))

    def index(self):
        from .retrieval import load_index
        return self.cached("index", lambda: load_index(self.stage_dir("fit-encoder") / "index"))

    def fisher(self):
        from .fisher import load_fisher
        return self.cached("fisher", lambda: load_fisher(self.stage_dir("fit-fisher")))

    def corpus(self):
        from .curation import load_corpus
        return self.cached("corpus", lambda: load_corpus(self.stage_dir("curate") / "corpus"))

    def truth(self):
        from .curation import load_ground_truth
        return self.cached("truth", lambda: load_ground_truth(self.stage_dir("curate") / "truth"))

    def rankers(self):
        from .ranker import load_ranker
        return self.cached("rankers", lambda: {s: load_ranker(self.stage_dir("train-ranker") / f"seed_{s}")
                                               for s in self.cfg["ranker.seeds"]})

    def teacher(self):
        from .attribution import Teacher
        return self.cached("teacher", lambda: Teacher(self.model(), self.dataset(), self.fisher(),
                                                      unlearn_config(self.cfg, len(self.dataset()))))

    def input_hash(self, name: str) -> str:
        return load_json(self.stage_dir(name) / MANIFEST)["outputs_hash"]


# ---------------------------------------------------------------------------
# config -> library objects

def train_config(cfg: RunConfig):
    from .diffusion import TrainConfig
    return TrainConfig(epochs=cfg["model.epochs"], batch=cfg["model.batch"], lr=cfg["model.lr"],
                       weight_decay=cfg["model.weight_decay"], T=cfg["model.T"],
                       beta_start=cfg["model.beta_start"], beta_end=cfg["model.beta_end"],
                       cond_dim=cfg["model.cond_dim"], time_dim=cfg["model.time_dim"],
                       hidden=tuple(cfg["model.hidden"]), lr_decay=cfg["model.lr_decay"],
                       ema=cfg["model.ema"])


def unlearn_config(cfg: RunConfig, train_count: int):
    from .attribution import UnlearnConfig
    from .diffusion import equally_spaced_plan
    s = int(cfg["seed"]) + cfg["teacher.seed"]
    T = cfg["model.T"]
    return UnlearnConfig(cfg["teacher.alpha"], train_count,
                         equally_spaced_plan(T, cfg["teacher.grad_timesteps"], cfg["teacher.grad_noises"], s + 1),
                         equally_spaced_plan(T, cfg["teacher.eval_timesteps"], cfg["teacher.eval_noises"], s + 2),
                         cfg["teacher.scope"])


def curation_config(cfg: RunConfig):
    from .curation import CurationConfig
    return CurationConfig(K=cfg["curate.K"], subsample_ratio=cfg["curate.m"], n_train=cfg["curate.n_train"],
                          n_val=cfg["curate.n_val"],
                          seed=int(cfg["seed"]) + cfg["curate.seed"], coarse=cfg["curate.coarse"])


def ranker_config(cfg: RunConfig, seed: int):
    from .ranker import RankerConfig
    return RankerConfig(epochs=cfg["ranker.epochs"], batch=cfg["ranker.batch"], lr=cfg["ranker.lr"],
                        weight_decay=cfg["ranker.weight_decay"], p_neg=cfg["ranker.p_neg"],
                        seed=int(cfg["seed"]) + seed, hidden=cfg["ranker.hidden"],
                        emb_dim=cfg["ranker.emb_dim"], a0=cfg["ranker.a0"],
                        steps_per_epoch=cfg["ranker.steps_per_epoch"] or None)


def loss_mode(cfg: RunConfig):
    from .ranker import LossMode
    return LossMode(cfg["ranker.loss"], cfg["ranker.bins"])


# ---------------------------------------------------------------------------
# stage bodies

def _make_data(ctx: Context, out: Path):
    from .diffusion import make_dataset, save_dataset
    c = ctx.cfg
    ds = make_dataset(c["data.n_classes"], c["data.per_class"], c["data.dim"], int(c["seed"]),
                      n_modes=c["data.n_modes"])
    save_dataset(out, ds)


def _train_model(ctx: Context, out: Path):
    from .diffusion import save_model, train_model
    log = []
    theta = train_model(ctx.dataset(), train_config(ctx.cfg), ctx.seed("model.seed"), log=log)
    save_model(out, theta)
    from .evaluation import write_csv
    write_csv(out / "train_log.csv", [{"epoch": i, "train_loss": v} for i, v in enumerate(log)])


def _gen_queries(ctx: Context, out: Path):
    from .curation import save_queries
    from .diffusion import generate_queries
    c = ctx.cfg
    ds = ctx.dataset()
    n = c["queries.n_corpus"] + c["queries.n_test"]
    # query ids start after the training id space so no plan draws are shared
    qs = generate_queries(ctx.model(), n, ctx.seed("queries.seed"), c["queries.ddim_steps"], first_id=ds.id_space)
    save_queries(out / "corpus", qs[: c["queries.n_corpus"]])
    save_queries(out / "test", qs[c["queries.n_corpus"]:])


def _fit_encoder(ctx: Context, out: Path):
    from .retrieval import build_coarse_index, build_store, fit_encoder, save_encoder, save_index, save_store
    ds = ctx.dataset()
    enc = fit_encoder(ds, ctx.cfg["encoder.d_img"], ctx.cfg["encoder.mode"])
    store = build_store(enc, ds)
    save_encoder(out / "encoder", enc)
    save_store(out / "store", store)
    save_index(out / "index", build_coarse_index(store, seed=int(ctx.cfg["seed"])))


def _fit_fisher(ctx: Context, out: Path):
    from .fisher import FisherPlan, fit_fisher, save_fisher
    c = ctx.cfg
    F = fit_fisher(ctx.model(), list(ctx.dataset()), FisherPlan(c["fisher.samples"], ctx.seed("fisher.seed")),
                   tag=c["fisher.tag"], rel_damping=c["fisher.rel_damping"])
    save_fisher(out, F)


def _curate(ctx: Context, out: Path):
    from .curation import curate_corpus, ground_truth
    teacher = ctx.teacher()
    t0 = time.perf_counter()
    curate_corpus(ctx.queries("corpus"), ctx.encoder(), ctx.store(), ctx.index(), teacher,
                  curation_config(ctx.cfg), out_dir=out / "corpus",
                  extra_manifest={"encoder_hash": ctx.input_hash("fit-encoder"),
                                  "model_hash": ctx.input_hash("train-model")})
    ctx.log("curated", seconds=round(time.perf_counter() - t0, 2))
    ground_truth(teacher, ctx.queries("test"), ctx.dataset(), out_dir=out / "truth")


def _train_ranker(ctx: Context, out: Path):
    from .evaluation import write_csv
    from .ranker import save_ranker, train_ranker
    extra = {"corpus_hash": ctx.input_hash("curate"), "encoder_hash": ctx.input_hash("fit-encoder")}
    for s in ctx.cfg["ranker.seeds"]:
        t0 = time.perf_counter()
        r, log = train_ranker(ctx.corpus(), ctx.encoder(), ctx.dataset(), loss_mode(ctx.cfg),
                              ranker_config(ctx.cfg, s))
        save_ranker(out / f"seed_{s}", r, {**extra, "seed": s})
        write_csv(out / f"seed_{s}" / "train_log.csv", log)
        ctx.log("ranker-trained", seed=s, seconds=round(time.perf_counter() - t0, 2))


def rank_eval_rows(ctx: Context, rankers: dict, label: str = "tuned") -> tuple:
    """Rows of mean mAP per L for the base features and every ranker, the
    seed average, and per-query student-teacher Spearman rows."""
    from .evaluation import eval_ranker, student_teacher_spearman
    queries, gt = ctx.truth()
    L_list = ctx.cfg["eval.L"]
    ds, enc = ctx.dataset(), ctx.encoder()
    rows = []
    for L, rep in eval_ranker(None, enc, ds, queries, gt, L_list).items():
        rows.append({"model": "base", "seed": "", "L": L, "mAP": rep.mean, "stderr": rep.stderr,
                     "queries": rep.n_queries})
    per_seed = {}
    sp_rows = []
    for s, r in rankers.items():
        for L, rep in eval_ranker(r, enc, ds, queries, gt, L_list).items():
            rows.append({"model": label, "seed": s, "L": L, "mAP": rep.mean, "stderr": rep.stderr,
                         "queries": rep.n_queries})
            per_seed.setdefault(L, []).append(rep.mean)
        for qid, rho in student_teacher_spearman(r, enc, ds, queries, gt, ctx.cfg["eval.spearman_K"]).items():
            sp_rows.append({"model": label, "seed": s, "query_id": qid, "spearman": rho})
    for L in L_list:
        v = np.array(per_seed[L])
        se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
        rows.append({"model": f"{label}-mean", "seed": "", "L": L, "mAP": float(v.mean()), "stderr": se,
                     "queries": len(queries)})
    return rows, sp_rows


def variant_maps(ctx: Context, L: int, corpus=None, **overrides) -> list:
    """Held-out mAP(L) per ranker seed for a configuration variant (keys use
    ``__`` for ``.``), trained on ``corpus`` or the run's curated corpus."""
    from .evaluation import eval_ranker
    from .ranker import train_ranker
    cfg = ctx.cfg.with_values(**overrides)
    queries, gt = ctx.truth()
    out = []
    for s in cfg["ranker.seeds"]:
        r, _ = train_ranker(corpus if corpus is not None else ctx.corpus(), ctx.encoder(), ctx.dataset(),
                            loss_mode(cfg), ranker_config(cfg, s))
        out.append(eval_ranker(r, ctx.encoder(), ctx.dataset(), queries, gt, (L,))[L].mean)
    return out


def curate_variant(ctx: Context, **overrides):
    """In-memory corpus curated with overridden settings, same teacher."""
    from .curation import curate_corpus
    return curate_corpus(ctx.queries("corpus"), ctx.encoder(), ctx.store(), ctx.index(), ctx.teacher(),
                         curation_config(ctx.cfg.with_values(**overrides)))


def _eval_rank(ctx: Context, out: Path):
    from .evaluation import write_csv
    rows, sp_rows = rank_eval_rows(ctx, ctx.rankers())
    write_csv(out / "rank.csv", rows)
    write_csv(out / "spearman.csv", sp_rows)


def _eval_counterfactual(ctx: Context, out: Path):
    from .evaluation import compare_methods, counterfactual_grid, truth_order, write_csv
    c = ctx.cfg
    queries, gt = ctx.truth()
    queries = queries[: c["cf.queries"]]
    rankings = {"abu": {q.id: truth_order(gt[q.id]) for q in queries}}
    done = []
    rows = counterfactual_grid(rankings, queries, ctx.dataset(), train_config(c),
                               [int(c["seed"]) + s for s in c["cf.seeds"]],
                               unlearn_config(c, len(ctx.dataset())).eval_plan, ctx.encoder(),
                               ks=c["cf.k"], ddim_steps=c["cf.ddim_steps"],
                               progress=lambda r: (done.append(r), ctx.log("retrained", n=len(done),
                                                                           method=r.method, k=r.k,
                                                                           query=r.query_id, seed=r.seed)))
    write_csv(out / "counterfactual.csv", rows)
    write_csv(out / "counterfactual_summary.csv", compare_methods(rows, "abu"))


def bench_pair(ctx: Context) -> dict:
    """Per-query latency of the embedding ranker over the whole training set
    against the teacher on the same candidates, and bytes each keeps."""
    from .evaluation import bench, gradient_dump_bytes
    from .ranker import embed
    from .retrieval import FeatureStore, rank_all
    c = ctx.cfg
    ds, enc = ctx.dataset(), ctx.encoder()
    ranker = ctx.rankers()[c["ranker.seeds"][0]]
    emb_store = FeatureStore(ds.ids, embed(ranker, enc.encode(ds.X, ds.cond)), normalized=True)
    queries = ctx.queries("corpus")
    teacher = ctx.teacher()
    student = bench("embedding", lambda q: rank_all(emb_store, lambda f: embed(ranker, f),
                                                    enc.encode(q.x, q.c)[0]),
                    queries, c["bench.warm"], c["bench.reps"], emb_store.nbytes())
    slow = bench("abu", lambda q: teacher.rank(q, ds.ids), queries, c["bench.warm"], c["bench.reps"],
                 gradient_dump_bytes(len(ds), ctx.model().n_params))
    return {"embedding": student, "abu": slow}


def _bench(ctx: Context, out: Path):
    from .evaluation import write_csv
    res = bench_pair(ctx)
    write_csv(out / "bench.csv", [{"name": r.name, "median": r.median, "mean": r.mean, "p95": r.p95,
                                   "bytes_stored": r.bytes_stored, "reps": len(r.times)}
                                  for r in res.values()])


def _report(ctx: Context, out: Path):
    from .evaluation import read_csv, summary_markdown
    rep = ctx.report_dir
    rep.mkdir(parents=True, exist_ok=True)
    found = {}
    for stage in ("eval-rank", "eval-counterfactual", "bench"):
        d = ctx.stage_dir(stage)
        for f in sorted(d.glob("*.csv")) if d.exists() else []:
            shutil.copyfile(f, rep / f.name)
            found[f.name] = read_csv(f)
    bench_rows = [{"name": r["name"], "median": float(r["median"]), "bytes_stored": int(r["bytes_stored"])}
                  for r in found.get("bench.csv", [])]
    cf = [{k: (float(v) if k != "k" and k != "pairs" else int(v)) for k, v in r.items()}
          for r in found.get("counterfactual_summary.csv", [])]
    rank_rows = [{"model": r["model"] + (f" (seed {r['seed']})" if r["seed"] else ""), "L": int(r["L"]),
                  "mAP": float(r["mAP"]), "stderr": float(r["stderr"])} for r in found.get("rank.csv", [])]
    text = summary_markdown(bench_rows, cf, rank_rows)
    (rep / "summary.md").write_text(text)
    dump_json(rep / "summary.json", {"config_hash": ctx.cfg.hash(), "files": sorted(found),
                                     "bench": bench_rows, "counterfactual": cf, "rank": rank_rows})
    (rep / "config.txt").write_text(ctx.cfg.dumps())
    (out / "summary.md").write_text(text)


STAGES = {s.name: s for s in [
    Stage("make-data", (), ("data",), _make_data),
    Stage("train-model", ("make-data",), ("model",), _train_model),
    Stage("gen-queries", ("train-model",), ("queries",), _gen_queries),
    Stage("fit-encoder", ("make-data",), ("encoder",), _fit_encoder),
    Stage("fit-fisher", ("make-data", "train-model"), ("fisher",), _fit_fisher),
    Stage("curate", ("make-data", "train-model", "gen-queries", "fit-encoder", "fit-fisher"),
          ("teacher", "curate"), _curate),
    Stage("train-ranker", ("make-data", "fit-encoder", "curate"), ("ranker",), _train_ranker),
    Stage("eval-rank", ("make-data", "fit-encoder", "curate", "train-ranker"), ("eval",), _eval_rank),
    Stage("eval-counterfactual", ("make-data", "gen-queries", "fit-encoder", "curate"),
          ("cf", "model", "teacher"), _eval_counterfactual),
    Stage("bench", ("make-data", "train-model", "gen-queries", "fit-encoder", "fit-fisher", "train-ranker"),
          ("bench", "teacher"), _bench),
    Stage("report", (), ("run",), _report),
]}

ORDER = list(STAGES)


def verify_stage(ctx: Context, name: str) -> dict:
    """Manifest of a finished stage after checking its files still match."""
    d = ctx.stage_dir(name)
    if not (d / MANIFEST).exists():
        raise PreconditionError(f"stage {name!r} has not been run in {ctx.run_dir}")
    man = load_json(d / MANIFEST)
    diff = hash_diff(man["files"], file_hashes(d))
    if diff:
        raise HashMismatchError(f"artifacts of stage {name!r} no longer match their recorded hashes:\n  "
                                + "\n  ".join(diff))
    return man


def run_stage(ctx: Context, name: str, force: bool = False) -> str:
    """Returns ``"up to date"`` or ``"built"``."""
    st = STAGES[name]
    inputs = {i: verify_stage(ctx, i)["outputs_hash"] for i in st.inputs}
    cfg_hash = ctx.cfg.hash(*st.sections) if name != "report" else ctx.cfg.hash()
    d = ctx.stage_dir(name)
    if not force and name != "report" and (d / MANIFEST).exists():
        man = load_json(d / MANIFEST)
        if man["config_hash"] == cfg_hash and man["inputs"] == inputs:
            verify_stage(ctx, name)
            ctx.log("up to date", stage=name)
            return "up to date"
        changed = [k for k in sorted(set(inputs) | set(man["inputs"]))
                   if inputs.get(k) != man["inputs"].get(k)]
        ctx.log("stale", stage=name, changed_inputs=changed,
                config_changed=man["config_hash"] != cfg_hash)
    tmp = d.with_name(d.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    ctx.log("start", stage=name)
    t0 = time.perf_counter()
    st.build(ctx, tmp)
    seconds = round(time.perf_counter() - t0, 2)
    files = file_hashes(tmp)
    # build time is informational; it is not part of the outputs hash
    dump_json(tmp / MANIFEST, {"stage": name, "config_hash": cfg_hash, "inputs": inputs, "files": files,
                               "outputs_hash": combined_hash(files), "seconds": seconds})
    if d.exists():
        shutil.rmtree(d)
    tmp.rename(d)
    ctx._cache.clear()
    ctx.log("done", stage=name, seconds=seconds)
    return "built"


def run_all(ctx: Context, stages=None) -> dict:
    return {s: run_stage(ctx, s) for s in (stages or ORDER)}
