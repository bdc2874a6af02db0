"""Distilling the slow teacher into a fast embedding.

Runs the pipeline on a reduced configuration in a scratch directory:
synthetic data, denoiser, generated queries, base features, EKFAC, curated
teacher rankings, then a learning-to-rank head on the base features. Prints
held-out mAP for the base features and the tuned embedding, and how much
faster the embedding ranks the whole training set than the teacher does.

    python demos/distill_ranker.py [run_dir]
"""
import sys
import tempfile
from pathlib import Path

from fastattrib.config import RunConfig
from fastattrib.evaluation import read_csv
from fastattrib.pipeline import Context, run_all

SMALL = dict(data__per_class=100, model__epochs=80, queries__n_corpus=200, queries__n_test=12,
             curate__K=100, curate__n_train=180, curate__n_val=20, ranker__steps_per_epoch=250,
             ranker__seeds=(0, 1), eval__L=(10, 25, 50), eval__spearman_K=100,
             cf__k=(10,), cf__seeds=(0,), cf__queries=2, cf__ddim_steps=20, bench__reps=5, bench__warm=2)

run_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="distill-"))
cfg = RunConfig().with_values(**SMALL)
print(f"running the pipeline in {run_dir}")
for stage, status in run_all(Context(cfg, run_dir, quiet=True)).items():
    print(f"  {stage:<20} {status}")

rows = read_csv(run_dir / "stages" / "eval-rank" / "rank.csv")
print("\nheld-out mAP(L)")
for model in ("base", "tuned-mean"):
    cells = "  ".join(f"L={r['L']}: {float(r['mAP']):.3f}" for r in rows if r["model"] == model)
    print(f"  {model:<11} {cells}")

bench = {r["name"]: r for r in read_csv(run_dir / "stages" / "bench" / "bench.csv")}
fast, slow = float(bench["embedding"]["median"]), float(bench["abu"]["median"])
print(f"\nper-query latency over all {cfg['data.n_classes'] * cfg['data.per_class']} examples: "
      f"embedding {fast * 1e3:.2f} ms, teacher {slow * 1e3:.0f} ms ({slow / fast:.0f}x)")
print(f"storage: embedding {bench['embedding']['bytes_stored']} bytes, "
      f"per-example gradients {bench['abu']['bytes_stored']} bytes")
print(f"\nfull report: {run_dir / 'reports' / cfg['run.name'] / 'summary.md'}")
