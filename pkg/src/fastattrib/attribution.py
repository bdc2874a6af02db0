"""Attribution teacher: one-step Newton unlearning of a generated sample and
scoring of training examples by their loss increase, plus the influence
function baseline."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import DenoiserParams, McPlan, equally_spaced_plan, mc_loss_grad, mc_losses
from .fisher import FisherApprox, fisher_inv_vprod
from .numerics import PreconditionError


@dataclass(frozen=True)
class UnlearnConfig:
    step_size: float
    train_count: int
    grad_plan: McPlan
    eval_plan: McPlan
    update_scope: str = "condition"   # "condition" | "all"

    def __post_init__(self):
        if self.step_size < 0 or self.train_count < 1:
            raise PreconditionError("step size must be >= 0 and train count >= 1")
        if self.update_scope not in ("condition", "all"):
            raise PreconditionError(f"unknown update scope {self.update_scope!r}")


def default_unlearn_config(train_count: int, T: int = 100, step_size: float = 0.01,
                           scope: str = "condition", seed: int = 0) -> UnlearnConfig:
    return UnlearnConfig(step_size, train_count,
                         grad_plan=equally_spaced_plan(T, 50, 20, seed + 1),
                         eval_plan=equally_spaced_plan(T, 20, 5, seed + 2),
                         update_scope=scope)


@dataclass(frozen=True)
class AttributionRecord:
    query_id: int
    candidate_id: int
    tau: float
    rank_norm: float

    def to_json(self) -> str:
        return json.dumps({"q": self.query_id, "c": self.candidate_id,
                           "tau": self.tau, "pi": self.rank_norm})

    @classmethod
    def from_json(cls, line: str) -> "AttributionRecord":
        d = json.loads(line)
        return cls(int(d["q"]), int(d["c"]), float(d["tau"]), float(d["pi"]))


def scope_mask(theta: DenoiserParams, scope: str) -> np.ndarray:
    if scope == "all":
        return np.ones(theta.n_params, dtype=bool)
    return theta.condition_mask()


def unlearn_direction(theta0: DenoiserParams, query, F: FisherApprox, cfg: UnlearnConfig) -> np.ndarray:
    """``F^{-1} grad L(query)`` restricted to the update scope (zero elsewhere)."""
    g = mc_loss_grad(theta0, query, cfg.grad_plan)
    d = fisher_inv_vprod(F, g)
    return np.where(scope_mask(theta0, cfg.update_scope), d, 0.0)


def unlearn(theta0: DenoiserParams, query, F: FisherApprox, cfg: UnlearnConfig) -> DenoiserParams:
    """One Newton ascent step on the query's loss, scaled by ``step_size / N``."""
    mask = scope_mask(theta0, cfg.update_scope)
    step = cfg.step_size / cfg.train_count
    if step == 0.0:
        return theta0.copy()
    d = unlearn_direction(theta0, query, F, cfg)
    return theta0.with_flat(np.where(mask, theta0.flat + step * d, theta0.flat))


def attribution_scores(theta0: DenoiserParams, theta_u: DenoiserParams, candidates,
                       eval_plan: McPlan, base_losses=None) -> np.ndarray:
    """Loss change ``L(z, theta_u) - L(z, theta0)`` for each candidate, both
    losses using the candidate's own pinned draws."""
    candidates = list(candidates)
    before = mc_losses(theta0, candidates, eval_plan) if base_losses is None else np.asarray(base_losses)
    return mc_losses(theta_u, candidates, eval_plan) - before


def rank_records(query_id: int, candidate_ids, taus) -> list:
    """Sort by tau descending, ties by ascending id; rank r of K gets r / K."""
    ids = np.asarray(candidate_ids, dtype=np.int64)
    taus = np.asarray(taus, dtype=np.float64)
    if ids.size == 0:
        raise PreconditionError("no candidates to rank")
    order = np.lexsort((ids, -taus))
    K = ids.size
    return [AttributionRecord(int(query_id), int(ids[j]), float(taus[j]), (r + 1) / K)
            for r, j in enumerate(order)]


@dataclass
class Teacher:
    """AbU(+) teacher bound to one trained model, dataset and Fisher estimate.

    Losses of the original model are cached per candidate id since they do
    not depend on the query.
    """
    theta0: DenoiserParams
    dataset: object
    F: FisherApprox
    cfg: UnlearnConfig
    _base: dict = field(default_factory=dict, repr=False)

    def base_losses(self, ids) -> np.ndarray:
        ids = [int(i) for i in ids]
        missing = [i for i in ids if i not in self._base]
        if missing:
            pos = self.dataset.positions(missing)
            vals = mc_losses(self.theta0, [self.dataset[p] for p in pos], self.cfg.eval_plan)
            self._base.update(zip(missing, vals))
        return np.array([self._base[i] for i in ids])

    def scores(self, query, candidate_ids) -> np.ndarray:
        theta_u = unlearn(self.theta0, query, self.F, self.cfg)
        pos = self.dataset.positions(candidate_ids)
        cands = [self.dataset[p] for p in pos]
        return attribution_scores(self.theta0, theta_u, cands, self.cfg.eval_plan,
                                  self.base_losses(candidate_ids))

    def rank(self, query, candidate_ids) -> list:
        return rank_records(query.id, candidate_ids, self.scores(query, candidate_ids))


def abu_rank(query, candidate_ids, theta0, F, cfg, dataset) -> list:
    return Teacher(theta0, dataset, F, cfg).rank(query, candidate_ids)


def influence_scores(theta0: DenoiserParams, query, candidates, F: FisherApprox, grad_plan: McPlan,
                     scope: str = "condition", chunk: int = 16) -> np.ndarray:
    """``<grad L(query), F^{-1} grad L(z)>`` over the scoped parameters.

    The preconditioned query gradient is formed once; each candidate's mean
    gradient is contracted against it row by row without being stored.
    """
    from .diffusion import _plan_rows, row_losses_and_pairs

    mask = scope_mask(theta0, scope)
    q = np.where(mask, fisher_inv_vprod(F, np.where(mask, mc_loss_grad(theta0, query, grad_plan), 0.0)), 0.0)
    Qs = [blk.view(q) for blk in theta0.blocks]
    candidates = list(candidates)
    out = np.empty(len(candidates))
    for s in range(0, len(candidates), chunk):
        part = candidates[s: s + chunk]
        _, pairs = row_losses_and_pairs(theta0, *_plan_rows(part, grad_plan, theta0.arch.dim))
        per_row = sum(np.einsum("ni,ni->n", g @ Q, a) for (a, g), Q in zip(pairs, Qs))
        out[s: s + len(part)] = per_row.reshape(len(part), grad_plan.size).mean(axis=1)
    return out


def write_records(path, records) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_records(path) -> list:
    return [AttributionRecord.from_json(line) for line in Path(path).read_text().splitlines() if line]
