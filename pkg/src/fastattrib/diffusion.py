"""Toy class-conditional diffusion model on 8x8 images.

The denoiser is an MLP over ``[x_t ; e(c) ; time features]`` where ``e`` is a
learned per-class embedding table. Parameters live in one flat float64 vector
so optimizers, Fisher estimators and unlearning updates all work on the same
layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import (AdamWState, MlpParams, NumericError, PreconditionError,
                       adamw_update, make_rng, mlp_backward, mlp_forward, vec_col)
from .tensorio import dump_json, load_json, load_tensor, save_tensor, tensor_bytes


class TrainingError(NumericError):
    pass


# ---------------------------------------------------------------------------
# data

@dataclass(frozen=True)
class TrainExample:
    id: int
    x: np.ndarray
    c: int


@dataclass(frozen=True)
class SynthQuery:
    id: int
    x: np.ndarray
    c: int
    noise_seed: int


@dataclass
class Dataset:
    """Column-oriented training set. ``id_space`` is the size of the original
    id range and survives subsetting, so per-id random draws stay aligned."""
    ids: np.ndarray
    X: np.ndarray
    cond: np.ndarray
    n_classes: int
    id_space: int
    prototypes: np.ndarray | None = None

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> TrainExample:
        return TrainExample(int(self.ids[i]), self.X[i], int(self.cond[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def positions(self, ids) -> np.ndarray:
        lookup = np.full(self.id_space, -1, dtype=np.int64)
        lookup[self.ids] = np.arange(len(self.ids))
        pos = lookup[np.asarray(ids, dtype=np.int64)]
        if np.any(pos < 0):
            raise KeyError("id not in dataset")
        return pos

    def take(self, ids) -> "Dataset":
        pos = self.positions(ids)
        return replace(self, ids=self.ids[pos], X=self.X[pos], cond=self.cond[pos])

    def without(self, ids) -> "Dataset":
        keep = ~np.isin(self.ids, np.asarray(list(ids), dtype=np.int64))
        return replace(self, ids=self.ids[keep], X=self.X[keep], cond=self.cond[keep])

    def content_bytes(self) -> bytes:
        return b"".join([tensor_bytes(self.ids.astype(np.float64)), tensor_bytes(self.X),
                         tensor_bytes(self.cond.astype(np.float64))])


def _blob_field(rng, side, n_blobs, amp_lo, amp_hi, width):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    out = np.zeros((side, side))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(-0.5, side - 0.5, size=2)
        amp = rng.uniform(amp_lo, amp_hi) * rng.choice([-1.0, 1.0])
        out += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width ** 2))
    return out.ravel()


def make_dataset(n_classes=10, per_class=200, dim=64, seed=0, n_modes=4) -> Dataset:
    """Class prototypes made of smooth blobs, each class split into a few
    sub-modes, plus small per-example pixel noise. Values are clipped to [-1, 1]."""
    if n_classes < 2 or per_class < 10:
        raise PreconditionError("need at least 2 classes and 10 examples per class")
    side = math.isqrt(dim)
    if side * side != dim:
        raise PreconditionError(f"dim {dim} is not a perfect square")
    rng = make_rng(seed, "dataset")
    protos = np.stack([np.tanh(1.5 * _blob_field(rng, side, 4, 0.8, 1.6, side / 5.0))
                       for _ in range(n_classes)])
    modes = np.stack([[_blob_field(rng, side, 2, 0.3, 0.6, side / 7.0) for _ in range(n_modes)]
                      for _ in range(n_classes)])
    n = n_classes * per_class
    cond = np.repeat(np.arange(n_classes), per_class)
    mode = rng.integers(0, n_modes, size=n)
    noise = 0.08 * rng.standard_normal((n, dim))
    X = np.clip(protos[cond] + modes[cond, mode] + noise, -1.0, 1.0)
    return Dataset(ids=np.arange(n, dtype=np.int64), X=X, cond=cond.astype(np.int64),
                   n_classes=n_classes, id_space=n, prototypes=protos)


# ---------------------------------------------------------------------------
# noise schedule

@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float

    @property
    def alpha_bar(self) -> np.ndarray:
        betas = np.linspace(self.beta_start, self.beta_end, self.T)
        return np.cumprod(1.0 - betas)

    def at(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise PreconditionError(f"timestep out of range 1..{self.T}")
        return self.alpha_bar[t - 1]


def make_schedule(T=100, beta_start=1e-4, beta_end=0.2) -> NoiseSchedule:
    return NoiseSchedule(int(T), float(beta_start), float(beta_end))


def q_sample(x0, t, eps, sched=None, alpha_bar=None):
    """``sqrt(ab) x0 + sqrt(1 - ab) eps``; pass ``alpha_bar`` directly to skip
    the schedule lookup."""
    ab = sched.at(t) if alpha_bar is None else np.asarray(alpha_bar, dtype=np.float64)
    ab = ab[..., None] if np.ndim(ab) and np.ndim(ab) == np.ndim(x0) - 1 else ab
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# denoiser

@dataclass(frozen=True)
class DenoiserArch:
    dim: int = 64
    n_classes: int = 10
    cond_dim: int = 8
    time_dim: int = 16
    hidden: tuple = (128, 128)

    @property
    def trunk_dims(self) -> list:
        return [self.dim + self.cond_dim + self.time_dim, *self.hidden, self.dim]


@dataclass(frozen=True)
class Block:
    """One Fisher block: a weight of shape ``(rows, cols)`` stored column-major
    at ``flat[offset: offset + rows * cols]``. ``bias`` means the last column
    is a bias, fed by a constant-1 input."""
    name: str
    offset: int
    rows: int
    cols: int
    bias: bool

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def view(self, flat: np.ndarray) -> np.ndarray:
        return flat[self.offset: self.offset + self.size].reshape((self.rows, self.cols), order="F")


def layer_blocks(arch: DenoiserArch) -> list:
    blocks = [Block("cond_embed", 0, arch.cond_dim, arch.n_classes, False)]
    off = arch.cond_dim * arch.n_classes
    dims = arch.trunk_dims
    for i in range(len(dims) - 1):
        blk = Block(f"trunk.{i}", off, dims[i + 1], dims[i] + 1, True)
        blocks.append(blk)
        off += blk.size
    return blocks


def time_features(t, width: int, T: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    half = width // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half - 1, 1))
    ang = (t / T * 1000.0)[..., None] * freqs / 10.0
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class DenoiserParams:
    arch: DenoiserArch
    sched: NoiseSchedule
    flat: np.ndarray
    blocks: list = field(init=False, repr=False)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        self.blocks = layer_blocks(self.arch)
        last = self.blocks[-1]
        if self.flat.size != last.offset + last.size:
            raise PreconditionError("flat parameter vector does not match architecture")

    @property
    def n_params(self) -> int:
        return self.flat.size

    @property
    def cond_table(self) -> np.ndarray:
        """``(cond_dim, n_classes)``; column ``c`` is the embedding of class ``c``."""
        return self.blocks[0].view(self.flat)

    @property
    def trunk(self) -> MlpParams:
        ws, bs = [], []
        for blk in self.blocks[1:]:
            m = blk.view(self.flat)
            ws.append(m[:, :-1])
            bs.append(m[:, -1])
        acts = ["relu"] * (len(ws) - 1) + [None]
        return MlpParams(ws, bs, acts)

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def layer_map(self) -> dict:
        return {b.name: {"offset": b.offset, "rows": b.rows, "cols": b.cols, "bias": b.bias}
                for b in self.blocks}

    def condition_mask(self) -> np.ndarray:
        """Parameters on the condition pathway: the embedding table and the
        first trunk layer's columns that read the embedding."""
        mask = np.zeros(self.n_params, dtype=bool)
        b0 = self.blocks[0]
        mask[b0.offset: b0.offset + b0.size] = True
        b1 = self.blocks[1]
        cols = np.arange(self.arch.dim, self.arch.dim + self.arch.cond_dim)
        idx = b1.offset + (cols[:, None] * b1.rows + np.arange(b1.rows)[None, :]).ravel()
        mask[idx] = True
        return mask

    def with_flat(self, flat) -> "DenoiserParams":
        return DenoiserParams(self.arch, self.sched, np.array(flat, dtype=np.float64))

    def copy(self) -> "DenoiserParams":
        return self.with_flat(self.flat.copy())


def init_denoiser(arch: DenoiserArch, sched: NoiseSchedule, seed: int) -> DenoiserParams:
    rng = make_rng(seed, "denoiser-init")
    parts = [vec_col(rng.standard_normal((arch.cond_dim, arch.n_classes)))]
    dims = arch.trunk_dims
    for i in range(len(dims) - 1):
        w = rng.standard_normal((dims[i + 1], dims[i])) * math.sqrt(2.0 / dims[i])
        parts.append(vec_col(np.column_stack([w, np.zeros(dims[i + 1])])))
    return DenoiserParams(arch, sched, np.concatenate(parts))


def predict_noise(theta: DenoiserParams, xt, c, t):
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    c = np.atleast_1d(np.asarray(c, dtype=np.int64))
    t = np.broadcast_to(np.atleast_1d(t), c.shape)
    inp = np.hstack([xt, theta.cond_table.T[c], time_features(t, theta.arch.time_dim, theta.sched.T)])
    trunk = theta.trunk
    out, cache = mlp_forward(trunk, inp)
    # parameter-free skip: the linear noise estimate for unit-variance data
    out = out + np.sqrt(1.0 - theta.sched.at(t))[:, None] * xt
    return out, (trunk, cache, c)


def row_losses_and_pairs(theta: DenoiserParams, x0, c, t, eps, need_pairs=True):
    """Per-row loss ``||eps - eps_theta(x_t, c, t)||^2`` and, per block, the
    ``(a, g)`` row batches whose outer products ``g a^T`` are the per-row
    weight gradients."""
    xt = q_sample(x0, None, eps, alpha_bar=theta.sched.at(t))
    pred, (trunk, cache, c) = predict_noise(theta, xt, c, t)
    resid = pred - eps
    losses = np.sum(resid * resid, axis=1)
    if not need_pairs:
        return losses, None
    _, in_grad, per_layer = mlp_backward(trunk, cache, 2.0 * resid)
    d, e = theta.arch.dim, theta.arch.cond_dim
    onehot = np.zeros((len(c), theta.arch.n_classes))
    onehot[np.arange(len(c)), c] = 1.0
    pairs = [(onehot, in_grad[:, d: d + e])]
    for a, g in per_layer:
        pairs.append((np.hstack([a, np.ones((a.shape[0], 1))]), g))
    return losses, pairs


def pairs_to_flat(pairs, scale: float = 1.0) -> np.ndarray:
    return np.concatenate([vec_col(g.T @ a) for a, g in pairs]) * scale


def diffusion_loss(theta: DenoiserParams, z, eps, t, sched=None) -> float:
    if sched is not None and sched != theta.sched:
        theta = DenoiserParams(theta.arch, sched, theta.flat)
    losses, _ = row_losses_and_pairs(theta, np.atleast_2d(z.x), [z.c], [t],
                                     np.atleast_2d(eps), need_pairs=False)
    return float(losses[0])


# ---------------------------------------------------------------------------
# Monte-Carlo plans

@dataclass(frozen=True)
class McPlan:
    timesteps: tuple
    noises_per_timestep: int
    seed: int

    def __post_init__(self):
        if not self.timesteps or self.noises_per_timestep < 1:
            raise PreconditionError("empty plan")

    @property
    def size(self) -> int:
        return len(self.timesteps) * self.noises_per_timestep

    def validate(self, T: int):
        if min(self.timesteps) < 1 or max(self.timesteps) > T:
            raise PreconditionError(f"plan timesteps outside 1..{T}")

    def draws(self, example_id: int, dim: int):
        """Timesteps and noises for one example; keyed by (seed, id) only."""
        ts = np.repeat(np.asarray(self.timesteps, dtype=np.int64), self.noises_per_timestep)
        eps = make_rng(self.seed, "mc", example_id).standard_normal((self.size, dim))
        return ts, eps


def equally_spaced_plan(T: int, n_timesteps: int, noises: int, seed: int) -> McPlan:
    ts = np.unique(np.round(np.linspace(1, T, n_timesteps)).astype(int))
    return McPlan(tuple(int(t) for t in ts), int(noises), int(seed))


def _plan_rows(examples, plan: McPlan, dim: int):
    xs, cs, ts, es = [], [], [], []
    for z in examples:
        t, e = plan.draws(z.id, dim)
        xs.append(np.broadcast_to(z.x, e.shape))
        cs.append(np.full(plan.size, z.c))
        ts.append(t)
        es.append(e)
    return np.vstack(xs), np.concatenate(cs), np.concatenate(ts), np.vstack(es)


def mc_loss(theta: DenoiserParams, z, plan: McPlan) -> float:
    plan.validate(theta.sched.T)
    x0, c, t, eps = _plan_rows([z], plan, theta.arch.dim)
    losses, _ = row_losses_and_pairs(theta, x0, c, t, eps, need_pairs=False)
    return float(losses.mean())


def mc_losses(theta: DenoiserParams, examples, plan: McPlan, chunk: int = 64) -> np.ndarray:
    """``mc_loss`` for many examples, evaluated in batches."""
    plan.validate(theta.sched.T)
    examples = list(examples)
    out = np.empty(len(examples))
    for s in range(0, len(examples), chunk):
        part = examples[s: s + chunk]
        rows = _plan_rows(part, plan, theta.arch.dim)
        losses, _ = row_losses_and_pairs(theta, *rows, need_pairs=False)
        out[s: s + len(part)] = losses.reshape(len(part), plan.size).mean(axis=1)
    return out


def mc_loss_grad(theta: DenoiserParams, z, plan: McPlan) -> np.ndarray:
    plan.validate(theta.sched.T)
    rows = _plan_rows([z], plan, theta.arch.dim)
    _, pairs = row_losses_and_pairs(theta, *rows)
    grad = pairs_to_flat(pairs, 1.0 / plan.size)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient of mc_loss")
    return grad


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch: int = 64
    lr: float = 2e-3
    weight_decay: float = 0.0
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.2
    cond_dim: int = 8
    time_dim: int = 16
    hidden: tuple = (128, 128)
    lr_decay: str = "none"       # "none" | "cosine" (per epoch, to zero)
    ema: float = 0.0             # > 0 returns an exponential moving average of the weights

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.lr

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)

    def arch(self, dataset: Dataset) -> DenoiserArch:
        return DenoiserArch(dataset.dim, dataset.n_classes, self.cond_dim, self.time_dim,
                            tuple(self.hidden))


def train_model(dataset: Dataset, cfg: TrainConfig, seed: int, log: list | None = None) -> DenoiserParams:
    """AdamW training of the denoiser.

    Shuffle order and per-example noise/timestep draws are keyed by example
    id, so training on a subset replays the full run minus the removed rows.
    """
    if len(dataset) == 0:
        raise PreconditionError("empty dataset")
    sched = cfg.schedule()
    theta = init_denoiser(cfg.arch(dataset), sched, seed)
    state = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    flat = theta.flat
    avg = flat.copy() if cfg.ema > 0 else None
    for epoch in range(cfg.epochs):
        state.lr = cfg.lr_at(epoch)
        rng = make_rng(seed, "epoch", epoch)
        keys = rng.random(dataset.id_space)
        t_all = rng.integers(1, sched.T + 1, size=dataset.id_space)
        eps_all = rng.standard_normal((dataset.id_space, dataset.dim))
        # batch membership is fixed over the whole id space, so a removed row
        # only drops out of its own batch and leaves the others untouched
        slot = np.empty(dataset.id_space, dtype=np.int64)
        slot[np.argsort(keys, kind="stable")] = np.arange(dataset.id_space)
        order = np.argsort(slot[dataset.ids], kind="stable")
        batch_of = slot[dataset.ids[order]] // cfg.batch
        bounds = np.flatnonzero(np.diff(batch_of)) + 1
        total = 0.0
        for pos in np.split(order, bounds):
            ids = dataset.ids[pos]
            losses, pairs = row_losses_and_pairs(theta, dataset.X[pos], dataset.cond[pos],
                                                 t_all[ids], eps_all[ids])
            total += losses.sum()
            grad = pairs_to_flat(pairs, 1.0 / len(pos))
            try:
                flat = adamw_update(flat, grad, state)
            except NumericError as err:
                raise TrainingError(f"epoch {epoch}: {err}") from err
            theta = theta.with_flat(flat)
            if avg is not None:
                avg = cfg.ema * avg + (1.0 - cfg.ema) * flat
        mean_loss = total / len(order)
        if not np.isfinite(mean_loss):
            raise TrainingError(f"loss diverged at epoch {epoch}")
        if log is not None:
            log.append(mean_loss)
    return theta if avg is None else theta.with_flat(avg)


# ---------------------------------------------------------------------------
# sampling

def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    steps = max(1, min(int(steps), T))
    return np.unique(np.round(np.linspace(1, T, steps)).astype(int))[::-1]


def ddim_sample_batch(theta: DenoiserParams, cs, noise_seeds, steps: int = 50,
                      clip: bool = True) -> np.ndarray:
    cs = np.asarray(cs, dtype=np.int64)
    x = np.stack([make_rng(int(s), "ddim").standard_normal(theta.arch.dim) for s in noise_seeds])
    ts = ddim_timesteps(theta.sched.T, steps)
    abar = theta.sched.alpha_bar
    for i, t in enumerate(ts):
        ab = abar[t - 1]
        ab_prev = abar[ts[i + 1] - 1] if i + 1 < len(ts) else 1.0
        eps, _ = predict_noise(theta, x, cs, t)
        x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        if clip:
            x0 = np.clip(x0, -1.0, 1.0)
        x = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps
    return x


def ddim_sample(theta: DenoiserParams, c: int, noise_seed: int, steps: int = 50) -> np.ndarray:
    return ddim_sample_batch(theta, [c], [noise_seed], steps)[0]


def generate_queries(theta: DenoiserParams, n_queries: int, seed: int, steps: int = 50,
                     first_id: int = 0) -> list:
    """Queries cycle through classes; each gets a fresh noise seed."""
    rng = make_rng(seed, "queries")
    seeds = rng.integers(0, 2**62, size=n_queries)
    cs = (np.arange(n_queries) + first_id) % theta.arch.n_classes
    # one at a time so ddim_sample(c, noise_seed) regenerates each query bit for bit
    return [SynthQuery(first_id + i, ddim_sample(theta, int(cs[i]), int(seeds[i]), steps), int(cs[i]),
                       int(seeds[i])) for i in range(n_queries)]


# ---------------------------------------------------------------------------
# persistence

def save_dataset(directory, ds: Dataset) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "X.fatn", ds.X)
    if ds.prototypes is not None:
        save_tensor(d / "prototypes.fatn", ds.prototypes)
    dump_json(d / "dataset.json", {"ids": ds.ids.tolist(), "cond": ds.cond.tolist(),
                                   "n_classes": ds.n_classes, "id_space": ds.id_space,
                                   "dim": ds.dim})


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    meta = load_json(d / "dataset.json")
    protos = load_tensor(d / "prototypes.fatn") if (d / "prototypes.fatn").exists() else None
    return Dataset(np.asarray(meta["ids"], dtype=np.int64), load_tensor(d / "X.fatn"),
                   np.asarray(meta["cond"], dtype=np.int64), meta["n_classes"],
                   meta["id_space"], protos)


def save_model(directory, theta: DenoiserParams) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "theta.fatn", theta.flat)
    a, s = theta.arch, theta.sched
    dump_json(d / "model.json", {
        "arch": {"dim": a.dim, "n_classes": a.n_classes, "cond_dim": a.cond_dim,
                 "time_dim": a.time_dim, "hidden": list(a.hidden)},
        "schedule": {"T": s.T, "beta_start": s.beta_start, "beta_end": s.beta_end},
        "layers": theta.layer_map(),
    })


def load_model(directory) -> DenoiserParams:
    d = Path(directory)
    meta = load_json(d / "model.json")
    a = meta["arch"]
    arch = DenoiserArch(a["dim"], a["n_classes"], a["cond_dim"], a["time_dim"], tuple(a["hidden"]))
    return DenoiserParams(arch, make_schedule(**meta["schedule"]), load_tensor(d / "theta.fatn"))
