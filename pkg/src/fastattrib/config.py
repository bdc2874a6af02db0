"""Plain-text ``key = value`` run configuration with typed defaults."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path


class ConfigError(ValueError):
    pass


# every knob of the pipeline; the type of each default fixes how values parse
DEFAULTS = {
    "run.name": "default",
    "seed": 0,

    "data.n_classes": 10,
    "data.per_class": 200,
    "data.dim": 64,
    "data.n_modes": 4,

    "model.epochs": 150,
    "model.batch": 64,
    "model.lr": 1e-3,
    "model.lr_decay": "cosine",
    "model.weight_decay": 0.0,
    "model.T": 100,
    "model.beta_start": 1e-4,
    "model.beta_end": 0.2,
    "model.cond_dim": 8,
    "model.time_dim": 16,
    "model.hidden": (128, 128),
    "model.ema": 0.0,
    "model.seed": 1,

    "queries.n_corpus": 220,
    "queries.n_test": 20,
    "queries.ddim_steps": 50,
    "queries.seed": 7,

    "encoder.d_img": 32,
    "encoder.mode": "image+text",

    "fisher.tag": "ekfac",
    "fisher.samples": 1,
    "fisher.rel_damping": 1e-4,
    "fisher.seed": 0,

    "teacher.alpha": 0.01,
    "teacher.scope": "condition",
    "teacher.grad_timesteps": 50,
    "teacher.grad_noises": 20,
    "teacher.eval_timesteps": 20,
    "teacher.eval_noises": 5,
    "teacher.seed": 0,

    "curate.K": 200,
    "curate.m": 0.2,
    "curate.n_train": 200,
    "curate.n_val": 20,
    "curate.coarse": False,
    "curate.seed": 0,

    "ranker.loss": "bce",
    "ranker.bins": 10,
    "ranker.p_neg": 0.1,
    "ranker.epochs": 10,
    "ranker.steps_per_epoch": 500,
    "ranker.batch": 256,
    "ranker.lr": 1e-3,
    "ranker.weight_decay": 0.01,
    "ranker.hidden": 128,
    "ranker.emb_dim": 64,
    "ranker.a0": -5.0,
    "ranker.seeds": (0, 1, 2),

    "eval.L": (20, 50, 100),
    "eval.spearman_K": 200,

    "cf.k": (25, 50, 100),
    "cf.seeds": (0, 1, 2),
    "cf.queries": 20,
    "cf.ddim_steps": 50,

    "bench.warm": 10,
    "bench.reps": 20,
}


def _parse(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


class RunConfig:
    """Immutable mapping over ``DEFAULTS``; unknown keys are rejected."""

    def __init__(self, values: dict | None = None):
        merged = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _parse(k, v) if isinstance(v, str) else v
        self._v = merged

    def __getitem__(self, key):
        return self._v[key]

    def with_values(self, **kv) -> "RunConfig":
        """Override keys, written with ``__`` in place of ``.``."""
        vals = dict(self._v)
        vals.update({k.replace("__", "."): v for k, v in kv.items()})
        return RunConfig(vals)

    def section(self, *prefixes) -> dict:
        return {k: v for k, v in self._v.items() if k == "seed" or k.split(".")[0] in prefixes}

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self._v.items()}

    def hash(self, *prefixes) -> str:
        d = self.to_dict() if not prefixes else {k: self.to_dict()[k] for k in self.section(*prefixes)}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def dumps(self) -> str:
        out = []
        for k, v in self._v.items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            out.append(f"{k} = {v}")
        return "\n".join(out) + "\n"


def parse_config_text(text: str) -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def load_config(path=None, overrides=None) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return RunConfig(values)
