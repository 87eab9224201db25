"""Run configuration: strict JSON loading with full defaulting.

Unknown keys anywhere are errors. Every omitted key takes its default; the
training defaults are the Transformer-base recipe (lr 5e-4, inverse-sqrt with
4000 warmup updates from 1e-7, Adam (0.9, 0.98, 1e-8), label smoothing 0.1,
weight decay 1e-4, no clipping). See ``docs/config.md`` for the schema.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .strategies import NormStrategy, Schedule
from .tasks import TaskSpec
from .trainer import GRID_FIELDS, SweepGrid, TrainConfig

OUTPUT_DIR_ENV = "NORMLAB_OUTPUT_DIR"

_MODEL_KEYS = ("N", "M", "d_model", "d_ffn", "heads", "vocab_size", "max_len", "dropout",
               "share_embeddings", "tie_output", "ln_eps")
_TRAIN_EXCLUDED = ("seed",)
_STRATEGY_KEYS = {"kind": "postln", "T": 4000, "schedule": "linear", "exp_k": 5.0, "sigmoid_s": 12.0,
                  "beta_init": None, "alpha_encoder": None, "alpha_decoder": None,
                  "beta_encoder": None, "beta_decoder": None}


def _defaults(cls, keys=None, exclude=()) -> dict:
    out = {}
    for f in fields(cls):
        if f.name in exclude or (keys is not None and f.name not in keys):
            continue
        if f.default is not MISSING:
            out[f.name] = f.default
        elif f.default_factory is not MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


def _check_type(where: str, key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}.{key}: expected {type(default).__name__}, got {value!r}")
    return value


def _merge(where: str, data, defaults: dict) -> dict:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(data) - set(defaults))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    out = dict(defaults)
    for k, v in data.items():
        out[k] = _check_type(where, k, v, defaults[k])
    return out


_MODEL_DEFAULTS = dict(_defaults(ModelConfig, _MODEL_KEYS), dropout=0.1)
_TRAIN_DEFAULTS = _defaults(TrainConfig, exclude=_TRAIN_EXCLUDED)
_TASK_DEFAULTS = _defaults(TaskSpec)
_SEED_DEFAULTS = {"params": 0, "data": 0}
_SWEEP_DEFAULTS = dict({k: [] for k in GRID_FIELDS}, workers=1)
_PROBE_DEFAULTS = {"step": 0, "sentences": 32}
_TOP_KEYS = ("model", "strategy", "train", "task", "seeds", "sweep", "probe", "output_dir")


def build_strategy(spec: dict, N: int, M: int) -> NormStrategy:
    kind = spec["kind"]
    sched = Schedule(spec["schedule"], spec["T"], spec["exp_k"], spec["sigmoid_s"])
    st = replace(NormStrategy.named(kind, N, M), schedule=sched)
    overrides = {k: spec[k] for k in ("alpha_encoder", "alpha_decoder", "beta_encoder", "beta_decoder", "beta_init")
                 if spec[k] is not None}
    return replace(st, **overrides)


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    task: TaskSpec
    sweep: SweepGrid = field(default_factory=SweepGrid)
    workers: int = 1
    probe_step: int = 0
    probe_sentences: int = 32
    output_dir: str = "runs/default"
    raw: dict = field(default_factory=dict)

    @property
    def seeds(self) -> dict:
        return {"params": self.model.seed, "data": self.train.seed}

    def resolved(self) -> dict:
        """Fully defaulted config as plain JSON data."""
        return self.raw

    def sha256(self) -> str:
        return hashlib.sha256(canonical_json(self.raw).encode()).hexdigest()

    def out_dir(self, override: str | None = None) -> Path:
        return Path(override or os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def parse_run_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(data) - set(_TOP_KEYS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    model = _merge("model", data.get("model"), _MODEL_DEFAULTS)
    strat = _merge("strategy", data.get("strategy"), _STRATEGY_KEYS)
    train = _merge("train", data.get("train"), _TRAIN_DEFAULTS)
    task = _merge("task", data.get("task"), _TASK_DEFAULTS)
    seeds = _merge("seeds", data.get("seeds"), _SEED_DEFAULTS)
    grid = _merge("sweep", data.get("sweep"), _SWEEP_DEFAULTS)
    probe = _merge("probe", data.get("probe"), _PROBE_DEFAULTS)
    output_dir = data.get("output_dir", "runs/default")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")

    try:
        strategy = build_strategy(strat, model["N"], model["M"])
        mc = ModelConfig(strategy=strategy, seed=seeds["params"], **model)
        tc = TrainConfig(seed=seeds["data"], **train)
        ts = TaskSpec(**task)
        sg = SweepGrid(**{k: tuple(grid[k]) for k in GRID_FIELDS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if ts.vocab_size > mc.vocab_size or ts.seq_len > mc.max_len:
        raise ConfigError(f"task (vocab {ts.vocab_size}, length {ts.seq_len}) does not fit the model "
                          f"(vocab {mc.vocab_size}, max_len {mc.max_len})")
    if grid["workers"] < 1 or probe["sentences"] < 1 or probe["step"] < 0:
        raise ConfigError("sweep.workers and probe.sentences must be >= 1, probe.step >= 0")

    raw = {"model": _jsonable(model), "strategy": _jsonable(strat), "train": _jsonable(train),
           "task": _jsonable(task), "seeds": seeds, "sweep": _jsonable(grid), "probe": probe,
           "output_dir": output_dir}
    return RunConfig(mc, tc, ts, sg, grid["workers"], probe["step"], probe["sentences"], output_dir, raw)


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_run_config(data)


# --------------------------------------------------------------------------
# ModelConfig <-> JSON (checkpoint header)


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["strategy"]["schedule"] = asdict(cfg.strategy.schedule)
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    try:
        d = dict(d)
        st = dict(d.pop("strategy"))
        st["schedule"] = Schedule(**st["schedule"])
        return ModelConfig(strategy=NormStrategy(**st), **d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc
