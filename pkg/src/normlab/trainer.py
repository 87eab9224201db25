"""Toy-scale training loop, optimizer, and hyperparameter sweeps."""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError
from .model import Model, ModelConfig, build_model, loss, token_nll, unique_parameters
from .strategies import KINDS, NormStrategy
from .tasks import TaskSpec, batch_stream
from .tensor import Tensor, backward


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    warmup_updates: int = 4000
    warmup_init_lr: float = 1e-7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    weight_decay: float = 1e-4
    grad_clip: float = 0.0
    max_updates: int = 100_000
    batch_size_tokens: int = 128 * 4096
    seed: int = 0
    nan_is_divergence: bool = True
    loss_blowup_factor: float = 3.0
    divergence_grace_steps: int = 200

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.warmup_updates < 0 or self.max_updates < 0:
            raise ConfigError("warmup_updates and max_updates must be >= 0")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.grad_clip < 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ConfigError("grad_clip and weight_decay must be >= 0, adam_eps > 0")
        if self.batch_size_tokens < 1 or self.loss_blowup_factor <= 0:
            raise ConfigError("batch_size_tokens and loss_blowup_factor must be positive")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``warmup_init_lr`` to ``lr``, then inverse-sqrt decay.

    With ``warmup_updates == 0`` the decay is anchored at step 1.
    """
    if step < 1:
        raise ContractError("lr_at is defined for step >= 1")
    w = cfg.warmup_updates
    if w > 0 and step <= w:
        return cfg.warmup_init_lr + (cfg.lr - cfg.warmup_init_lr) * step / w
    return cfg.lr * math.sqrt(max(w, 1) / step)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """In-place Adam with bias correction and decoupled weight decay on matrices."""
    state.step += 1
    bc1 = 1.0 - cfg.adam_beta1 ** state.step
    bc2 = 1.0 - cfg.adam_beta2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {name} shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros(p.data.size)
            state.v[name] = np.zeros(p.data.size)
        m, v = state.m[name], state.v[name]
        if m.size != p.data.size:
            raise ContractError(f"optimizer state for {name} does not match parameter shape {p.shape}")
        decay = 1.0 - lr * cfg.weight_decay if p.ndim >= 2 else 1.0
        kernels.adam_update(p.data.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                            m, v, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, bc1, bc2, decay)


@dataclass
class TrainRecord:
    step: int
    lr: float
    loss: float
    nll: float
    alpha: float
    grad_norm: float
    diverged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def global_grad_norm(params: dict[str, Tensor]) -> float:
    return float(math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None)))


def iter_train(model: Model, cfg: TrainConfig, task: TaskSpec) -> Iterator[TrainRecord]:
    """Train ``model`` in place, yielding one record per optimizer step.

    Stops after ``max_updates`` or on the first divergent step, whose record
    carries ``diverged=True``.
    """
    if task.vocab_size > model.cfg.vocab_size or task.seq_len > model.cfg.max_len:
        raise ConfigError("task vocabulary or length exceeds the model's")
    params = unique_parameters(model)
    state = AdamState()
    stream = batch_stream(task, cfg.seed, cfg.batch_size_tokens)
    drop_rng = np.random.default_rng([cfg.seed, 1])
    strategy = model.cfg.strategy
    initial = None

    for step in range(1, cfg.max_updates + 1):
        batch = next(stream)
        lr = lr_at(step, cfg)
        model.zero_grad()
        out = model.forward(batch.src, batch.tgt_in, t=step, train_mode=True, rng=drop_rng)
        E = loss(out.logits, batch.tgt_out, cfg.label_smoothing)
        with np.errstate(all="ignore"):
            backward(E)
            nll = token_nll(out.logits, batch.tgt_out)
            gnorm = global_grad_norm(params)
        if initial is None:
            initial = nll
        finite = math.isfinite(E.item()) and math.isfinite(nll) and math.isfinite(gnorm)
        diverged = (cfg.nan_is_divergence and not finite) or (
            step > cfg.divergence_grace_steps and nll > cfg.loss_blowup_factor * initial)
        rec = TrainRecord(step, lr, E.item(), nll, strategy.branch_alpha(step), gnorm, diverged)
        if diverged:
            yield rec
            return
        if cfg.grad_clip > 0 and gnorm > cfg.grad_clip:
            for p in params.values():
                if p.grad is not None:
                    p.grad *= cfg.grad_clip / gnorm
        adam_step(params, state, lr, cfg)
        yield rec


@dataclass
class TrainResult:
    records: list
    model: Model

    @property
    def diverged(self) -> bool:
        return bool(self.records) and self.records[-1].diverged

    def final_loss(self, window: int = 50) -> float:
        """Mean NLL over the last ``window`` steps (the last value if diverged)."""
        if not self.records:
            return float("nan")
        if self.diverged:
            return self.records[-1].nll
        return float(np.mean([r.nll for r in self.records[-window:]]))


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, task: TaskSpec,
          on_record: Callable[[TrainRecord], None] | None = None) -> TrainResult:
    model = build_model(model_cfg)
    records = []
    for rec in iter_train(model, train_cfg, task):
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return TrainResult(records, model)


# --------------------------------------------------------------------------
# sweeps

GRID_FIELDS = ("T", "warmup", "lr", "strategy", "depth")


@dataclass(frozen=True)
class SweepGrid:
    T: tuple = ()
    warmup: tuple = ()
    lr: tuple = ()
    strategy: tuple = ()
    depth: tuple = ()

    def cells(self, model_cfg: ModelConfig, train_cfg: TrainConfig) -> list[dict]:
        """Cartesian product; an empty dimension takes the base value (all four strategies for ``strategy``)."""
        sched = model_cfg.strategy.schedule
        dims = {
            "T": self.T or (sched.T,),
            "warmup": self.warmup or (train_cfg.warmup_updates,),
            "lr": self.lr or (train_cfg.lr,),
            "strategy": self.strategy or KINDS,
            "depth": self.depth or (model_cfg.N,),
        }
        for kind in dims["strategy"]:
            if kind not in KINDS:
                raise ConfigError(f"unknown strategy {kind!r} in sweep grid")
        return [dict(zip(GRID_FIELDS, combo)) for combo in itertools.product(*(dims[k] for k in GRID_FIELDS))]


@dataclass
class SweepRow:
    T: int
    warmup: int
    lr: float
    strategy: str
    depth: int
    final_loss: float
    diverged: bool
    steps: int
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def cell_configs(cell: dict, model_cfg: ModelConfig, train_cfg: TrainConfig) -> tuple[ModelConfig, TrainConfig]:
    depth = int(cell["depth"])
    base = model_cfg.strategy
    strategy = NormStrategy.named(cell["strategy"], depth, depth)
    if cell["strategy"] == "branchnorm":
        strategy = replace(strategy, schedule=replace(base.schedule, T=int(cell["T"])),
                           beta_init=base.beta_init if base.kind == "branchnorm" else strategy.beta_init)
    mc = replace(model_cfg, N=depth, M=depth, strategy=strategy)
    tc = replace(train_cfg, lr=float(cell["lr"]), warmup_updates=int(cell["warmup"]))
    return mc, tc


def run_cell(cell: dict, model_cfg: ModelConfig, train_cfg: TrainConfig, task: TaskSpec) -> tuple[SweepRow, list]:
    """Run one grid cell; failures are captured in the row, never raised."""
    try:
        mc, tc = cell_configs(cell, model_cfg, train_cfg)
        result = train(mc, tc, task)
    except Exception as exc:  # noqa: BLE001
        return SweepRow(**cell, final_loss=float("nan"), diverged=False, steps=0,
                        error=f"{type(exc).__name__}: {exc}"), []
    return SweepRow(**cell, final_loss=result.final_loss(), diverged=result.diverged,
                    steps=len(result.records)), result.records


def _run_cell_star(args):
    return run_cell(*args)


def sweep(grid: SweepGrid, model_cfg: ModelConfig, train_cfg: TrainConfig, task: TaskSpec,
          workers: int = 1, on_row: Callable[[SweepRow], None] | None = None) -> list[tuple[SweepRow, list]]:
    """Run every cell with the shared data seed in ``train_cfg``; results in grid order.

    ``on_row`` is called as each cell finishes (in grid order).
    """
    cells = grid.cells(model_cfg, train_cfg)
    if not cells:
        raise ConfigError("sweep grid is empty")
    jobs = [(c, model_cfg, train_cfg, task) for c in cells]
    results = []

    def collect(stream):
        for res in stream:
            results.append(res)
            if on_row is not None:
                on_row(res[0])

    if workers <= 1:
        collect(run_cell(*j) for j in jobs)
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        collect(pool.map(_run_cell_star, jobs))
    return results
