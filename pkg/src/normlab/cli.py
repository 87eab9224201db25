"""``normlab`` command-line entry point.

Exit codes: 0 success, 1 completed with divergence, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import write_csv, write_jsonl, write_manifest
from .checkpoint import load_checkpoint, save_checkpoint
from .config import OUTPUT_DIR_ENV, RunConfig, load_run_config
from .diagnostics import analyze, grad_probe, jacobian_chain_oracle
from .errors import CheckpointError, ConfigError, NormlabError
from .model import ModelConfig, build_model
from .strategies import KINDS, NormStrategy, deepnorm_coeffs
from .tasks import Batch, TaskSpec, make_batch
from .trainer import GRID_FIELDS, SweepRow, iter_train, sweep

EXIT_OK, EXIT_DIVERGED, EXIT_USAGE = 0, 1, 2
SWEEP_HEADER = list(GRID_FIELDS) + ["final_loss", "diverged", "steps", "error"]


class UsageError(NormlabError):
    pass


def _fail(msg: str) -> int:
    print(f"normlab: error: {msg}", file=sys.stderr)
    return EXIT_USAGE


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"{v} must be >= 1")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"{v} must be >= 0")
    return v


def _with_strategy(cfg: RunConfig, kind: str | None) -> RunConfig:
    if kind is None or kind == cfg.model.strategy.kind:
        return cfg
    base = cfg.model.strategy
    st = replace(NormStrategy.named(kind, cfg.model.N, cfg.model.M), schedule=base.schedule)
    return replace(cfg, model=replace(cfg.model, strategy=st))


def _probe_batch(task: TaskSpec, seed: int, n: int) -> Batch:
    return make_batch(task, np.random.default_rng([seed, 2]), n)


# --------------------------------------------------------------------------


def cmd_coeffs(args) -> int:
    ae, be, ad, bd = deepnorm_coeffs(args.enc, args.dec)
    print(f"N={args.enc} M={args.dec} L={2 * args.enc + 3 * args.dec}")
    print(f"alpha_encoder {ae:.6f}")
    print(f"beta_encoder  {be:.6f}")
    print(f"alpha_decoder {ad:.6f}")
    print(f"beta_decoder  {bd:.6f}")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _with_strategy(load_run_config(args.config), args.strategy)
    if args.seed is not None:
        cfg = replace(cfg, model=replace(cfg.model, seed=args.seed))
    step = cfg.probe_step if args.step is None else args.step
    model = build_model(cfg.model)
    batch = _probe_batch(cfg.task, cfg.train.seed, cfg.probe_sentences)
    report = grad_probe(model, batch, step, cfg.train.label_smoothing)
    out = cfg.out_dir(args.out)
    name = args.name or f"probe_{model.cfg.strategy.kind}_t{step}.jsonl"
    write_jsonl(out / name, [report])
    write_manifest(out, "probe", cfg.sha256(), cfg.seeds, [name], cfg.resolved(),
                   {"strategy": model.cfg.strategy.kind, "step": step})
    print(f"wrote {out / name}")
    return EXIT_DIVERGED if report.diverged else EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    model = build_model(cfg.model)
    out = cfg.out_dir(args.out)
    records = []
    for rec in iter_train(model, cfg.train, cfg.task):
        records.append(rec)
        if args.verbose and (rec.step % 100 == 0 or rec.diverged):
            print(f"step {rec.step} nll {rec.nll:.4f} grad_norm {rec.grad_norm:.4f}")
    write_jsonl(out / "train.jsonl", records)
    save_checkpoint(model, out / "model.ckpt")
    diverged = bool(records) and records[-1].diverged
    write_manifest(out, "train", cfg.sha256(), cfg.seeds, ["train.jsonl", "model.ckpt"], cfg.resolved(),
                   {"steps": len(records), "diverged": diverged, "param_checksum": model.checksum()})
    print(f"wrote {out}/train.jsonl ({len(records)} steps{', diverged' if diverged else ''})")
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config)
    workers = args.workers or cfg.workers
    results = sweep(cfg.sweep, cfg.model, cfg.train, cfg.task, workers=workers,
                    on_row=lambda row: print(_format_row(row), flush=True))
    out = cfg.out_dir(args.out)
    outputs = ["sweep.csv"]
    for i, (row, records) in enumerate(results):
        name = f"cells/cell_{i:03d}.jsonl"
        write_jsonl(out / name, records)
        outputs.append(name)
    write_csv(out / "sweep.csv", [r.to_dict() for r, _ in results], SWEEP_HEADER)
    write_manifest(out, "sweep", cfg.sha256(), cfg.seeds, outputs, cfg.resolved(), {"cells": len(results)})
    print(f"wrote {out / 'sweep.csv'} ({len(results)} cells)")
    return EXIT_OK


def _format_row(row: SweepRow) -> str:
    status = "diverged" if row.diverged else ("error" if row.error else "ok")
    return (f"{row.strategy:10s} depth={row.depth} lr={row.lr:g} warmup={row.warmup} T={row.T} "
            f"final_loss={row.final_loss:.4f} steps={row.steps} {status}")


def cmd_analyze(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    max_len = cfg.max_len - 1
    task = TaskSpec(args.task, cfg.vocab_size, min(args.min_len, max_len), max_len)
    batch = _probe_batch(task, args.data_seed, args.sentences)
    report = analyze(model, batch)
    out = Path(args.out or os.environ.get(OUTPUT_DIR_ENV) or Path(args.checkpoint).parent)
    write_jsonl(out / "analysis.jsonl", [report])
    ckpt_sha = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()
    write_manifest(out, "analyze", ckpt_sha, {"params": cfg.seed, "data": args.data_seed}, ["analysis.jsonl"],
                   extra={"checkpoint": Path(args.checkpoint).name})
    print(f"wrote {out / 'analysis.jsonl'}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.config:
        cfg = _with_strategy(load_run_config(args.config), args.strategy)
        mc, seed = cfg.model, cfg.train.seed
    else:
        kind = args.strategy or "postln"
        mc = ModelConfig(N=1, M=1, d_model=4, d_ffn=8, heads=2, vocab_size=11, max_len=4,
                         strategy=NormStrategy.named(kind, 1, 1), dropout=0.0, seed=0)
        seed = 0
    model = build_model(mc)
    task = TaskSpec("copy", mc.vocab_size, 1, 2)
    batch = _probe_batch(task, seed, 1)
    result = jacobian_chain_oracle(model, batch, t=args.step)
    for side, l, err in result.errors:
        print(f"{side} sublayer {l}: relative error {err:.3e}")
    print(f"max relative error {result.max_error:.3e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="normlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"normlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("coeffs", help="print DeepNorm alpha/beta for N encoder and M decoder layers")
    c.add_argument("--enc", type=_positive_int, required=True)
    c.add_argument("--dec", type=_positive_int, required=True)
    c.set_defaults(func=cmd_coeffs)

    c = sub.add_parser("probe", help="one forward/backward gradient probe")
    c.add_argument("config")
    c.add_argument("--strategy", choices=KINDS)
    c.add_argument("--step", type=_nonneg_int)
    c.add_argument("--seed", type=int, help="override the params seed")
    c.add_argument("--name", help="output file name")
    c.add_argument("--out")
    c.set_defaults(func=cmd_probe)

    c = sub.add_parser("train", help="train on the configured synthetic task")
    c.add_argument("config")
    c.add_argument("--out")
    c.add_argument("-v", "--verbose", action="store_true")
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("sweep", help="grid over T, warmup, lr, strategy, depth")
    c.add_argument("config")
    c.add_argument("--out")
    c.add_argument("--workers", type=_positive_int)
    c.set_defaults(func=cmd_sweep)

    c = sub.add_parser("analyze", help="representation similarity and activation sparsity of a checkpoint")
    c.add_argument("checkpoint")
    c.add_argument("--data-seed", type=int, default=0)
    c.add_argument("--task", choices=("copy", "reverse"), default="copy")
    c.add_argument("--sentences", type=_positive_int, default=32)
    c.add_argument("--min-len", type=_positive_int, default=4)
    c.add_argument("--out")
    c.set_defaults(func=cmd_analyze)

    c = sub.add_parser("oracle", help="Jacobian-chain check of autodiff input gradients")
    c.add_argument("config", nargs="?")
    c.add_argument("--strategy", choices=KINDS)
    c.add_argument("--step", type=_nonneg_int, default=0)
    c.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, UsageError) as exc:
        return _fail(str(exc))
    except NormlabError as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
