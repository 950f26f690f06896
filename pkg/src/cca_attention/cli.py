"""``cca {verify,bench,train,generate} --config run.json [overrides]``

Exit codes: 0 success, 1 verification or runtime failure, 2 config error.

Overrides:
  --seq-len     verify: length of the expansion/causality cases; bench: single
                sweep length; train: window length; generate: tokens to emit
  --group-size  g (generate: runtime g override)
  --window      s (generate: runtime s override)
  --seed        global seed
  --output      bench: CSV path; train: checkpoint path; verify: optional report
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .config import ConfigError, RunConfig, bundled_corpus, load_config
from .model import TrainingDiverged, generate, model_init, train
from .verify import format_table, run_verify

COMMANDS = ("verify", "bench", "train", "generate")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cca", description="Grouped core-token attention toolkit")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON run config")
    ap.add_argument("--seq-len", type=int)
    ap.add_argument("--group-size", type=int)
    ap.add_argument("--window", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--output")
    ap.add_argument("--checkpoint", help="generate: checkpoint to load (overrides config)")
    return ap


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for flag in ("seq_len", "group_size", "window"):
        val = getattr(args, flag)
        if val is not None and val < 1:
            raise ConfigError(f"--{flag.replace('_', '-')} must be >= 1")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.command == "generate":
        if args.group_size is not None:
            cfg.generate.g_override = args.group_size
        if args.window is not None:
            cfg.generate.s_override = args.window
        if args.seq_len is not None:
            cfg.generate.n_new = args.seq_len
        if args.checkpoint:
            cfg.generate.checkpoint = args.checkpoint
    else:
        if args.group_size is not None:
            cfg.attention.g = args.group_size
        if args.window is not None:
            cfg.attention.s = args.window
        if args.seq_len is not None:
            if args.command == "bench":
                cfg.bench.lengths = [args.seq_len]
            elif args.command == "train":
                cfg.train.seq_len = args.seq_len
    if args.output and args.command == "train":
        cfg.train.checkpoint = args.output
    return cfg.validate()


def cmd_verify(cfg: RunConfig, args) -> int:
    results = run_verify(cfg.attention_config(), seed=cfg.seed, seq_len=args.seq_len)
    table = format_table(results)
    print(table)
    if args.output:
        Path(args.output).write_text(table + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED invariants: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    b = cfg.bench
    out = args.output or "bench.csv"
    recs = bench_mod.run_suite(
        cfg.attention_config(), b.lengths, b.variants, out, modes=b.modes, repeats=b.repeats,
        warmup=b.warmup, fixed_groups=b.fixed_groups, n_sink=b.n_sink, window=b.sink_window,
        dtype=np.float32 if b.float32 else np.float64, seed=cfg.seed)
    for r in recs:
        print(f"{r.variant:12s} {r.mode:17s} L={r.L:7d} flops={r.flops_attention:>16d} "
              f"kv_bytes={r.kv_bytes:>12d} wall_ms={r.wall_ms:10.3f}")
    print(f"wrote {len(recs)} rows to {out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    t = cfg.train
    corpus = Path(t.corpus).read_bytes() if t.corpus else bundled_corpus()
    params = model_init(cfg.model_config())
    log = train(params, corpus, t.steps, t.lr, t.mode, seq_len=t.seq_len,
                batch_size=t.batch_size, seed=cfg.seed, log_every=max(1, t.steps // 10))
    checkpoint_save(params, t.checkpoint)
    log_path = Path(t.checkpoint).with_suffix(".losses.csv")
    log_path.write_text("step,loss\n" + "".join(f"{i},{x!r}\n" for i, x in enumerate(log.losses)))
    print(f"loss {log.losses[0]:.4f} -> {log.losses[-1]:.4f}; "
          f"checkpoint {t.checkpoint}, log {log_path}")
    return 0


def cmd_generate(cfg: RunConfig, args) -> int:
    gsec = cfg.generate
    params = checkpoint_load(gsec.checkpoint)
    prompt = list(gsec.prompt.encode("utf-8"))
    ids = generate(params, prompt, gsec.n_new, gsec.g_override, gsec.s_override)
    sys.stdout.write(bytes(ids).decode("utf-8", errors="replace") + "\n")
    return 0


HANDLERS = {"verify": cmd_verify, "bench": cmd_bench, "train": cmd_train, "generate": cmd_generate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    print("resolved config: " + json.dumps(cfg.to_dict(), sort_keys=True))
    try:
        return HANDLERS[args.command](cfg, args)
    except (CheckpointError, TrainingDiverged, OSError, ValueError) as e:
        print(f"{args.command} failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
