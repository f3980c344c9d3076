"""Command-line entry point: ``bytestack <subcommand> ...``.

Failures print one ``<area>: <message>`` line to stderr. Exit code 2 covers
config, data and I/O problems and 3 a checkpoint that does not match the config.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from bytestack.config import ConfigError, dump_config, load_config
from bytestack.data.vqa import (
    VqaFormatError,
    assemble_vqa_sample,
    make_toy_vqa,
    read_vqa_jsonl,
    write_shard,
    write_vqa_jsonl,
)
from bytestack.hierarchy import (
    CheckpointMismatch,
    HierarchicalByteModel,
    SamplingPolicy,
    bench_generation,
    count_parameters,
    growth_exponent,
    model_from_checkpoint,
)
from bytestack.training import evaluate, fit, open_split


def _config(args):
    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def _lengths(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError([f"lengths: expected comma-separated integers, got {text!r}"]) from None


def _emit(lines: list[str], out: str | None) -> None:
    text = "".join(line + "\n" for line in lines)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def dry_run_summary(cfg) -> dict:
    model = cfg.model
    return {
        "L_max": model.max_length,
        "context": cfg.context,
        "patch_sizes": list(model.patch_sizes),
        "K": list(model.packed_batches(cfg.train.micro_batch, cfg.context)),
        "parameters": count_parameters(model),
        "effective_batch": cfg.train.effective_batch,
        "config_hash": cfg.fingerprint(),
    }


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.dry_run:
        print(json.dumps(dry_run_summary(cfg)))
        return 0
    train = open_split(cfg, "train")
    if train is None:
        raise ConfigError(["data: no train split configured"])
    val = open_split(cfg, "val")
    test = open_split(cfg, "test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(cfg))
    torch.manual_seed(cfg.train.seed)
    model = HierarchicalByteModel(cfg.model)
    result = fit(model, cfg, out, train, val, resume=args.checkpoint, stop_at=args.stop_at)
    final = test or val
    if final is not None and (args.stop_at is None or result.step == cfg.train.total_steps):
        report = evaluate(model, final, cfg.train.micro_batch, cfg.train.eval_batches,
                          config_hash=cfg.fingerprint(), split="test" if test else "val", step=result.step)
        (out / "eval.jsonl").write_text(report.to_json() + "\n")
    print(json.dumps({"step": result.step, "checkpoints": [str(p) for p in result.checkpoints]}))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if not args.checkpoint:
        raise ConfigError(["eval: --checkpoint is required"])
    model = model_from_checkpoint(args.checkpoint, cfg)
    lines = []
    for length in _lengths(args.lengths) or [cfg.context]:
        if length > cfg.model.max_length and not cfg.model.allow_p1_extension:
            raise ConfigError([f"eval: length {length} exceeds L_max {cfg.model.max_length}"])
        source = open_split(cfg, args.split, length)
        if source is None:
            raise ConfigError([f"data: no {args.split} split configured"])
        report = evaluate(model, source, cfg.train.micro_batch, args.max_batches,
                          config_hash=cfg.fingerprint(), split=args.split)
        lines.append(report.to_json())
    _emit(lines, args.out)
    return 0


def cmd_generate(args) -> int:
    cfg = _config(args)
    policy = SamplingPolicy.parse(args.policy)
    if args.n < 0:
        raise ConfigError(["generate: n must be ≥ 0"])
    prompt = Path(args.prompt).read_bytes() if args.prompt else b""
    limit = cfg.model.max_length - 1
    if len(prompt) > limit and not cfg.model.allow_p1_extension:
        raise ConfigError([f"generate: prompt of {len(prompt)} bytes exceeds context {limit}"])
    if args.checkpoint:
        model = model_from_checkpoint(args.checkpoint, cfg)
    else:
        torch.manual_seed(cfg.train.seed)
        model = HierarchicalByteModel(cfg.model)
    seed = cfg.train.seed if args.seed is None else args.seed
    data = model.generate(prompt, args.n, policy, seed=seed) if args.n else b""
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(data)
    if args.show:
        print(data.decode("utf-8", errors="replace"))
    return 0


def cmd_serialize(args) -> int:
    records = read_vqa_jsonl(args.input)
    samples = [assemble_vqa_sample(r, args.context, args.image_mode, args.loss_on) for r in records]
    path = write_shard(args.out, samples)
    print(json.dumps({"samples": len(samples), "shard": str(path), "image_mode": args.image_mode}))
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    lengths = _lengths(args.lengths)
    if not lengths:
        raise ConfigError(["bench: --lengths is required"])
    if args.checkpoint:
        model = model_from_checkpoint(args.checkpoint, cfg)
    else:
        torch.manual_seed(cfg.train.seed)
        model = HierarchicalByteModel(cfg.model)
    records = bench_generation(model, lengths, args.n_bytes, args.repeats, seed=cfg.train.seed)
    lines = [json.dumps(r) for r in records]
    if len(records) > 1:
        lines.append(json.dumps({"growth_exponent": growth_exponent(records)}))
    _emit(lines, args.out)
    return 0


def cmd_toy_vqa(args) -> int:
    counts = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
    offset = 0
    for split, n in counts.items():
        records = make_toy_vqa(n, seed=args.seed + offset, grid=args.grid, cell=args.cell)
        offset += 1
        write_vqa_jsonl(records, Path(args.out) / split)
    print(json.dumps(counts))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bytestack", description="Hierarchical byte language models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="TOML run config")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="e.g. train.total_steps=1 or model.stages.0.width=64")
        p.add_argument("--seed", type=int, help="replaces train.seed")
        return p

    p = with_config(sub.add_parser("train", help="train a model"))
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--stop-at", type=int, help="halt after this many steps (resumable)")
    p.add_argument("--dry-run", action="store_true", help="validate and print sizes only")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint")
    p.add_argument("--lengths", help="comma-separated context lengths")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--max-batches", type=int)
    p.add_argument("--out", help="JSON-lines file (stdout when omitted)")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("generate", help="sample bytes"))
    p.add_argument("--checkpoint")
    p.add_argument("--prompt", help="file holding the prompt bytes")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--policy", default="greedy", help="greedy | temperature:T | top-k:K[:T]")
    p.add_argument("--out", default="generation.bin")
    p.add_argument("--show", action="store_true", help="print a UTF-8 rendering")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("serialize", help="turn VQA records into sample shards")
    p.add_argument("--input", required=True, help="records.jsonl")
    p.add_argument("--image-mode", default="raw", help="raw | filestream | discretized:K")
    p.add_argument("--context", type=int, required=True)
    p.add_argument("--loss-on", default="answer", choices=("answer", "full"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_serialize)

    p = with_config(sub.add_parser("bench", help="time generation against context length"))
    p.add_argument("--checkpoint")
    p.add_argument("--lengths")
    p.add_argument("--n-bytes", type=int, default=2)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("toy-vqa", help="write the synthetic colored-squares VQA set")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=250)
    p.add_argument("--n-test", type=int, default=250)
    p.add_argument("--grid", type=int, default=3)
    p.add_argument("--cell", type=int, default=1, help="pixels per grid cell side")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toy_vqa)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CheckpointMismatch as e:
        print(f"checkpoint: {e}", file=sys.stderr)
        return 3
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        msg = str(e) if str(e).split(":")[0] in ("data", "config") else f"io: {e}"
        print(msg, file=sys.stderr)
        return 2
    except (VqaFormatError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
