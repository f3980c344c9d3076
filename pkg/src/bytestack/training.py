"""Optimizer, learning-rate schedule and the resumable training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np
import torch

from bytestack.config import PAD_ID, RunConfig, TrainConfig
from bytestack.data.corpus import (
    ByteCorpus,
    ByteSample,
    SampleSampler,
    WindowSampler,
    eval_batches,
    load_corpus,
    stack,
)
from bytestack.data.vqa import read_shard
from bytestack.hierarchy import (
    CheckpointMismatch,
    HierarchicalByteModel,
    load_checkpoint,
    save_checkpoint,
)
from bytestack.metrics import CorpusStats, EvalReport, vqa_accuracy

Batch = tuple[torch.Tensor, torch.Tensor, torch.Tensor]


class NonFiniteLoss(FloatingPointError):
    pass


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to ``min_lr`` at ``total_steps``."""
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside schedule [0, {total}]")
    warmup = cfg.warmup_fraction * total
    if step <= warmup:
        return cfg.peak_lr * step / warmup if warmup else cfg.peak_lr
    progress = (step - warmup) / (total - warmup)
    return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.peak_lr, betas=tuple(cfg.betas),
                             weight_decay=cfg.weight_decay)


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    lr: float
    target_bytes: int


def train_step(model: HierarchicalByteModel, micro_batches: list[Batch],
               optimizer: torch.optim.Optimizer, cfg: TrainConfig, step: int) -> StepResult:
    """One optimizer update from ``len(micro_batches)`` accumulated micro-batches.

    ``step`` counts completed updates; this update uses ``lr_at(step + 1)``.
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    k = len(micro_batches)
    total, n_target = 0.0, 0
    for j, (inputs, targets, mask) in enumerate(micro_batches):
        loss = model.loss(model(inputs), targets, mask)
        if not torch.isfinite(loss):
            optimizer.zero_grad(set_to_none=True)
            raise NonFiniteLoss(f"non-finite loss {float(loss.detach())} at step {step}, micro-batch {j}")
        (loss / k).backward()
        total += float(loss.detach()) / k
        n_target += int(mask.sum())
    params = [p for p in model.parameters() if p.grad is not None]
    norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm))
    lr = lr_at(min(step + 1, cfg.total_steps), cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return StepResult(total, norm, lr, n_target)


# -- data sources -------------------------------------------------------------

class CorpusSource:
    kind = "corpus"

    def __init__(self, corpus: ByteCorpus, context: int):
        self.corpus = corpus
        self.context = context
        self.stats = CorpusStats.from_bytes(corpus.to_bytes())

    def sampler(self, batch_size: int, seed: int) -> WindowSampler:
        return WindowSampler(self.corpus, self.context, batch_size, seed)

    def eval_iter(self, batch_size: int, max_batches: int | None) -> Iterator[tuple[Batch, list[str] | None]]:
        windows = None if max_batches is None else max_batches * batch_size
        for batch in eval_batches(self.corpus, self.context, batch_size, windows):
            yield batch, None


def with_loss_mask(sample: ByteSample, loss_on: str) -> ByteSample:
    """Recompute the mask of a serialized VQA sample (the answer slot is last)."""
    if loss_on == "answer":
        mask = np.zeros_like(sample.mask)
    elif loss_on == "full":
        mask = sample.inputs != PAD_ID
    else:
        raise ValueError(f"loss_on must be answer or full, got {loss_on!r}")
    mask[-1] = True
    return replace(sample, mask=mask)


class ShardSource:
    kind = "vqa"
    stats = None

    def __init__(self, samples, context: int, loss_on: str | None = None):
        if any(len(s.inputs) != context for s in samples):
            raise ValueError(f"data: shard samples do not match context {context}")
        if loss_on is not None:
            samples = [with_loss_mask(s, loss_on) for s in samples]
        self.samples = samples
        self.context = context

    def sampler(self, batch_size: int, seed: int) -> SampleSampler:
        return SampleSampler(self.samples, batch_size, seed)

    def eval_iter(self, batch_size: int, max_batches: int | None):
        n = len(self.samples) if max_batches is None else min(len(self.samples), max_batches * batch_size)
        for start in range(0, n, batch_size):
            chunk = self.samples[start:start + batch_size]
            yield stack(chunk), [s.provenance.get("question_type", "E") for s in chunk]


def open_split(cfg: RunConfig, split: str, context: int | None = None):
    path = getattr(cfg.data, split)
    if not path:
        return None
    context = context or cfg.context
    if cfg.data.kind == "vqa":
        if not Path(path).exists():
            raise FileNotFoundError("data: shard path not found")
        return ShardSource(read_shard(path), context, cfg.data.loss_on)
    return CorpusSource(load_corpus(path, split), context)


# -- evaluation ---------------------------------------------------------------

@torch.no_grad()
def evaluate(model: HierarchicalByteModel, source, batch_size: int = 8,
             max_batches: int | None = None, **report_kw) -> EvalReport:
    """Mean NLL over every masked target; VQA sources also get answer accuracy."""
    was_training = model.training
    model.eval()
    nll_sum, count = 0.0, 0
    preds, answers, qtypes = [], [], []
    try:
        for (inputs, targets, mask), types in source.eval_iter(batch_size, max_batches):
            logits = model(inputs)
            logp = logits.double().log_softmax(-1)
            nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
            nll_sum += float(nll[mask].sum())
            count += int(mask.sum())
            if types is not None:
                preds += logits[:, -1, :PAD_ID].argmax(-1).tolist()
                answers += targets[:, -1].tolist()
                qtypes += types
    finally:
        model.train(was_training)
    if count == 0:
        raise ValueError("evaluate: no target bytes")
    report = EvalReport.from_nll(nll_sum / count, count, source.context, source.stats, **report_kw)
    if qtypes:
        report.accuracy = vqa_accuracy(preds, answers, qtypes)
    return report


# -- the loop -----------------------------------------------------------------

@dataclass
class FitResult:
    step: int
    checkpoints: list[Path] = field(default_factory=list)
    best: Path | None = None
    losses: list[float] = field(default_factory=list)
    reports: list[EvalReport] = field(default_factory=list)
    stopped_early: bool = False


def _write(log, record: dict[str, Any]) -> None:
    if log is not None:
        log.write(json.dumps(record, sort_keys=True) + "\n")
        log.flush()


def fit(model: HierarchicalByteModel, run_config: RunConfig, out_dir: str | Path,
        train_source, val_source=None, resume: str | Path | None = None,
        stop_at: int | None = None, on_step: Callable[[int, StepResult], None] | None = None,
        stop_when: Callable[[EvalReport], bool] | None = None) -> FitResult:
    """Train for ``train.total_steps`` updates, writing logs and checkpoints to ``out_dir``.

    ``stop_at`` halts early (schedule unchanged) so a later ``resume`` can
    continue; so does ``train.time_budget_s`` when positive, or ``stop_when``
    returning True for a validation report.
    """
    tc = run_config.train
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    optimizer = make_optimizer(model, tc)
    sampler = train_source.sampler(tc.micro_batch, tc.seed)
    step, bytes_seen, best_val = 0, 0, math.inf
    if resume is not None:
        payload = load_checkpoint(resume, run_config)
        model.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        sampler.set_state(payload["sampler"])
        torch.set_rng_state(payload["torch_rng"])
        step, bytes_seen = payload["step"], payload["bytes_seen"]
        best_val = payload.get("best_val", math.inf)
    else:
        torch.manual_seed(tc.seed)

    result = FitResult(step)

    def checkpoint(name: str) -> Path:
        return save_checkpoint(out / "checkpoints" / name, model, run_config,
                               optimizer=optimizer.state_dict(), sampler=sampler.state(),
                               torch_rng=torch.get_rng_state(), step=step,
                               bytes_seen=bytes_seen, best_val=best_val)

    def run_eval() -> bool:
        nonlocal best_val
        if val_source is None:
            return False
        report = evaluate(model, val_source, tc.micro_batch, tc.eval_batches,
                          config_hash=run_config.fingerprint(), split="val", step=step)
        report.extra["elapsed_s"] = time.monotonic() - start_time
        result.reports.append(report)
        _write(log, {"kind": "eval", **json.loads(report.to_json())})
        if report.nll < best_val:
            best_val = report.nll
            result.best = checkpoint("best.pt")
        return stop_when is not None and bool(stop_when(report))

    target = tc.total_steps if stop_at is None else min(stop_at, tc.total_steps)
    start_time = time.monotonic()
    mode = "a" if resume is not None else "w"
    with open(out / "train_log.jsonl", mode) as log:
        while step < target:
            if tc.time_budget_s and time.monotonic() - start_time > tc.time_budget_s:
                result.stopped_early = True
                break
            micro = [sampler.next_batch() for _ in range(tc.accumulation)]
            res = train_step(model, micro, optimizer, tc, step)
            step += 1
            bytes_seen += res.target_bytes
            result.losses.append(res.loss)
            _write(log, {"kind": "train", "step": step, "loss": res.loss, "bpb": res.loss / math.log(2),
                         "lr": res.lr, "grad_norm": res.grad_norm, "bytes_seen": bytes_seen})
            if on_step is not None:
                on_step(step, res)
            if tc.eval_every and step % tc.eval_every == 0 and run_eval():
                result.stopped_early = True
                break
            if tc.checkpoint_every and step % tc.checkpoint_every == 0:
                result.checkpoints.append(checkpoint(f"step_{step:07d}.pt"))
        if step > 0 and not (result.reports and result.reports[-1].step == step):
            run_eval()
        result.checkpoints.append(checkpoint("last.pt"))
    if result.best is not None:
        result.checkpoints.append(result.best)
    result.step = step
    return result


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


__all__ = [
    "CheckpointMismatch", "CorpusSource", "FitResult", "NonFiniteLoss", "ShardSource", "StepResult",
    "evaluate", "fit", "lr_at", "make_optimizer", "open_split", "seed_everything", "train_step",
]
