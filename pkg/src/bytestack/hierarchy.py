"""The stacked byte model: stage composition, loss, generation and checkpoints."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn

from bytestack.config import PAD_ID, VOCAB_SIZE, HierarchyConfig, RunConfig, validate
from bytestack.numerics import ActivationCounter, checkpoint_region, cross_entropy
from bytestack.patching import (
    NestedEmbedding,
    StageParams,
    embed_stage,
    inject_global_output,
    pad_ids,
    padded_layout,
    project_patches,
    unpack_logits,
)
from bytestack.stages import build_stage
from bytestack.stages.ssm import SelectiveSSM

CHECKPOINT_FORMAT = "bytestack-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointMismatch(ValueError):
    pass


@dataclass
class ForwardTrace:
    input_shapes: list[tuple[int, ...]] = field(default_factory=list)
    output_shapes: list[tuple[int, ...]] = field(default_factory=list)
    chunks: list[list[tuple[int, int]]] = field(default_factory=list)
    counter: ActivationCounter = field(default_factory=ActivationCounter)


def chunk_bounds(total: int, count: int) -> list[tuple[int, int]]:
    """Even split of ``total`` rows into ``count`` chunks, remainder in the last."""
    count = max(1, min(count, total))
    size = total // count
    bounds = [(i * size, (i + 1) * size) for i in range(count - 1)]
    bounds.append(((count - 1) * size, total))
    return bounds


class HierarchicalByteModel(nn.Module):
    def __init__(self, config: HierarchyConfig):
        super().__init__()
        self.config = validate(config)
        n = self.config.n_stages
        self.embedders = nn.ModuleList(StageParams(self.config, i) for i in range(n))
        self.stages = nn.ModuleList(build_stage(s) for s in self.config.stages)
        self.head = nn.Linear(self.config.widths[-1], VOCAB_SIZE)
        self.last_trace: ForwardTrace | None = None
        self.reset_parameters()

    @torch.no_grad()
    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.normal_(module.weight, 0.0, 0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
        # Unit-scale embeddings and a fan-in scaled patch projection; the global
        # projection keeps the small init so the parent vector starts as a nudge.
        for module in self.embedders:
            for p in (module.emb, module.pos, module.start):
                if p is not None:
                    nn.init.normal_(p, 0.0, 1.0)
            if module.patch_proj is not None:
                lin = module.patch_proj
                nn.init.normal_(lin.weight, 0.0, lin.in_features ** -0.5)
        for module in self.modules():
            if isinstance(module, SelectiveSSM):
                module.reset_delta_bias()

    def stage_inputs(self, ids: torch.Tensor) -> tuple[list[torch.Tensor], int]:
        """Packed (K_i, P_i, D_i) embeddings of every stage, before injection."""
        b, length = ids.shape
        cfg = self.config
        p1, total = padded_layout(length, cfg.patch_sizes, cfg.allow_p1_extension)
        sizes = (p1,) + cfg.patch_sizes[1:]
        x = pad_ids(ids, total)
        out = []
        for emb_params in self.embedders:
            emb = embed_stage(x, emb_params, sizes)
            nested = NestedEmbedding(emb.reshape(b, *sizes, emb.shape[-1]), length, total - length)
            out.append(project_patches(nested, emb_params))
        return out, total

    def run_stage(self, index: int, x: torch.Tensor, trace: ForwardTrace | None = None) -> torch.Tensor:
        stage = self.stages[index]
        bounds = chunk_bounds(x.shape[0], self.config.stages[index].chunk_count)
        if trace is not None:
            trace.chunks.append(bounds)
        if len(bounds) == 1:
            return stage(x)
        params = [p for p in stage.parameters() if p.requires_grad]
        counter = trace.counter if trace is not None else None
        parts = [checkpoint_region(stage, (x[a:b],), params, counter) for a, b in bounds]
        return torch.cat(parts, dim=0)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """(B, L) byte ids -> (B, L, 257) logits; row t depends on ids[:, :t] only."""
        b, length = ids.shape
        trace = ForwardTrace()
        trace.counter.ignore(self.parameters())
        with trace.counter.counting():
            inputs, _ = self.stage_inputs(ids)
            prev = None
            for i, h in enumerate(inputs):
                if prev is not None:
                    h = inject_global_output(prev, h, self.embedders[i - 1].global_proj,
                                             skip_start=not self.config.global_to_start)
                trace.input_shapes.append(tuple(h.shape))
                prev = self.run_stage(i, h, trace)
                trace.output_shapes.append(tuple(prev.shape))
            logits = unpack_logits(self.head(prev), b, length)
        self.last_trace = trace
        return logits

    @staticmethod
    def loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return cross_entropy(logits, targets, mask)

    @torch.no_grad()
    def next_byte_logits(self, context: Sequence[int]) -> torch.Tensor:
        """Logits for the byte following ``context`` (which may be empty)."""
        ids = torch.tensor([list(context) + [PAD_ID]], dtype=torch.long)
        return self.forward(ids)[0, len(context)]

    @torch.no_grad()
    def generate(self, prompt: bytes, n: int, policy: "SamplingPolicy | str" = "greedy", seed: int = 0) -> bytes:
        """Append ``n`` bytes to ``prompt``; full forward pass per byte, no cache."""
        policy = SamplingPolicy.parse(policy) if isinstance(policy, str) else policy
        rng = torch.Generator().manual_seed(seed)
        window = None if self.config.allow_p1_extension else self.config.max_length - 1
        ids = list(prompt)
        if window is not None and window == 0:
            raise ValueError("model context holds no prompt bytes")
        was_training = self.training
        self.eval()
        try:
            out = []
            for _ in range(n):
                context = ids if window is None else ids[len(ids) - min(len(ids), window):]
                choice = policy.choose(self.next_byte_logits(context), rng)
                ids.append(choice)
                out.append(choice)
        finally:
            self.train(was_training)
        return bytes(out)


@dataclass(frozen=True)
class SamplingPolicy:
    kind: str = "greedy"  # greedy | temperature | top-k
    temperature: float = 1.0
    top_k: int = 0

    def __post_init__(self):
        if self.kind not in ("greedy", "temperature", "top-k"):
            raise ValueError(f"unknown policy {self.kind!r}")
        if self.kind != "greedy" and self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.kind == "top-k" and self.top_k < 1:
            raise ValueError("top-k needs k ≥ 1")

    @classmethod
    def parse(cls, text: str) -> "SamplingPolicy":
        """'greedy', 'temperature:0.8' or 'top-k:40[:0.8]'."""
        kind, *args = text.split(":")
        try:
            if kind == "temperature":
                return cls(kind, temperature=float(args[0]) if args else 1.0)
            if kind == "top-k":
                return cls(kind, top_k=int(args[0]), temperature=float(args[1]) if len(args) > 1 else 1.0)
        except (IndexError, ValueError) as e:
            raise ValueError(f"bad policy {text!r}: {e}") from None
        return cls(kind)

    def choose(self, logits: torch.Tensor, rng: torch.Generator) -> int:
        logits = logits[:PAD_ID].double()  # the pad id is never emitted
        if self.kind == "greedy":
            return int(logits.argmax())
        if self.kind == "top-k":
            kth = logits.topk(min(self.top_k, logits.numel())).values[-1]
            logits = logits.masked_fill(logits < kth, float("-inf"))
        probs = (logits / self.temperature).softmax(-1)
        return int(torch.multinomial(probs, 1, generator=rng))


def bench_generation(model: HierarchicalByteModel, context_lengths: Sequence[int],
                     n_bytes: int = 2, repeats: int = 3, seed: int = 0) -> list[dict[str, Any]]:
    """Wall-clock seconds per generated byte at each context length (best of ``repeats``)."""
    rng = np.random.default_rng(seed)
    records = []
    for length in context_lengths:
        prompt = bytes(rng.integers(0, 256, size=length - 1, dtype=np.uint8))
        best = math.inf
        for _ in range(repeats):
            start = time.perf_counter()
            model.generate(prompt, n_bytes)
            best = min(best, (time.perf_counter() - start) / n_bytes)
        records.append({"context_length": int(length), "seconds_per_byte": best})
    return records


def growth_exponent(records: Sequence[dict[str, Any]]) -> float:
    """Slope of log(time) against log(context length)."""
    x = np.log([r["context_length"] for r in records])
    y = np.log([r["seconds_per_byte"] for r in records])
    return float(np.polyfit(x, y, 1)[0])


def count_parameters(config: HierarchyConfig) -> int:
    """Parameter count computed from the config alone (no allocation)."""
    cfg = validate(config)
    d_last = cfg.widths[-1]
    total = d_last * VOCAB_SIZE + VOCAB_SIZE
    for i, s in enumerate(cfg.stages):
        w = s.width
        last = i == cfg.n_stages - 1
        total += VOCAB_SIZE * d_last + w
        if s.pos_embedding == "learned_absolute":
            total += s.patch_size * d_last
        if not last:
            flat = math.prod(cfg.patch_sizes[i + 1:]) * d_last
            total += flat * w + w + w * cfg.widths[i + 1]
        ff = 2 * w * w * s.ff_mult + w * s.ff_mult + w
        if s.kind == "transformer":
            layer = 2 * w + 3 * w * w + w * w + w + ff
        else:
            n = s.state_size
            layer = 2 * w + w * n + w + (w * w + w) + 2 * w * n + (w * w + w) + ff
        total += s.layers * layer + w
    return total


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path: str | Path, model: HierarchicalByteModel, run_config: RunConfig,
                    **extra: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": run_config.to_dict(),
        "model": model.state_dict(),
        **extra,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def _shape_keys(model: dict[str, Any]) -> dict[str, Any]:
    # the P1 extension switch only changes which lengths are accepted, not the weights
    return {k: v for k, v in model.items() if k != "allow_p1_extension"}


def load_checkpoint(path: str | Path, run_config: RunConfig | None = None) -> dict[str, Any]:
    """Load and check a checkpoint; the model section must match ``run_config``."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {payload.get('version')}")
    if run_config is not None and _shape_keys(payload["config"]["model"]) != _shape_keys(run_config.to_dict()["model"]):
        raise CheckpointMismatch("checkpoint model config does not match the given config")
    return payload


def model_from_checkpoint(path: str | Path, run_config: RunConfig) -> HierarchicalByteModel:
    payload = load_checkpoint(path, run_config)
    model = HierarchicalByteModel(run_config.model)
    model.load_state_dict(payload["model"])
    return model
