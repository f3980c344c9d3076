"""Differentiable array substrate.

Arrays are float32 ``torch.Tensor`` objects and reverse-mode gradients come
from torch autograd. This module pins down the operator set the model is built
from, adds the shape checks and error messages the rest of the package relies
on, and provides a recomputing checkpoint region with an activation counter.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

DTYPE = torch.float32


class ShapeError(ValueError):
    pass


class SideEffectError(RuntimeError):
    pass


def _broadcast(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} are not aligned")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast(a, b, "add")
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast(a, b, "mul")
    return a * b


def softmax_causal_masked(scores: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with key positions > query position removed."""
    q, k = scores.shape[-2:]
    mask = torch.ones(q, k, dtype=torch.bool, device=scores.device).triu(1 + k - q)
    return scores.masked_fill(mask, float("-inf")).softmax(dim=-1)


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: gain {tuple(gain.shape)} vs input {tuple(x.shape)}")
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * gain


def embedding_gather(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"embedding_gather: ids outside [0, {table.shape[0]})")
    return F.embedding(ids, table)


def pad_constant(x: torch.Tensor, before: int, after: int, value: float = 0.0, dim: int = -1) -> torch.Tensor:
    dim = dim % x.dim()
    spec = [0, 0] * (x.dim() - dim - 1) + [before, after]
    return F.pad(x, spec, value=value)


def associative_scan(combine: Callable, elems: Sequence[torch.Tensor], dim: int = 0) -> tuple[torch.Tensor, ...]:
    """Inclusive Hillis-Steele scan of ``combine(earlier, later)`` along ``dim``."""
    elems = tuple(elems)
    n = elems[0].shape[dim]
    step = 1
    while step < n:
        earlier = tuple(e.narrow(dim, 0, n - step) for e in elems)
        later = tuple(e.narrow(dim, step, n - step) for e in elems)
        merged = combine(earlier, later)
        elems = tuple(
            torch.cat([e.narrow(dim, 0, step), m], dim=dim) for e, m in zip(elems, merged)
        )
        step *= 2
    return elems


def linear_combine(earlier, later):
    """(a1, b1) then (a2, b2) -> (a1 a2, a2 b1 + b2): composition of h -> a h + b."""
    a1, b1 = earlier
    a2, b2 = later
    return a1 * a2, a2 * b1 + b2


def cumulative_scan(a: torch.Tensor, b: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """States of h_t = a_t h_{t-1} + b_t with h_{-1} = 0, via the associative scan."""
    if a.shape != b.shape:
        raise ShapeError(f"cumulative_scan: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return associative_scan(linear_combine, (a, b), dim=dim)[1]


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean natural-log NLL over positions where ``mask`` is true."""
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    nll = -logits.log_softmax(-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is None:
        return nll.mean()
    mask = mask.to(nll.dtype)
    count = mask.sum()
    if float(count) == 0:
        raise ValueError("cross_entropy: empty mask")
    return (nll * mask).sum() / count


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "exp": torch.exp,
    "log": torch.log,
    "softplus": F.softplus,
    "silu": F.silu,
    "softmax_causal_masked": softmax_causal_masked,
    "rms_norm": rms_norm,
    "embedding_gather": embedding_gather,
    "reshape": torch.reshape,
    "transpose": torch.transpose,
    "slice": torch.narrow,
    "concat": torch.cat,
    "pad_constant": pad_constant,
    "cumulative_scan": cumulative_scan,
    "cross_entropy": cross_entropy,
}


def op_set() -> frozenset[str]:
    return frozenset(OPS)


def backward(loss: torch.Tensor, leaves: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` for every named leaf; unused leaves get zeros."""
    if loss.dim() != 0 and loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise FloatingPointError("backward: loss is not finite")
    names = [n for n, t in leaves.items() if t.requires_grad]
    grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    return {
        n: torch.zeros_like(leaves[n]) if g is None else g
        for n, g in zip(names, grads)
    }


# -- activation accounting ----------------------------------------------------

@dataclass
class ActivationCounter:
    """Counts elements autograd keeps alive for the backward pass.

    ``stored`` accumulates while counting() is active during forward;
    ``recompute_peak`` is the largest interior footprint seen while a
    checkpoint region re-executes in backward.
    """

    stored: int = 0
    recompute_peak: int = 0
    regions: int = 0
    _params: set = field(default_factory=set, repr=False)

    def reset(self) -> None:
        self.stored = 0
        self.recompute_peak = 0
        self.regions = 0

    @property
    def peak(self) -> int:
        return self.stored + self.recompute_peak

    def ignore(self, tensors: Iterable[torch.Tensor]) -> None:
        # keyed by storage so transposed views of a weight are skipped too
        self._params = {t.untyped_storage().data_ptr() for t in tensors}

    @contextlib.contextmanager
    def counting(self):
        def pack(t):
            if t.untyped_storage().data_ptr() not in self._params:
                self.stored += t.numel()
            return t

        with torch.autograd.graph.saved_tensors_hooks(pack, lambda t: t):
            yield self

    @contextlib.contextmanager
    def measuring(self):
        """Scratch counter whose total feeds ``recompute_peak``."""
        scratch = ActivationCounter(_params=self._params)
        with scratch.counting():
            yield scratch
        self.recompute_peak = max(self.recompute_peak, scratch.stored)


class _Region(torch.autograd.Function):
    @staticmethod
    def forward(ctx, fn, counter, n_inputs, *args):
        inputs, params = args[:n_inputs], args[n_inputs:]
        ctx.fn = fn
        ctx.counter = counter
        ctx.n_inputs = n_inputs
        ctx.params = params
        ctx.rng = torch.get_rng_state()
        ctx.save_for_backward(*inputs)
        versions = [p._version for p in params]
        with torch.no_grad():
            out = fn(*inputs)
        if any(p._version != v for p, v in zip(params, versions)):
            raise SideEffectError("checkpoint_region: region mutated its parameters")
        if not isinstance(out, torch.Tensor):
            raise TypeError("checkpoint_region: region must return a single tensor")
        if any(out.data_ptr() == t.data_ptr() for t in inputs):
            out = out.clone()
        return out

    @staticmethod
    def backward(ctx, grad_out):
        inputs = [t.detach().requires_grad_(t.requires_grad) for t in ctx.saved_tensors]
        params = ctx.params
        rng = torch.get_rng_state()
        torch.set_rng_state(ctx.rng)
        try:
            with torch.enable_grad():
                scope = ctx.counter.measuring() if ctx.counter is not None else contextlib.nullcontext()
                with scope:
                    out = ctx.fn(*inputs)
        finally:
            torch.set_rng_state(rng)
        wrt = [t for t in list(inputs) + list(params) if t.requires_grad]
        grads = iter(torch.autograd.grad(out, wrt, grad_out, allow_unused=True)) if wrt else iter(())
        result = [next(grads) if t.requires_grad else None for t in list(inputs) + list(params)]
        return (None, None, None, *result)


def checkpoint_region(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    params: Sequence[torch.Tensor] = (),
    counter: ActivationCounter | None = None,
) -> torch.Tensor:
    """Run ``fn(*inputs)`` keeping only its inputs; re-run it during backward.

    ``params`` must list every trainable tensor ``fn`` reads, otherwise their
    gradients are lost. ``fn`` must be pure: parameter mutation is rejected.
    """
    if counter is not None:
        counter.regions += 1
    if not torch.is_grad_enabled():
        return fn(*inputs)
    return _Region.apply(fn, counter, len(inputs), *inputs, *params)
