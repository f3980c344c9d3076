"""Inter-stage shape plumbing of the byte hierarchy.

Every stage embeds the same padded byte sequence with its own table, views it
as a nested (B, P_1, ..., P_N, D_N) array, flattens everything below its own
patch axis and projects that to its width. The packed stage input is
(K_i, P_i, D_i) with K_i = B * P_1 * ... * P_{i-1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from bytestack.config import PAD_ID, VOCAB_SIZE, HierarchyConfig


class LengthError(ValueError):
    pass


@dataclass
class NestedEmbedding:
    tensor: torch.Tensor  # (B, P_1', P_2, ..., P_N, D_N)
    length: int
    pad_count: int

    @property
    def patch_sizes(self) -> tuple[int, ...]:
        return tuple(self.tensor.shape[1:-1])


def padded_layout(length: int, patch_sizes, allow_extension: bool = False) -> tuple[int, int]:
    """Return (effective P_1, padded length) for a sequence of ``length`` bytes.

    Inner axes are fixed; the outer patch count is just large enough to hold
    the sequence. Exceeding P_1 is allowed only with ``allow_extension``.
    """
    if length < 1:
        raise LengthError("sequence length must be ≥ 1")
    inner = math.prod(patch_sizes[1:])
    p1 = math.ceil(length / inner)
    if p1 > patch_sizes[0] and not allow_extension:
        raise LengthError(f"length {length} exceeds L_max {patch_sizes[0] * inner}")
    return p1, p1 * inner


def pad_ids(ids: torch.Tensor, total: int, pad_id: int = PAD_ID) -> torch.Tensor:
    if ids.shape[1] == total:
        return ids
    tail = ids.new_full((ids.shape[0], total - ids.shape[1]), pad_id)
    return torch.cat([ids, tail], dim=1)


class StageParams(nn.Module):
    """Per-stage patch-embedder tensors.

    emb: (257, D_N) byte table; pos: (P_i, D_N) when learned_absolute;
    patch_proj: flattened sub-patch -> D_i (absent at the last stage);
    start: trainable start token (D_i,); global_proj: D_i -> D_{i+1} (absent
    at the last stage).
    """

    def __init__(self, config: HierarchyConfig, index: int):
        super().__init__()
        stage = config.stages[index]
        d_last = config.widths[-1]
        last = index == config.n_stages - 1
        self.index = index
        self.emb = nn.Parameter(torch.zeros(VOCAB_SIZE, d_last))
        self.pos = nn.Parameter(torch.zeros(stage.patch_size, d_last)) if stage.pos_embedding == "learned_absolute" else None
        flat = math.prod(config.patch_sizes[index + 1:]) * d_last
        self.patch_proj = None if last else nn.Linear(flat, stage.width)
        self.start = nn.Parameter(torch.zeros(stage.width))
        self.global_proj = None if last else nn.Linear(stage.width, config.widths[index + 1], bias=False)


def axis_positions(total: int, index: int, patch_sizes) -> torch.Tensor:
    """Coordinate along patch axis ``index`` for each flat position."""
    stride = math.prod(patch_sizes[index + 1:])
    return (torch.arange(total) // stride) % patch_sizes[index]


def embed_stage(ids: torch.Tensor, params: StageParams, patch_sizes) -> torch.Tensor:
    """(B, L) byte ids -> (B, L, D_N) using this stage's own tables."""
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= VOCAB_SIZE):
        raise ValueError(f"byte ids must lie in [0, {VOCAB_SIZE})")
    out = params.emb[ids]
    if params.pos is not None:
        out = out + params.pos[axis_positions(ids.shape[1], params.index, patch_sizes)]
    return out


def reshape_to_patches(emb: torch.Tensor, patch_sizes, allow_extension: bool = False,
                       pad_vector: torch.Tensor | None = None) -> NestedEmbedding:
    """(B, L, D) -> nested (B, P_1', P_2, ..., P_N, D), padding the tail.

    Pad rows are ``pad_vector`` (zeros when omitted). Callers that need the
    pad byte's positional embedding should pad ids before embedding instead.
    """
    b, length, d = emb.shape
    p1, total = padded_layout(length, patch_sizes, allow_extension)
    pad_count = total - length
    if pad_count:
        fill = emb.new_zeros(d) if pad_vector is None else pad_vector
        emb = torch.cat([emb, fill.expand(b, pad_count, d)], dim=1)
    return NestedEmbedding(emb.reshape(b, p1, *patch_sizes[1:], d), length, pad_count)


def project_patches(nested: NestedEmbedding, params: StageParams) -> torch.Tensor:
    """Packed input of stage i: (K_i, P_i, D_i), start token first, last patch dropped."""
    i = params.index
    t = nested.tensor
    lead = t.shape[: i + 2]  # B, P_1', ..., P_i
    flat = t.reshape(*lead, -1)
    proj = flat if params.patch_proj is None else params.patch_proj(flat)
    proj = proj.reshape(-1, lead[-1], proj.shape[-1])
    start = params.start.expand(proj.shape[0], 1, -1)
    return torch.cat([start, proj[:, :-1]], dim=1)


def inject_global_output(stage_out: torch.Tensor, next_emb: torch.Tensor, proj: nn.Module,
                         skip_start: bool = True) -> torch.Tensor:
    """Add one projected vector per child patch to the next stage's rows.

    stage_out: (K_i, P_i, D_i); next_emb: (K_i * P_i, P_{i+1}, D_{i+1}). With
    ``skip_start`` row 0 (the start token) is left untouched.
    """
    k_next, p_next, d_next = next_emb.shape
    if stage_out.shape[0] * stage_out.shape[1] != k_next:
        raise ValueError(
            f"inject: stage output {tuple(stage_out.shape)} does not cover {k_next} child patches"
        )
    g = proj(stage_out).reshape(k_next, 1, d_next)
    if not skip_start:
        return next_emb + g
    rows = torch.cat([g.new_zeros(k_next, 1, d_next), g.expand(k_next, p_next - 1, d_next)], dim=1)
    return next_emb + rows


def unpack_logits(z: torch.Tensor, batch: int, length: int) -> torch.Tensor:
    """(K_N, P_N, V) -> (B, L, V); row t predicts byte t, pad tail dropped."""
    if z.shape[0] * z.shape[1] % batch:
        raise ValueError(f"cannot unpack {tuple(z.shape[:2])} into batch {batch}")
    return z.reshape(batch, -1, z.shape[-1])[:, :length]


def pad_mask(batch: int, length: int, total: int) -> torch.Tensor:
    """True on real positions of the padded (B, total) layout."""
    return (torch.arange(total) < length).expand(batch, total)
