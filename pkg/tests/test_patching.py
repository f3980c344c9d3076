import itertools

import pytest
import torch

from bytestack.config import PAD_ID, validate
from bytestack.patching import (
    LengthError,
    NestedEmbedding,
    StageParams,
    axis_positions,
    embed_stage,
    inject_global_output,
    pad_ids,
    pad_mask,
    padded_layout,
    project_patches,
    reshape_to_patches,
    unpack_logits,
)
from conftest import hier, stage

P532 = (5, 3, 2)


def cfg532(**kw):
    return validate(hier(*(stage(p=p, d=4, heads=1, **kw) for p in P532)))


def params(cfg, i, seed=0):
    torch.manual_seed(seed + i)
    sp = StageParams(cfg, i)
    with torch.no_grad():
        for p in sp.parameters():
            p.normal_()
    return sp


def test_embed_all_pad_with_learned_positions():
    cfg = validate(hier(stage(p=3, d=4, heads=1, pos_embedding="learned_absolute")))
    sp = params(cfg, 0)
    ids = torch.full((1, 3), PAD_ID)
    out = embed_stage(ids, sp, (3,))
    for t in range(3):
        assert torch.equal(out[0, t], sp.emb[PAD_ID] + sp.pos[t % 3])


def test_embed_hand_computed_gather():
    cfg = validate(hier(stage(p=3, d=4, heads=1, pos_embedding="learned_absolute")))
    sp = StageParams(cfg, 0)
    with torch.no_grad():
        sp.emb.copy_(torch.arange(257 * 4, dtype=torch.float32).view(257, 4))
        sp.pos.copy_(torch.tensor([[0.5] * 4, [0.25] * 4, [0.0] * 4]))
    out = embed_stage(torch.tensor([[2, 0, 256]]), sp, (3,))
    expected = [[8.5, 9.5, 10.5, 11.5], [0.25, 1.25, 2.25, 3.25], [1024.0, 1025.0, 1026.0, 1027.0]]
    assert out[0].tolist() == expected


def test_stages_embed_independently():
    cfg = cfg532()
    ids = torch.randint(0, 256, (1, 30))
    assert not torch.equal(embed_stage(ids, params(cfg, 0), P532), embed_stage(ids, params(cfg, 1), P532))


def test_embed_rejects_out_of_range_ids():
    cfg = cfg532()
    with pytest.raises(ValueError):
        embed_stage(torch.tensor([[257]]), params(cfg, 0), P532)


def test_axis_positions_are_nested_coordinates():
    pos = axis_positions(30, 1, P532)
    flat = [(t // 2) % 3 for t in range(30)]
    assert pos.tolist() == flat


@pytest.mark.parametrize("length,allow,p1,pads", [(30, False, 5, 0), (27, False, 5, 3), (36, True, 6, 0)])
def test_reshape_to_patches(length, allow, p1, pads):
    nested = reshape_to_patches(torch.randn(2, length, 4), P532, allow)
    assert nested.tensor.shape == (2, p1, 3, 2, 4)
    assert nested.pad_count == pads and nested.length == length


def test_reshape_pads_tail_with_pad_vector():
    emb = torch.randn(1, 27, 4)
    pad = torch.full((4,), 7.0)
    flat = reshape_to_patches(emb, P532, pad_vector=pad).tensor.reshape(1, 30, 4)
    assert torch.equal(flat[0, :27], emb[0])
    assert (flat[0, 27:] == 7.0).all()


def test_overlong_sequence_needs_extension():
    with pytest.raises(LengthError):
        reshape_to_patches(torch.randn(1, 36, 4), P532)


def test_padded_layout_rounds_outer_axis_up():
    assert padded_layout(8, P532) == (2, 12)
    assert padded_layout(30, P532) == (5, 30)


def _nested(cfg, b=2, seed=0):
    ids = torch.randint(0, 256, (b, 30), generator=torch.Generator().manual_seed(seed))
    return ids


def test_packed_batch_sizes():
    cfg = cfg532()
    ids = _nested(cfg)
    ks = []
    for i in range(3):
        sp = params(cfg, i)
        emb = embed_stage(ids, sp, P532)
        out = project_patches(NestedEmbedding(emb.view(2, *P532, 4), 30, 0), sp)
        ks.append(out.shape[0])
        assert out.shape[1:] == (P532[i], 4)
    assert ks == [2, 10, 30]


def test_first_stage_rows_are_shifted_projections():
    cfg = cfg532()
    sp = params(cfg, 0)
    ids = _nested(cfg)
    emb = embed_stage(ids, sp, P532).view(2, *P532, 4)
    out = project_patches(NestedEmbedding(emb, 30, 0), sp)
    for b in range(2):
        assert torch.equal(out[b, 0], sp.start)
        for j in range(1, 5):
            expected = sp.patch_proj(emb[b, j - 1].reshape(-1))
            assert torch.allclose(out[b, j], expected, atol=1e-5)


def test_last_stage_rows_are_start_then_bytes():
    cfg = cfg532()
    sp = params(cfg, 2)
    ids = _nested(cfg)
    emb = embed_stage(ids, sp, P532).view(2, *P532, 4)
    out = project_patches(NestedEmbedding(emb, 30, 0), sp)
    assert sp.patch_proj is None and sp.global_proj is None
    for b, p1, p2 in itertools.product(range(2), range(5), range(3)):
        row = out[(b * 5 + p1) * 3 + p2]
        assert torch.equal(row[0], sp.start)
        assert torch.equal(row[1], emb[b, p1, p2, 0])


def test_shift_property():
    cfg = cfg532()
    sp = params(cfg, 0)
    ids = _nested(cfg)
    emb = embed_stage(ids, sp, P532).view(2, *P532, 4)
    base = project_patches(NestedEmbedding(emb, 30, 0), sp)
    for j in range(5):
        zeroed = emb.clone()
        zeroed[:, j] = 0
        out = project_patches(NestedEmbedding(zeroed, 30, 0), sp)
        assert torch.equal(out[:, : j + 1], base[:, : j + 1])


def test_inject_zero_output_is_identity():
    proj = torch.nn.Linear(3, 4, bias=False)
    nxt = torch.randn(6, 5, 4)
    assert torch.equal(inject_global_output(torch.zeros(2, 3, 3), nxt, proj), nxt)


def test_inject_matches_loop_oracle():
    torch.manual_seed(0)
    proj = torch.nn.Linear(3, 4, bias=False)
    out = torch.randn(2, 3, 3)
    nxt = torch.randn(6, 5, 4)
    got = inject_global_output(out, nxt, proj)
    expected = nxt.clone()
    for k in range(2):
        for p in range(3):
            vec = proj.weight @ out[k, p]
            for r in range(1, 5):
                expected[k * 3 + p, r] += vec
    assert torch.allclose(got, expected, atol=1e-6)
    assert torch.equal(got[:, 0], nxt[:, 0])


def test_inject_into_start_rows_when_requested():
    torch.manual_seed(0)
    proj = torch.nn.Linear(3, 4, bias=False)
    out, nxt = torch.randn(2, 3, 3), torch.randn(6, 5, 4)
    got = inject_global_output(out, nxt, proj, skip_start=False)
    assert torch.allclose(got[:, 0] - nxt[:, 0], got[:, 1] - nxt[:, 1], atol=1e-6)


def test_inject_shape_mismatch():
    with pytest.raises(ValueError):
        inject_global_output(torch.zeros(2, 3, 3), torch.zeros(5, 5, 4), torch.nn.Linear(3, 4))


def test_unpack_index_oracle():
    b = 2
    z = torch.arange(b * 30, dtype=torch.float32).view(b * 15, 2, 1) * 1.0 + 1000
    out = unpack_logits(z, b, 30)
    assert out.shape == (2, 30, 1)
    for bb, p1, p2, p3 in itertools.product(range(b), range(5), range(3), range(2)):
        t = (p1 * 3 + p2) * 2 + p3
        assert out[bb, t, 0] == z[(bb * 5 + p1) * 3 + p2, p3, 0]


def test_pack_unpack_bijection():
    x = torch.randperm(2 * 30 * 3).view(2, 30, 3).float()
    packed = x.reshape(2, *P532, 3).reshape(-1, 2, 3)
    assert torch.equal(unpack_logits(packed, 2, 30), x)


def test_unpack_drops_pad_tail():
    z = torch.randn(2 * 5 * 3, 2, 257)
    assert unpack_logits(z, 2, 27).shape == (2, 27, 257)


def test_pad_helpers():
    ids = pad_ids(torch.zeros(1, 27, dtype=torch.long), 30)
    assert ids[0, 27:].tolist() == [PAD_ID] * 3
    assert pad_mask(1, 27, 30)[0].tolist() == [True] * 27 + [False] * 3
