import numpy as np
import pytest
import torch

from multigran.decoder import (
    DecoderLayer,
    GranularityDecoder,
    build_interaction_mask,
    parse_interaction,
)
from multigran.encoder import MemorySequence

from oracles import expected_mask, flow_matrix, tiny_decoder


@pytest.mark.parametrize("n_q", [1, 2, 4, 8])
@pytest.mark.parametrize("factor", [1, 2, 3])
def test_mask_law(n_q, factor):
    m = build_interaction_mask(n_q, factor)
    assert np.array_equal(m.allowed, expected_mask(n_q, factor))
    assert np.array_equal(m.allowed, m.allowed.T) and m.allowed.diagonal().all()


def test_mask_hand_cases():
    one = [[1, 1, 0, 0], [1, 1, 1, 0], [0, 1, 1, 1], [0, 0, 1, 1]]
    two = [[1, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 1], [0, 1, 1, 1]]
    assert build_interaction_mask(1, 1).allowed.astype(int).tolist() == one
    assert build_interaction_mask(1, 2).allowed.astype(int).tolist() == two
    assert build_interaction_mask(3, 3).allowed.all()


def test_mask_disabled_and_errors():
    assert build_interaction_mask(4, "disabled").disabled
    assert build_interaction_mask(4, None).as_tensor() is None
    for bad in (0, 4, True, "x"):
        with pytest.raises(ValueError):
            build_interaction_mask(2, bad)
    with pytest.raises(ValueError):
        build_interaction_mask(0, 1)


def test_bottom_up_mask():
    m = build_interaction_mask(1, 1, "bottom-up").allowed.astype(int)
    # row = reading query: line reads word, word reads only itself
    assert m.tolist() == [[1, 0, 0, 0], [1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1]]


def test_parse_interaction():
    assert parse_interaction(1) == (1, "both")
    assert parse_interaction("2") == (2, "both")
    assert parse_interaction("disabled") == (None, "both")
    assert parse_interaction("bottom-up:2") == (2, "bottom-up")


def layer_and_memory(dim=16, n_q=3, seed=0):
    torch.manual_seed(seed)
    layer = DecoderLayer(dim, 2, 32).double()
    x = torch.randn(1, 4, n_q, dim, dtype=torch.float64)
    pos = torch.randn_like(x)
    tokens = torch.randn(1, 6, dim, dtype=torch.float64)
    return layer, x, pos, MemorySequence(tokens, torch.randn_like(tokens), [(2, 3)])


def test_group_self_attention_single_query_is_value_path():
    layer, x, pos, _ = layer_and_memory(n_q=1)
    out = layer.group_self_attention(x, pos)
    for g in range(4):
        attn = layer.group_attn[g]
        value = attn(x[:, g] + pos[:, g], x[:, g] + pos[:, g], x[:, g])
        # one key: output = out_proj(v_proj(x)), independent of q/k
        v = attn(torch.randn_like(x[:, g]), torch.randn_like(x[:, g]), x[:, g])
        torch.testing.assert_close(value, v)
        torch.testing.assert_close(out[:, g], layer.group_norm[g](x[:, g] + value))


def test_group_self_attention_permutation_equivariant():
    layer, x, pos, _ = layer_and_memory(n_q=5)
    perm = torch.tensor([3, 0, 4, 1, 2])
    out = layer.group_self_attention(x, pos)
    out_p = layer.group_self_attention(x[:, :, perm], pos[:, :, perm])
    torch.testing.assert_close(out_p, out[:, :, perm])


def test_group_self_attention_zero_projection_is_residual():
    layer, x, pos, _ = layer_and_memory()
    with torch.no_grad():
        for attn in layer.group_attn:
            attn.out_proj.weight.zero_()
            attn.out_proj.bias.zero_()
    out = layer.group_self_attention(x, pos)
    for g in range(4):
        torch.testing.assert_close(out[:, g], layer.group_norm[g](x[:, g]))


def test_group_parameters_not_shared():
    layer, x, pos, _ = layer_and_memory()
    ids = {id(p) for attn in layer.group_attn for p in attn.parameters()}
    assert len(ids) == 4 * len(list(layer.group_attn[0].parameters()))
    base = layer.group_self_attention(x, pos)
    with torch.no_grad():
        for p in layer.group_attn[2].parameters():
            p.zero_()
    out = layer.group_self_attention(x, pos)
    for g in range(4):
        assert torch.equal(out[:, g], base[:, g]) == (g != 2)


def test_interactive_all_ones_equals_unmasked():
    layer, x, pos, _ = layer_and_memory()
    full = build_interaction_mask(3, 3).as_tensor()
    a = layer.interactive_attention(x, pos, full)
    b = layer.interactive_attention(x, pos, None)
    torch.testing.assert_close(a, b, rtol=0, atol=1e-12)


def test_interactive_block_diagonal_isolates_groups():
    layer, x, pos, _ = layer_and_memory()
    g = np.arange(12) // 3
    block = torch.as_tensor(g[:, None] == g[None, :])
    base = layer.interactive_attention(x, pos, block)
    x2 = x.clone()
    x2[:, 1] += 1.0
    out = layer.interactive_attention(x2, pos, block)
    for k in (0, 2, 3):
        assert torch.equal(out[:, k], base[:, k])
    assert not torch.equal(out[:, 1], base[:, 1])


def test_cross_attention_single_token_and_sharing():
    layer, x, pos, memory = layer_and_memory()
    one = MemorySequence(memory.tokens[:, :1], memory.pos[:, :1], [(1, 1)])
    x = x.clone()
    x[:, 3] = x[:, 1]
    pos = pos.clone()
    pos[:, 3] = pos[:, 1]
    out = layer.cross_attention_ffn(x, pos, one)
    torch.testing.assert_close(out[:, 3], out[:, 1], rtol=0, atol=0)
    # with one key the attended value is the same for every query
    attended = layer.cross_attn(torch.randn(1, 2, 16, dtype=torch.float64), one.tokens + one.pos, one.tokens)
    torch.testing.assert_close(attended[0, 0], attended[0, 1])


def test_memory_perturbation_changes_every_group():
    layer, x, pos, memory = layer_and_memory()
    base = layer.cross_attention_ffn(x, pos, memory)
    moved = MemorySequence(memory.tokens + 0.1, memory.pos, memory.shapes)
    out = layer.cross_attention_ffn(x, pos, moved)
    for g in range(4):
        assert (out[:, g] - base[:, g]).abs().max() > 1e-6


def test_heads_shapes_and_ranges():
    torch.manual_seed(0)
    dec = GranularityDecoder(32, 4, 2, 64, 16, (1, 1, 5, 1), 8)
    tokens = torch.randn(2, 7, 32)
    outs = dec(MemorySequence(tokens, torch.randn_like(tokens), [(1, 7)]), build_interaction_mask(16, 1))
    assert len(outs) == 2
    assert outs[0].polygons is None
    for g, k in enumerate((1, 1, 5, 1)):
        assert outs[-1].logits[g].shape == (2, 16, k)
        assert outs[-1].polygons[g].shape == (2, 16, 8, 2)
        for o in outs:
            assert o.boxes[g].min() >= 0 and o.boxes[g].max() <= 1


def test_disabled_single_layer_equals_pipeline_without_interaction():
    dec, memory = tiny_decoder(1)
    with torch.no_grad():
        got = dec.hidden_states(memory, build_interaction_mask(2, "disabled"))[-1]
        q = dec.queries.unsqueeze(0)
        pos = q + dec.reference_position(dec.ref_init(q).sigmoid())
        layer = dec.layers[0]
        want = layer.cross_attention_ffn(layer.group_self_attention(q, pos), pos, memory)
    assert torch.equal(got, want)


def test_decoder_deterministic():
    dec, memory = tiny_decoder(2)
    mask = build_interaction_mask(2, 1)
    with torch.no_grad():
        assert torch.equal(dec.hidden_states(memory, mask)[-1], dec.hidden_states(memory, mask)[-1])


def test_decoder_within_group_permutation_equivariant():
    dec, memory = tiny_decoder(2, n_q=3)
    mask = build_interaction_mask(3, 2)
    perm = torch.tensor([2, 0, 1])
    q = dec.queries.detach()
    with torch.no_grad():
        out = dec.hidden_states(memory, mask, q)[-1]
        out_p = dec.hidden_states(memory, mask, q[:, perm])[-1]
    torch.testing.assert_close(out_p, out[:, :, perm])


@pytest.mark.parametrize("layers", [1, 2, 3])
@pytest.mark.parametrize("factor", [1, 2, 3])
def test_information_flow_reachability(layers, factor):
    diff = flow_matrix(layers, factor)
    for g_out in range(4):
        for g_in in range(4):
            if abs(g_out - g_in) <= layers * factor:
                assert diff[g_out, g_in] > 1e-8
            else:
                assert diff[g_out, g_in] == 0.0
