import numpy as np
import pytest

import probes
from hiercap.decoder import (
    END,
    START,
    DecodeOverflow,
    DecoderConfig,
    HierAttDecoder,
    VocabError,
    count_parameters,
    parameter_shapes,
    strip_special,
)
from hiercap.tensor import DimensionError, Tensor, gru_cell


@pytest.fixture(scope="module")
def dec_fm():
    return probes.small_decoder(0)


def test_gate_input_and_receptive_field():
    cfg = DecoderConfig(visual_channels=2048, embed_dim=300)
    assert cfg.gate_input == 2348
    assert DecoderConfig().receptive_field == 13


def test_config_rejects_degenerate_stack():
    with pytest.raises(ValueError):
        DecoderConfig(layers=0)
    with pytest.raises(ValueError):
        DecoderConfig(kernel=1)


def test_parameter_count_matches_allocation(dec_fm):
    dec, _ = dec_fm
    assert count_parameters(dec.cfg) == sum(p.data.size for p in dec.parameters())
    assert set(parameter_shapes(dec.cfg)) == {n for n, _ in dec.named_parameters()}


# ------------------------------------------------------------ attention ----

def test_uniform_map_gives_uniform_weights(dec_fm):
    dec, _ = dec_fm
    cfg = dec.cfg
    fm = Tensor(np.ones((1, 1, cfg.visual_channels, cfg.grid_cells)) * 0.7)
    concept = Tensor(np.random.default_rng(1).standard_normal((1, 3, cfg.embed_dim)))
    _, w = dec.attention_layer(0, fm, concept)
    np.testing.assert_allclose(w.data, 1.0 / cfg.grid_cells, atol=1e-15)


def test_head_weights_sum_to_one(dec_fm):
    dec, fm0 = dec_fm
    concept = Tensor(np.random.default_rng(2).standard_normal((1, 5, dec.cfg.embed_dim)))
    _, w = dec.attention_layer(2, dec.prepare_map(fm0), concept)
    assert w.shape == (1, 5, dec.cfg.heads, dec.cfg.grid_cells)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-9)


def test_saturated_cell_dominates():
    cfg = DecoderConfig(**{**probes.SMALL, "heads": 1, "attn_dim": 2})
    dec = HierAttDecoder(cfg, np.random.default_rng(0))
    lay = dec._layers[0]
    lay.q.data[:] = 0.0
    lay.k.data[:] = 0.0
    lay.q.data[0, 0] = 1.0
    lay.k.data[0, 0] = 1.0
    fm = np.full((1, 1, cfg.visual_channels, cfg.grid_cells), 1e-3)
    fm[..., 0, 2] = 1e6
    concept = np.zeros((1, 1, cfg.embed_dim))
    concept[..., 0] = 1.0
    _, w = dec.attention_layer(0, Tensor(fm), Tensor(concept))
    assert w.data[0, 0, 0, 2] > 0.99


def test_attention_channel_mismatch(dec_fm):
    dec, _ = dec_fm
    with pytest.raises(DimensionError):
        dec.attention_layer(0, Tensor(np.ones((1, 1, 3, 4))), Tensor(np.ones((1, 1, dec.cfg.embed_dim))))


# ----------------------------------------------------------------- gate ----

def test_gate_shrinks_map(dec_fm):
    dec, fm0 = dec_fm
    cfg = dec.cfg
    rng = np.random.default_rng(3)
    fm = dec.prepare_map(fm0)
    ctx = Tensor(rng.standard_normal((1, 4, cfg.visual_channels)))
    concept = Tensor(rng.standard_normal((1, 4, cfg.embed_dim)))
    state = Tensor(rng.standard_normal((1, 4, cfg.gate_hidden)))
    nxt, st, out = dec.hier_gate(0, fm, ctx, concept, state)
    assert nxt.shape == (1, 4, cfg.visual_channels, cfg.grid_cells)
    assert np.all(np.abs(nxt.data) <= np.abs(fm.data))
    assert st.shape == (1, 4, cfg.gate_hidden) and out.shape == (1, 4, cfg.embed_dim)


def test_zero_gate_halves_map():
    cfg = DecoderConfig(**probes.SMALL)
    dec = HierAttDecoder(cfg, np.random.default_rng(0))
    for p in dec.parameters():
        p.data[:] = 0.0
    fm = Tensor(np.random.default_rng(4).standard_normal((1, 1, cfg.visual_channels, cfg.grid_cells)))
    zeros = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    nxt, st, _ = dec.hier_gate(0, fm, zeros(1, 1, cfg.visual_channels), zeros(1, 1, cfg.embed_dim),
                               zeros(1, 1, cfg.gate_hidden))
    np.testing.assert_array_equal(st.data, 0.0)
    np.testing.assert_allclose(nxt.data, 0.5 * fm.data, atol=1e-15)


def test_gate_state_is_vertical_gru_chain(dec_fm):
    dec, fm0 = dec_fm
    tokens = probes.random_tokens(np.random.default_rng(5), dec.cfg.vocab_size, 6)
    trace = []
    dec.decode_teacher_forced(fm0, tokens, trace=trace)
    # replay the stack by hand: one gru_cell step per layer, state flowing upward
    x = dec._embed(tokens[None]).data
    fm = dec.prepare_map(fm0).data
    state = np.zeros((1, 6, dec.cfg.gate_hidden))
    for i, lay in enumerate(dec._layers):
        c = dec._conv_out(i, Tensor(x)).data
        ctx, _ = dec.attention_layer(i, Tensor(fm), Tensor(c))
        state = gru_cell(np.concatenate([ctx.data, c], axis=-1), state, lay.gru).data
        np.testing.assert_allclose(trace[i]["state"], state, atol=1e-12)
        if lay.gate_w is not None:
            g = 1.0 / (1.0 + np.exp(-(state @ lay.gate_w.data + lay.gate_b.data)))
            fm = fm * g[..., None]
        x = x + c + state @ lay.concept_w.data + lay.concept_b.data
    assert len(trace) == dec.cfg.layers
    assert dec._layers[-1].gate_w is None


# -------------------------------------------------------------- decoding ----

def test_teacher_forced_shapes(dec_fm):
    dec, fm0 = dec_fm
    tokens = probes.random_tokens(np.random.default_rng(6), dec.cfg.vocab_size, 7)
    assert dec.decode_teacher_forced(fm0, tokens).shape == (7, dec.cfg.vocab_size)
    batch = np.stack([tokens, tokens])
    assert dec.decode_teacher_forced(np.concatenate([fm0, fm0]), batch).shape == (2, 7, dec.cfg.vocab_size)


def test_out_of_vocab_token(dec_fm):
    dec, fm0 = dec_fm
    with pytest.raises(VocabError):
        dec.decode_teacher_forced(fm0, np.array([START, dec.cfg.vocab_size]))


def test_too_long_sequence(dec_fm):
    dec, fm0 = dec_fm
    with pytest.raises(DecodeOverflow):
        dec.decode_teacher_forced(fm0, np.full(dec.cfg.max_len + 1, START))


def test_wrong_map_shape(dec_fm):
    dec, _ = dec_fm
    with pytest.raises(DimensionError):
        dec.decode_teacher_forced(np.zeros((1, 5, 2, 2)), np.array([START]))


def test_causality():
    assert probes.causality_violations(n_prefixes=30) == 0


def test_receptive_field_is_13():
    assert probes.influence_horizon() == 13


@pytest.mark.parametrize("seed", range(3))
def test_incremental_matches_full_sequence(seed):
    assert probes.parity_diff(seed) <= 1e-6


def test_first_step_equals_first_column(dec_fm):
    dec, fm0 = dec_fm
    logits, _ = dec.decode_step(dec.init_cache(fm0), START)
    np.testing.assert_allclose(logits[0], dec.decode_teacher_forced(fm0, np.array([START])).data[0], atol=1e-12)


def test_step_overflow(dec_fm):
    dec, fm0 = dec_fm
    cache = dec.init_cache(fm0)
    for _ in range(dec.cfg.max_len):
        dec.decode_step(cache, START)
    with pytest.raises(DecodeOverflow):
        dec.decode_step(cache, START)


def test_greedy_respects_max_len_and_end(dec_fm):
    dec, fm0 = dec_fm
    for n in (1, 5, dec.cfg.max_len):
        seq = dec.greedy_decode(fm0, max_len=n)[0]
        assert len(seq) <= n
        if END in seq:
            assert seq.index(END) == len(seq) - 1


def test_greedy_stops_at_end():
    cfg = DecoderConfig(**probes.SMALL)
    dec = HierAttDecoder(cfg, np.random.default_rng(0))
    dec._params["pred2.w"].data[:] = 0.0
    dec._params["pred2.b"].data[:] = 0.0
    dec._params["pred2.b"].data[END] = 1.0
    assert dec.greedy_decode(np.zeros((1, cfg.visual_channels, 2, 2)))[0] == [END]


def test_greedy_tie_goes_to_lowest_id():
    cfg = DecoderConfig(**probes.SMALL)
    dec = HierAttDecoder(cfg, np.random.default_rng(0))
    dec._params["pred2.w"].data[:] = 0.0
    dec._params["pred2.b"].data[:] = 0.0
    dec._params["pred2.b"].data[[4, 7]] = 2.0
    seq = dec.greedy_decode(np.zeros((1, cfg.visual_channels, 2, 2)), max_len=3)[0]
    assert seq == [4, 4, 4]


def test_strip_special():
    assert strip_special([START, 5, 6, END, 7]) == [5, 6]
    assert strip_special([5, 0, 6]) == [5, 6]
