import pytest
import torch

from anchorground.errors import DimensionError, DomainError
from anchorground.model import ModelConfig, SequenceLayout, anchor_rows_partial, init_model

TINY = ModelConfig(n_layers=2, n_heads=2, d_model=16, visual_vocab=20, text_vocab=10, max_rows=6, max_cols=6,
                   visual_factors=())


def inputs(seed, rows=4, cols=4, q=3, cfg=TINY):
    g = torch.Generator().manual_seed(seed)
    return (torch.randint(0, cfg.visual_vocab, (rows, cols), generator=g),
            torch.randint(0, cfg.text_vocab, (q,), generator=g))


def test_config_validation():
    assert ModelConfig(d_model=64, n_heads=4).d_head == 16
    with pytest.raises(DimensionError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(DimensionError):
        ModelConfig(n_layers=0)
    with pytest.raises(DimensionError):
        ModelConfig(visual_vocab=10, visual_factors=(4, 4))


def test_layout_positions():
    lay = SequenceLayout(16, 3)
    assert lay.query_slice == slice(16, 19)
    assert (lay.anchor_start, lay.anchor, lay.total_len) == (19, 20, 22)
    assert lay.row_positions() == [16, 17, 18, 20]
    assert lay.row_positions(with_query=False) == [20]


def test_init_deterministic_and_seed_sensitive():
    a, b = init_model(TINY), init_model(TINY)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    c = init_model(ModelConfig(**{**TINY.__dict__, "seed": 1}))
    assert not torch.equal(a.marker_embed, c.marker_embed)
    assert a.marker_embed.abs().sum() > 0


def test_trace_shapes_and_row_stochasticity():
    m = init_model(TINY)
    vis, q = inputs(0)
    tr = m(vis, q, query_rows=True, debug_full_rows=True)
    L, H = TINY.n_layers, TINY.n_heads
    assert tr.hidden.shape == (1, L + 1, 16 + 3 + 3, 16)
    assert tr.anchor_attn.shape == (1, L, H, 16)
    assert tr.query_attn.shape == (1, L, H, 3, 16)
    full = tr.full_rows
    assert torch.all(full >= 0) and torch.all(torch.isfinite(full))
    torch.testing.assert_close(full.sum(-1), torch.ones_like(full.sum(-1)), atol=1e-6, rtol=0)
    # causal: the first query row (position 16) puts no mass after itself
    assert torch.all(full[..., 0, 17:] == 0)
    assert torch.all(tr.anchor_attn.sum(-1) <= 1 + 1e-6)


def test_causality_under_query_permutation():
    m = init_model(TINY)
    vis, _ = inputs(1)
    q1 = torch.tensor([1, 2, 3, 4])
    q2 = torch.tensor([1, 2, 4, 3])
    h1 = m(vis, q1).hidden[0]
    h2 = m(vis, q2).hidden[0]
    first_change = 16 + 2
    torch.testing.assert_close(h1[:, :first_change], h2[:, :first_change], atol=0, rtol=0)
    assert not torch.allclose(h1[:, first_change], h2[:, first_change])


def test_single_visual_token_empty_query():
    m = init_model(TINY)
    tr = m(torch.tensor([[3]]), torch.zeros(0, dtype=torch.long), debug_full_rows=True)
    assert tr.anchor_attn.shape == (1, 2, 2, 1)
    torch.testing.assert_close(tr.anchor_attn[..., 0], tr.full_rows[..., -1, 0])


def test_partial_rows_match_eager():
    m = init_model(TINY)
    for seed in range(5):
        vis, q = inputs(seed, rows=3 + seed % 3, cols=4, q=seed % 4)
        fast = m(vis, q, query_rows=True)
        eager = m(vis, q, query_rows=True, eager=True)
        torch.testing.assert_close(fast.anchor_attn, eager.anchor_attn, atol=1e-6, rtol=0)
        torch.testing.assert_close(fast.query_attn, eager.query_attn, atol=1e-6, rtol=0)
        torch.testing.assert_close(fast.hidden, eager.hidden, atol=1e-5, rtol=0)


def test_partial_rows_cost_scales_with_rows_not_square():
    m = init_model(ModelConfig(**{**TINY.__dict__, "max_rows": 14, "max_cols": 14}))
    counts = {}
    for side in (4, 14):
        vis, q = inputs(0, side, side, 2)
        tr = m(vis, q)
        stats = {}
        anchor_rows_partial(m, tr.layer_inputs, tr.layout, with_query=True, stats=stats)
        T = tr.layout.total_len
        assert stats["score_entries"] == TINY.n_layers * TINY.n_heads * 3 * T
        counts[side] = (stats["score_entries"], T)
    (c4, t4), (c14, t14) = counts[4], counts[14]
    assert c14 / c4 == pytest.approx(t14 / t4)


def test_empty_query_recomputes_only_anchor():
    m = init_model(TINY)
    vis, _ = inputs(2)
    tr = m(vis, torch.zeros(0, dtype=torch.long))
    rows = anchor_rows_partial(m, tr.layer_inputs, tr.layout)
    assert rows.shape[-2] == 1


def test_missing_cache_raises():
    m = init_model(TINY)
    with pytest.raises(DomainError):
        anchor_rows_partial(m, [], SequenceLayout(4, 1))


def test_input_validation():
    m = init_model(TINY)
    with pytest.raises(DomainError):
        m(torch.full((2, 2), TINY.visual_vocab), torch.tensor([0]))
    with pytest.raises(DomainError):
        m(torch.zeros(2, 2, dtype=torch.long), torch.tensor([TINY.text_vocab]))
    with pytest.raises(DomainError):
        m(torch.zeros(7, 2, dtype=torch.long), torch.tensor([0]))
    with pytest.raises(DomainError):
        m(torch.zeros(2, 2, dtype=torch.long), torch.zeros(9, dtype=torch.long))


def test_factor_embedding_zero_for_background_and_mixed():
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=8, visual_vocab=10, visual_factors=(2, 4))
    m = init_model(cfg)
    ids = torch.tensor([0, 1, 8, 9])
    f = m.factor_embedding(ids)
    assert torch.all(f[0] == 0) and torch.all(f[3] == 0)
    # id 8 -> code 7 -> digits (1, 3)
    torch.testing.assert_close(f[2], m.factor_embed[0].weight[1] + m.factor_embed[1].weight[3])


def test_batched_forward_matches_single():
    m = init_model(TINY)
    a, qa = inputs(3)
    b, qb = inputs(4)
    batch = m(torch.stack([a, b]), torch.stack([qa, qb]), query_rows=True)
    single = m(b, qb, query_rows=True)
    torch.testing.assert_close(batch.anchor_attn[1], single.anchor_attn[0], atol=1e-6, rtol=0)
