"""A small causal transformer over ``[visual patches, query, <start> <ANCHOR> <end>]``.

Visual tokens carry one vocabulary id per patch plus learned row/column
embeddings; query and marker tokens carry learned positions counted from the
start of the text segment. Blocks are pre-norm MHSA + GELU MLP.

Two execution paths produce identical hidden states:

- fast: fused ``scaled_dot_product_attention`` (no attention matrix), then
  :func:`anchor_rows_partial` recomputes only the text/anchor rows from the
  cached layer inputs;
- eager: full ``T x T`` attention matrices are materialized.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError, DomainError

N_MARKERS = 3  # <start>, <ANCHOR>, <end>


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    visual_vocab: int = 66
    text_vocab: int = 13
    max_rows: int = 14
    max_cols: int = 14
    max_query_len: int = 8
    mlp_ratio: int = 4
    # mixed-radix attribute sizes of widget ids 1..prod(visual_factors); empty disables
    visual_factors: tuple[int, ...] = (4, 4, 4)
    seed: int = 0

    def __post_init__(self):
        self.visual_factors = tuple(int(f) for f in self.visual_factors)
        if any(f < 1 for f in self.visual_factors) or 1 + math.prod(self.visual_factors) > self.visual_vocab:
            raise DimensionError(f"visual_factors {self.visual_factors} do not fit visual_vocab={self.visual_vocab}")
        for name, value in asdict(self).items():
            if name not in ("seed", "visual_factors") and value < 1:
                raise DimensionError(f"{name} must be >= 1, got {value}")
        if self.d_model % self.n_heads:
            raise DimensionError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class SequenceLayout:
    visual_len: int
    query_len: int

    @property
    def query_slice(self) -> slice:
        return slice(self.visual_len, self.visual_len + self.query_len)

    @property
    def anchor_start(self) -> int:
        return self.visual_len + self.query_len

    @property
    def anchor(self) -> int:
        return self.visual_len + self.query_len + 1

    @property
    def total_len(self) -> int:
        return self.visual_len + self.query_len + N_MARKERS

    def row_positions(self, with_query: bool = True) -> list[int]:
        """Sequence positions whose attention rows the grounding stack reads."""
        rows = list(range(self.visual_len, self.visual_len + self.query_len)) if with_query else []
        return rows + [self.anchor]


@dataclass
class ForwardTrace:
    """Hidden states and attention rows of one (batched) forward pass.

    hidden:      (B, L+1, T, d)
    anchor_attn: (B, L, H, |V|)
    query_attn:  (B, L, H, |Q|, |V|) or None
    full_rows:   (B, L, H, |Q|+1, T) over all positions, debug only
    """

    layout: SequenceLayout
    hidden: torch.Tensor
    anchor_attn: torch.Tensor
    query_attn: torch.Tensor | None = None
    full_rows: torch.Tensor | None = None
    layer_inputs: list[torch.Tensor] = field(default_factory=list, repr=False)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, cfg.mlp_ratio * d)
        self.fc2 = nn.Linear(cfg.mlp_ratio * d, d)

    def heads(self, h: torch.Tensor):
        B, T, d = h.shape
        q, k, v = self.qkv(h).split(d, dim=-1)
        shape = (B, T, self.n_heads, d // self.n_heads)
        return (t.view(shape).transpose(1, 2) for t in (q, k, v))

    def query_key(self, h: torch.Tensor, rows: list[int]):
        """Queries for ``rows`` only and keys for every position."""
        B, T, d = h.shape
        w_q, w_k, _ = self.qkv.weight.split(d, dim=0)
        b_q, b_k, _ = self.qkv.bias.split(d, dim=0)
        dh = d // self.n_heads
        q = F.linear(h[:, rows], w_q, b_q).view(B, len(rows), self.n_heads, dh).transpose(1, 2)
        k = F.linear(h, w_k, b_k).view(B, T, self.n_heads, dh).transpose(1, 2)
        return q, k

    def forward(self, x: torch.Tensor, eager: bool = False):
        h = self.ln1(x)
        q, k, v = self.heads(h)
        probs = None
        if eager:
            T = x.shape[1]
            scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
            mask = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
            probs = scores.masked_fill(mask, float("-inf")).softmax(dim=-1)
            out = probs @ v
        else:
            out = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        out = out.transpose(1, 2).reshape(x.shape)
        x = x + self.proj(out)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x, h, probs


class GroundingTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.visual_embed = nn.Embedding(cfg.visual_vocab, d)
        self.factor_embed = nn.ModuleList(nn.Embedding(n, d) for n in cfg.visual_factors)
        self.row_embed = nn.Embedding(cfg.max_rows, d)
        self.col_embed = nn.Embedding(cfg.max_cols, d)
        self.text_embed = nn.Embedding(cfg.text_vocab, d)
        self.text_pos = nn.Embedding(cfg.max_query_len + N_MARKERS, d)
        self.marker_embed = nn.Parameter(torch.zeros(N_MARKERS, d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))

    def embed(self, visual_ids: torch.Tensor, query_ids: torch.Tensor) -> torch.Tensor:
        B, R, C = visual_ids.shape
        cfg = self.cfg
        Q = query_ids.shape[1]
        if R > cfg.max_rows or C > cfg.max_cols:
            raise DomainError(f"visual grid {R}x{C} exceeds {cfg.max_rows}x{cfg.max_cols}")
        if Q > cfg.max_query_len:
            raise DomainError(f"query length {Q} exceeds {cfg.max_query_len}")
        if visual_ids.numel() and (visual_ids.min() < 0 or visual_ids.max() >= cfg.visual_vocab):
            raise DomainError("visual token id out of vocabulary")
        if query_ids.numel() and (query_ids.min() < 0 or query_ids.max() >= cfg.text_vocab):
            raise DomainError("query token id out of vocabulary")
        dev = visual_ids.device
        vis = self.visual_embed(visual_ids) + self.factor_embedding(visual_ids) + self.row_embed(torch.arange(R, device=dev))[:, None] \
            + self.col_embed(torch.arange(C, device=dev))[None, :]
        text = torch.cat([self.text_embed(query_ids), self.marker_embed.expand(B, -1, -1)], dim=1)
        text = text + self.text_pos(torch.arange(Q + N_MARKERS, device=dev))
        return torch.cat([vis.reshape(B, R * C, -1), text], dim=1)

    def factor_embedding(self, visual_ids: torch.Tensor) -> torch.Tensor:
        """Sum of attribute embeddings for widget ids; zero for background and MIXED."""
        out = 0
        if not self.cfg.visual_factors:
            return out
        code = visual_ids - 1
        valid = (code >= 0) & (code < math.prod(self.cfg.visual_factors))
        code = torch.where(valid, code, torch.zeros_like(code))
        for n, emb in zip(reversed(self.cfg.visual_factors), reversed(self.factor_embed)):
            out = out + emb(code % n) * valid.unsqueeze(-1)
            code = code // n
        return out

    def forward(self, visual_ids, query_ids, *, query_rows: bool = False, eager: bool = False,
                debug_full_rows: bool = False) -> ForwardTrace:
        if visual_ids.dim() == 2:
            visual_ids, query_ids = visual_ids[None], query_ids[None]
        layout = SequenceLayout(visual_ids.shape[1] * visual_ids.shape[2], query_ids.shape[1])
        x = self.embed(visual_ids, query_ids)
        hidden, inputs, probs = [x], [], []
        for blk in self.blocks:
            x, h, p = blk(x, eager=eager)
            hidden.append(x)
            inputs.append(h)
            probs.append(p)
        rows_at = layout.row_positions(with_query=query_rows)
        if eager:
            rows = torch.stack([p[:, :, rows_at] for p in probs], dim=1)
        else:
            rows = anchor_rows_partial(self, inputs, layout, with_query=query_rows)
        V = layout.visual_len
        return ForwardTrace(
            layout=layout,
            hidden=torch.stack(hidden, dim=1),
            anchor_attn=rows[..., -1, :V].contiguous(),
            query_attn=rows[..., :-1, :V].contiguous() if query_rows else None,
            full_rows=rows if debug_full_rows else None,
            layer_inputs=inputs,
        )


def anchor_rows_partial(model: GroundingTransformer, layer_inputs, layout: SequenceLayout,
                        with_query: bool = True, stats: dict | None = None) -> torch.Tensor:
    """Recompute the query and anchor attention rows from cached layer inputs.

    Returns ``(B, L, H, n_rows, T)`` where the rows are the query positions
    (when ``with_query``) followed by the anchor. Only ``n_rows * T`` scores per
    head are formed instead of ``T * T``.
    """
    if len(layer_inputs) != len(model.blocks):
        raise DomainError("missing cached layer inputs; run a forward pass first")
    rows = layout.row_positions(with_query=with_query)
    T = layout.total_len
    pos = torch.arange(T, device=layer_inputs[0].device)
    mask = pos[None, :] > torch.tensor(rows, device=pos.device)[:, None]
    out = []
    for blk, h in zip(model.blocks, layer_inputs):
        q, k = blk.query_key(h, rows)
        scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
        out.append(scores.masked_fill(mask, float("-inf")).softmax(dim=-1))
        if stats is not None:
            stats["score_entries"] = stats.get("score_entries", 0) + scores.shape[-3] * len(rows) * T
    return torch.stack(out, dim=1)


POSITION_PARAMS = ("row_embed.weight", "col_embed.weight")
CONTENT_PARAMS = ("visual_embed.weight", "text_embed.weight", "marker_embed")


def init_model(cfg: ModelConfig) -> GroundingTransformer:
    """Deterministically initialized model; the marker/anchor embeddings start random.

    Grid positions start at unit scale and content embeddings at 0.3, so attribute
    signal survives the first LayerNorm; matrices use 1/sqrt(fan_in).
    """
    gen = torch.Generator().manual_seed(cfg.seed)
    model = GroundingTransformer(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln" in name:
                p.fill_(1.0)
            elif name in POSITION_PARAMS:
                p.copy_(torch.randn(p.shape, generator=gen))
            elif name in CONTENT_PARAMS or name.startswith("factor_embed."):
                p.copy_(torch.randn(p.shape, generator=gen) * 0.3)
            else:
                p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p.shape[-1]))
    return model
