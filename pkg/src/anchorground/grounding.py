"""Head weighting, multi-head aggregation and click decoding.

All tensor functions accept arbitrary leading batch dimensions and stay inside
the autograd graph unless told otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DomainError, MissingRowsError
from .geometry import PatchGrid, patch_center
from .model import ForwardTrace, SequenceLayout

STRATEGIES = ("uniform", "all_query", "anchor", "sink", "soft")
SINK_MODES = ("global", "layerwise")
KL_FLOOR = 1e-8


@dataclass
class SinkScores:
    per_layer: torch.Tensor  # (..., L, |Q|)
    summed: torch.Tensor  # (..., |Q|)


@dataclass
class SinkSelection:
    mode: str
    k: int
    per_layer_indices: torch.Tensor  # (..., L, K); identical rows in global mode
    global_indices: torch.Tensor | None = None  # (..., K)


@dataclass
class HeadWeights:
    w: torch.Tensor  # (..., L, H), softmax over L*H
    strategy: str
    raw: torch.Tensor | None = None


@dataclass
class PatchDistribution:
    values: torch.Tensor  # (..., |V|)
    grid: PatchGrid | None = None

    def numpy(self) -> np.ndarray:
        return self.values.detach().double().cpu().numpy()


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = "sink"
    sink_mode: str = "global"
    sink_k: int = 1
    aggregation: str = "anchor"  # or "vanilla"
    stop_grad_weights: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise DomainError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.sink_mode not in SINK_MODES:
            raise DomainError(f"unknown sink mode {self.sink_mode!r}")
        if self.sink_k < 1:
            raise DomainError("sink_k must be >= 1")
        if self.aggregation not in ("anchor", "vanilla"):
            raise DomainError(f"unknown aggregation {self.aggregation!r}")

    @property
    def needs_query_rows(self) -> bool:
        return self.aggregation == "vanilla" or self.strategy in ("all_query", "sink", "soft")


def _unit(x: torch.Tensor) -> torch.Tensor:
    n = x.norm(dim=-1, keepdim=True)
    # zero-norm vectors get cosine 0 with everything
    return torch.where(n > 0, x / torch.where(n > 0, n, torch.ones_like(n)), torch.zeros_like(x))


def visual_sink_scores(trace: ForwardTrace, layout: SequenceLayout | None = None) -> SinkScores:
    """Summed cosine similarity between each query hidden state and all visual states, per layer."""
    layout = layout or trace.layout
    H = trace.hidden[..., 1:, :, :]  # outputs of layers 1..L
    hq = _unit(H[..., layout.query_slice, :])
    hv = _unit(H[..., : layout.visual_len, :])
    per_layer = (hq @ hv.transpose(-2, -1)).sum(-1)
    return SinkScores(per_layer, per_layer.sum(-2))


def _topk_stable(x: torch.Tensor, k: int) -> torch.Tensor:
    # descending, ties resolved toward the lowest position
    return torch.sort(x, dim=-1, descending=True, stable=True).indices[..., :k]


def select_sinks(scores: SinkScores, mode: str = "global", k: int = 1) -> SinkSelection:
    n_query = scores.summed.shape[-1]
    if n_query == 0:
        raise DomainError("cannot select sink tokens from an empty query")
    if not 1 <= k <= n_query:
        raise DomainError(f"K={k} outside [1, {n_query}]")
    L = scores.per_layer.shape[-2]
    if mode == "global":
        g = _topk_stable(scores.summed.detach(), k)
        per_layer = g.unsqueeze(-2).expand(*g.shape[:-1], L, k)
        return SinkSelection(mode, k, per_layer, g)
    if mode == "layerwise":
        return SinkSelection(mode, k, _topk_stable(scores.per_layer.detach(), k))
    raise DomainError(f"unknown sink mode {mode!r}")


def selected_row_mass(rows: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """Visual attention mass of the selected token rows.

    rows: (..., L, H, N, |V|); indices: (..., L, K) -> (..., L, H)
    """
    H, V = rows.shape[-3], rows.shape[-1]
    idx = indices.unsqueeze(-2).unsqueeze(-1)  # (..., L, 1, K, 1)
    idx = idx.expand(*indices.shape[:-1], H, indices.shape[-1], V)
    return rows.gather(-2, idx).sum(-1).sum(-1)


def _normalize_simplex(x: torch.Tensor) -> torch.Tensor:
    x = x.clamp_min(0)
    s = x.sum(-1, keepdim=True)
    uniform = torch.full_like(x, 1.0 / x.shape[-1])
    return torch.where(s > 0, x / torch.where(s > 0, s, torch.ones_like(s)), uniform)


def token_visual_distributions(trace: ForwardTrace, scores: SinkScores | None = None):
    """(global distribution over query tokens, per-head distributions) used by the soft strategy."""
    if trace.query_attn is None:
        raise MissingRowsError("query attention rows required")
    scores = scores or visual_sink_scores(trace)
    d_global = _normalize_simplex(scores.summed)
    d_head = _normalize_simplex(trace.query_attn.sum(-1))
    return d_global, d_head


def kl_divergence(p: torch.Tensor, q: torch.Tensor, floor: float = KL_FLOOR) -> torch.Tensor:
    """Sum over the support of ``p`` of ``p log(p / max(q, floor))``."""
    support = p > 0
    safe_p = torch.where(support, p, torch.ones_like(p))
    terms = p * (torch.log(safe_p) - torch.log(q.clamp_min(floor)))
    return torch.where(support, terms, torch.zeros_like(terms)).sum(-1)


def raw_head_scores(trace: ForwardTrace, strategy: str, sinks: SinkSelection | None = None) -> torch.Tensor:
    A = trace.anchor_attn
    if strategy == "uniform":
        return torch.zeros(A.shape[:-1], dtype=A.dtype, device=A.device)
    if strategy == "anchor":
        return A.sum(-1)
    if trace.query_attn is None:
        raise MissingRowsError(f"strategy {strategy!r} needs query attention rows")
    if strategy == "all_query":
        return trace.query_attn.sum(-1).sum(-1)
    if strategy == "sink":
        if sinks is None:
            raise DomainError("sink strategy needs a SinkSelection")
        return selected_row_mass(trace.query_attn, sinks.per_layer_indices)
    if strategy == "soft":
        d_global, d_head = token_visual_distributions(trace)
        return -kl_divergence(d_global[..., None, None, :], d_head)
    raise DomainError(f"unknown strategy {strategy!r}")


def head_weights(trace: ForwardTrace, layout: SequenceLayout | None = None, strategy: str = "sink",
                 sinks: SinkSelection | None = None, stop_grad: bool = False) -> HeadWeights:
    raw = raw_head_scores(trace, strategy, sinks)
    if stop_grad:
        raw = raw.detach()
    flat = raw.flatten(-2).softmax(-1)
    return HeadWeights(flat.view(raw.shape), strategy, raw)


def _to_simplex(a: torch.Tensor, grid) -> PatchDistribution:
    total = a.sum(-1, keepdim=True)
    if bool((total <= 0).any()):
        raise DomainError("aggregate has no mass; cannot normalize")
    return PatchDistribution(a / total, grid)


def aggregate(anchor_attn: torch.Tensor, weights: HeadWeights | torch.Tensor, grid=None) -> PatchDistribution:
    w = weights.w if isinstance(weights, HeadWeights) else weights
    if w.shape[-2:] != anchor_attn.shape[-3:-1]:
        raise DomainError(f"weights {tuple(w.shape)} do not match attention {tuple(anchor_attn.shape)}")
    L, H = w.shape[-2:]
    a = (w.unsqueeze(-1) * anchor_attn).sum(-2).sum(-2) / (L * H)
    return _to_simplex(a, grid)


def vanilla_aggregate(query_attn: torch.Tensor | None, grid=None) -> PatchDistribution:
    if query_attn is None:
        raise MissingRowsError("vanilla aggregation needs query attention rows")
    if query_attn.shape[-2] == 0:
        raise DomainError("vanilla aggregation needs a non-empty query")
    return _to_simplex(query_attn.mean(dim=(-4, -3, -2)), grid)


def ground(trace: ForwardTrace, cfg: StrategyConfig, grid=None) -> tuple[PatchDistribution, HeadWeights | None]:
    """Patch distribution for a trace under a strategy configuration."""
    if cfg.aggregation == "vanilla":
        return vanilla_aggregate(trace.query_attn, grid), None
    sinks = None
    if cfg.strategy == "sink":
        sinks = select_sinks(visual_sink_scores(trace), cfg.sink_mode, cfg.sink_k)
    w = head_weights(trace, strategy=cfg.strategy, sinks=sinks, stop_grad=cfg.stop_grad_weights)
    return aggregate(trace.anchor_attn, w, grid), w


def predict_click(dist: PatchDistribution | np.ndarray, grid: PatchGrid | None = None, mode: str = "argmax"):
    """Pixel click point decoded from a single patch distribution."""
    grid = grid or dist.grid
    values = dist.numpy() if isinstance(dist, PatchDistribution) else np.asarray(dist, dtype=np.float64)
    if values.ndim != 1 or len(values) != grid.size:
        raise DomainError(f"distribution of shape {values.shape} does not fit a {grid.rows}x{grid.cols} grid")
    best = int(np.argmax(values))
    if mode == "argmax":
        return patch_center(grid, best)
    if mode != "centroid":
        raise DomainError(f"unknown click mode {mode!r}")
    r0, c0 = divmod(best, grid.cols)
    total, sx, sy = 0.0, 0.0, 0.0
    for r in range(max(r0 - 1, 0), min(r0 + 2, grid.rows)):
        for c in range(max(c0 - 1, 0), min(c0 + 2, grid.cols)):
            m = values[r * grid.cols + c]
            x, y = patch_center(grid, r * grid.cols + c)
            total += m
            sx += m * x
            sy += m * y
    return (sx / total, sy / total)
