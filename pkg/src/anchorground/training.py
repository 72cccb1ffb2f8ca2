"""Attention-grounding supervision: KL loss, Adam loop and gradient checking."""

from __future__ import annotations

import copy
import itertools
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import ConfigError, DimensionError, NonFiniteLossError
from .geometry import BBox, bbox_to_local, plan_crop
from .grounding import (
    PatchDistribution,
    StrategyConfig,
    aggregate,
    ground,
    head_weights,
    select_sinks,
    visual_sink_scores,
)
from .labeling import DEFAULT_ALPHA, GroundingLabel, patch_labels
from .model import GroundingTransformer
from .synthdata import ATTRIBUTES, VERB_ID, RenderSpec, Scene, Widget, get_difficulty, render

log = logging.getLogger(__name__)

PRED_FLOOR = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 32
    epochs: int = 20
    alpha: float = DEFAULT_ALPHA
    strategy: str = "sink"
    sink_mode: str = "global"
    sink_k: int = 1
    aggregation: str = "anchor"
    stop_grad_weights: bool = False
    weighted_labels: bool = True
    seed: int = 0
    eval_every: int = 0
    grad_clip: float = 1.0
    # "cosine" decays the rate to zero over the run
    lr_schedule: str = "cosine"
    # relabel attribute values consistently in cells and query, and flip scenes
    permute_attrs: bool = True
    flip: bool = True
    # fraction of samples replaced by a zoomed crop around the target
    zoom_aug: float = 0.0
    aug_zoom: float = 2.0
    aug_crop_patches: int = 4

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("learning_rate must be >= 0, batch_size >= 1, epochs >= 0")
        if not 0 <= self.zoom_aug <= 1:
            raise ConfigError("zoom_aug must lie in [0, 1]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        self.strategy_config()

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(self.strategy, self.sink_mode, self.sink_k, self.aggregation, self.stop_grad_weights)


@dataclass
class LossReport:
    kl_value: float
    per_sample: list[float]
    step: int


@dataclass
class Example:
    tokens: np.ndarray
    query: np.ndarray
    label: np.ndarray

    @property
    def key(self):
        return (self.tokens.shape, len(self.query))


def kl_loss(label, pred) -> torch.Tensor:
    """``sum_i p_i log(p_i / max(pred_i, 1e-8))`` over the label support; batched over leading dims."""
    p = label.values if isinstance(label, GroundingLabel) else label
    q = pred.values if isinstance(pred, PatchDistribution) else pred
    p = torch.as_tensor(p, dtype=q.dtype if torch.is_tensor(q) else torch.float64)
    q = torch.as_tensor(q, dtype=p.dtype)
    if p.shape[-1] != q.shape[-1]:
        raise DimensionError(f"label length {p.shape[-1]} != prediction length {q.shape[-1]}")
    support = p > 0
    safe_p = torch.where(support, p, torch.ones_like(p))
    terms = p * (torch.log(safe_p) - torch.log(q.clamp_min(PRED_FLOOR)))
    return torch.where(support, terms, torch.zeros_like(terms)).sum(-1)


def augment_scene(scene: Scene, rng: np.random.Generator, permute: bool = True, flip: bool = True) -> Scene:
    """Same scene with attribute values relabeled by random permutations and optional mirror flips.

    The query is rewritten with the same permutation, so the referent is unchanged.
    """
    diff = get_difficulty(scene.difficulty)
    sizes = (diff.n_kinds, diff.n_colors, diff.n_glyphs)
    perms = [rng.permutation(n) if permute else np.arange(n) for n in sizes]
    cell_map = np.arange(diff.visual_vocab)
    for k, c, g in itertools.product(*(range(n) for n in sizes)):
        cell_map[diff.cell_id(k, c, g)] = diff.cell_id(perms[0][k], perms[1][c], perms[2][g])
    word_map = {VERB_ID: VERB_ID}
    for attr, perm in zip(ATTRIBUTES, perms):
        for v in range(len(perm)):
            word_map[diff.word_id(attr, v)] = diff.word_id(attr, int(perm[v]))
    cells = cell_map[scene.cells]
    W, H = scene.image_px
    fx, fy = (bool(rng.random() < 0.5), bool(rng.random() < 0.5)) if flip else (False, False)
    if fx:
        cells = cells[:, ::-1]
    if fy:
        cells = cells[::-1, :]

    def move(b: BBox) -> BBox:
        x1, x2 = (W - b.x2, W - b.x1) if fx else (b.x1, b.x2)
        y1, y2 = (H - b.y2, H - b.y1) if fy else (b.y1, b.y2)
        return BBox(x1, y1, x2, y2)

    widgets = [Widget(int(perms[0][w.kind]), int(perms[1][w.color]), int(perms[2][w.glyph]), move(w.bbox))
               for w in scene.widgets]
    return replace(scene, cells=np.ascontiguousarray(cells), widgets=widgets,
                   query_tokens=[word_map[t] for t in scene.query_tokens], gt_bbox=move(scene.gt_bbox))


def make_example(scene: Scene, cfg: TrainConfig, rng: np.random.Generator | None = None) -> Example:
    """Full render of ``scene``, or with probability ``zoom_aug`` a zoomed crop near the target.

    With an ``rng`` the scene is first augmented per ``permute_attrs`` / ``flip``.
    """
    if rng is not None and (cfg.permute_attrs or cfg.flip):
        scene = augment_scene(scene, rng, cfg.permute_attrs, cfg.flip)
    if rng is not None and cfg.zoom_aug > 0 and rng.random() < cfg.zoom_aug:
        grid = scene.grid()
        crop_px = cfg.aug_crop_patches * grid.patch_px
        cx, cy = scene.gt_bbox.center
        half = crop_px / 2
        jx, jy = rng.uniform(-0.75 * half, 0.75 * half, size=2)
        center = (min(max(cx + jx, 0), grid.image_w), min(max(cy + jy, 0), grid.image_h))
        r = render(scene, RenderSpec(crop=plan_crop(grid, center, crop_px, cfg.aug_zoom)))
        local = bbox_to_local(scene.gt_bbox, r.region)
        if local.area > 0:
            lab = patch_labels(r.grid, local, cfg.alpha, cfg.weighted_labels)
            return Example(r.tokens, np.asarray(scene.query_tokens), lab.values)
    r = render(scene)
    lab = patch_labels(r.grid, scene.gt_bbox, cfg.alpha, cfg.weighted_labels)
    return Example(r.tokens, np.asarray(scene.query_tokens), lab.values)


def batch_loss(model: GroundingTransformer, batch: list[Example], strategy: StrategyConfig):
    """Mean KL over ``batch`` and the per-sample values (in batch order).

    Samples are grouped by (grid shape, query length) so each group runs as one
    unpadded forward pass.
    """
    groups = defaultdict(list)
    for i, ex in enumerate(batch):
        groups[ex.key].append(i)
    dtype = next(model.parameters()).dtype
    per_sample = [None] * len(batch)
    total = 0.0
    for idx in groups.values():
        vis = torch.as_tensor(np.stack([batch[i].tokens for i in idx]), dtype=torch.long)
        qry = torch.as_tensor(np.stack([batch[i].query for i in idx]), dtype=torch.long).reshape(len(idx), -1)
        lab = torch.as_tensor(np.stack([batch[i].label for i in idx]), dtype=dtype)
        trace = model(vis, qry, query_rows=strategy.needs_query_rows)
        dist, _ = ground(trace, strategy)
        kl = kl_loss(lab, dist.values)
        total = total + kl.sum()
        for j, i in enumerate(idx):
            per_sample[i] = kl[j]
    return total / len(batch), per_sample


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)


def train_step(model, batch: list[Example], cfg: TrainConfig, optimizer=None, step: int = 0) -> LossReport:
    optimizer = optimizer or make_optimizer(model, cfg)
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss, per_sample = batch_loss(model, batch, cfg.strategy_config())
    if not torch.isfinite(loss):
        optimizer.zero_grad(set_to_none=True)
        raise NonFiniteLossError(f"non-finite loss {loss.item()} at step {step}")
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return LossReport(float(loss.detach()), [float(v.detach()) for v in per_sample], step)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)


def train(model, scenes: list[Scene], cfg: TrainConfig, *, eval_fn=None, log_path=None) -> TrainResult:
    """Epoch loop over ``scenes`` with a seeded shuffle.

    ``eval_fn(model) -> accuracy`` is called every ``eval_every`` steps when set.
    Telemetry lines ``{"step", "loss", "eval_accuracy"}`` go to ``log_path``.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    total = cfg.epochs * math.ceil(len(scenes) / cfg.batch_size)
    if cfg.lr_schedule == "cosine":
        for group in optimizer.param_groups:
            group["lr_base"] = group["lr"]
    augmenting = cfg.zoom_aug > 0 or cfg.permute_attrs or cfg.flip
    static = None if augmenting else [make_example(s, cfg) for s in scenes]
    result = TrainResult()
    fh = open(log_path, "a") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(scenes))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start: start + cfg.batch_size]
                batch = [static[i] for i in idx] if static else [make_example(scenes[i], cfg, rng) for i in idx]
                if cfg.lr_schedule == "cosine":
                    for group in optimizer.param_groups:
                        group["lr"] = group["lr_base"] * 0.5 * (1 + math.cos(math.pi * step / total))
                report = train_step(model, batch, cfg, optimizer, step)
                step += 1
                result.losses.append(report.kl_value)
                acc = None
                if eval_fn is not None and cfg.eval_every and step % cfg.eval_every == 0:
                    acc = eval_fn(model)
                    result.evals.append((step, acc))
                if fh:
                    fh.write(json.dumps({"step": step, "loss": report.kl_value, "eval_accuracy": acc}) + "\n")
            log.info("epoch %d loss %.4f", epoch, np.mean(result.losses[-max(1, len(order) // cfg.batch_size):]))
    finally:
        if fh:
            fh.close()
    return result


# -- gradient check -------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    worst_rel_error: float
    worst_tensor: str
    per_tensor: dict[str, float]
    regime: str


def _sample_loss(model, sample, strategy: StrategyConfig, frozen=None):
    tokens, query, label = sample
    dtype = next(model.parameters()).dtype
    vis = torch.as_tensor(tokens, dtype=torch.long)[None]
    qry = torch.as_tensor(query, dtype=torch.long).reshape(1, -1)
    trace = model(vis, qry, query_rows=strategy.needs_query_rows)
    if frozen is not None:
        dist = aggregate(trace.anchor_attn, frozen)
    else:
        dist, _ = ground(trace, strategy)
    return kl_loss(torch.as_tensor(label, dtype=dtype)[None], dist.values).sum()


def _frozen_weights(model, sample, strategy: StrategyConfig):
    tokens, query, _ = sample
    with torch.no_grad():
        trace = model(torch.as_tensor(tokens)[None], torch.as_tensor(query).reshape(1, -1),
                      query_rows=strategy.needs_query_rows)
        sinks = None
        if strategy.strategy == "sink":
            sinks = select_sinks(visual_sink_scores(trace), strategy.sink_mode, strategy.sink_k)
        return head_weights(trace, strategy=strategy.strategy, sinks=sinks).w.detach()


def grad_check(model, sample, strategy: StrategyConfig | None = None, tolerance: float = 1e-4, *,
               coords_per_tensor: int = 6, step: float = 1e-3, floor: float = 1e-6, seed: int = 0,
               richardson: bool = True, corrupt=None) -> GradCheckReport:
    """Compare autograd against central differences for every parameter tensor.

    ``sample`` is ``(visual tokens (R, C), query ids, label over R*C patches)``.
    The check runs on a float64 copy. With ``stop_grad_weights`` the head
    weights are frozen at the base point for both sides, so the finite
    differences measure the same (weights-held-constant) function.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. With ``richardson``
    the central differences at ``step`` and ``step / 2`` are combined as
    ``(4 D(h/2) - D(h)) / 3``, cancelling the O(h^2) truncation term that
    otherwise dominates on small gradient coordinates. ``corrupt(name, grad)``
    may perturb analytic gradients as a negative control.
    """
    strategy = strategy or StrategyConfig()
    m = copy.deepcopy(model).double()
    m.eval()
    frozen = _frozen_weights(m, sample, strategy) if strategy.stop_grad_weights and strategy.aggregation == "anchor" else None
    m.zero_grad()
    _sample_loss(m, sample, strategy, frozen).backward()
    rng = np.random.default_rng(seed)
    per_tensor = {}
    worst, worst_name = 0.0, ""
    for name, p in m.named_parameters():
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        if corrupt is not None:
            analytic = corrupt(name, analytic)
        flat = p.data.view(-1)
        picks = rng.choice(flat.numel(), size=min(coords_per_tensor, flat.numel()), replace=False)
        err_max = 0.0
        for j in picks:
            orig = flat[j].item()

            def central(h):
                with torch.no_grad():
                    flat[j] = orig + h
                    up = _sample_loss(m, sample, strategy, frozen).item()
                    flat[j] = orig - h
                    down = _sample_loss(m, sample, strategy, frozen).item()
                    flat[j] = orig
                return (up - down) / (2 * h)

            numeric = central(step)
            if richardson:
                numeric = (4 * central(step / 2) - numeric) / 3
            a = analytic.view(-1)[j].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            err_max = max(err_max, err)
        per_tensor[name] = err_max
        if err_max > worst:
            worst, worst_name = err_max, name
    regime = "stop_grad" if strategy.stop_grad_weights else "through_weights"
    return GradCheckReport(worst <= tolerance, worst, worst_name, per_tensor, regime)


def accuracy_fn(scenes: list[Scene], strategy: StrategyConfig):
    """Callable computing one-step centre-hit accuracy on ``scenes``."""
    from .harness import ground_one_step

    def _acc(model):
        hits = sum(ground_one_step(model, s, strategy).hit for s in scenes)
        return hits / max(len(scenes), 1)

    return _acc


def gradcheck_sample(model_cfg, rows: int = 4, cols: int = 4, seed: int = 0, alpha: float = DEFAULT_ALPHA):
    """Random ``(tokens, query, label)`` on a ``rows x cols`` grid for :func:`grad_check`."""
    from .geometry import PatchGrid

    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, model_cfg.visual_vocab, size=(rows, cols))
    query = rng.integers(0, model_cfg.text_vocab, size=min(3, model_cfg.max_query_len))
    grid = PatchGrid(cols * 8, rows * 8, 8)
    x1, y1 = rng.uniform(0, cols * 8 - 4), rng.uniform(0, rows * 8 - 4)
    box = BBox(x1, y1, x1 + rng.uniform(3, 12), y1 + rng.uniform(3, 12))
    label = patch_labels(grid, box, alpha).values
    return tokens, query, label
