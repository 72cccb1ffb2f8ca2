"""Evaluation: one-/two-step grounding, Relax@k, recovered/lost accounting, ablations and exports."""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DomainError, MissingRowsError
from .geometry import PatchGrid, map_to_global, min_relax, plan_crop
from .grounding import StrategyConfig, ground, predict_click, visual_sink_scores
from .labeling import GroundingLabel
from .synthdata import RenderSpec, Scene, dumps, render

RELAX_CAP = 8
# Relax@k columns: offsets in (previous bound, k] patches
RELAX_BUCKETS = ((1, 1), (2, 2), (3, 5))


@dataclass
class EvalRecord:
    scene_id: int
    step: str
    point: tuple[float, float]
    hit: bool
    min_relax: float

    def to_json(self) -> dict:
        d = asdict(self)
        d["point"] = list(self.point)
        d["min_relax"] = None if math.isinf(self.min_relax) else int(self.min_relax)
        return d


@dataclass
class TwoStepReport:
    n: int
    accuracy_one: float
    accuracy_two: float
    recovered: int
    lost: int
    relax_one: dict[str, int] = field(default_factory=dict)
    relax_two: dict[str, int] = field(default_factory=dict)


def _predict(model, tokens: np.ndarray, query, grid: PatchGrid, strategy: StrategyConfig, click_mode: str):
    with torch.no_grad():
        vis = torch.as_tensor(tokens, dtype=torch.long)[None]
        qry = torch.as_tensor(np.asarray(query), dtype=torch.long).reshape(1, -1)
        trace = model(vis, qry, query_rows=strategy.needs_query_rows)
        dist, _ = ground(trace, strategy, grid)
    return predict_click(dist.values[0].double().numpy(), grid, click_mode), dist


def make_record(scene: Scene, step: str, point) -> EvalRecord:
    grid = scene.grid()
    k = min_relax(grid, scene.gt_bbox, point, RELAX_CAP)
    return EvalRecord(scene.scene_id, step, (float(point[0]), float(point[1])), k == 0, k)


def ground_one_step(model, scene: Scene, strategy: StrategyConfig = StrategyConfig(), click_mode: str = "argmax") -> EvalRecord:
    r = render(scene)
    point, _ = _predict(model, r.tokens, scene.query_tokens, r.grid, strategy, click_mode)
    return make_record(scene, "one", point)


def default_crop_px(scene: Scene, patches: int = 4) -> float:
    return patches * scene.cells_per_patch * scene.cell_px


def ground_two_step(model, scene: Scene, strategy: StrategyConfig = StrategyConfig(), crop_px: float | None = None,
                    zoom: float = 2.0, click_mode: str = "argmax") -> tuple[EvalRecord, EvalRecord]:
    """Ground on the full render, then again on a zoomed crop centred on the first click."""
    if zoom < 1:
        raise DomainError("zoom must be >= 1")
    first = ground_one_step(model, scene, strategy, click_mode)
    crop_px = crop_px or default_crop_px(scene)
    region = plan_crop(scene.grid(), first.point, crop_px, zoom)
    r = render(scene, RenderSpec(crop=region))
    local, _ = _predict(model, r.tokens, scene.query_tokens, r.grid, strategy, click_mode)
    point = map_to_global(local, r.region)
    return first, make_record(scene, "two", point)


def relax_counts(records: list[EvalRecord]) -> dict[str, int]:
    out = {}
    for lo, hi in RELAX_BUCKETS:
        out[f"relax@{hi}"] = sum(1 for r in records if lo <= r.min_relax <= hi)
    out["total"] = sum(out.values())
    out["beyond"] = sum(1 for r in records if r.min_relax > RELAX_BUCKETS[-1][1])
    return out


def relax_histogram(records: list[EvalRecord]) -> dict[str, int]:
    hist = {str(k): 0 for k in range(RELAX_CAP + 1)}
    hist["inf"] = 0
    for r in records:
        hist["inf" if math.isinf(r.min_relax) else str(int(r.min_relax))] += 1
    return hist


def two_step_report(pairs: list[tuple[EvalRecord, EvalRecord]]) -> TwoStepReport:
    n = len(pairs)
    one = [a for a, _ in pairs]
    two = [b for _, b in pairs]
    recovered = sum(1 for a, b in pairs if not a.hit and b.hit)
    lost = sum(1 for a, b in pairs if a.hit and not b.hit)
    return TwoStepReport(
        n=n,
        accuracy_one=sum(r.hit for r in one) / n,
        accuracy_two=sum(r.hit for r in two) / n,
        recovered=recovered,
        lost=lost,
        relax_one=relax_counts(one),
        relax_two=relax_counts(two),
    )


def evaluate(model, scenes: list[Scene], strategy: StrategyConfig = StrategyConfig(), *, two_step: bool = False,
             crop_px: float | None = None, zoom: float = 2.0, click_mode: str = "argmax") -> dict:
    """Metrics over ``scenes``; records are sorted by scene id so corpus order does not matter."""
    if not scenes:
        raise DomainError("cannot evaluate an empty corpus")
    scenes = sorted(scenes, key=lambda s: s.scene_id)
    model.eval()
    if two_step:
        pairs = [ground_two_step(model, s, strategy, crop_px, zoom, click_mode) for s in scenes]
        records = [a for a, _ in pairs]
    else:
        pairs = None
        records = [ground_one_step(model, s, strategy, click_mode) for s in scenes]
    n = len(records)
    metrics = {
        "format": "eval/1",
        "n": n,
        "strategy": asdict(strategy),
        "accuracy": sum(r.hit for r in records) / n,
        "relax": relax_counts(records),
        "relax_histogram": relax_histogram(records),
        "records": [r.to_json() for r in records],
    }
    if pairs is not None:
        rep = two_step_report(pairs)
        metrics["two_step"] = {
            "zoom": zoom,
            "crop_px": crop_px,
            "accuracy_two": rep.accuracy_two,
            "recovered": rep.recovered,
            "lost": rep.lost,
            "relax_two": rep.relax_two,
            "relax_histogram_two": relax_histogram([b for _, b in pairs]),
            "records_two": [b.to_json() for _, b in pairs],
        }
    return metrics


def format_table(metrics: dict) -> str:
    """Human-readable one-/two-step table with Relax@k, recovered and lost columns."""
    head = f"{'Model':<14}{'Relax@1':>9}{'Relax@2':>9}{'Relax@5':>9}{'Total':>8}{'Recovered':>11}{'Lost':>6}{'Acc.':>9}"
    rx = metrics["relax"]
    lines = [head, "-" * len(head),
             f"{'1-step':<14}{rx['relax@1']:>9}{rx['relax@2']:>9}{rx['relax@5']:>9}{rx['total']:>8}"
             f"{'-':>11}{'-':>6}{100 * metrics['accuracy']:>9.2f}"]
    ts = metrics.get("two_step")
    if ts:
        r2 = ts["relax_two"]
        label = f"2-step x{ts['zoom']:g}"
        lines.append(f"{label:<14}{r2['relax@1']:>9}{r2['relax@2']:>9}{r2['relax@5']:>9}{r2['total']:>8}"
                     f"{ts['recovered']:>11}{ts['lost']:>6}{100 * ts['accuracy_two']:>9.2f}")
    return "\n".join(lines)


def uniform_random_baseline(scenes: list[Scene]) -> float:
    """Expected hit rate of a click at a uniformly random patch center."""
    rates = []
    for s in scenes:
        grid = s.grid()
        centers = grid.patch_centers()
        b = s.gt_bbox
        inside = (centers[:, 0] >= b.x1) & (centers[:, 0] < b.x2) & (centers[:, 1] >= b.y1) & (centers[:, 1] < b.y2)
        rates.append(inside.sum() / grid.size)
    return float(np.mean(rates))


# -- exports ------------------------------------------------------------------------

def export_heatmap(dist, path, grid: PatchGrid | None = None) -> tuple[Path, Path]:
    """Binary PGM (P5), one pixel per patch, max patch mapped to 255; raw values in a JSON sidecar."""
    if isinstance(dist, GroundingLabel):
        values, grid = np.asarray(dist.values, dtype=np.float64), dist.grid
    elif hasattr(dist, "numpy"):
        values, grid = dist.numpy().reshape(-1), grid or dist.grid
    else:
        values = np.asarray(dist, dtype=np.float64).reshape(-1)
    if grid is None or grid.size != len(values):
        raise DomainError("heatmap export needs a grid matching the distribution")
    top = values.max()
    pixels = np.zeros(len(values), dtype=np.uint8) if top <= 0 else np.rint(values / top * 255).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.cols} {grid.rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(dumps({"format": "heatmap/1", "rows": grid.rows, "cols": grid.cols,
                              "values": [float(v) for v in values]}) + "\n")
    return path, sidecar


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise DomainError("not a binary PGM")
    cols, rows = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


def token_correlation_report(trace, layout=None, path=None, query_tokens=None) -> dict:
    """Per query token: hidden-state (cosine) and attention-derived visual correlation, each summing to 1."""
    if trace.query_attn is None:
        raise MissingRowsError("token correlation report needs query attention rows")
    layout = layout or trace.layout
    if layout.query_len == 0:
        raise DomainError("empty query")
    emb = visual_sink_scores(trace, layout).summed.reshape(-1, layout.query_len)[0].double()
    att = trace.query_attn.sum(-1).reshape(-1, *trace.query_attn.shape[-4:-1])[0].sum((0, 1)).double()

    def norm(v):
        v = v.clamp_min(0)
        s = v.sum()
        return (v / s if s > 0 else torch.full_like(v, 1 / len(v))).tolist()

    emb_raw = emb.tolist()
    report = {
        "format": "token_correlation/1",
        "tokens": list(query_tokens) if query_tokens is not None else list(range(layout.query_len)),
        "embedding": norm(emb),
        "attention": norm(att),
        "embedding_raw": emb_raw,
        "attention_raw": att.tolist(),
    }
    if path is not None:
        Path(path).write_text(json.dumps(report, indent=2) + "\n")
    return report


# -- ablation -----------------------------------------------------------------------------

@dataclass(frozen=True)
class Arm:
    name: str
    strategy: str = "sink"
    sink_mode: str = "global"
    sink_k: int = 1
    aggregation: str = "anchor"
    weighted_labels: bool = True

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(self.strategy, self.sink_mode, self.sink_k, self.aggregation)


DEFAULT_ARMS = (
    Arm("vanilla", strategy="uniform", aggregation="vanilla"),
    Arm("anchor_uniform", strategy="uniform"),
    Arm("all_query", strategy="all_query"),
    Arm("anchor_weighted", strategy="anchor"),
    Arm("sink_global_top1", strategy="sink", sink_mode="global"),
    Arm("sink_layerwise_top1", strategy="sink", sink_mode="layerwise"),
    Arm("soft", strategy="soft"),
    Arm("sink_global_top1_flat", strategy="sink", sink_mode="global", weighted_labels=False),
)


def parse_arms(text: str) -> list[Arm]:
    """One arm per line: ``name=... strategy=... [sink_mode=..] [sink_k=..] [aggregation=..] [labels=weighted|flat]``."""
    arms = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kv = dict(tok.split("=", 1) for tok in line.split())
        labels = kv.pop("labels", "weighted")
        if labels not in ("weighted", "flat"):
            raise DomainError(f"labels must be weighted or flat, got {labels!r}")
        kw = {k: (int(v) if k == "sink_k" else v) for k, v in kv.items()}
        arm = Arm(weighted_labels=labels == "weighted", **kw)
        arm.strategy_config()
        arms.append(arm)
    if not arms:
        raise DomainError("no arms given")
    return arms


def ablation_run(train_scenes, eval_scenes, arms, seeds, model_config, train_config, *, train_fn=None) -> dict:
    """Train one model per (arm, seed) and tabulate mean and spread (max - min) of accuracy per arm."""
    from dataclasses import replace

    from .model import init_model
    from .training import train

    rows = []
    for arm in arms:
        accs = []
        for seed in seeds:
            tc = replace(train_config, strategy=arm.strategy, sink_mode=arm.sink_mode, sink_k=arm.sink_k,
                         aggregation=arm.aggregation, weighted_labels=arm.weighted_labels, seed=seed)
            model = init_model(replace(model_config, seed=seed))
            (train_fn or train)(model, train_scenes, tc)
            accs.append(evaluate(model, eval_scenes, arm.strategy_config())["accuracy"])
        rows.append({"arm": arm.name, "config": asdict(arm), "accuracies": accs,
                     "mean": statistics.fmean(accs), "spread": max(accs) - min(accs)})
    by = {r["arm"]: r["mean"] for r in rows}
    trends = {}
    if "sink_global_top1" in by and "anchor_uniform" in by:
        trends["sink_ge_uniform"] = by["sink_global_top1"] >= by["anchor_uniform"]
    if "sink_global_top1" in by and "sink_global_top1_flat" in by:
        trends["weighted_ge_flat"] = by["sink_global_top1"] >= by["sink_global_top1_flat"]
    return {"format": "ablation/1", "seeds": list(seeds), "rows": rows, "trends": trends}


def format_ablation(table: dict) -> str:
    lines = [f"{'arm':<24}{'mean acc':>10}{'spread':>9}  per-seed"]
    for r in table["rows"]:
        per = " ".join(f"{a:.3f}" for a in r["accuracies"])
        lines.append(f"{r['arm']:<24}{r['mean']:>10.4f}{r['spread']:>9.4f}  {per}")
    for k, v in table.get("trends", {}).items():
        lines.append(f"trend {k}: {'yes' if v else 'no'}")
    return "\n".join(lines)


