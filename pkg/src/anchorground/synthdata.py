"""Procedural GUI-like scenes, patch-token rendering and the line-delimited corpus.

A scene is a fine grid of cells. Every widget paints its cells with one id that
encodes ``(kind, color, glyph)``; background is 0. Rendering pools
``cells_per_patch x cells_per_patch`` blocks into one token: the strict-majority
cell id, else the reserved MIXED id. Crops are re-rendered at
``cells_per_patch / zoom`` granularity, which is how the second inference pass
recovers detail lost to coarse pooling.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorpusError, DomainError, GenerationError
from .geometry import BBox, CropRegion, PatchGrid

SCENE_FORMAT = "scene/1"
MANIFEST_FORMAT = "manifest/1"
ATTRIBUTES = ("kind", "color", "glyph")


@dataclass(frozen=True)
class Difficulty:
    name: str
    fine_w: int
    fine_h: int
    cell_px: int
    cells_per_patch: int
    n_widgets: tuple[int, int]
    widget_w: tuple[int, int]
    widget_h: tuple[int, int]
    n_kinds: int = 4
    n_colors: int = 4
    n_glyphs: int = 4
    share_prob: float = 0.7
    gap: int = 1

    @property
    def n_widget_ids(self) -> int:
        return self.n_kinds * self.n_colors * self.n_glyphs

    @property
    def mixed_id(self) -> int:
        return 1 + self.n_widget_ids

    @property
    def visual_vocab(self) -> int:
        return self.mixed_id + 1

    @property
    def text_vocab(self) -> int:
        return 1 + self.n_kinds + self.n_colors + self.n_glyphs

    @property
    def image_px(self) -> tuple[int, int]:
        return self.fine_w * self.cell_px, self.fine_h * self.cell_px

    def grid(self) -> PatchGrid:
        w, h = self.image_px
        return PatchGrid(w, h, self.cells_per_patch * self.cell_px)

    def cell_id(self, kind: int, color: int, glyph: int) -> int:
        return 1 + (kind * self.n_colors + color) * self.n_glyphs + glyph

    def word_id(self, attribute: str, value: int) -> int:
        offset = {"kind": 1, "color": 1 + self.n_kinds, "glyph": 1 + self.n_kinds + self.n_colors}
        return offset[attribute] + value


VERB_ID = 0

DIFFICULTIES = {
    # widgets span 2-3.5 patches: every target has a fully covered interior patch
    "easy": Difficulty("easy", 56, 56, 8, 4, n_widgets=(3, 6), widget_w=(8, 14), widget_h=(8, 12)),
    # widgets are patch-sized or smaller, so coarse pooling blurs their extent
    "hard": Difficulty("hard", 112, 112, 8, 8, n_widgets=(6, 12), widget_w=(6, 14), widget_h=(5, 10)),
}


def get_difficulty(name: str | Difficulty) -> Difficulty:
    if isinstance(name, Difficulty):
        return name
    try:
        return DIFFICULTIES[name]
    except KeyError:
        raise DomainError(f"unknown difficulty {name!r}; expected one of {sorted(DIFFICULTIES)}") from None


@dataclass(frozen=True)
class Widget:
    kind: int
    color: int
    glyph: int
    bbox: BBox

    def attrs(self) -> tuple[int, int, int]:
        return (self.kind, self.color, self.glyph)


@dataclass
class Scene:
    seed: int
    difficulty: str
    fine_w: int
    fine_h: int
    cell_px: int
    cells_per_patch: int
    cells: np.ndarray
    widgets: list[Widget]
    target: int
    query_tokens: list[int]
    gt_bbox: BBox
    scene_id: int = 0
    split: str = "train"
    query_attrs: tuple[str, ...] = field(default=())

    @property
    def image_px(self) -> tuple[int, int]:
        return self.fine_w * self.cell_px, self.fine_h * self.cell_px

    def grid(self) -> PatchGrid:
        w, h = self.image_px
        return PatchGrid(w, h, self.cells_per_patch * self.cell_px)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return scene_to_record(self) == scene_to_record(other)


@dataclass(frozen=True)
class RenderSpec:
    crop: CropRegion | None = None
    cells_per_patch: int | None = None


@dataclass
class Rendered:
    tokens: np.ndarray  # (rows, cols) int64
    grid: PatchGrid
    region: CropRegion | None  # cell-aligned crop actually rendered, with effective zoom


def referents(widgets: list[Widget], query: dict[str, int]) -> list[int]:
    """Indices of every widget matching all attribute constraints in ``query``."""
    return [i for i, w in enumerate(widgets) if all(getattr(w, a) == v for a, v in query.items())]


def _place(rng, diff: Difficulty, occupied: np.ndarray):
    for _ in range(200):
        w = int(rng.integers(diff.widget_w[0], diff.widget_w[1] + 1))
        h = int(rng.integers(diff.widget_h[0], diff.widget_h[1] + 1))
        x = int(rng.integers(0, diff.fine_w - w + 1))
        y = int(rng.integers(0, diff.fine_h - h + 1))
        g = diff.gap
        if not occupied[max(y - g, 0): y + h + g, max(x - g, 0): x + w + g].any():
            occupied[y: y + h, x: x + w] = True
            return x, y, w, h
    return None


def gen_scene(seed: int, difficulty: str | Difficulty = "easy", *, target_filter=None, max_retries: int = 50) -> Scene:
    """Deterministic scene for ``seed``.

    ``target_filter(kind, color, glyph) -> bool`` restricts the referent's
    attributes (used for held-out attribute combinations).
    """
    diff = get_difficulty(difficulty)
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        n = int(rng.integers(diff.n_widgets[0], diff.n_widgets[1] + 1))
        target = tuple(int(rng.integers(m)) for m in (diff.n_kinds, diff.n_colors, diff.n_glyphs))
        if target_filter is not None and not target_filter(*target):
            continue
        attrs = [target]
        for _ in range(n - 1):
            while True:
                a = [int(rng.integers(m)) for m in (diff.n_kinds, diff.n_colors, diff.n_glyphs)]
                if rng.random() < diff.share_prob:
                    shared = rng.choice(3, size=int(rng.integers(1, 3)), replace=False)
                    for j in shared:
                        a[j] = target[j]
                if tuple(a) != target:
                    break
            attrs.append(tuple(a))
        occupied = np.zeros((diff.fine_h, diff.fine_w), dtype=bool)
        cells = np.zeros((diff.fine_h, diff.fine_w), dtype=np.int64)
        widgets = []
        for a in attrs:
            spot = _place(rng, diff, occupied)
            if spot is None:
                break
            x, y, w, h = spot
            cells[y: y + h, x: x + w] = diff.cell_id(*a)
            px = diff.cell_px
            widgets.append(Widget(*a, BBox(x * px, y * px, (x + w) * px, (y + h) * px)))
        if len(widgets) < len(attrs):
            continue
        order = rng.permutation(len(widgets))
        widgets = [widgets[i] for i in order]
        target_idx = int(np.flatnonzero(order == 0)[0])
        chosen = _minimal_query(rng, widgets, target_idx)
        if chosen is None:
            continue
        tw = widgets[target_idx]
        tokens = [VERB_ID] + [diff.word_id(a, getattr(tw, a)) for a in chosen]
        return Scene(seed, diff.name, diff.fine_w, diff.fine_h, diff.cell_px, diff.cells_per_patch,
                     cells, widgets, target_idx, tokens, tw.bbox, query_attrs=chosen)
    raise GenerationError(f"seed {seed}: no scene with a unique referent after {max_retries} retries")


def _minimal_query(rng, widgets, target_idx):
    tw = widgets[target_idx]
    for size in (1, 2, 3):
        options = [c for c in itertools.combinations(ATTRIBUTES, size)
                   if referents(widgets, {a: getattr(tw, a) for a in c}) == [target_idx]]
        if options:
            return options[int(rng.integers(len(options)))]
    return None


def decode_query(scene: Scene, diff: Difficulty | None = None) -> dict[str, int]:
    """Attribute constraints expressed by the scene's query tokens."""
    diff = diff or get_difficulty(scene.difficulty)
    out = {}
    for t in scene.query_tokens[1:]:
        t -= 1
        for attr, m in zip(ATTRIBUTES, (diff.n_kinds, diff.n_colors, diff.n_glyphs)):
            if t < m:
                out[attr] = t
                break
            t -= m
    return out


def pool_cells(cells: np.ndarray, cells_per_patch: int, mixed_id: int, vocab: int) -> np.ndarray:
    """Majority pooling with a MIXED fallback; ragged border blocks use their own cell count."""
    h, w = cells.shape
    rows, cols = -(-h // cells_per_patch), -(-w // cells_per_patch)
    r = np.arange(h) // cells_per_patch
    c = np.arange(w) // cells_per_patch
    patch = (r[:, None] * cols + c[None, :]).ravel()
    counts = np.zeros((rows * cols, vocab), dtype=np.int64)
    np.add.at(counts, (patch, cells.ravel()), 1)
    best = counts.argmax(1)
    majority = 2 * counts.max(1) > counts.sum(1)
    return np.where(majority, best, mixed_id).reshape(rows, cols)


def render(scene: Scene, spec: RenderSpec = RenderSpec()) -> Rendered:
    diff = get_difficulty(scene.difficulty)
    cpp = spec.cells_per_patch or scene.cells_per_patch
    px = scene.cell_px
    if spec.crop is None:
        tokens = pool_cells(scene.cells, cpp, diff.mixed_id, diff.visual_vocab)
        w, h = scene.image_px
        return Rendered(tokens, PatchGrid(w, h, cpp * px), None)
    crop = spec.crop
    fine_cpp = max(1, int(round(cpp / crop.zoom)))
    zoom = cpp / fine_cpp
    size = int(round(crop.size_px / px))
    ox, oy = int(round(crop.origin_x / px)), int(round(crop.origin_y / px))
    if size < 1 or ox < 0 or oy < 0 or ox + size > scene.fine_w or oy + size > scene.fine_h:
        raise DomainError(f"crop {crop} outside the {scene.fine_w}x{scene.fine_h}-cell scene")
    sub = scene.cells[oy: oy + size, ox: ox + size]
    tokens = pool_cells(sub, fine_cpp, diff.mixed_id, diff.visual_vocab)
    region = CropRegion(ox * px, oy * px, size * px, zoom)
    frame = size * px * cpp / fine_cpp
    return Rendered(tokens, PatchGrid(frame, frame, cpp * px), region)


# -- corpus -------------------------------------------------------------------

def _rle(values: np.ndarray) -> list[list[int]]:
    flat = values.ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    return [[int(flat[s]), int(n)] for s, n in zip(starts, lengths)]


def _unrle(runs, shape) -> np.ndarray:
    flat = np.concatenate([np.full(n, v, dtype=np.int64) for v, n in runs]) if runs else np.zeros(0, np.int64)
    if flat.size != shape[0] * shape[1]:
        raise CorpusError(f"run-length cells decode to {flat.size} values, expected {shape[0] * shape[1]}")
    return flat.reshape(shape)


def _box_out(b: BBox):
    return [int(v) if float(v).is_integer() else float(v) for v in b.as_list()]


def scene_to_record(scene: Scene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "id": scene.scene_id,
        "split": scene.split,
        "seed": scene.seed,
        "difficulty": scene.difficulty,
        "fine_w": scene.fine_w,
        "fine_h": scene.fine_h,
        "cell_px": scene.cell_px,
        "cells_per_patch": scene.cells_per_patch,
        "cells": _rle(scene.cells),
        "widgets": [{"kind": w.kind, "color": w.color, "glyph": w.glyph, "bbox": _box_out(w.bbox)}
                    for w in scene.widgets],
        "target": scene.target,
        "query_attrs": list(scene.query_attrs),
        "query_tokens": list(scene.query_tokens),
        "gt_bbox": _box_out(scene.gt_bbox),
    }


def scene_from_record(rec: dict) -> Scene:
    if rec.get("format") != SCENE_FORMAT:
        raise CorpusError(f"unsupported scene format {rec.get('format')!r}")
    try:
        return Scene(
            seed=rec["seed"], difficulty=rec["difficulty"], fine_w=rec["fine_w"], fine_h=rec["fine_h"],
            cell_px=rec["cell_px"], cells_per_patch=rec["cells_per_patch"],
            cells=_unrle(rec["cells"], (rec["fine_h"], rec["fine_w"])),
            widgets=[Widget(w["kind"], w["color"], w["glyph"], BBox(*w["bbox"])) for w in rec["widgets"]],
            target=rec["target"], query_tokens=list(rec["query_tokens"]), gt_bbox=BBox(*rec["gt_bbox"]),
            scene_id=rec["id"], split=rec["split"], query_attrs=tuple(rec.get("query_attrs", ())),
        )
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"malformed scene record: {exc}") from exc


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def serialize_scene(scene: Scene) -> str:
    return dumps(scene_to_record(scene))


def parse_scene(line: str) -> Scene:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"corpus line is not valid JSON: {exc}") from exc
    return scene_from_record(rec)


def load_corpus(path, split: str | None = None) -> list[Scene]:
    scenes = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                s = parse_scene(line)
                if split is None or s.split == split:
                    scenes.append(s)
    return scenes


def holdout_combo(kind: int, color: int) -> bool:
    """Kind/color pairs reserved for evaluation referents when held-out combos are on."""
    return (kind + color) % 4 == 0


def _chi_square(table: np.ndarray) -> dict:
    table = table[:, table.sum(0) > 0]
    total = table.sum()
    expected = np.outer(table.sum(1), table.sum(0)) / total
    stat = float(((table - expected) ** 2 / np.where(expected > 0, expected, 1)).sum())
    dof = (table.shape[0] - 1) * (table.shape[1] - 1)
    return {"statistic": round(stat, 6), "dof": int(dof)}


def split_counts(count: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, int]:
    n_train = int(round(count * fractions[0]))
    n_val = int(round(count * fractions[1]))
    return {"train": n_train, "val": n_val, "test": count - n_train - n_val}


def gen_dataset(count: int, seed: int, difficulty: str = "easy", out_path=None, *,
                fractions=(0.8, 0.1, 0.1), holdout_combos: bool = False) -> tuple[Path, dict]:
    """Write ``count`` scenes as JSON lines plus a sibling ``.manifest.json``.

    Scene ``i`` uses seed ``seed + i``; splits are contiguous index (hence seed)
    ranges, so they are disjoint by construction.
    """
    diff = get_difficulty(difficulty)
    out_path = Path(out_path)
    sizes = split_counts(count, fractions)
    manifest = {"format": MANIFEST_FORMAT, "scene_format": SCENE_FORMAT, "seed": seed, "count": count,
                "difficulty": diff.name, "holdout_combos": holdout_combos, "splits": {}}
    combo_counts = {name: np.zeros(diff.n_kinds * diff.n_colors, dtype=np.int64) for name in sizes}
    idx = 0
    with open(out_path, "w") as fh:
        for name in ("train", "val", "test"):
            digest = hashlib.sha256()
            start = idx
            for _ in range(sizes[name]):
                flt = None
                if holdout_combos:
                    held = name != "train"
                    flt = (lambda k, c, g, held=held: holdout_combo(k, c) == held)
                scene = gen_scene(seed + idx, diff, target_filter=flt)
                scene.scene_id, scene.split = idx, name
                line = serialize_scene(scene) + "\n"
                fh.write(line)
                digest.update(line.encode())
                tw = scene.widgets[scene.target]
                combo_counts[name][tw.kind * diff.n_colors + tw.color] += 1
                idx += 1
            manifest["splits"][name] = {"count": sizes[name], "seed_range": [seed + start, seed + idx],
                                        "sha256": digest.hexdigest()}
    if sizes["train"] and sizes["val"]:
        manifest["referent_chi_square_train_vs_val"] = _chi_square(
            np.stack([combo_counts["train"], combo_counts["val"]]))
    manifest_path = manifest_path_for(out_path)
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return out_path, manifest


def manifest_path_for(corpus_path) -> Path:
    p = Path(corpus_path)
    return p.with_name(p.stem + ".manifest.json")
