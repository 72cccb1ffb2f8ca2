import json
import math

import numpy as np
import pytest
import torch

from anchorground import harness
from anchorground.errors import DomainError, MissingRowsError
from anchorground.geometry import BBox, PatchGrid
from anchorground.labeling import patch_labels
from anchorground.model import ForwardTrace, ModelConfig, SequenceLayout, init_model
from anchorground.synthdata import gen_scene
from anchorground.training import TrainConfig

SMALL = ModelConfig(n_layers=2, n_heads=2, d_model=16)


@pytest.fixture(scope="module")
def model():
    return init_model(SMALL)


@pytest.fixture(scope="module")
def scenes():
    out = []
    for i in range(12):
        s = gen_scene(500 + i)
        s.scene_id = i
        out.append(s)
    return out


def test_whole_screen_target_always_hits(model):
    s = gen_scene(0)
    w, h = s.image_px
    s.gt_bbox = BBox(0, 0, w, h)
    rec = harness.ground_one_step(model, s)
    assert rec.hit and rec.min_relax == 0


def test_record_one_patch_outside_has_relax_one():
    s = gen_scene(0)
    g = s.grid()
    b = s.gt_bbox
    point = (b.x2 + g.patch_px / 2, b.center[1])
    rec = harness.make_record(s, "one", point)
    assert not rec.hit and rec.min_relax == 1


def test_two_step_zoom_one_full_crop_is_identity(model, scenes):
    for s in scenes:
        one = harness.ground_one_step(model, s)
        first, second = harness.ground_two_step(model, s, crop_px=s.image_px[0], zoom=1.0)
        assert first == one
        assert second.point == one.point and second.hit == one.hit and second.min_relax == one.min_relax


def test_two_step_lossless_crop_quantization_within_one_cell(model):
    s = gen_scene(4)
    # cells_per_patch 4 at zoom 4: one token per cell, so the decoded click is a cell centre
    first, second = harness.ground_two_step(model, s, crop_px=64, zoom=4.0)
    assert second.step == "two"
    cell = s.cell_px
    x, y = second.point
    assert (x % cell, y % cell) == (cell / 2, cell / 2)
    region = harness.plan_crop(s.grid(), first.point, 64, 4.0)
    assert region.origin_x <= x <= region.origin_x + 64 and region.origin_y <= y <= region.origin_y + 64


def test_two_step_rejects_zoom_below_one(model, scenes):
    with pytest.raises(DomainError):
        harness.ground_two_step(model, scenes[0], zoom=0.5)


def test_evaluate_accounting_and_order_independence(model, scenes):
    m1 = harness.evaluate(model, scenes, two_step=True)
    m2 = harness.evaluate(model, list(reversed(scenes)), two_step=True)
    assert json.dumps(m1, sort_keys=True) == json.dumps(m2, sort_keys=True)
    ts = m1["two_step"]
    n = m1["n"]
    assert ts["accuracy_two"] == pytest.approx(m1["accuracy"] + (ts["recovered"] - ts["lost"]) / n)
    errors = n - round(m1["accuracy"] * n)
    assert ts["recovered"] <= errors and ts["lost"] <= n - errors
    for r in m1["records"]:
        assert r["hit"] == (r["min_relax"] == 0)
    table = harness.format_table(m1)
    assert "Relax@1" in table and "Recovered" in table and "Lost" in table


def test_all_correct_gives_zero_relax_counts(model, scenes):
    full = []
    for s in scenes[:3]:
        w, h = s.image_px
        s2 = gen_scene(s.seed)
        s2.scene_id = s.scene_id
        s2.gt_bbox = BBox(0, 0, w, h)
        full.append(s2)
    m = harness.evaluate(model, full)
    assert m["accuracy"] == 1.0
    assert m["relax"]["relax@1"] == m["relax"]["relax@2"] == m["relax"]["relax@5"] == 0


def test_evaluate_empty_corpus(model):
    with pytest.raises(DomainError):
        harness.evaluate(model, [])


def test_relax_buckets():
    recs = [harness.EvalRecord(i, "one", (0, 0), k == 0, k) for i, k in enumerate([0, 1, 1, 2, 3, 5, 6, math.inf])]
    c = harness.relax_counts(recs)
    assert (c["relax@1"], c["relax@2"], c["relax@5"], c["total"], c["beyond"]) == (2, 1, 2, 5, 2)
    assert recs[-1].to_json()["min_relax"] is None


def test_uniform_baseline_matches_hand_count():
    s = gen_scene(0)
    g = s.grid()
    centers = g.patch_centers()
    b = s.gt_bbox
    count = sum(1 for x, y in centers if b.x1 <= x < b.x2 and b.y1 <= y < b.y2)
    assert harness.uniform_random_baseline([s]) == count / g.size


def test_heatmap_export(tmp_path):
    g = PatchGrid(64, 32, 16)
    one = np.zeros(8)
    one[3] = 1
    path, side = harness.export_heatmap(one, tmp_path / "one.pgm", g)
    img = harness.read_pgm(path)
    assert img.shape == (2, 4) and img.reshape(-1).tolist() == [0, 0, 0, 255, 0, 0, 0, 0]
    uni, _ = harness.export_heatmap(np.full(8, 1 / 8), tmp_path / "uni.pgm", g)
    assert set(harness.read_pgm(uni).reshape(-1).tolist()) == {255}
    lab = patch_labels(g, BBox(5, 5, 40, 30))
    _, side = harness.export_heatmap(lab, tmp_path / "lab.pgm")
    back = json.loads(side.read_text())
    assert back["format"] == "heatmap/1"
    assert np.max(np.abs(np.array(back["values"]) - lab.values)) <= 1e-9
    with pytest.raises(DomainError):
        harness.export_heatmap(np.ones(3), tmp_path / "bad.pgm", g)


def _trace_for_report(query_hidden, rows):
    Q = len(query_hidden)
    V = 2
    layout = SequenceLayout(V, Q)
    hidden = torch.zeros(2, layout.total_len, 2, dtype=torch.float64)
    hidden[1, 0] = torch.tensor([1.0, 0.0])
    hidden[1, 1] = torch.tensor([1.0, 0.0])
    for i, v in enumerate(query_hidden):
        hidden[1, V + i] = torch.tensor(v)
    qa = torch.tensor(rows, dtype=torch.float64).reshape(1, 1, Q, V)
    return ForwardTrace(layout, hidden, torch.zeros(1, 1, V, dtype=torch.float64), query_attn=qa)


def test_token_report_single_token(tmp_path):
    tr = _trace_for_report([[1.0, 1.0]], [[0.2, 0.3]])
    rep = harness.token_correlation_report(tr, path=tmp_path / "r.json")
    assert rep["embedding"] == [1.0] and rep["attention"] == [1.0]
    assert json.loads((tmp_path / "r.json").read_text())["format"] == "token_correlation/1"


def test_token_report_keeps_disagreeing_orders():
    # token 0 is aligned with the visual states but attends little; token 1 the reverse
    tr = _trace_for_report([[1.0, 0.0], [0.0, 1.0]], [[0.05, 0.05], [0.4, 0.4]])
    rep = harness.token_correlation_report(tr)
    assert sum(rep["embedding"]) == pytest.approx(1) and sum(rep["attention"]) == pytest.approx(1)
    assert rep["embedding"][0] > rep["embedding"][1]
    assert rep["attention"][0] < rep["attention"][1]


def test_token_report_needs_rows():
    tr = _trace_for_report([[1.0, 0.0]], [[0.1, 0.1]])
    tr.query_attn = None
    with pytest.raises(MissingRowsError):
        harness.token_correlation_report(tr)


def test_parse_arms():
    arms = harness.parse_arms("""
        # name and strategy
        name=a strategy=sink sink_mode=layerwise sink_k=2
        name=b strategy=uniform aggregation=vanilla labels=flat
    """)
    assert arms[0].sink_k == 2 and arms[0].weighted_labels
    assert arms[1].aggregation == "vanilla" and not arms[1].weighted_labels
    with pytest.raises(DomainError):
        harness.parse_arms("name=c labels=fuzzy")
    with pytest.raises(DomainError):
        harness.parse_arms("name=c strategy=loud")
    with pytest.raises(DomainError):
        harness.parse_arms("# nothing")


def test_default_arms_cover_required_set():
    names = {a.name for a in harness.DEFAULT_ARMS}
    strategies = {(a.strategy, a.aggregation, a.sink_mode, a.weighted_labels) for a in harness.DEFAULT_ARMS}
    assert len(harness.DEFAULT_ARMS) == 8 and len(names) == 8
    assert ("uniform", "vanilla", "global", True) in strategies
    assert {"uniform", "all_query", "anchor", "sink", "soft"} <= {s[0] for s in strategies}
    assert ("sink", "anchor", "layerwise", True) in strategies
    assert ("sink", "anchor", "global", False) in strategies


def _quick_train(model, scenes, cfg):
    from anchorground.training import train

    return train(model, scenes[:8], TrainConfig(**{**cfg.__dict__, "epochs": 1, "batch_size": 8}))


def test_ablation_single_and_repeated_arm(scenes):
    arm = harness.Arm("sink_global_top1")
    one = harness.ablation_run(scenes, scenes[:4], [arm], [0], SMALL, TrainConfig(), train_fn=_quick_train)
    assert len(one["rows"]) == 1 and one["rows"][0]["spread"] == 0
    twice = harness.ablation_run(scenes, scenes[:4], [arm, arm], [0, 1], SMALL, TrainConfig(), train_fn=_quick_train)
    r0, r1 = twice["rows"]
    assert r0["accuracies"] == r1["accuracies"]
    assert r0["spread"] == max(r0["accuracies"]) - min(r0["accuracies"])
    assert "sink_global_top1" in harness.format_ablation(twice)
