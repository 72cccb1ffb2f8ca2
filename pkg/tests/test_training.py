import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from anchorground.errors import ConfigError, DimensionError, NonFiniteLossError
from anchorground.grounding import StrategyConfig, ground
from anchorground.model import ModelConfig, init_model
from anchorground.synthdata import DIFFICULTIES, RenderSpec, decode_query, gen_scene, referents, render
from anchorground.training import (
    TrainConfig,
    augment_scene,
    batch_loss,
    grad_check,
    gradcheck_sample,
    kl_loss,
    make_example,
    make_optimizer,
    train,
    train_step,
)
from oracles import kl_oracle

TINY = ModelConfig(n_layers=2, n_heads=2, d_model=16, visual_vocab=66, text_vocab=13, max_rows=14, max_cols=14,
                   visual_factors=())


def test_kl_examples():
    p = torch.tensor([0.2, 0.3, 0.5], dtype=torch.float64)
    assert kl_loss(p, p).item() == 0
    one_hot = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    pred = torch.tensor([0.25, 0.5, 0.25], dtype=torch.float64)
    assert kl_loss(one_hot, pred).item() == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(DimensionError):
        kl_loss(p, pred[:2])


def test_kl_matches_oracle_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.random(8) * (rng.random(8) > 0.3)
        p[0] += 0.1
        p /= p.sum()
        q = rng.random(8) ** 4
        q[rng.integers(8)] = 0
        q /= q.sum()
        got = kl_loss(torch.tensor(p), torch.tensor(q)).item()
        assert abs(got - kl_oracle(p, q)) <= 1e-10


# entries are 0 or well above the 1e-8 prediction floor
probs = st.lists(st.one_of(st.just(0.0), st.floats(1e-3, 1)), min_size=5, max_size=5).filter(lambda v: sum(v) > 0)


@given(probs, probs)
def test_kl_non_negative(a, b):
    p = torch.tensor(a, dtype=torch.float64) / sum(a)
    q = torch.tensor(b, dtype=torch.float64) / sum(b)
    assert kl_loss(p, q).item() >= -1e-12
    assert abs(kl_loss(p, p).item()) <= 1e-12


def _examples(n, cfg=TrainConfig()):
    return [make_example(gen_scene(i), cfg) for i in range(n)]


def test_overfit_single_sample_halves_loss():
    model = init_model(TINY)
    cfg = TrainConfig(learning_rate=3e-3)
    opt = make_optimizer(model, cfg)
    ex = _examples(1)
    losses = [train_step(model, ex, cfg, opt, i).kl_value for i in range(50)]
    assert losses[-1] <= 0.5 * losses[0]


def test_zero_learning_rate_leaves_parameters():
    model = init_model(TINY)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    cfg = TrainConfig(learning_rate=0.0)
    train_step(model, _examples(4), cfg)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_training_is_deterministic(tmp_path):
    scenes = [gen_scene(i) for i in range(24)]
    cfg = TrainConfig(epochs=1, batch_size=8, seed=3)
    runs = []
    for name in ("a", "b"):
        model = init_model(TINY)
        res = train(model, scenes, cfg, log_path=tmp_path / f"{name}.log")
        runs.append((res.losses, model.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert torch.equal(runs[0][1][k], runs[1][1][k])
    assert (tmp_path / "a.log").read_bytes() == (tmp_path / "b.log").read_bytes()
    first = (tmp_path / "a.log").read_text().splitlines()[0]
    assert set(json.loads(first)) == {"step", "loss", "eval_accuracy"}


def test_eval_hook_called():
    scenes = [gen_scene(i) for i in range(8)]
    calls = []
    train(init_model(TINY), scenes, TrainConfig(epochs=1, batch_size=4, eval_every=1),
          eval_fn=lambda m: calls.append(1) or 0.5)
    assert len(calls) == 2


def test_non_finite_loss_aborts():
    model = init_model(TINY)
    with torch.no_grad():
        model.visual_embed.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError):
        train_step(model, _examples(2), TrainConfig())


def test_batch_loss_mixed_shapes_equals_per_sample():
    model = init_model(TINY)
    cfg = TrainConfig(zoom_aug=1.0, permute_attrs=False, flip=False)
    rng = np.random.default_rng(0)
    batch = [make_example(gen_scene(i), cfg, rng) for i in range(4)] + _examples(3)
    strategy = cfg.strategy_config()
    mean, per = batch_loss(model, batch, strategy)
    singles = [batch_loss(model, [ex], strategy)[0].item() for ex in batch]
    np.testing.assert_allclose([p.item() for p in per], singles, rtol=1e-5)
    assert mean.item() == pytest.approx(np.mean(singles), rel=1e-5)


def test_augmentation_preserves_referent():
    rng = np.random.default_rng(1)
    for seed in range(40):
        s = augment_scene(gen_scene(seed), rng)
        assert referents(s.widgets, decode_query(s)) == [s.target]
        assert s.gt_bbox == s.widgets[s.target].bbox
        fine = render(s, RenderSpec(cells_per_patch=1))
        t = s.widgets[s.target]
        px = s.cell_px
        block = fine.tokens[int(t.bbox.y1) // px: int(t.bbox.y2) // px, int(t.bbox.x1) // px: int(t.bbox.x2) // px]
        assert np.all(block == DIFFICULTIES["easy"].cell_id(*t.attrs()))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(zoom_aug=2)
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule="step")


@pytest.mark.parametrize("stop", [False, True])
@pytest.mark.parametrize("seed", [1, 2])
def test_grad_check_tiny(stop, seed):
    model = init_model(ModelConfig(n_layers=2, n_heads=2, d_model=16, visual_factors=(4, 4, 4), seed=seed))
    sample = gradcheck_sample(model.cfg, seed=seed)
    rep = grad_check(model, sample, StrategyConfig(stop_grad_weights=stop), 1e-4, coords_per_tensor=3)
    assert rep.passed, (rep.worst_tensor, rep.worst_rel_error)


def test_grad_check_catches_corruption():
    model = init_model(TINY)
    sample = gradcheck_sample(TINY, seed=2)
    rep = grad_check(model, sample, StrategyConfig(), 1e-4, coords_per_tensor=2,
                     corrupt=lambda name, g: g * 1.01 if name == "blocks.0.fc2.weight" else g)
    assert not rep.passed and rep.worst_tensor == "blocks.0.fc2.weight"


def test_plain_central_differences_still_available():
    model = init_model(TINY)
    sample = gradcheck_sample(TINY, seed=2)
    plain = grad_check(model, sample, StrategyConfig(), 1e-4, coords_per_tensor=4, richardson=False)
    extrapolated = grad_check(model, sample, StrategyConfig(), 1e-4, coords_per_tensor=4)
    assert extrapolated.worst_rel_error < plain.worst_rel_error


def test_stop_grad_zeroes_gradient_through_weights():
    model = init_model(TINY).double()
    tokens, query, label = gradcheck_sample(TINY, seed=3)
    label = torch.as_tensor(label)[None]
    grads = {}
    for stop in (False, True):
        trace = model(torch.as_tensor(tokens)[None], torch.as_tensor(query)[None], query_rows=True)
        dist, w = ground(trace, StrategyConfig(stop_grad_weights=stop))
        # query rows reach the loss only through the sink head weights
        (g,) = torch.autograd.grad(kl_loss(label, dist.values).sum(), trace.query_attn, allow_unused=True)
        grads[stop] = g
    assert grads[True] is None or torch.count_nonzero(grads[True]) == 0
    assert torch.count_nonzero(grads[False]) > 0
