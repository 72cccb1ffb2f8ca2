"""Command-line entry point ``anchorground``.

Every failure exits nonzero after printing one line ``error: <ErrorClass>: <message>``
to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .errors import CorpusError, GradCheckFailed, GroundingError
from .grounding import SINK_MODES, STRATEGIES, StrategyConfig
from .model import init_model
from .synthdata import DIFFICULTIES, dumps, gen_dataset, load_corpus, render
from .training import grad_check, gradcheck_sample, train


def _corpus(path, split):
    scenes = load_corpus(path, split)
    if not scenes:
        scenes = load_corpus(path) if split else []
    if not scenes:
        raise CorpusError(f"no scenes in {path}")
    return scenes


def _scene(path, scene_id):
    for s in load_corpus(path):
        if s.scene_id == scene_id:
            return s
    raise CorpusError(f"scene id {scene_id} not in {path}")


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_gen(a):
    path, manifest = gen_dataset(a.count, a.seed, a.difficulty, a.out, holdout_combos=a.holdout_combos)
    print(f"wrote {manifest['count']} scenes to {path}")


def cmd_train(a):
    model_cfg, train_cfg = load_config(a.config)
    overrides = {k: v for k, v in (("strategy", a.strategy), ("sink_mode", a.sink_mode), ("sink_k", a.sink_k),
                                   ("epochs", a.epochs), ("seed", a.seed)) if v is not None}
    if a.flat_labels:
        overrides["weighted_labels"] = False
    train_cfg = replace(train_cfg, **overrides)
    if a.seed is not None:
        model_cfg = replace(model_cfg, seed=a.seed)
    scenes = _corpus(a.data, a.split)
    model = init_model(model_cfg)
    result = train(model, scenes, train_cfg, log_path=a.log)
    save_checkpoint(model, a.out)
    last = result.losses[-1] if result.losses else float("nan")
    print(f"trained {len(result.losses)} steps, final loss {last:.4f}, checkpoint {a.out}")


def _strategy(a, fallback: StrategyConfig | None = None) -> StrategyConfig:
    base = fallback or StrategyConfig()
    return StrategyConfig(a.strategy or base.strategy, a.sink_mode or base.sink_mode, a.sink_k or base.sink_k,
                          a.aggregation or base.aggregation)


def cmd_eval(a):
    model = load_checkpoint(a.ckpt)
    scenes = _corpus(a.data, a.split)
    metrics = harness.evaluate(model, scenes, _strategy(a), two_step=a.two_step, crop_px=a.crop_px,
                               zoom=a.zoom, click_mode=a.click_mode)
    print(harness.format_table(metrics))
    _write(a.report, dumps(metrics) + "\n")


def cmd_ground(a):
    model = load_checkpoint(a.ckpt)
    scene = _scene(a.data, a.scene_id)
    strategy = _strategy(a)
    record = harness.ground_one_step(model, scene, strategy, a.click_mode)
    if a.export_heatmap:
        r = render(scene)
        _, dist = harness._predict(model, r.tokens, scene.query_tokens, r.grid, strategy, a.click_mode)
        harness.export_heatmap(dist.values[0].double().numpy(), a.export_heatmap, r.grid)
    print(dumps(record.to_json()))


def cmd_ablate(a):
    model_cfg, train_cfg = load_config(a.config)
    arms = harness.parse_arms(Path(a.arms).read_text()) if a.arms else list(harness.DEFAULT_ARMS)
    train_scenes = _corpus(a.data, "train")
    eval_scenes = [s for s in load_corpus(a.data) if s.split != "train"] or train_scenes
    table = harness.ablation_run(train_scenes, eval_scenes, arms, list(range(a.seeds)), model_cfg, train_cfg)
    print(harness.format_ablation(table))
    _write(a.report, dumps(table) + "\n")


def cmd_gradcheck(a):
    model_cfg, _ = load_config(a.config)
    model = init_model(model_cfg)
    sample = gradcheck_sample(model_cfg, seed=model_cfg.seed)
    failed = []
    for stop in (False, True):
        rep = grad_check(model, sample, StrategyConfig(stop_grad_weights=stop), a.tolerance)
        print(f"{rep.regime:<16} worst rel err {rep.worst_rel_error:.3e} ({rep.worst_tensor}) "
              f"{'PASS' if rep.passed else 'FAIL'}")
        if not rep.passed:
            failed.append(rep.regime)
    if failed:
        raise GradCheckFailed(f"tolerance {a.tolerance} exceeded in {', '.join(failed)}")


def cmd_analyze_tokens(a):
    import torch

    model = load_checkpoint(a.ckpt)
    scene = _scene(a.data, a.scene_id)
    r = render(scene)
    with torch.no_grad():
        trace = model(torch.as_tensor(r.tokens)[None], torch.as_tensor(scene.query_tokens).reshape(1, -1),
                      query_rows=True)
    report = harness.token_correlation_report(trace, path=a.out, query_tokens=scene.query_tokens)
    print(json.dumps({k: report[k] for k in ("tokens", "embedding", "attention")}))


def _strategy_flags(p, with_aggregation=True):
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--sink-mode", choices=SINK_MODES)
    p.add_argument("--sink-k", type=int)
    if with_aggregation:
        p.add_argument("--aggregation", choices=("anchor", "vanilla"))
        p.add_argument("--click-mode", choices=("argmax", "centroid"), default="argmax")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anchorground", description="Anchor-token attention grounding on synthetic screens.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="generate a scene corpus and manifest")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--difficulty", choices=sorted(DIFFICULTIES), default="easy")
    s.add_argument("--holdout-combos", action="store_true", help="reserve some kind/color referents for val/test")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    _strategy_flags(s, with_aggregation=False)
    s.add_argument("--flat-labels", action="store_true")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--split", default="train")
    s.add_argument("--log", help="JSON-lines telemetry path")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    _strategy_flags(s)
    s.add_argument("--two-step", action="store_true")
    s.add_argument("--crop-px", type=float)
    s.add_argument("--zoom", type=float, default=2.0)
    s.add_argument("--report")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ground", help="ground one scene, optionally exporting the heatmap")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--scene-id", type=int, required=True)
    _strategy_flags(s)
    s.add_argument("--export-heatmap")
    s.set_defaults(fn=cmd_ground)

    s = sub.add_parser("ablate", help="train and compare strategy arms over seeds")
    s.add_argument("--data", required=True)
    s.add_argument("--arms", help="arm file; default is the built-in eight arms")
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--config")
    s.add_argument("--report")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check in both weight regimes")
    s.add_argument("--config")
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("analyze-tokens", help="per-token visual correlation report")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--scene-id", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_analyze_tokens)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (GroundingError, OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
