"""Command-line interface.

Verbs: ``synth``, ``train-init``, ``train-fusion``, ``decompose``,
``finetune``, ``eval``.  Configuration is a flat JSON file plus
``--set key=value`` overrides; every run writes ``effective_config.json``
next to its outputs so it can be reproduced bit-exactly.  Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics, synthgen
from .denseflow import write_flo
from .pipeline import Models, PipelineConfig, decompose, online_finetune, train_flowinit, train_fusion
from .synthgen import GeneratorConfig

# --set aliases for the spec-level symbols
_ALIASES = {"T": "frames", "L": "levels", "k": "keyframe"}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _collect_overrides(pairs, parser):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            parser.error(f"malformed override {item!r}, expected key=value")
        key, value = item.split("=", 1)
        out[key] = _parse_value(value)
    return out


def _apply(dc, overrides: dict, used: set):
    for key, value in overrides.items():
        name = _ALIASES.get(key, key)
        if hasattr(dc, name):
            current = getattr(dc, name)
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(dc, name, value)
            used.add(key)
    return dc


def _build_configs(args, parser):
    overrides = _collect_overrides(getattr(args, "set", None), parser)
    if getattr(args, "config", None):
        file_cfg = json.loads(Path(args.config).read_text())
        overrides = {**file_cfg, **overrides}
    used: set = set()
    pipe = _apply(PipelineConfig(), overrides, used)
    gen = _apply(GeneratorConfig(), overrides, used)
    if getattr(args, "seed", None) is not None:
        pipe.seed = args.seed
        gen.seed = args.seed
    if getattr(args, "mode", None):
        pipe.mode = args.mode
    unknown = set(overrides) - used
    if unknown:
        parser.error(f"unknown config keys: {sorted(unknown)}")
    return pipe, gen, overrides


def _write_effective_config(out_dir, pipe, gen, overrides, args):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": args.verb,
        "seed": pipe.seed,
        "workers": args.workers,
        "pipeline": dataclasses.asdict(pipe),
        "generator": dataclasses.asdict(gen),
        "overrides": overrides,
    }
    (out_dir / "effective_config.json").write_text(json.dumps(doc, indent=2, default=str))


def _load_sequence_dir(path):
    d = Path(path)
    if (d / "meta.json").exists():
        return synthgen.load_sample(d)
    frames = sorted(d.glob("input_*.png"))
    if not frames:
        raise FileNotFoundError(f"no input_*.png frames in {d}")
    inputs = [synthgen.load_image(f) for f in frames]
    return synthgen.SyntheticSample(
        inputs=inputs, gt_background=None, gt_obstruction=None, gt_alpha=None,
        homographies_background=[], homographies_obstruction=[], mode="reflection",
        sigma=0.0, beta=0.0, seed=0)


def _load_dataset(path):
    root = Path(path)
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no seq_*/meta.json sample directories under {root}")
    return [synthgen.load_sample(d) for d in dirs]


def _save_result(out_dir, result, cfg):
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    synthgen.save_image(d / "background.png", result.background)
    if result.obstruction is not None:
        synthgen.save_image(d / "obstruction.png", result.obstruction)
    if result.alpha is not None:
        synthgen.save_image(d / "alpha.png", result.alpha)
    lv = d / "levels"
    lv.mkdir(exist_ok=True)
    for i, (b, o) in enumerate(zip(result.levels_background, result.levels_obstruction)):
        synthgen.save_image(lv / f"level_{i}_background.png", np.clip(b, 0, 1))
        synthgen.save_image(lv / f"level_{i}_obstruction.png", np.clip(o, 0, 1))
    fd = d / "flows"
    fd.mkdir(exist_ok=True)
    for lvl, per_frame in enumerate(result.flows):
        for j, layers in per_frame.items():
            for layer, flow in layers.items():
                write_flo(fd / f"level{lvl}_{layer}_{j:02d}.flo", flow)
    (d / "trace.json").write_text(json.dumps({"loss": result.trace,
                                              "elapsed_seconds": result.elapsed_seconds}))


def _maybe_report(out_dir, result, sample):
    if sample.gt_background is None:
        return
    k = result.keyframe
    if sample.mode == "reflection" and result.obstruction is not None:
        rec = metrics.evaluate_layers(result.background, sample.gt_background[k],
                                      result.obstruction, sample.gt_obstruction[k])
    else:
        rec = metrics.evaluate_layers(result.background, sample.gt_background[k])
    metrics.dump_report(Path(out_dir) / "report.json", [rec], [f"seq_{sample.seed}"])


def _ckpt_models(args, pipe):
    models = Models(pipe)
    if getattr(args, "ckpt", None):
        models.load(args.ckpt)
    return models


def _cmd_synth(args, pipe, gen):
    out = Path(args.out)
    for i in range(args.count):
        cfg = dataclasses.replace(gen, seed=gen.seed + i)
        corpus_a, corpus_b = synthgen.make_texture_corpus(cfg.seed, cfg)
        sample = synthgen.generate_sequence(corpus_a, corpus_b, cfg, mode=pipe.mode)
        synthgen.save_sample(out, sample, cfg)
    return 0


def _cmd_train_init(args, pipe, gen):
    samples = _load_dataset(args.data)
    models = Models(pipe)
    trace = train_flowinit(samples, models, pipe)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    models.save(out)
    (out.parent / "train_init_trace.json").write_text(json.dumps({"loss": trace}))
    return 0


def _cmd_train_fusion(args, pipe, gen):
    samples = _load_dataset(args.data)
    models = _ckpt_models(args, pipe)
    trace = train_fusion(samples, models, pipe)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    models.save(out)
    (out.parent / "train_fusion_trace.json").write_text(json.dumps({"loss": trace}))
    return 0


def _cmd_decompose(args, pipe, gen):
    sample = _load_sequence_dir(args.input)
    pipe.frames = len(sample.inputs)
    models = _ckpt_models(args, pipe)
    result = decompose(sample.inputs, models, pipe)
    _save_result(args.out, result, pipe)
    _maybe_report(args.out, result, sample)
    return 0


def _cmd_finetune(args, pipe, gen):
    sample = _load_sequence_dir(args.input)
    pipe.frames = len(sample.inputs)
    models = _ckpt_models(args, pipe)
    models, result = online_finetune(sample.inputs, models, pipe)
    _save_result(args.out, result, pipe)
    _maybe_report(args.out, result, sample)
    if args.save_ckpt:
        models.save(args.save_ckpt)
    return 0


def _pred_images(pred_dir, gt_sample, keyframe):
    d = Path(pred_dir)
    if (d / "background.png").exists():
        bg = synthgen.load_image(d / "background.png")
        obs_path = d / "obstruction.png"
        obs = synthgen.load_image(obs_path) if obs_path.exists() else None
        return bg, obs
    # allow evaluating a ground-truth directory against itself
    bg = synthgen.load_image(d / f"gt_b_{keyframe:02d}.png")
    rp = d / f"gt_r_{keyframe:02d}.png"
    obs = synthgen.load_image(rp) if rp.exists() else None
    return bg, obs


def _cmd_eval(args, pipe, gen):
    gt_root = Path(args.gt)
    if (gt_root / "meta.json").exists():
        pairs = [(Path(args.pred), gt_root)]
    else:
        pairs = [(Path(args.pred) / p.name, p)
                 for p in sorted(gt_root.iterdir()) if (p / "meta.json").exists()]
        if not pairs:
            raise FileNotFoundError(f"no sample directories under {gt_root}")
    records, names = [], []
    for pred_dir, gt_dir in pairs:
        sample = synthgen.load_sample(gt_dir)
        k = pipe.keyframe if pipe.keyframe is not None else len(sample.inputs) // 2
        bg, obs = _pred_images(pred_dir, sample, k)
        if sample.mode == "reflection" and obs is not None:
            rec = metrics.evaluate_layers(bg, sample.gt_background[k],
                                          obs, sample.gt_obstruction[k])
        else:
            rec = metrics.evaluate_layers(bg, sample.gt_background[k])
        records.append(rec)
        names.append(gt_dir.name)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.dump_report(out, records, names)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layersplit",
                                     description="multi-frame background/obstruction separation")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int,
                       default=int(os.environ.get("LAYERSPLIT_THREADS", "1")))
        p.add_argument("--mode", choices=["reflection", "occlusion"], default=None)
        if config:
            p.add_argument("--config", help="flat JSON config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="config override, repeatable")

    p = sub.add_parser("synth", help="generate synthetic samples")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    common(p)

    p = sub.add_parser("train-init", help="stage 1: train flow decomposition")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output checkpoint path")
    common(p)

    p = sub.add_parser("train-fusion", help="stage 2: train layer reconstruction")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("decompose", help="decompose one sequence")
    p.add_argument("--input", required=True, help="sequence directory")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("finetune", help="online optimization on one sequence")
    p.add_argument("--input", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--save-ckpt", default=None)
    common(p)

    p = sub.add_parser("eval", help="metrics report for predictions vs ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    common(p)
    return parser


_COMMANDS = {
    "synth": _cmd_synth,
    "train-init": _cmd_train_init,
    "train-fusion": _cmd_train_fusion,
    "decompose": _cmd_decompose,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    pipe, gen, overrides = _build_configs(args, parser)
    try:
        config_dir = getattr(args, "out", None)
        if config_dir is not None:
            target = Path(config_dir)
            config_dir = target.parent if target.suffix else target
            _write_effective_config(config_dir, pipe, gen, overrides, args)
        return _COMMANDS[args.verb](args, pipe, gen)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"layersplit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
