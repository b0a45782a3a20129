"""Command-line entry point: synthetic data, training, inference, evaluation.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every invocation is a
pure function of its flags and input files, so rerunning one reproduces its
artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import color, data, disentangle, features, metrics, pipeline
from . import tensor as T


class UsageError(Exception):
    """Bad flags or arguments; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage problems; the contract wants 1
    def error(self, message):
        raise UsageError(message)


def _cmd_invariants(args) -> int:
    image = data.load_image(args.input)
    derivs = color.gaussian_derivatives(color.gaussian_color_model(T.Tensor(image[None])), args.sigma)
    stack = color.compute_invariants(derivs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in stack.channels:
        chan = stack.channel(name).data[0, 0]
        hi = float(chan.max())
        data.save_mask(out_dir / f"{name}.png", chan / hi if hi > 0 else chan)
    return 0


def _cmd_disentangle(args) -> int:
    image = data.load_image(args.input)
    reference = data.load_image(args.reference)
    extractor = features.bundled_weights()
    img_pyr = features.extract(T.Tensor(image[None]), extractor, stop_gradient=True)
    ref_pyr = features.extract(T.Tensor(reference[None]), extractor, stop_gradient=True)
    stages = (args.stage,) if args.stage else features.STAGE_NAMES
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in stages:
        mask = disentangle.to_mask(disentangle.elesim(img_pyr[s], ref_pyr[s]))
        data.save_mask(out_dir / f"mask_{s}.png", mask.data[0, 0])
    return 0


def _cmd_synth_background(args) -> int:
    scene_dir = Path(args.scene_dir)
    day_dir = scene_dir / "day"
    folder = day_dir if day_dir.is_dir() else scene_dir
    paths = sorted(p for p in folder.glob("*") if p.suffix.lower() in (".png", ".ppm"))
    if not paths:
        raise FileNotFoundError(f"no frames under {folder}")
    background = data.synth_background([data.load_image(p) for p in paths])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_image(out, background)
    return 0


def _cmd_synth_scene(args) -> int:
    spec = data.SyntheticSceneSpec.from_json(Path(args.spec).read_text())
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    data.generate_synthetic_scene(spec, args.out_dir)
    return 0


def _cmd_train(args) -> int:
    config = pipeline.TrainConfig.from_json(Path(args.config).read_text())
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.no_lci:
        config = replace(config, use_lci=False)
    if args.no_fore:
        config = replace(config, use_l_fore=False)
    if args.no_back:
        config = replace(config, use_l_back=False)
    if config.output_dir:
        out_dir = Path(config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        # echoed before the run so provenance survives an abort
        (out_dir / "config.json").write_text(config.to_json())
    state = pipeline.init_state(config)
    reports = pipeline.train(state)
    if reports:
        last = reports[-1]
        print(f"trained {state.step} iterations; total_g {last.total_g:.6g}, total_d {last.total_d:.6g}")
    return 0


def _cmd_translate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    state = pipeline.load_checkpoint(ckpt)
    image = data.load_image(args.input)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_image(out, pipeline.translate(image, state))
    return 0


def scene_report(state: pipeline.TrainState, dataset: data.SceneDataset, mask_dir: Path | None = None) -> dict:
    """Fréchet before/after plus per-stage mask quality against ground truth.

    "before" compares night frames with day frames, "after" the translated
    frames with day frames. Mask metrics cover only frames that have a ground
    truth file and average over them; without any, those sections stay empty.
    """
    translated = [pipeline.translate(img, state) for img in dataset.night]
    g_night = metrics.fit_feature_gaussian(dataset.night, state.extractor)
    g_day = metrics.fit_feature_gaussian(dataset.day, state.extractor)
    g_trans = metrics.fit_feature_gaussian(translated, state.extractor)
    report = {
        "frechet_before": metrics.frechet_distance(g_night, g_day),
        "frechet_after": metrics.frechet_distance(g_trans, g_day),
        "mask_iou_per_stage": {},
        "separation_per_stage": {},
    }
    truths: dict[str, np.ndarray] = {}
    if mask_dir is not None and mask_dir.is_dir():
        truths = {p.name: data.load_mask(p) for p in sorted(mask_dir.glob("*.png"))}
    if truths:
        ref_pyr = pipeline.reference_pyramid(state, dataset.background)
        name_to_idx = {n: i for i, n in enumerate(dataset.night_names)}
        per_iou: dict[str, list[float]] = {s: [] for s in features.STAGE_NAMES}
        per_sep: dict[str, list[float]] = {s: [] for s in features.STAGE_NAMES}
        for name, truth in truths.items():
            idx = name_to_idx.get(name)
            if idx is None:
                continue
            pyr = features.extract(T.Tensor(translated[idx][None]), state.extractor, stop_gradient=True)
            for s in features.STAGE_NAMES:
                mask = disentangle.to_mask(disentangle.elesim(pyr[s], ref_pyr[s]), state.config.mask_params())
                iou, sep = metrics.mask_metrics(mask.data[0, 0], truth, state.config.mask_threshold)
                per_iou[s].append(iou)
                per_sep[s].append(sep)
        report["mask_iou_per_stage"] = {s: float(np.mean(v)) for s, v in per_iou.items() if v}
        report["separation_per_stage"] = {s: float(np.mean(v)) for s, v in per_sep.items() if v}
    return report


def _cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    state = pipeline.load_checkpoint(ckpt)
    dataset = data.load_scene(args.scene_dir)
    report = scene_report(state, dataset, Path(args.scene_dir) / "masks")
    print(
        "note: Fréchet values come from the bundled feature extractor and are only"
        " comparable to other runs of this tool, not to scores from other feature models",
        file=sys.stderr,
    )
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.report:
        out = Path(args.report)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="nightshift", description="Night-to-day scene translation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("invariants", help="write the five illumination-invariant channels as PNGs")
    p.add_argument("--input", required=True, help="input image (PNG or PPM)")
    p.add_argument("--out-dir", required=True, help="directory for E/W/C/H/N channel images")
    p.add_argument("--sigma", type=float, default=1.0, help="derivative filter scale")
    p.set_defaults(func=_cmd_invariants)

    p = sub.add_parser("disentangle", help="write background masks of an image against a reference")
    p.add_argument("--input", required=True)
    p.add_argument("--reference", required=True, help="background reference image")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stage", choices=features.STAGE_NAMES, help="single stage; default is all")
    p.set_defaults(func=_cmd_disentangle)

    p = sub.add_parser("synth-background", help="estimate a scene background by frame averaging")
    p.add_argument("--scene-dir", required=True, help="scene root (uses day/) or a directory of frames")
    p.add_argument("--out", required=True, help="output image path")
    p.set_defaults(func=_cmd_synth_background)

    p = sub.add_parser("synth-scene", help="generate a synthetic surveillance scene")
    p.add_argument("--spec", required=True, help="scene spec JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the seed in the spec")
    p.set_defaults(func=_cmd_synth_scene)

    p = sub.add_parser("train", help="train a translator on a scene")
    p.add_argument("--config", required=True, help="TrainConfig JSON")
    p.add_argument("--seed", type=int, default=None, help="override the seed in the config")
    p.add_argument("--no-lci", action="store_true", help="drop the invariant input branch")
    p.add_argument("--no-fore", action="store_true", help="drop the foreground contrastive term")
    p.add_argument("--no-back", action="store_true", help="drop the background reconstruction term")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("translate", help="run a trained translator on one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_translate)

    p = sub.add_parser("eval", help="score a checkpoint on a scene; prints a JSON report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene-dir", required=True)
    p.add_argument("--report", default=None, help="also write the JSON report here")
    p.set_defaults(func=_cmd_eval)

    return parser


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry() -> None:
    raise SystemExit(run())
