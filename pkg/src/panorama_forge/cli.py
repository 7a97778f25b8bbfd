"""Command-line entry point: ``panorama-forge <subcommand> ...``.

Exit codes: 0 success, 1 check failure, 2 config/parse error, 3 I/O error,
4 dataset error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np
import torch

from . import metrics, tensorio
from .checks import run_checks
from .denoiser import load_checkpoint, save_checkpoint
from .layout import DEFAULT_DMAX, preview_groups, quantize_u8, render_sequence
from .pipeline import (
    SR_MODES,
    ConfigError,
    DatasetError,
    RunConfig,
    generate,
    load_dataset,
    super_resolve,
    synthesize_frames,
    train_stage1,
    train_stage2,
)
from .scene import SceneError, SceneSyntaxError, load_scene

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_DATASET = 0, 1, 2, 3, 4

log = logging.getLogger("panorama_forge")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _apply_thread_cap():
    env = os.environ.get("PANORAMA_FORGE_THREADS")
    if not env:
        return
    try:
        n = int(env)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"PANORAMA_FORGE_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise CliError(EXIT_CONFIG, "PANORAMA_FORGE_THREADS must be >= 1")
    torch.set_num_threads(n)


def _need_file(path, what):
    if not os.path.isfile(path):
        raise CliError(EXIT_IO, f"{what} not found: {path}")


def _need_dir(path, what):
    if not os.path.isdir(path):
        raise CliError(EXIT_IO, f"{what} is not a directory: {path}")


def _load_scene(path):
    _need_file(path, "scene")
    try:
        return load_scene(path)
    except SceneSyntaxError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: line {exc.line}, column {exc.col}: {exc}") from None
    except SceneError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: {exc}") from None


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        _need_file(args.config, "config")
        try:
            cfg = RunConfig.load(args.config)
        except ConfigError as exc:
            raise CliError(EXIT_CONFIG, f"{args.config}: {exc}") from None
    else:
        cfg = RunConfig()
    overrides = {}
    for name in ("seed", "sr", "steps"):
        value = getattr(args, name, None)
        if value is not None:
            overrides["train_steps" if name == "steps" else name] = value
    if overrides:
        try:
            cfg = dataclasses.replace(cfg, **overrides)
        except ConfigError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
    return cfg


def _load_ckpt(path):
    _need_dir(path, "checkpoint")
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc}") from None
    except (KeyError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"{path}: invalid checkpoint: {exc}") from None


def write_ppm(path, rgb_u8: np.ndarray) -> None:
    img = np.ascontiguousarray(rgb_u8, dtype=np.uint8)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"PPM needs (H, W, 3) uint8, got {img.shape}")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def to_u8(frame) -> np.ndarray:
    """Pixels in [-1, 1] to 8-bit, clipping outside values."""
    return quantize_u8((np.asarray(frame, dtype=np.float64) + 1.0) * 127.5)


# -- subcommands ---------------------------------------------------------------


def cmd_render_layout(args):
    scene = _load_scene(args.scene)
    if args.width < 1 or args.height < 1 or not args.dmax > 0:
        raise CliError(EXIT_CONFIG, "width/height must be positive and dmax > 0")
    ct = render_sequence(scene, args.width, args.height, args.dmax)
    ct.save(args.out)
    if args.preview:
        os.makedirs(args.preview, exist_ok=True)
        for v in range(ct.views):
            for t in range(ct.frames):
                for group, img in preview_groups(ct, v, t).items():
                    write_ppm(os.path.join(args.preview, f"v{v}_t{t:02d}_{group}.ppm"), img)
    V, T, H, W, C = ct.shape
    print(f"control tensor {V}x{T}x{H}x{W}x{C} (views x frames x height x width x channels) -> {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    _need_dir(args.scenes, "scenes")
    try:
        samples = load_dataset(args.scenes)
    except SceneError as exc:
        raise CliError(EXIT_DATASET, f"bad scene in {args.scenes}: {exc}") from None
    except DatasetError as exc:
        raise CliError(EXIT_DATASET, str(exc)) from None
    lam = cfg.lambda_train if args.stage == 2 else 0.0
    print(f"stage={args.stage} steps={cfg.train_steps} lr={cfg.lr} lambda_train={lam} seed={cfg.seed}")
    trainer = train_stage1 if args.stage == 1 else train_stage2
    try:
        result = trainer(samples, cfg)
    except DatasetError as exc:
        raise CliError(EXIT_DATASET, str(exc)) from None
    save_checkpoint(result.weights, args.out, extra={"stage": args.stage, "run_config": cfg.to_dict()})
    with open(os.path.join(args.out, "losses.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(result.losses):
            w.writerow([i, repr(loss)])
    if result.losses:
        print(f"loss {result.losses[0]:.6g} -> {result.losses[-1]:.6g}")
    print(f"checkpoint -> {args.out}")
    return EXIT_OK


def _generate(args, cfg, lam=None):
    scene = _load_scene(args.scene)
    w1, w2 = _load_ckpt(args.ckpt1), _load_ckpt(args.ckpt2)
    try:
        return scene, generate(scene, w1, w2, cfg, lambda_infer=lam)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def cmd_generate(args):
    cfg = _load_config(args)
    if args.sr == "plugin" or cfg.sr == "plugin":
        raise CliError(EXIT_CONFIG, "the plugin upscaler can only be supplied through the Python API")
    print(f"lambda_infer={cfg.lambda_infer} steps={cfg.ddim_steps} seed={cfg.seed} sr={cfg.sr}")
    _, result = _generate(args, cfg)
    os.makedirs(args.out, exist_ok=True)
    frames = result.frames
    tensorio.save(os.path.join(args.out, "video.pnc"), frames)
    for v in range(frames.shape[0]):
        for t in range(frames.shape[1]):
            stem = os.path.join(args.out, f"view{v}_frame{t:02d}")
            tensorio.save(stem + ".pnc", frames[v, t])
            write_ppm(stem + ".ppm", to_u8(frames[v, t]))
    V, T, H, W, _ = frames.shape
    print(f"{T} frames x {V} views at {H}x{W} -> {args.out}")
    return EXIT_OK


def parse_lambdas(text: str) -> list:
    values = []
    for part in text.split(","):
        part = part.strip()
        try:
            lam = float(part)
        except ValueError:
            raise CliError(EXIT_CONFIG, f"not a number in lambda list: {part!r}") from None
        if not np.isfinite(lam) or lam < 0:
            raise CliError(EXIT_CONFIG, f"lambda must be a finite non-negative number, got {part!r}")
        if lam in values:
            log.warning("duplicate lambda %g ignored", lam)
            continue
        values.append(lam)
    return values


def reference_frames(scene, cfg: RunConfig) -> np.ndarray:
    """Synthetic ground truth for a scene at the generated resolution."""
    ct = render_sequence(scene, cfg.width, cfg.height, cfg.d_max, frames=range(min(cfg.frames, scene.num_frames)))
    ref = synthesize_frames(ct)
    return ref if cfg.sr == "none" else super_resolve(ref, "resize")


def cmd_ablate_lambda(args):
    lambdas = parse_lambdas(args.lambdas)
    cfg = _load_config(args)
    if args.out:
        _need_dir(os.path.dirname(os.path.abspath(args.out)), "output directory")
    if cfg.sr == "plugin":
        raise CliError(EXIT_CONFIG, "the plugin upscaler can only be supplied through the Python API")
    rows = []
    ref = None
    for lam in lambdas:
        print(f"lambda_infer={lam} steps={cfg.ddim_steps} seed={cfg.seed}")
        scene, result = _generate(args, cfg, lam)
        if ref is None:
            ref = reference_frames(scene, cfg)
        rep = metrics.evaluate(result.frames, ref)
        rows.append([lam, rep["fd"], rep["temporal_consistency"], rep["seam"]])
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["lambda", "fd", "temporal_consistency", "seam"])
        for row in rows:
            w.writerow([repr(x) for x in row])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_oracle_check(args):
    if args.trials < 1:
        raise CliError(EXIT_CONFIG, "--trials must be >= 1")
    report = run_checks(args.trials, args.seed, fault=args.inject_fault, grad=not args.skip_gradients,
                        progress=print)
    print(f"max attention deviation {report.max_attention_dev:.3e}")
    if not args.skip_gradients:
        print(f"max gradient relative error {report.max_grad_rel_err:.3e}")
    if report.ok:
        print("all checks passed")
        return EXIT_OK
    for f in report.failures[:20]:
        print(f"FAIL {f.suite} {f.detail}: deviation {f.deviation:.3e} (replay with --seed {f.seed} --trials 1)",
              file=sys.stderr)
    print(f"{len(report.failures)} failing case(s); first failing seed {report.failures[0].seed}", file=sys.stderr)
    return EXIT_CHECK


def _load_clip(path):
    _need_file(path, "clip")
    clip = tensorio.load(path)
    if clip.ndim != 5:
        raise CliError(EXIT_CONFIG, f"{path}: expected a (V, T, H, W, C) tensor, got shape {clip.shape}")
    return clip


def cmd_metrics(args):
    gen = _load_clip(args.generated)
    ref = _load_clip(args.reference)
    if gen.shape[2:] != ref.shape[2:]:
        raise CliError(EXIT_CONFIG, f"frame shapes differ: {gen.shape[2:]} vs {ref.shape[2:]}")
    try:
        report = metrics.evaluate(gen, ref)
    except metrics.MetricsError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    text = metrics.report_json(report)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="panorama-forge", description="Layout-controlled multi-view driving video generation")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render-layout", help="rasterise a scene into a control tensor")
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--width", type=int, default=512)
    r.add_argument("--height", type=int, default=256)
    r.add_argument("--dmax", type=float, default=DEFAULT_DMAX)
    r.add_argument("--preview", help="directory for per-group PPM previews")
    r.set_defaults(func=cmd_render_layout)

    t = sub.add_parser("train", help="train stage-1 (image) or stage-2 (video) weights")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--scenes", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample a multi-view clip for a scene")
    for flag in ("--scene", "--ckpt1", "--ckpt2", "--out"):
        g.add_argument(flag, required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--sr", choices=SR_MODES)
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("ablate-lambda", help="sweep the inference noise-prior weight")
    a.add_argument("--lambdas", default="0,0.05,0.06,0.07,0.08")
    for flag in ("--scene", "--ckpt1", "--ckpt2"):
        a.add_argument(flag, required=True)
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--sr", choices=SR_MODES)
    a.add_argument("--out", help="CSV path (default: stdout)")
    a.set_defaults(func=cmd_ablate_lambda)

    o = sub.add_parser("oracle-check", help="randomised attention-oracle and gradient checks")
    o.add_argument("--trials", type=int, default=100)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--skip-gradients", action="store_true")
    o.add_argument("--inject-fault", choices=("intra_view", "cross_view", "cross_frame"), help=argparse.SUPPRESS)
    o.set_defaults(func=cmd_oracle_check)

    m = sub.add_parser("metrics", help="distance and consistency report for a generated clip")
    m.add_argument("--generated", required=True)
    m.add_argument("--reference", required=True)
    m.add_argument("--out")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_thread_cap()
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except tensorio.TensorFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
