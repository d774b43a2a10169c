"""Command line entry point: ``bodyfit {synth,fit,eval,render-mask,check-model}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .body_model import ModelError, load_model, model_problems, skin
from .pipeline import (
    EXIT_CONFIG,
    EXIT_FIT,
    EXIT_IO,
    EXIT_OK,
    ConfigError,
    FitFailure,
    evaluate_run,
    load_run_config,
    merge_reports,
    params_from_json,
    run_fit,
    synth_generate,
)
from .silhouette import rasterize_silhouette, save_mask
from .toy_model import make_toy_model

log = logging.getLogger("bodyfit")


def _fit_one(config: str, optimize_offsets: Optional[bool], out: Optional[str], seed: Optional[int]):
    cfg = load_run_config(config)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.output_dir = Path(out) / Path(config).parent.name
    res = run_fit(cfg, optimize_offsets)
    return str(res.output_dir), res.pose_report.mean, res.shape_report.mean, res.seconds


def _map(fn, args: list[tuple], jobs: int):
    # results come back in input order regardless of completion order
    if jobs <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


def cmd_synth(a) -> int:
    model = make_toy_model(a.seed, a.vertices, a.joints, a.betas)
    configs = synth_generate(model, a.subjects, a.views, a.out, radius_factor=a.radius_factor,
                             image_size=(a.image_size, a.image_size), seed=a.seed)
    for c in configs:
        print(c)
    return EXIT_OK


def cmd_fit(a) -> int:
    offsets = True if a.optimize_offsets else None
    rows = _map(_fit_one, [(c, offsets, a.out, a.seed) for c in a.config], a.jobs)
    for out, pose, shape, secs in rows:
        print(f"{out}: pose-only IoU {pose:.4f}, after shape {shape:.4f} ({secs:.1f} s)")
    return EXIT_OK


def cmd_eval(a) -> int:
    reports = []
    for run in a.run_dir:
        run = Path(run)
        cfg_path = run / "config.json" if run.is_dir() else run
        reports.append(evaluate_run(load_run_config(cfg_path)))
    report = merge_reports(reports)
    text = json.dumps(report.to_dict(), indent=1)
    if a.out:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text)
        (out / "eval.csv").write_text(report.to_csv())
    print(f"sequence mean IoU {report.mean:.4f} over {len(report.frames)} frames")
    return EXIT_OK


def cmd_render_mask(a) -> int:
    try:
        model = load_model(Path(a.model).read_text())
        theta, beta, cams, d = params_from_json(Path(a.params).read_text())
    except (ValueError, KeyError, ModelError) as e:
        raise ConfigError(str(e)) from e
    if not 0 <= a.view < len(cams):
        raise ConfigError(f"view {a.view} out of range, params have {len(cams)} cameras")
    mask, _ = rasterize_silhouette(skin(model, theta, beta, d), cams[a.view])
    Path(a.out).write_bytes(save_mask(mask))
    return EXIT_OK


def cmd_check_model(a) -> int:
    try:
        doc = json.loads(Path(a.model).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{a.model}: invalid JSON: {e}") from e
    try:
        model = load_model(doc)
    except ModelError as e:
        print(f"{a.model}: {e}")
        return EXIT_CONFIG
    problems = model_problems(model)
    for p in problems:
        print(f"{a.model}: {p}")
    if problems:
        return EXIT_CONFIG
    print(f"{a.model}: ok (V={model.num_vertices}, K={model.num_joints}, S={model.num_betas})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bodyfit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--subjects", type=int, default=10)
    s.add_argument("--views", type=int, default=4)
    s.add_argument("--image-size", type=int, default=512)
    s.add_argument("--vertices", type=int, default=2000)
    s.add_argument("--joints", type=int, default=16)
    s.add_argument("--betas", type=int, default=10)
    s.add_argument("--radius-factor", type=float, default=3.0)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="pose then shape fitting for one or more run configs")
    f.add_argument("--config", action="append", required=True)
    f.add_argument("--out", help="write each run to OUT/<config folder> instead of its output_dir")
    f.add_argument("--seed", type=int, help="override the seed recorded in the run manifest")
    f.add_argument("--jobs", type=int, default=1)
    f.add_argument("--optimize-offsets", action="store_true")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="IoU report for finished runs")
    e.add_argument("run_dir", nargs="+", help="run config file or the folder holding config.json")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render-mask", help="rasterize a fitted model into a PGM mask")
    r.add_argument("--model", required=True)
    r.add_argument("--params", required=True)
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render_mask)

    c = sub.add_parser("check-model", help="audit a model file")
    c.add_argument("model")
    c.set_defaults(func=cmd_check_model)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FitFailure as e:
        print(f"fit failed in {e.stage}: {e}", file=sys.stderr)
        return EXIT_FIT
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
