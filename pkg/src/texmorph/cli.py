"""Command-line entry point: ``texmorph {gen-assets,morph,metrics,ablate}``.

Exit codes: 0 ok, 2 configuration error, 3 runtime error, 4 I/O error. Errors
are reported on stderr as a single JSON line.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .condition import ConditionInput
from .config import MorphConfig, load_config
from .errors import ConfigError, InvalidInputError, MorphError
from .fileio import read_ply, write_descriptor, write_metrics_csv
from .metrics import DEFAULT_VIEWS, FeatureExtractor, evaluate_trajectory
from .pipeline import metric_rows, resolve_variants, run_ablation, run_morph, trajectory_metrics, write_trajectory
from .tensor import Rng

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, fields=None):
        super().__init__(message)
        self.code, self.kind, self.fields = code, kind, fields


def _palette_for(seed: int) -> tuple:
    vals = Rng(seed, "descriptor/palette").generator().uniform(0.0, 1.0, 3)
    return tuple(round(float(v), 4) for v in vals)


def cmd_gen_assets(args) -> int:
    palette = tuple(float(x) for x in args.palette.split(",")) if args.palette else _palette_for(args.seed)
    try:
        desc = ConditionInput(args.seed, args.shape_class, palette)
    except InvalidInputError as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from exc
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_descriptor(out, desc)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot write {out}: {exc.strerror or exc}") from exc
    if args.preview:
        _write_preview(desc, Path(args.preview), args.preview_views)
    print(out)
    return EXIT_OK


def _write_preview(desc: ConditionInput, path: Path, views: int) -> None:
    import numpy as np
    from PIL import Image

    from .metrics import orbit_cameras, render_views
    from .pipeline import generate_standalone

    cfg = MorphConfig(source=desc, target=desc)
    asset = generate_standalone(cfg, desc).asset
    imgs = [v.rgb for v in render_views(asset, orbit_cameras(views))]
    strip = np.concatenate(imgs, axis=1)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray((np.clip(strip, 0, 1) * 255).round().astype(np.uint8)).save(path)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot write {path}: {exc.strerror or exc}") from exc


def _load(path: str) -> MorphConfig:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_IO, "io", f"config file not found: {p}")
    try:
        return load_config(p)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot read {p}: {exc.strerror or exc}") from exc


def _apply_method(cfg: MorphConfig, method: str | None) -> MorphConfig:
    """``--method`` is ``stage1[,stage2]``; a lone stage-2-only variant applies to stage 2."""
    if not method:
        return cfg
    parts = [m.strip() for m in method.split(",")]
    if len(parts) == 1:
        if parts[0] == "texture_fusion":
            return cfg.replace(stage2_method="texture_fusion")
        return cfg.replace(stage1_method=parts[0])
    if len(parts) == 2:
        return cfg.replace(stage1_method=parts[0], stage2_method=parts[1])
    raise ConfigError("--method: expected 'stage1' or 'stage1,stage2'")


def _extractor(text: str, seed: int | None) -> FeatureExtractor:
    try:
        ex = FeatureExtractor.parse(text)
    except (InvalidInputError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, "config", f"--extractor: {exc}") from exc
    if seed is not None and ex.kind == "projection":
        ex = FeatureExtractor(ex.kind, ex.depth, ex.width, ex.dim, seed)
    return ex


def cmd_morph(args) -> int:
    cfg = _load(args.config)
    changes = {}
    if args.frames is not None:
        changes["frames"] = args.frames
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.full_scale:
        changes.update(resolution=64, steps=25)
    out = Path(args.out or cfg.output_dir or "morph_out")
    changes["output_dir"] = str(out)
    cfg = _apply_method(cfg.replace(**changes), args.method)
    traj = run_morph(cfg)
    metrics = None
    if not args.no_metrics:
        metrics = trajectory_metrics(traj, args.views, _extractor(args.extractor, None))
    try:
        write_trajectory(traj, out, metrics)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot write {out}: {exc.strerror or exc}") from exc
    print(out)
    return EXIT_OK


def cmd_metrics(args) -> int:
    frames_dir = Path(args.trajectory)
    if (frames_dir / "frames").is_dir():
        frames_dir = frames_dir / "frames"
    if not frames_dir.is_dir():
        raise CliError(EXIT_IO, "io", f"trajectory directory not found: {frames_dir}")
    files = sorted(frames_dir.glob("frame_*.ply"), key=lambda p: int(p.name.split("_")[1]))
    if len(files) < 2:
        raise CliError(EXIT_RUNTIME, "invalid-input", f"need at least 2 frames in {frames_dir}, found {len(files)}")
    try:
        assets = [read_ply(f) for f in files]
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot read trajectory: {exc}") from exc
    ex = _extractor(args.extractor, args.seed)
    values = evaluate_trajectory(assets, args.views, ex, strict=True)
    run_id = args.run_id or frames_dir.resolve().parent.name
    rows = metric_rows(values, run_id, args.views, len(assets), ex)
    _write_csv(args.out, rows)
    return EXIT_OK


def _write_csv(out, rows) -> None:
    path = Path(out)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(path, rows)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot write {path}: {exc.strerror or exc}") from exc
    print(path)


def cmd_ablate(args) -> int:
    cfg = _load(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    try:
        variants = resolve_variants(variants)
    except MorphError as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from exc
    if args.frames is not None:
        cfg = cfg.replace(frames=args.frames)
    rows = run_ablation(cfg, variants, args.views, _extractor(args.extractor, None), args.workers)
    _write_csv(args.out, rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="texmorph", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-assets", help="write a condition descriptor", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="descriptor seed")
    p.add_argument("--class", dest="shape_class", default="chair", help="shape-class label")
    p.add_argument("--palette", default=None, help="r,g,b in [0,1]; derived from the seed when omitted")
    p.add_argument("--out", required=True, help="descriptor JSON path")
    p.add_argument("--preview", default=None, help="optional PNG strip of the standalone generation")
    p.add_argument("--preview-views", type=int, default=4, help="views in the preview strip")
    p.set_defaults(func=cmd_gen_assets)

    p = sub.add_parser("morph", help="generate a morphing trajectory", formatter_class=fmt)
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", default=None, help="output directory (config output_dir, else ./morph_out)")
    p.add_argument("--frames", type=int, default=None, help="trajectory length L (overrides config)")
    p.add_argument("--method", default=None, help="hook variants as stage1[,stage2] (overrides config)")
    p.add_argument("--workers", type=int, default=None, help="frames generated concurrently (overrides config)")
    p.add_argument("--views", type=int, default=DEFAULT_VIEWS, help="rendered views per frame for metrics.csv")
    p.add_argument("--extractor", default="projection", help="feature extractor for metrics.csv")
    p.add_argument("--no-metrics", action="store_true", help="skip metrics.csv")
    p.add_argument("--full-scale", action="store_true", help="use resolution 64 and 25 steps")
    p.set_defaults(func=cmd_morph)

    p = sub.add_parser("metrics", help="evaluate a trajectory directory", formatter_class=fmt)
    p.add_argument("--trajectory", required=True, help="morph output directory or its frames/ folder")
    p.add_argument("--views", type=int, default=DEFAULT_VIEWS, help="rendered views per frame")
    p.add_argument("--extractor", default="projection", help="'flatten' or 'projection[:depth=..,width=..,dim=..,seed=..]'")
    p.add_argument("--seed", type=int, default=None, help="extractor seed (overrides the --extractor value)")
    p.add_argument("--run-id", default=None, help="run_id column value (default: trajectory directory name)")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("ablate", help="run the component ablation", formatter_class=fmt)
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--variants", default="all", help="'all' or a comma list of initial,semantic,structure,texture")
    p.add_argument("--frames", type=int, default=None, help="trajectory length L (overrides config)")
    p.add_argument("--views", type=int, default=DEFAULT_VIEWS, help="rendered views per frame")
    p.add_argument("--extractor", default="projection", help="feature extractor")
    p.add_argument("--workers", type=int, default=None, help="frames generated concurrently")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_ablate)
    return parser


def _report(err: CliError) -> int:
    payload = {"error": err.kind, "code": err.code, "message": str(err)}
    if err.fields:
        payload["fields"] = err.fields
    print(json.dumps(payload), file=sys.stderr)
    return err.code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as err:
        return _report(err)
    except ConfigError as exc:
        return _report(CliError(EXIT_CONFIG, "config", str(exc), exc.problems))
    except OSError as exc:
        return _report(CliError(EXIT_IO, "io", f"{exc.filename or ''}: {exc.strerror or exc}".strip(": ")))
    except MorphError as exc:
        return _report(CliError(EXIT_RUNTIME, type(exc).__name__, str(exc)))
