"""End-to-end morphing: endpoint generation, per-frame hooks, trajectory output."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import __version__
from .attention import HookSpec
from .condition import EMBED_SEED, ConditionInput, ConditionTokens, condition_interp, encode_condition, semantic_align
from .config import MorphConfig
from .correspond import CorrespondenceMap, densify_project, dynamic_patch_correspondence, partition_patches
from .errors import MorphError, StageError
from .fileio import write_metrics_csv, write_ply
from .metrics import DEFAULT_VIEWS, METRIC_NAMES, FeatureExtractor, evaluate_trajectory
from .schedule import alpha_schedule, patch_size_schedule
from .tensor import Rng
from .toyprior import (
    ColoredVoxelAsset,
    ExternalKV,
    ModelDims,
    Stage1Result,
    Stage2Result,
    ToyFlowModel,
    build_toy_model,
    decode_slat,
    stage1_denoise,
    stage2_denoise,
)

log = logging.getLogger(__name__)

ABLATION_VARIANTS = {
    "initial": ("Initial Condition Interp.", dict(semantic_align=False, stage1_method="none", stage2_method="none")),
    "semantic": ("+ Semantic Align.", dict(semantic_align=True, stage1_method="none", stage2_method="none")),
    "structure": ("+ Structure Interp.", dict(semantic_align=True, stage1_method="fused_structure", stage2_method="none")),
    "texture": ("+ Texture Fusion", dict(semantic_align=True, stage1_method="fused_structure", stage2_method="texture_fusion")),
}


class Models(NamedTuple):
    structure: ToyFlowModel
    slat: ToyFlowModel


class Generation(NamedTuple):
    condition: ConditionTokens
    stage1: Stage1Result
    stage2: Stage2Result
    asset: ColoredVoxelAsset


@dataclass
class MorphTrajectory:
    alphas: list
    assets: list
    manifest: dict

    @property
    def frames(self) -> list:
        return list(zip(self.alphas, self.assets))

    def frame_name(self, i: int) -> str:
        return f"frame_{i}_alpha_{self.alphas[i]:.6f}.ply"


def build_models(cfg: MorphConfig) -> Models:
    geo = ModelDims(cfg.resolution, 8, cfg.width, cfg.cond_channels, cfg.blocks)
    tex = ModelDims(cfg.resolution, cfg.slat_channels, cfg.width, cfg.cond_channels, cfg.blocks)
    return Models(build_toy_model(cfg.seed, "structure", geo), build_toy_model(cfg.seed, "slat", tex))


def noise_keys(cfg: MorphConfig) -> tuple[Rng, Rng]:
    # every frame shares the endpoint noise so alpha is the only thing that varies
    return Rng(cfg.seed, "stage1/noise"), Rng(cfg.seed, "stage2/noise")


def _spill(cfg: MorphConfig, name: str):
    if cfg.cache_spill_bytes is None:
        return None, None
    base = Path(cfg.output_dir or ".") / "kv_cache" / name
    return base, cfg.cache_spill_bytes


def generate(cfg: MorphConfig, condition: ConditionTokens, models: Models | None = None, name: str = "source") -> Generation:
    """Standalone generation with hooks disabled, capturing K/V for later frames."""
    models = models or build_models(cfg)
    r1, r2 = noise_keys(cfg)
    spill_dir, spill_bytes = _spill(cfg, name)
    s1 = stage1_denoise(models.structure, condition, HookSpec(), None, cfg.steps, r1,
                        capture="geo" in cfg.kv_capture, spill_dir=spill_dir, spill_bytes=spill_bytes)
    if s1.positions.shape[0] == 0:
        raise StageError(f"{name} generation produced an empty structure")
    s2 = stage2_denoise(models.slat, condition, s1.positions, HookSpec(), None, cfg.steps, r2,
                        capture="tex" in cfg.kv_capture, spill_dir=spill_dir, spill_bytes=spill_bytes)
    return Generation(condition, s1, s2, decode_slat(s2.slat))


def generate_standalone(cfg: MorphConfig, desc: ConditionInput) -> Generation:
    return generate(cfg, encode_condition(desc, cfg.tokens, cfg.cond_channels), build_models(cfg))


def _divisor_side(side: int, n: int) -> int:
    side = min(side, n)
    while n % side:
        side //= 2
    return max(side, 1)


def step_correspondences(cfg: MorphConfig, src: Generation, tgt: Generation,
                         nk: int) -> tuple[list[CorrespondenceMap], list[int]]:
    """Patch correspondence per denoise step, recomputed only when the patch side changes."""
    dense_s = densify_project(src.stage2.slat, nk)
    dense_t = densify_project(tgt.stage2.slat, nk)
    by_side: dict = {}
    maps, sides = [], []
    for t in range(cfg.steps):
        side = _divisor_side(patch_size_schedule(t, cfg.steps, cfg.s_max), nk)
        if side not in by_side:
            by_side[side] = dynamic_patch_correspondence(
                partition_patches(dense_s, side), partition_patches(dense_t, side), cfg.tau0)
        maps.append(by_side[side])
        sides.append(side)
    return maps, sides


def _stage1_hooks(cfg, alpha, maps, sides):
    if cfg.stage1_method == "fused_structure":
        return [HookSpec("fused_structure", alpha, m, s) for m, s in zip(maps, sides)]
    return HookSpec(cfg.stage1_method, alpha)


def run_frame(cfg: MorphConfig, models: Models, src: Generation, tgt: Generation,
              cond: ConditionTokens, alpha: float, maps, sides, index: int):
    r1, r2 = noise_keys(cfg)
    geo = ExternalKV(src.stage1.kv, tgt.stage1.kv) if cfg.stage1_method != "none" else None
    tex = ExternalKV(src.stage2.kv, tgt.stage2.kv) if cfg.stage2_method != "none" else None
    try:
        s1 = stage1_denoise(models.structure, cond, _stage1_hooks(cfg, alpha, maps, sides), geo, cfg.steps, r1,
                            hook_layers=cfg.hook_layers, capture=False)
    except MorphError as exc:
        raise StageError(f"stage 1: {exc}", frame=index) from exc
    if s1.positions.shape[0] == 0:
        raise StageError("stage 1 produced an empty structure", frame=index)
    try:
        s2 = stage2_denoise(models.slat, cond, s1.positions, HookSpec(cfg.stage2_method, alpha), tex, cfg.steps, r2,
                            hook_layers=cfg.hook_layers, capture=False)
    except MorphError as exc:
        raise StageError(f"stage 2: {exc}", frame=index) from exc
    return decode_slat(s2.slat), s2.degenerate


# execution-only settings; they never change the frames, so the manifest leaves them out
RUN_ONLY_FIELDS = ("workers", "output_dir")


def resolved_config(cfg: MorphConfig) -> dict:
    d = cfg.to_dict()
    for k in RUN_ONLY_FIELDS:
        d.pop(k)
    return d


def config_digest(cfg: MorphConfig) -> str:
    text = json.dumps(resolved_config(cfg), sort_keys=True)
    return hashlib.sha1(text.encode("utf-8")).hexdigest()[:12]


def run_morph(cfg: MorphConfig, workers: int | None = None) -> MorphTrajectory:
    """Generate the endpoints, then every interior frame with the configured hooks."""
    timings = {}
    t0 = time.perf_counter()
    models = build_models(cfg)
    c_s = encode_condition(cfg.source, cfg.tokens, cfg.cond_channels, "source")
    c_t = encode_condition(cfg.target, cfg.tokens, cfg.cond_channels, "target")
    if cfg.semantic_align:
        cmap = semantic_align(c_s, c_t)
    else:
        cmap = CorrespondenceMap.identity(cfg.tokens, matched=True)
    timings["conditions"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    src = generate(cfg, c_s, models, "source")
    tgt = generate(cfg, c_t, models, "target")
    timings["endpoints"] = time.perf_counter() - t1

    schedule = alpha_schedule(cfg.frames, cfg.beta, steps=cfg.steps, s_max=cfg.s_max, tau0=cfg.tau0)
    t2 = time.perf_counter()
    maps, sides = [], []
    if cfg.stage1_method == "fused_structure" and cfg.frames > 2:
        maps, sides = step_correspondences(cfg, src, tgt, models.structure.dims.token_resolution)
    timings["correspondence"] = time.perf_counter() - t2

    t3 = time.perf_counter()
    interior = list(range(1, cfg.frames - 1))

    def job(i):
        alpha = schedule.alphas[i]
        cond = condition_interp(c_s, c_t, cmap, alpha)
        log.debug("frame %d alpha=%.4f", i, alpha)
        return run_frame(cfg, models, src, tgt, cond, alpha, maps, sides, i)

    n_workers = workers if workers is not None else cfg.workers
    if n_workers > 1 and len(interior) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(job, interior))
    else:
        results = [job(i) for i in interior]
    timings["frames"] = time.perf_counter() - t3
    timings["total"] = time.perf_counter() - t0

    assets = [src.asset] + [r[0] for r in results] + [tgt.asset]
    degenerate = [0] + [r[1] for r in results] + [0]
    traj = MorphTrajectory(list(schedule.alphas), assets, {})
    traj.manifest = {
        "tool": "texmorph",
        "version": __version__,
        "run_id": config_digest(cfg),
        "config": resolved_config(cfg),
        "schedule": schedule.as_dict(),
        "seeds": {"run": cfg.seed, "embedder": EMBED_SEED, "source": cfg.source.seed, "target": cfg.target.seed},
        "semantic_map": [int(x) for x in cmap.full_permutation],
        "patch_sides": sides,
        "frames": [
            {"index": i, "alpha": a, "file": f"frames/{traj.frame_name(i)}", "voxels": int(asset.count),
             "degenerate_tokens": int(d)}
            for i, (a, asset, d) in enumerate(zip(traj.alphas, assets, degenerate))
        ],
        "timings": timings,
    }
    return traj


def trajectory_metrics(traj: MorphTrajectory, views: int = DEFAULT_VIEWS,
                       extractor: FeatureExtractor = FeatureExtractor(), run_id: str | None = None,
                       strict: bool = False) -> list[dict]:
    values = evaluate_trajectory([a.quantized() for a in traj.assets], views, extractor, strict=strict)
    return metric_rows(values, run_id or traj.manifest.get("run_id", "run"), views, len(traj.assets), extractor)


def metric_rows(values: dict, run_id: str, views: int, frames: int, extractor: FeatureExtractor) -> list[dict]:
    return [
        {"run_id": run_id, "metric": m, "value": values[m], "views": views, "frames": frames,
         "extractor": extractor.describe(), "seed": extractor.seed}
        for m in METRIC_NAMES
    ]


def write_trajectory(traj: MorphTrajectory, out_dir, metrics: list[dict] | None = None) -> Path:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for i, (alpha, asset) in enumerate(traj.frames):
        write_ply(out / "frames" / traj.frame_name(i), asset, alpha)
    (out / "manifest.json").write_text(json.dumps(traj.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if metrics is not None:
        write_metrics_csv(out / "metrics.csv", metrics)
    return out


def resolve_variants(names: Sequence[str]) -> list[str]:
    if list(names) == ["all"]:
        return list(ABLATION_VARIANTS)
    bad = [n for n in names if n not in ABLATION_VARIANTS]
    if bad or not names:
        valid = ", ".join(["all", *ABLATION_VARIANTS])
        raise MorphError(f"unknown ablation variant(s) {bad or names}; valid: {valid}")
    return list(names)


def run_ablation(cfg: MorphConfig, variants: Sequence[str] = ("all",), views: int = DEFAULT_VIEWS,
                 extractor: FeatureExtractor = FeatureExtractor(), workers: int | None = None) -> list[dict]:
    """One morph per ablation variant on identical seeds; one row per (variant, metric)."""
    rows = []
    for key in resolve_variants(variants):
        label, overrides = ABLATION_VARIANTS[key]
        traj = run_morph(cfg.replace(**overrides), workers)
        rows += trajectory_metrics(traj, views, extractor, run_id=label)
    return rows


def occupancy_grid(asset: ColoredVoxelAsset) -> np.ndarray:
    grid = np.zeros((asset.resolution,) * 3, dtype=bool)
    if asset.count:
        grid[tuple(asset.positions.T)] = True
    return grid
