"""Run configuration: JSON <-> MorphConfig with exhaustive validation."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .attention import STAGE1_VARIANTS, STAGE2_VARIANTS
from .condition import ConditionInput
from .errors import ConfigError, InvalidInputError

SEED_ENV = "INTERP3D_SEED"
GEO_METHODS = ("interp_kv", "aid_inner", "aid_outer", "fused_structure")
TEX_METHODS = ("texture_fusion", "interp_kv", "aid_inner", "aid_outer")


@dataclass(frozen=True)
class MorphConfig:
    source: ConditionInput
    target: ConditionInput
    frames: int = 5
    beta: float = 5.0
    steps: int = 8
    s_max: int = 4
    tau0: float = 0.5
    semantic_align: bool = True
    stage1_method: str = "fused_structure"
    stage2_method: str = "texture_fusion"
    resolution: int = 16
    slat_channels: int = 8
    tokens: int = 64
    cond_channels: int = 16
    width: int = 32
    blocks: int = 2
    hook_layers: tuple | None = None
    kv_capture: tuple = ("geo", "tex")
    seed: int = 0
    workers: int = 1
    cache_spill_bytes: int | None = None
    output_dir: str | None = None

    def __post_init__(self):
        problems = validate(self)
        if problems:
            raise ConfigError(problems)

    def replace(self, **changes) -> "MorphConfig":
        return dataclasses.replace(self, **changes)

    def full_scale(self) -> "MorphConfig":
        """Grid resolution 64 and 25 denoising steps."""
        return self.replace(resolution=64, steps=25)

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, ConditionInput):
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


FIELD_NAMES = tuple(f.name for f in dataclasses.fields(MorphConfig))


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def validate(cfg: MorphConfig) -> list[str]:
    p = []
    if not _is_int(cfg.frames) or cfg.frames < 2:
        p.append("frames: must be an integer >= 2")
    if not isinstance(cfg.beta, (int, float)) or not cfg.beta > 0:
        p.append("beta: must be positive")
    if not _is_int(cfg.steps) or cfg.steps < 1:
        p.append("steps: must be an integer >= 1")
    if not _is_int(cfg.s_max) or cfg.s_max < 1 or cfg.s_max & (cfg.s_max - 1):
        p.append("s_max: must be a power of two")
    if not isinstance(cfg.tau0, (int, float)):
        p.append("tau0: must be a number")
    if not isinstance(cfg.semantic_align, bool):
        p.append("semantic_align: must be true or false")
    if cfg.stage1_method not in STAGE1_VARIANTS:
        p.append(f"stage1_method: must be one of {', '.join(STAGE1_VARIANTS)}")
    if cfg.stage2_method not in STAGE2_VARIANTS:
        p.append(f"stage2_method: must be one of {', '.join(STAGE2_VARIANTS)}")
    if not _is_int(cfg.resolution) or cfg.resolution < 4 or cfg.resolution % 4:
        p.append("resolution: must be a positive multiple of 4")
    if not _is_int(cfg.slat_channels) or cfg.slat_channels < 4:
        p.append("slat_channels: must be >= 4 (rgb + opacity)")
    for name in ("tokens", "cond_channels", "blocks", "workers"):
        if not _is_int(getattr(cfg, name)) or getattr(cfg, name) < 1:
            p.append(f"{name}: must be a positive integer")
    if not _is_int(cfg.width) or cfg.width < 2 or cfg.width % 2:
        p.append("width: must be a positive even integer")
    if cfg.hook_layers is not None and _is_int(cfg.blocks) and len(cfg.hook_layers) != cfg.blocks:
        p.append(f"hook_layers: needs one entry per block ({cfg.blocks})")
    capture = set(cfg.kv_capture) if isinstance(cfg.kv_capture, (tuple, list)) else None
    if capture is None or not capture <= {"geo", "tex"}:
        p.append("kv_capture: must be a list drawn from 'geo' and 'tex'")
    else:
        if cfg.stage1_method in GEO_METHODS and "geo" not in capture:
            p.append(f"stage1_method: {cfg.stage1_method} requires stage-1 K/V caches; add 'geo' to kv_capture")
        if cfg.stage2_method in TEX_METHODS and "tex" not in capture:
            p.append(f"stage2_method: {cfg.stage2_method} requires stage-2 K/V caches; add 'tex' to kv_capture")
    if cfg.cache_spill_bytes is not None and (not _is_int(cfg.cache_spill_bytes) or cfg.cache_spill_bytes < 0):
        p.append("cache_spill_bytes: must be a non-negative integer or null")
    if not _is_int(cfg.seed):
        p.append("seed: must be an integer")
    return p


def _descriptor(value, base: Path | None, name: str, problems: list):
    try:
        if isinstance(value, str):
            path = Path(value)
            if base is not None and not path.is_absolute():
                path = base / path
            return ConditionInput.from_dict(json.loads(path.read_text(encoding="utf-8")))
        if isinstance(value, dict):
            return ConditionInput.from_dict(value)
        problems.append(f"{name}: must be a descriptor object or a path to one")
    except (OSError, ValueError, KeyError, TypeError) as exc:
        problems.append(f"{name}: {exc}")
    return None


def config_from_dict(data: dict, base_dir=None, env=None) -> MorphConfig:
    """Build a config, collecting every problem before raising."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    env = os.environ if env is None else env
    problems = [f"{k}: unknown field" for k in sorted(set(data) - set(FIELD_NAMES))]
    for req in ("source", "target"):
        if req not in data:
            problems.append(f"{req}: required")
    base = Path(base_dir) if base_dir is not None else None
    kwargs = {k: v for k, v in data.items() if k in FIELD_NAMES}
    for side in ("source", "target"):
        if side in kwargs:
            kwargs[side] = _descriptor(kwargs[side], base, side, problems)
    for key in ("hook_layers", "kv_capture"):
        if isinstance(kwargs.get(key), list):
            kwargs[key] = tuple(kwargs[key])
    if env.get(SEED_ENV):
        try:
            kwargs["seed"] = int(env[SEED_ENV])
        except ValueError:
            problems.append(f"{SEED_ENV}: not an integer")
    if problems:
        if all(kwargs.get(s) is not None for s in ("source", "target")):
            try:
                MorphConfig(**kwargs)
            except ConfigError as exc:
                problems += exc.problems
            except TypeError:
                pass
        raise ConfigError(problems)
    try:
        return MorphConfig(**kwargs)
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, env=None) -> MorphConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data, path.parent, env)
