"""Seeded two-stage rectified-flow generator.

Stage 1 denoises a coarse latent grid (one token per cell of an N/4 grid) and
decodes it into a fine occupancy grid. Stage 2 denoises one C-channel latent per
active voxel. Every self-attention layer routes through a hook so the morphing
variants can replace it. Weights are frozen random matrices; the model is a
stand-in for a pretrained prior, not a trained one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from . import attention as attn
from .condition import ConditionTokens
from .correspond import patch_layout
from .errors import ConfigError, InvalidInputError
from .tensor import DenseGrid, Rng, SparseVoxelLatent, grid_positions, linear_index, read_tensors, seeded_gaussian, write_tensor

STAGES = ("structure", "slat")
UPSAMPLE = 4
RADIAL_GAIN = 4.0
RADIAL_CUTOFF = 0.5


@dataclass(frozen=True)
class ModelDims:
    resolution: int = 16
    latent: int = 8
    width: int = 32
    cond: int = 16
    blocks: int = 2
    ffn: int = 64

    def __post_init__(self):
        for name in ("resolution", "latent", "width", "cond", "blocks", "ffn"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.width % 2:
            raise InvalidInputError("width must be even")

    @property
    def token_resolution(self) -> int:
        """Side of the stage-1 token grid."""
        return max(1, self.resolution // UPSAMPLE)


@dataclass(frozen=True)
class ToyFlowModel:
    stage: str
    seed: int
    dims: ModelDims
    weights: dict = field(repr=False)

    def block(self, b: int, name: str) -> np.ndarray:
        return self.weights[f"block{b}/{name}"]

    def embed_positions(self, positions: np.ndarray, n: int) -> np.ndarray:
        p = (positions.astype(np.float32) + np.float32(0.5)) / np.float32(n) * np.float32(2.0) - np.float32(1.0)
        ang = p @ self.weights["pos_freq"]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def embed_time(self, s: float) -> np.ndarray:
        ang = np.float32(s) * self.weights["time_freq"]
        return np.concatenate([np.sin(ang), np.cos(ang)])[None, :]

    def predict_clean(self, x, s, pos_emb, cond, hook=None, capture=None):
        """One forward pass: predicted clean latent for state ``x`` at flow time ``s``.

        ``hook(block, q, k, v)`` replaces self-attention; ``capture(block, k, v)``
        sees each layer's own keys and values.
        """
        w = self.weights
        h = x @ w["in"] + pos_emb + self.embed_time(s) + cond.mean(axis=0, keepdims=True) @ w["cond_pool"]
        for b in range(self.dims.blocks):
            a = _layer_norm(h)
            q, k, v = a @ self.block(b, "wq"), a @ self.block(b, "wk"), a @ self.block(b, "wv")
            if capture is not None:
                capture(b, k, v)
            out = hook(b, q, k, v) if hook is not None else attn.attention(q, k, v)
            h = h + out @ self.block(b, "wo")
            a = _layer_norm(h)
            cq = a @ self.block(b, "cq")
            ck = cond @ self.block(b, "ck")
            cv = cond @ self.block(b, "cv")
            h = h + attn.attention(cq, ck, cv) @ self.block(b, "co")
            a = _layer_norm(h)
            hidden = a @ self.block(b, "f1")
            h = h + np.maximum(hidden, np.float32(0.1) * hidden) @ self.block(b, "f2")
        return (_layer_norm(h) @ w["out"]) * w["out_gain"]

    def velocity(self, x, s, pos_emb, cond, hook=None, capture=None):
        """Rectified-flow velocity (x1_hat - x) / (1 - s) toward the predicted clean sample."""
        x1 = self.predict_clean(x, s, pos_emb, cond, hook, capture)
        return (x1 - x) / np.float32(1.0 - s)


def _layer_norm(h: np.ndarray) -> np.ndarray:
    mu = h.mean(axis=1, keepdims=True)
    var = ((h - mu) ** 2).mean(axis=1, keepdims=True)
    return (h - mu) / np.sqrt(var + np.float32(1e-5))


def build_toy_model(seed: int, stage: str, dims: ModelDims = ModelDims()) -> ToyFlowModel:
    """Frozen random weights, each drawn from its own keyed stream and scaled by 1/sqrt(fan_in)."""
    if stage not in STAGES:
        raise InvalidInputError(f"stage must be one of {STAGES}, got {stage!r}")
    rng = Rng(int(seed), f"model/{stage}")

    def lin(name, fan_in, fan_out, gain=1.0):
        g = seeded_gaussian(rng.key(purpose=f"model/{stage}/{name}"), (fan_in, fan_out))
        return g * np.float32(gain / np.sqrt(fan_in))

    d = dims
    half = d.width // 2
    w = {
        "in": lin("in", d.latent, d.width),
        "pos_freq": seeded_gaussian(rng.key(purpose=f"model/{stage}/pos_freq"), (3, half)) * np.float32(np.pi),
        "time_freq": seeded_gaussian(rng.key(purpose=f"model/{stage}/time_freq"), (half,)) * np.float32(2.0),
        "out": lin("out", d.width, d.latent),
        "cond_pool": lin("cond_pool", d.cond, d.width, gain=4.0),
        "out_gain": np.float32(1.0 if stage == "structure" else 2.0),
    }
    for b in range(d.blocks):
        for name in ("wq", "wk", "wv", "wo", "cq", "co"):
            w[f"block{b}/{name}"] = lin(f"block{b}/{name}", d.width, d.width)
        w[f"block{b}/ck"] = lin(f"block{b}/ck", d.cond, d.width)
        w[f"block{b}/cv"] = lin(f"block{b}/cv", d.cond, d.width)
        w[f"block{b}/f1"] = lin(f"block{b}/f1", d.width, d.ffn)
        w[f"block{b}/f2"] = lin(f"block{b}/f2", d.ffn, d.width, gain=0.5)
    if stage == "structure":
        w["decode"] = lin("decode", d.latent, 1, gain=2.0)[:, 0]
    for arr in w.values():
        if isinstance(arr, np.ndarray):
            arr.setflags(write=False)
    return ToyFlowModel(stage, int(seed), dims, w)


def rectified_flow_step(x, velocity, dt: float) -> np.ndarray:
    """Euler update x + dt * velocity."""
    x = np.asarray(x)
    velocity = np.asarray(velocity)
    if x.shape != velocity.shape:
        raise InvalidInputError(f"state {x.shape} and velocity {velocity.shape} differ")
    if not dt > 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    return x + x.dtype.type(dt) * velocity


# --------------------------------------------------------------------------
# K/V caches
# --------------------------------------------------------------------------


class KVCache:
    """Write-once store of per-(step, layer) keys and values from one generation.

    When ``spill_dir`` is set, entries beyond ``spill_bytes`` of in-memory data are
    written to tensor files and read back on demand.
    """

    def __init__(self, stage: str, positions: np.ndarray | None = None, spill_dir=None, spill_bytes: int | None = None):
        self.stage = stage
        self.positions = positions
        self.spill_dir = Path(spill_dir) if spill_dir is not None else None
        self.spill_bytes = spill_bytes
        self._mem: dict = {}
        self._files: dict = {}
        self.nbytes = 0

    def __len__(self):
        return len(self._mem) + len(self._files)

    def __contains__(self, key):
        return key in self._mem or key in self._files

    def file_name(self, step: int, block: int) -> str:
        return f"{self.stage}_step{step:03d}_layer{block:02d}.i3dt"

    def put(self, step: int, block: int, k: np.ndarray, v: np.ndarray) -> None:
        key = (int(step), int(block))
        if key in self:
            raise InvalidInputError(f"cache entry {key} already written")
        k = np.array(k, dtype=np.float32)
        v = np.array(v, dtype=np.float32)
        size = k.nbytes + v.nbytes
        if self.spill_dir is not None and self.spill_bytes is not None and self.nbytes + size > self.spill_bytes:
            self.spill_dir.mkdir(parents=True, exist_ok=True)
            path = self.spill_dir / self.file_name(*key)
            write_tensor(path, k, v)
            self._files[key] = path
            return
        k.setflags(write=False)
        v.setflags(write=False)
        self._mem[key] = (k, v)
        self.nbytes += size

    def get(self, step: int, block: int):
        key = (int(step), int(block))
        if key in self._mem:
            return self._mem[key]
        if key in self._files:
            k, v = read_tensors(self._files[key])
            return k, v
        raise KeyError(f"no cached K/V for step {step}, layer {block} in {self.stage} cache")

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for step, block in sorted(set(self._mem) | set(self._files)):
            write_tensor(directory / self.file_name(step, block), *self.get(step, block))


class ExternalKV(NamedTuple):
    source: KVCache
    target: KVCache


# --------------------------------------------------------------------------
# Stage 1
# --------------------------------------------------------------------------


class Stage1Result(NamedTuple):
    occupancy: DenseGrid
    logits: np.ndarray
    positions: np.ndarray
    latent: np.ndarray
    kv: KVCache


def _per_step(hooks, steps: int) -> list:
    if isinstance(hooks, attn.HookSpec):
        return [hooks] * steps
    hooks = list(hooks)
    if len(hooks) != steps:
        raise InvalidInputError(f"expected {steps} per-step hooks, got {len(hooks)}")
    return hooks


def _layer_mask(hook_layers, blocks: int) -> list:
    if hook_layers is None:
        return [True] * blocks
    mask = [bool(x) for x in hook_layers]
    if len(mask) != blocks:
        raise ConfigError(f"hook_layers has {len(mask)} entries, model has {blocks} blocks")
    return mask


def _upsample_axis(n_fine: int, n_coarse: int) -> np.ndarray:
    """Linear interpolation matrix (n_fine x n_coarse) between cell centres."""
    u = np.zeros((n_fine, n_coarse), dtype=np.float32)
    f = n_fine / n_coarse
    for i in range(n_fine):
        c = min(max((i + 0.5) / f - 0.5, 0.0), n_coarse - 1.0)
        lo = int(np.floor(c))
        hi = min(lo + 1, n_coarse - 1)
        t = c - lo
        u[i, lo] += 1.0 - t
        u[i, hi] += t
    return u


def _radial_bias(n: int) -> np.ndarray:
    c = (np.arange(n, dtype=np.float32) + np.float32(0.5)) - np.float32(n / 2)
    r2 = c[:, None, None] ** 2 + c[None, :, None] ** 2 + c[None, None, :] ** 2
    r = np.sqrt(r2) / np.float32(n / 2)
    return np.float32(RADIAL_GAIN) * (np.float32(RADIAL_CUTOFF) - r)


def decode_occupancy(model: ToyFlowModel, latent: np.ndarray) -> np.ndarray:
    """Fine occupancy logits from the coarse stage-1 latent."""
    n, nk = model.dims.resolution, model.dims.token_resolution
    grid = latent.reshape(nk, nk, nk, -1)
    u = _upsample_axis(n, nk)
    fine = np.tensordot(u, grid, axes=(1, 0))
    fine = np.tensordot(u, fine, axes=(1, 1)).transpose(1, 0, 2, 3)
    fine = np.tensordot(u, fine, axes=(1, 2)).transpose(1, 2, 0, 3)
    return fine @ model.weights["decode"] + _radial_bias(n)


def _external_for(external, step, b):
    ks, vs = external.source.get(step, b)
    kt, vt = external.target.get(step, b)
    return ks, vs, kt, vt


def stage1_denoise(model: ToyFlowModel, condition: ConditionTokens, hooks=attn.HookSpec(),
                   external_kv: ExternalKV | None = None, steps: int = 8, rng: Rng | None = None,
                   hook_layers: Sequence[bool] | None = None, capture: bool = True,
                   spill_dir=None, spill_bytes=None) -> Stage1Result:
    """Denoise the coarse structure latent and threshold the decoded logits at 0."""
    if model.stage != "structure":
        raise InvalidInputError("stage1_denoise needs a structure-stage model")
    if condition.channels != model.dims.cond:
        raise InvalidInputError(f"condition width {condition.channels} != model width {model.dims.cond}")
    per_step = _per_step(hooks, steps)
    for spec in per_step:
        if spec.variant not in attn.STAGE1_VARIANTS:
            raise ConfigError(f"hook variant {spec.variant!r} is not valid in stage 1")
        if spec.needs_external and external_kv is None:
            raise ConfigError(f"{spec.variant} requires stage-1 (geo) K/V caches from the source and target runs")
    mask = _layer_mask(hook_layers, model.dims.blocks)
    rng = rng if rng is not None else Rng(0, "stage1/noise")
    nk = model.dims.token_resolution
    cells = grid_positions(nk)
    pos_emb = model.embed_positions(cells, nk)
    x = seeded_gaussian(rng, (cells.shape[0], model.dims.latent))
    cache = KVCache("geo", spill_dir=spill_dir, spill_bytes=spill_bytes)
    dt = 1.0 / steps
    for t, spec in enumerate(per_step):
        s = t / steps
        layout = patch_layout(nk, spec.patch_side) if spec.variant == "fused_structure" else None

        def hook(b, q, k, v, spec=spec, t=t, layout=layout):
            if spec.variant == "none" or not mask[b]:
                return attn.attention(q, k, v)
            ks, vs, kt, vt = _external_for(external_kv, t, b)
            if spec.variant == "interp_kv":
                return attn.interp_attention(q, ks, kt, vs, vt, spec.alpha)
            if spec.variant == "aid_inner":
                return attn.aid_inner(q, ks, kt, k, vs, vt, v, spec.alpha)
            if spec.variant == "aid_outer":
                return attn.aid_outer(q, ks, kt, k, vs, vt, v, spec.alpha)
            return attn.fused_structure_attention(q, ks, vs, kt, vt, k, v, spec.alpha, spec.correspondence, layout)

        cap = (lambda b, k, v, t=t: cache.put(t, b, k, v)) if capture else None
        vel = model.velocity(x, s, pos_emb, condition.tokens, hook, cap)
        x = rectified_flow_step(x, vel, dt)
    logits = decode_occupancy(model, x)
    occ = (logits > 0).astype(np.float32)
    positions = np.argwhere(occ > 0).astype(np.int64)
    return Stage1Result(DenseGrid(occ[..., None]), logits, positions, x, cache)


# --------------------------------------------------------------------------
# Stage 2
# --------------------------------------------------------------------------


class Stage2Result(NamedTuple):
    slat: SparseVoxelLatent
    kv: KVCache
    degenerate: int


def nearest_rows(pos_from: np.ndarray, pos_to: np.ndarray) -> np.ndarray:
    """For each row of ``pos_from``, index of the nearest row of ``pos_to`` (lowest index on ties)."""
    a = pos_from.astype(np.int64)
    b = pos_to.astype(np.int64)
    out = np.empty(a.shape[0], dtype=np.int64)
    for lo in range(0, a.shape[0], 1024):
        d = ((a[lo:lo + 1024, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        out[lo:lo + 1024] = np.argmin(d, axis=1)
    return out


def stage2_denoise(model: ToyFlowModel, condition: ConditionTokens, structure: np.ndarray,
                   hooks=attn.HookSpec(), external_kv: ExternalKV | None = None, steps: int = 8,
                   rng: Rng | None = None, hook_layers: Sequence[bool] | None = None,
                   capture: bool = True, spill_dir=None, spill_bytes=None) -> Stage2Result:
    """Denoise one latent per active voxel. Noise is keyed by voxel position."""
    if model.stage != "slat":
        raise InvalidInputError("stage2_denoise needs a slat-stage model")
    structure = np.asarray(structure, dtype=np.int64).reshape(-1, 3)
    if structure.shape[0] == 0:
        raise InvalidInputError("stage 2 needs a non-empty structure")
    if condition.channels != model.dims.cond:
        raise InvalidInputError(f"condition width {condition.channels} != model width {model.dims.cond}")
    per_step = _per_step(hooks, steps)
    for spec in per_step:
        if spec.variant not in attn.STAGE2_VARIANTS:
            raise ConfigError(f"hook variant {spec.variant!r} is not valid in stage 2")
        if spec.needs_external and external_kv is None:
            raise ConfigError(f"{spec.variant} requires stage-2 (tex) K/V caches from the source and target runs")
    mask = _layer_mask(hook_layers, model.dims.blocks)
    n = model.dims.resolution
    order = np.argsort(linear_index(structure, n), kind="stable")
    positions = structure[order]
    rng = rng if rng is not None else Rng(0, "stage2/noise")
    noise = seeded_gaussian(rng, (n ** 3, model.dims.latent))
    x = noise[linear_index(positions, n)]
    pos_emb = model.embed_positions(positions, n)
    cache = KVCache("tex", positions=positions, spill_dir=spill_dir, spill_bytes=spill_bytes)
    target_rows = None
    if external_kv is not None and any(s.variant in ("interp_kv", "aid_inner") for s in per_step):
        target_rows = nearest_rows(external_kv.source.positions, external_kv.target.positions)
    degenerate = 0
    dt = 1.0 / steps
    for t, spec in enumerate(per_step):
        s = t / steps

        def hook(b, q, k, v, spec=spec, t=t):
            nonlocal degenerate
            if spec.variant == "none" or not mask[b]:
                return attn.attention(q, k, v)
            ks, vs, kt, vt = _external_for(external_kv, t, b)
            if spec.variant == "texture_fusion":
                match = attn.texture_match(k, ks, kt)
                fused = attn.texture_fuse(k, v, match, ks, vs, kt, vt, spec.alpha)
                degenerate += fused.degenerate
                return attn.attention(q, fused.keys, fused.values)
            if spec.variant == "aid_outer":
                return attn.aid_outer(q, ks, kt, k, vs, vt, v, spec.alpha)
            kt, vt = kt[target_rows], vt[target_rows]
            if spec.variant == "interp_kv":
                return attn.interp_attention(q, ks, kt, vs, vt, spec.alpha)
            return attn.aid_inner(q, ks, kt, k, vs, vt, v, spec.alpha)

        cap = (lambda b, k, v, t=t: cache.put(t, b, k, v)) if capture else None
        vel = model.velocity(x, s, pos_emb, condition.tokens, hook, cap)
        x = rectified_flow_step(x, vel, dt)
    return Stage2Result(SparseVoxelLatent(positions, x.astype(np.float32), n), cache, degenerate)


# --------------------------------------------------------------------------
# Decoding
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ColoredVoxelAsset:
    positions: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray
    resolution: int

    def __post_init__(self):
        if self.positions.shape[0] != self.rgb.shape[0] or self.rgb.shape[0] != self.opacity.shape[0]:
            raise InvalidInputError("positions, rgb and opacity must have equal lengths")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def quantized(self) -> "ColoredVoxelAsset":
        """Colours rounded to 8 bits, exactly what a PLY round trip preserves."""
        rgb = np.round(np.clip(self.rgb, 0, 1) * 255).astype(np.float32) / np.float32(255)
        op = np.round(np.clip(self.opacity, 0, 1) * 255).astype(np.float32) / np.float32(255)
        return ColoredVoxelAsset(self.positions, rgb, op, self.resolution)


def decode_slat(slat: SparseVoxelLatent) -> ColoredVoxelAsset:
    """rgb = sigmoid(channels 0-2), opacity = sigmoid(channel 3)."""
    if slat.channels < 4:
        raise InvalidInputError(f"decoding needs at least 4 channels, got {slat.channels}")
    f = slat.features
    rgb = np.clip(expit(f[:, :3]), 0.0, 1.0).astype(np.float32)
    op = np.clip(expit(f[:, 3]), 0.0, 1.0).astype(np.float32)
    return ColoredVoxelAsset(slat.positions.copy(), rgb, op, slat.resolution)

