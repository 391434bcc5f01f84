"""Attention and its interpolating variants.

All functions take and return float32 token matrices (tokens x head dim) and
are single-head.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .correspond import CorrespondenceMap, PatchGrid, apply_permutation
from .errors import InvalidInputError
from .tensor import ZERO_NORM, lerp

VARIANTS = ("none", "interp_kv", "aid_inner", "aid_outer", "fused_structure", "texture_fusion")
STAGE1_VARIANTS = ("none", "interp_kv", "aid_inner", "aid_outer", "fused_structure")
STAGE2_VARIANTS = ("none", "texture_fusion", "interp_kv", "aid_inner", "aid_outer")

MATCH_BLOCK = 1024


@dataclass(frozen=True)
class HookSpec:
    """Which attention variant a self-attention layer runs, and with what coefficient."""

    variant: str = "none"
    alpha: float = 0.0
    correspondence: CorrespondenceMap | None = None
    patch_side: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown hook variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.variant == "fused_structure":
            if self.correspondence is None or self.patch_side is None:
                raise InvalidInputError("fused_structure needs a correspondence map and a patch side")
        elif self.correspondence is not None:
            raise InvalidInputError(f"{self.variant} does not take a correspondence map")

    @property
    def needs_external(self) -> bool:
        return self.variant != "none"


def _check(q, k, v):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise InvalidInputError("q, k, v must be 2-D")
    if not q.shape[1] == k.shape[1] == v.shape[1]:
        raise InvalidInputError(f"head dims differ: {q.shape[1]}, {k.shape[1]}, {v.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise InvalidInputError(f"key/value counts differ: {k.shape[0]} vs {v.shape[0]}")
    if k.shape[0] == 0:
        raise InvalidInputError("attention needs at least one key")


def attention(q, k, v) -> np.ndarray:
    """softmax(q k^T / sqrt(d)) v with row-max subtraction."""
    q = np.asarray(q, dtype=np.float32)
    k = np.asarray(k, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    _check(q, k, v)
    logits = (q @ k.T) * np.float32(1.0 / np.sqrt(q.shape[1]))
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v


def interp_attention(q_i, k_s, k_t, v_s, v_t, alpha: float) -> np.ndarray:
    return attention(q_i, lerp(k_s, k_t, alpha), lerp(v_s, v_t, alpha))


def aid_inner(q_i, k_s, k_t, k_i, v_s, v_t, v_i, alpha: float) -> np.ndarray:
    """Interpolate external K/V, then attend over [interpolated, own]."""
    k = np.concatenate([lerp(k_s, k_t, alpha), k_i])
    v = np.concatenate([lerp(v_s, v_t, alpha), v_i])
    return attention(q_i, k, v)


def aid_outer(q_i, k_s, k_t, k_i, v_s, v_t, v_i, alpha: float) -> np.ndarray:
    """Blend the outputs of attention over [source, own] and [target, own]."""
    if alpha == 0:
        return attention(q_i, np.concatenate([k_s, k_i]), np.concatenate([v_s, v_i]))
    if alpha == 1:
        return attention(q_i, np.concatenate([k_t, k_i]), np.concatenate([v_t, v_i]))
    src = attention(q_i, np.concatenate([k_s, k_i]), np.concatenate([v_s, v_i]))
    tgt = attention(q_i, np.concatenate([k_t, k_i]), np.concatenate([v_t, v_i]))
    return lerp(src, tgt, alpha)


def fused_structure_attention(q_i, k_s, v_s, k_t, v_t, k_i, v_i, alpha: float,
                              cmap: CorrespondenceMap, layout: PatchGrid) -> np.ndarray:
    """AID-O with the target K/V first re-blocked by the patch correspondence."""
    if alpha == 0:
        return aid_outer(q_i, k_s, k_t, k_i, v_s, v_t, v_i, 0.0)
    k_hat, v_hat = apply_permutation(k_t, v_t, cmap, layout)
    return aid_outer(q_i, k_s, k_hat, k_i, v_s, v_hat, v_i, alpha)


def _unit(x: np.ndarray) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    n = np.sqrt(np.einsum("ij,ij->i", x64, x64))
    return x64 / np.maximum(n, ZERO_NORM)[:, None]


class TextureMatch(NamedTuple):
    source: np.ndarray
    target: np.ndarray


def texture_match(k_i, k_s, k_t, block: int = MATCH_BLOCK) -> TextureMatch:
    """Index of the most cosine-similar source and target row for every frame row.

    Ties resolve to the lowest index. Row counts of the three inputs may differ.
    """
    k_i, k_s, k_t = (np.asarray(x) for x in (k_i, k_s, k_t))
    if k_s.shape[0] == 0 or k_t.shape[0] == 0:
        raise InvalidInputError("source and target key sets must be non-empty")
    if not k_i.shape[1] == k_s.shape[1] == k_t.shape[1]:
        raise InvalidInputError("channel counts differ")
    ui, us, ut = _unit(k_i), _unit(k_s), _unit(k_t)
    m = np.empty(k_i.shape[0], dtype=np.int64)
    n = np.empty(k_i.shape[0], dtype=np.int64)
    for lo in range(0, k_i.shape[0], block):
        rows = ui[lo:lo + block]
        m[lo:lo + block] = np.argmax(rows @ us.T, axis=1)
        n[lo:lo + block] = np.argmax(rows @ ut.T, axis=1)
    return TextureMatch(m, n)


class TextureFusion(NamedTuple):
    keys: np.ndarray
    values: np.ndarray
    degenerate: int


def _fuse(x_i, x_s, x_t, match: TextureMatch, alpha: float):
    blend = lerp(x_s[match.source], x_t[match.target], alpha).astype(np.float64)
    tilde = blend + x_i.astype(np.float64)
    own = np.sqrt(np.einsum("ij,ij->i", x_i.astype(np.float64), x_i.astype(np.float64)))
    mag = np.sqrt(np.einsum("ij,ij->i", tilde, tilde))
    bad = mag < ZERO_NORM
    scale = own / np.where(bad, 1.0, mag)
    out = (tilde * scale[:, None]).astype(np.float32)
    out[bad] = x_i[bad]
    return out, int(bad.sum())


def texture_fuse(k_i, v_i, match: TextureMatch, k_s, v_s, k_t, v_t, alpha: float) -> TextureFusion:
    """Add the alpha-blend of matched source/target rows to each own row, then restore its norm.

    Keys and values use the same match indices. Tokens whose blended sum vanishes
    are kept unchanged and counted in ``degenerate``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}")
    k_i, v_i = np.asarray(k_i, dtype=np.float32), np.asarray(v_i, dtype=np.float32)
    if match.source.shape[0] != k_i.shape[0] or k_i.shape[0] != v_i.shape[0]:
        raise InvalidInputError("match indices do not line up with the frame tokens")
    k_new, dk = _fuse(k_i, np.asarray(k_s, dtype=np.float32), np.asarray(k_t, dtype=np.float32), match, alpha)
    v_new, dv = _fuse(v_i, np.asarray(v_s, dtype=np.float32), np.asarray(v_t, dtype=np.float32), match, alpha)
    return TextureFusion(k_new, v_new, dk + dv)
