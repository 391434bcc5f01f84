"""Surrogate condition encoder and semantic-aligned condition interpolation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correspond import CorrespondenceMap, solve_assignment
from .errors import InvalidInputError
from .tensor import Rng, cosine_similarity_matrix, lerp, row_norms, seeded_gaussian

EMBED_SEED = 20240917
PART_WEIGHT = 0.6
PALETTE_WEIGHT = 0.3
INSTANCE_WEIGHT = 0.5


@dataclass(frozen=True)
class ConditionInput:
    """Synthetic stand-in for an image prompt.

    ``shape_class`` selects a bank of part embeddings, ``seed`` decides the
    spatial arrangement of those parts over the M token slots plus per-instance
    detail, and ``palette`` (RGB in [0, 1]) shifts every token.
    """

    seed: int
    shape_class: str
    palette: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        pal = tuple(float(x) for x in self.palette)
        if len(pal) != 3 or not all(0.0 <= x <= 1.0 for x in pal):
            raise InvalidInputError(f"palette must be three values in [0, 1], got {self.palette}")
        object.__setattr__(self, "palette", pal)
        object.__setattr__(self, "seed", int(self.seed))
        if not self.shape_class:
            raise InvalidInputError("shape_class must be a non-empty string")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "shape_class": self.shape_class, "palette": list(self.palette)}

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionInput":
        unknown = set(d) - {"seed", "shape_class", "palette"}
        if unknown:
            raise InvalidInputError(f"unknown descriptor fields: {sorted(unknown)}")
        return cls(int(d["seed"]), str(d["shape_class"]), tuple(d.get("palette", (0.5, 0.5, 0.5))))


@dataclass(frozen=True)
class ConditionTokens:
    tokens: np.ndarray
    tag: str = "source"
    alpha: float | None = field(default=None)

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / row_norms(x)[:, None].astype(np.float32)


def encode_condition(inp: ConditionInput, tokens: int = 64, channels: int = 16, tag: str = "source") -> ConditionTokens:
    """Expand a descriptor into ``tokens`` x ``channels`` unit-norm patch tokens."""
    if tokens < 1 or channels < 1:
        raise InvalidInputError("token and channel counts must be positive")
    parts = seeded_gaussian(Rng(EMBED_SEED, f"condition/class/{inp.shape_class}"), (tokens, channels))
    layout = Rng(inp.seed, "condition/layout").generator().permutation(tokens)
    pal_map = seeded_gaussian(Rng(EMBED_SEED, "condition/palette"), (3, channels))
    pal = (np.asarray(inp.palette, dtype=np.float32) - np.float32(0.5)) @ pal_map
    pal_norm = np.float32(max(float(np.linalg.norm(pal)), 1e-6))
    instance = seeded_gaussian(Rng(inp.seed, "condition/instance"), (tokens, channels))
    mix = (
        np.float32(PART_WEIGHT) * _unit_rows(parts[layout])
        + np.float32(PALETTE_WEIGHT) * (pal / pal_norm)[None, :]
        + np.float32(INSTANCE_WEIGHT) * _unit_rows(instance)
    )
    return ConditionTokens(_unit_rows(mix).astype(np.float32), tag)


def semantic_align(c_s: ConditionTokens, c_t: ConditionTokens) -> CorrespondenceMap:
    """Bijection from source tokens to their most similar target tokens (max summed cosine)."""
    if c_s.tokens.shape != c_t.tokens.shape:
        raise InvalidInputError(f"condition shapes differ: {c_s.tokens.shape} vs {c_t.tokens.shape}")
    return solve_assignment(cosine_similarity_matrix(c_s.tokens, c_t.tokens))


def condition_interp(c_s: ConditionTokens, c_t: ConditionTokens, cmap: CorrespondenceMap,
                     alpha: float) -> ConditionTokens:
    """Token j becomes (1 - alpha) * c_s[j] + alpha * c_t[pi(j)]."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}")
    if c_s.tokens.shape != c_t.tokens.shape:
        raise InvalidInputError("source and target conditions must have equal shapes")
    if cmap.size != c_s.count:
        raise InvalidInputError(f"map size {cmap.size} does not match {c_s.count} tokens")
    aligned = c_t.tokens[cmap.full_permutation]
    return ConditionTokens(lerp(c_s.tokens, aligned, alpha), "interpolated", float(alpha))
