"""Assignment solving, SLAT densification and patch-level correspondence."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import kernels
from .errors import InvalidInputError
from .tensor import (
    ZERO_NORM,
    DenseGrid,
    SparseVoxelLatent,
    cosine_similarity_matrix,
    decode_tensors,
    encode_tensor,
    row_norms,
)

EXACT_LIMIT = 2048


@dataclass(frozen=True)
class CorrespondenceMap:
    """Source index -> target index, with a mask of which entries are real matches.

    Unmatched entries map to themselves. The map can be partial; ``full_permutation``
    completes it into a bijection deterministically.
    """

    mapping: np.ndarray
    matched: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        mask = np.asarray(self.matched, dtype=bool)
        object.__setattr__(self, "mapping", m)
        object.__setattr__(self, "matched", mask)
        if m.ndim != 1 or mask.shape != m.shape:
            raise InvalidInputError("mapping and matched must be 1-D of equal length")
        g = m.shape[0]
        if g and (m.min() < 0 or m.max() >= g):
            raise InvalidInputError("mapping index out of range")
        if np.any(m[~mask] != np.flatnonzero(~mask)):
            raise InvalidInputError("unmatched entries must map to themselves")
        hit = m[mask]
        if np.unique(hit).shape[0] != hit.shape[0]:
            raise InvalidInputError("mapping is not injective on matched entries")

    @property
    def size(self) -> int:
        return self.mapping.shape[0]

    @classmethod
    def identity(cls, g: int, matched: bool = False) -> "CorrespondenceMap":
        return cls(np.arange(g, dtype=np.int64), np.full(g, matched, dtype=bool))

    @classmethod
    def from_pairs(cls, g: int, src, tgt) -> "CorrespondenceMap":
        mapping = np.arange(g, dtype=np.int64)
        matched = np.zeros(g, dtype=bool)
        src = np.asarray(src, dtype=np.int64)
        mapping[src] = np.asarray(tgt, dtype=np.int64)
        matched[src] = True
        return cls(mapping, matched)

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.full_permutation, np.arange(self.size)))

    @cached_property
    def full_permutation(self) -> np.ndarray:
        """Bijection extending the matched pairs.

        Free sources that are also free targets stay in place; the rest are paired
        in ascending order. The rule is symmetric, so ``inverse()`` completes to
        the inverse permutation.
        """
        g = self.size
        perm = self.mapping.copy()
        taken = np.zeros(g, dtype=bool)
        taken[self.mapping[self.matched]] = True
        free_src = np.flatnonzero(~self.matched)
        free_tgt = np.flatnonzero(~taken)
        both = np.intersect1d(free_src, free_tgt, assume_unique=True)
        perm[both] = both
        rest_src = np.setdiff1d(free_src, both, assume_unique=True)
        rest_tgt = np.setdiff1d(free_tgt, both, assume_unique=True)
        perm[rest_src] = rest_tgt
        perm.setflags(write=False)
        return perm

    def inverse(self) -> "CorrespondenceMap":
        src = np.flatnonzero(self.matched)
        return CorrespondenceMap.from_pairs(self.size, self.mapping[src], src)

    def to_bytes(self) -> bytes:
        return encode_tensor(self.mapping.astype(np.int64)) + encode_tensor(self.matched.astype(np.uint8))

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CorrespondenceMap":
        arrays = decode_tensors(buf)
        if len(arrays) != 2:
            raise InvalidInputError("correspondence file must hold an index vector and a mask")
        return cls(arrays[0], arrays[1].astype(bool))


def assignment_objective(sim, cmap: CorrespondenceMap) -> float:
    """Exactly rounded sum of sim over matched pairs (independent of summation order)."""
    src = np.flatnonzero(cmap.matched)
    return math.fsum(np.asarray(sim, dtype=np.float64)[src, cmap.mapping[src]].tolist())


def _greedy_assignment(sim: np.ndarray) -> np.ndarray:
    n = sim.shape[0]
    rows, cols = np.divmod(np.arange(n * n), n)
    order = np.lexsort((cols, rows, -sim.ravel()))
    out = np.full(n, -1, dtype=np.int64)
    col_used = np.zeros(n, dtype=bool)
    left = n
    for idx in order:
        r, c = rows[idx], cols[idx]
        if out[r] < 0 and not col_used[c]:
            out[r] = c
            col_used[c] = True
            left -= 1
            if left == 0:
                break
    return out


def solve_assignment(sim, exact_limit: int = EXACT_LIMIT) -> CorrespondenceMap:
    """Full bijection maximising the summed similarity.

    Exact up to ``exact_limit`` rows; larger problems use a highest-similarity-first
    greedy matcher, which is not guaranteed optimal.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise InvalidInputError(f"similarity matrix must be square, got {sim.shape}")
    if not np.all(np.isfinite(sim)):
        raise InvalidInputError("similarity matrix has non-finite entries")
    n = sim.shape[0]
    if n <= exact_limit:
        mapping = kernels.min_cost_assignment(-sim)
    else:
        mapping = _greedy_assignment(sim)
    return CorrespondenceMap(mapping, np.ones(n, dtype=bool))


def densify_project(slat: SparseVoxelLatent, target_resolution: int) -> DenseGrid:
    """Average sparse voxel features into a coarser dense grid; empty cells stay zero."""
    n, nk = slat.resolution, int(target_resolution)
    if nk < 1 or nk > n or n % nk:
        raise InvalidInputError(f"target resolution {nk} must divide source resolution {n}")
    f = n // nk
    c = slat.channels
    sums = np.zeros((nk ** 3, c), dtype=np.float64)
    counts = np.zeros(nk ** 3, dtype=np.int64)
    if slat.count:
        cell = slat.positions // f
        lin = (cell[:, 0] * nk + cell[:, 1]) * nk + cell[:, 2]
        np.add.at(sums, lin, slat.features.astype(np.float64))
        np.add.at(counts, lin, 1)
    nz = counts > 0
    sums[nz] /= counts[nz, None]
    return DenseGrid(sums.astype(np.float32).reshape(nk, nk, nk, c))


@dataclass(frozen=True)
class PatchGrid:
    """Cube patches of side ``side`` over an ``resolution``^3 grid, with mean-pooled features."""

    resolution: int
    side: int
    features: np.ndarray

    @property
    def per_axis(self) -> int:
        return -(-self.resolution // self.side)

    @property
    def count(self) -> int:
        return self.per_axis ** 3

    @property
    def cell_count(self) -> int:
        return self.resolution ** 3

    def cell_patch_ids(self) -> np.ndarray:
        """Patch id of every cell, cells in x-major order."""
        return patch_ids(self.resolution, self.side)

    def blocks(self) -> list[np.ndarray]:
        """Cell indices of each patch, ascending (x-major within the patch)."""
        ids = self.cell_patch_ids()
        order = np.argsort(ids, kind="stable")
        bounds = np.searchsorted(ids[order], np.arange(self.count + 1))
        return [order[bounds[p]:bounds[p + 1]] for p in range(self.count)]


def patch_ids(n: int, side: int) -> np.ndarray:
    per = -(-n // side)
    a = np.arange(n) // side
    return ((a[:, None, None] * per + a[None, :, None]) * per + a[None, None, :]).ravel()


def patch_layout(n: int, side: int) -> PatchGrid:
    """A PatchGrid without features, for token-layout bookkeeping."""
    if side < 1 or side > n:
        raise InvalidInputError(f"patch side must be in [1, {n}], got {side}")
    per = -(-n // side)
    return PatchGrid(n, side, np.zeros((per ** 3, 0), dtype=np.float32))


def partition_patches(grid: DenseGrid, side: int) -> PatchGrid:
    """Mean-pool a dense grid over cube patches. Boundary patches average in-grid cells only."""
    n = grid.resolution
    if side < 1 or side > n:
        raise InvalidInputError(f"patch side must be in [1, {n}], got {side}")
    ids = patch_ids(n, side)
    per = -(-n // side)
    g = per ** 3
    sums = np.zeros((g, grid.channels), dtype=np.float64)
    np.add.at(sums, ids, grid.tokens().astype(np.float64))
    counts = np.bincount(ids, minlength=g)
    return PatchGrid(n, side, (sums / counts[:, None]).astype(np.float32))


def dynamic_patch_correspondence(src: PatchGrid, tgt: PatchGrid, tau0: float = 0.5) -> CorrespondenceMap:
    """Injective patch matching over pairs with cosine similarity above ``tau0``.

    Maximises the summed similarity of the matched pairs. All-zero patches never
    match; patches without an admissible partner keep their own index.
    """
    if src.count != tgt.count:
        raise InvalidInputError(f"patch counts differ: {src.count} vs {tgt.count}")
    if src.features.shape[1] != tgt.features.shape[1]:
        raise InvalidInputError("patch channel counts differ")
    g = src.count
    s_ok = row_norms(src.features) >= ZERO_NORM
    t_ok = row_norms(tgt.features) >= ZERO_NORM
    si, ti = np.flatnonzero(s_ok), np.flatnonzero(t_ok)
    if si.size == 0 or ti.size == 0:
        return CorrespondenceMap.identity(g)
    sim = np.full((g, g), -np.inf)
    sim[np.ix_(si, ti)] = cosine_similarity_matrix(src.features[si], tgt.features[ti])
    # a pair is worth taking only if admissible and strictly positive
    gain = np.where((sim > tau0) & (sim > 0.0), sim, 0.0)
    rows = np.flatnonzero(gain.max(axis=1) > 0)
    cols = np.flatnonzero(gain.max(axis=0) > 0)
    if rows.size == 0:
        return CorrespondenceMap.identity(g)
    sub = gain[np.ix_(rows, cols)]
    k = max(rows.size, cols.size)
    padded = np.zeros((k, k))
    padded[: rows.size, : cols.size] = sub
    assign = solve_assignment(padded).mapping[: rows.size]
    keep = assign < cols.size
    keep[keep] = sub[np.flatnonzero(keep), assign[keep]] > 0
    return CorrespondenceMap.from_pairs(g, rows[keep], cols[assign[keep]])


def apply_permutation(k, v, cmap: CorrespondenceMap, layout: PatchGrid):
    """Move target token blocks so target patch pi(p) lands at source patch p.

    Tokens are grouped by patch under the x-major cell order of ``layout``. K and V
    are permuted identically.
    """
    k = np.asarray(k)
    v = np.asarray(v)
    if k.shape[0] != layout.cell_count or v.shape[0] != layout.cell_count:
        raise InvalidInputError(
            f"token count {k.shape[0]}/{v.shape[0]} does not match layout cells {layout.cell_count}"
        )
    if cmap.size != layout.count:
        raise InvalidInputError(f"map size {cmap.size} does not match patch count {layout.count}")
    perm = cmap.full_permutation
    if np.array_equal(perm, np.arange(cmap.size)):
        return k.copy(), v.copy()
    index = token_permutation(perm, layout)
    return k[index], v[index]


def token_permutation(perm: np.ndarray, layout: PatchGrid) -> np.ndarray:
    blocks = layout.blocks()
    index = np.arange(layout.cell_count)
    for p, q in enumerate(perm):
        if p == q:
            continue
        dst, srcb = blocks[p], blocks[q]
        if dst.shape[0] != srcb.shape[0]:
            raise InvalidInputError(f"patches {p} and {q} differ in size; cannot swap token blocks")
        index[dst] = srcb
    return index
