"""Numeric containers, keyed randomness and small linear-algebra helpers.

Feature matrices are plain 2-D ``float32`` numpy arrays (tokens x channels).
Reductions that feed statistics run in float64.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateRowError, InvalidInputError

ZERO_NORM = 1e-12


def as_features(x, name: str = "features") -> np.ndarray:
    """Coerce to a finite 2-D float32 array."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


# --------------------------------------------------------------------------
# Containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseGrid:
    """N^3 x C grid stored as an (N, N, N, C) array.

    C-order of that array is the x-major linearisation x*N^2 + y*N + z.
    """

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 4 or not (d.shape[0] == d.shape[1] == d.shape[2]) or d.shape[0] < 1:
            raise InvalidInputError(f"dense grid must have shape (N, N, N, C), got {d.shape}")

    @property
    def resolution(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def tokens(self) -> np.ndarray:
        """Cells as a (N^3, C) matrix in x-major order."""
        return self.data.reshape(-1, self.channels)

    @classmethod
    def zeros(cls, n: int, c: int) -> "DenseGrid":
        return cls(np.zeros((n, n, n, c), dtype=np.float32))


@dataclass(frozen=True)
class SparseVoxelLatent:
    """Active voxel positions with one feature row per voxel.

    ``positions`` are unique and sorted lexicographically, matching the row
    order of ``features``.
    """

    positions: np.ndarray
    features: np.ndarray
    resolution: int

    def __post_init__(self):
        pos = np.asarray(self.positions)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise InvalidInputError(f"positions must be (V, 3), got {pos.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != pos.shape[0]:
            raise InvalidInputError("features must have one row per position")
        if pos.size and (pos.min() < 0 or pos.max() >= self.resolution):
            raise InvalidInputError("positions outside the grid")
        if pos.shape[0] > 1:
            lin = linear_index(pos, self.resolution)
            if np.any(np.diff(lin) <= 0):
                raise InvalidInputError("positions must be unique and lexicographically sorted")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @classmethod
    def from_unsorted(cls, positions, features, resolution: int) -> "SparseVoxelLatent":
        pos = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(features, dtype=np.float32).reshape(pos.shape[0], -1)
        lin = linear_index(pos, resolution)
        uniq, idx = np.unique(lin, return_index=True)
        if uniq.shape[0] != lin.shape[0]:
            raise InvalidInputError("duplicate voxel positions")
        return cls(pos[idx], feats[idx], resolution)


def linear_index(positions: np.ndarray, n: int) -> np.ndarray:
    p = np.asarray(positions, dtype=np.int64)
    return (p[:, 0] * n + p[:, 1]) * n + p[:, 2]


def grid_positions(n: int) -> np.ndarray:
    """All (x, y, z) cells of an n^3 grid in x-major order."""
    g = np.indices((n, n, n)).reshape(3, -1).T
    return g.astype(np.int64)


# --------------------------------------------------------------------------
# Keyed randomness
# --------------------------------------------------------------------------


def _purpose_words(purpose: str) -> list[int]:
    digest = hashlib.blake2b(purpose.encode("utf-8"), digest_size=16).digest()
    return list(struct.unpack("<4I", digest))


@dataclass(frozen=True)
class Rng:
    """Counter-based stream keyed by (seed, purpose, frame, step).

    Every key maps to its own Philox stream, so draws never depend on the
    order in which streams are consumed.
    """

    seed: int
    purpose: str = ""
    frame: int = 0
    step: int = 0

    def key(self, purpose: str | None = None, frame: int | None = None, step: int | None = None) -> "Rng":
        changes = {}
        if purpose is not None:
            changes["purpose"] = purpose
        if frame is not None:
            changes["frame"] = frame
        if step is not None:
            changes["step"] = step
        return replace(self, **changes)

    def generator(self) -> np.random.Generator:
        seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        entropy = [seed & 0xFFFFFFFF, seed >> 32, *_purpose_words(self.purpose), int(self.frame), int(self.step)]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def seeded_gaussian(rng: Rng, shape) -> np.ndarray:
    """Standard-normal float32 draws from the keyed stream."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    if any(int(s) <= 0 for s in shape):
        raise InvalidInputError(f"shape must be positive, got {shape}")
    return rng.generator().standard_normal(shape, dtype=np.float32)


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------


def row_norms(x: np.ndarray) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    return np.sqrt(np.einsum("ij,ij->i", x64, x64))


def cosine_similarity_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarity, float64, clipped to [-1, 1]."""
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    if a64.ndim != 2 or b64.ndim != 2 or a64.shape[1] != b64.shape[1]:
        raise InvalidInputError(f"channel mismatch: {a64.shape} vs {b64.shape}")
    na, nb = row_norms(a64), row_norms(b64)
    for which, norms in (("a", na), ("b", nb)):
        bad = np.flatnonzero(norms < ZERO_NORM)
        if bad.size:
            raise DegenerateRowError(int(bad[0]), which)
    sim = (a64 / na[:, None]) @ (b64 / nb[:, None]).T
    return np.clip(sim, -1.0, 1.0)


def psd_sqrt(s) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; tiny negative eigenvalues clamp to 0."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got {s.shape}")
    if s.size and np.max(np.abs(s - s.T)) > 1e-6:
        raise InvalidInputError("matrix is not symmetric")
    sym = 0.5 * (s + s.T)
    w, q = np.linalg.eigh(sym)
    w = np.clip(w, 0.0, None)
    r = (q * np.sqrt(w)) @ q.T
    return 0.5 * (r + r.T)


# --------------------------------------------------------------------------
# I3DT tensor files
# --------------------------------------------------------------------------

I3DT_MAGIC = b"I3DT"
I3DT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.int64): 1, np.dtype(np.uint8): 2}


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise InvalidInputError(f"unsupported dtype {arr.dtype}; use float32, int64 or uint8")
    header = I3DT_MAGIC + struct.pack("<IBB", I3DT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensors(buf: bytes) -> list[np.ndarray]:
    """Decode one or more concatenated tensor records."""
    out = []
    pos = 0
    while pos < len(buf):
        if buf[pos:pos + 4] != I3DT_MAGIC:
            raise InvalidInputError(f"bad magic at byte {pos}")
        version, code, ndim = struct.unpack_from("<IBB", buf, pos + 4)
        if version != I3DT_VERSION:
            raise InvalidInputError(f"unsupported version {version}")
        if code not in _DTYPES:
            raise InvalidInputError(f"unknown dtype code {code}")
        pos += 10
        dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        dt = _DTYPES[code]
        count = int(np.prod(dims)) if ndim else 1
        nbytes = count * dt.itemsize
        if pos + nbytes > len(buf):
            raise InvalidInputError("truncated payload")
        out.append(np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims).copy())
        pos += nbytes
    return out


def write_tensor(path, *arrays) -> None:
    Path(path).write_bytes(b"".join(encode_tensor(a) for a in arrays))


def read_tensors(path) -> list[np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def read_tensor(path) -> np.ndarray:
    arrays = read_tensors(path)
    if len(arrays) != 1:
        raise InvalidInputError(f"{path} holds {len(arrays)} tensors, expected 1")
    return arrays[0]


def lerp(a, b, alpha: float) -> np.ndarray:
    """``a + alpha * (b - a)``; returns exact copies of the endpoints at alpha 0 and 1.

    The difference form makes the result exact when ``a == b``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"cannot interpolate shapes {a.shape} and {b.shape}")
    if alpha == 0:
        return a.copy()
    if alpha == 1:
        return b.copy()
    return a + a.dtype.type(alpha) * (b - a)
