"""Rendering, feature extractors and trajectory metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .errors import DegenerateEndpointsError, InvalidInputError
from .tensor import Rng, psd_sqrt, seeded_gaussian
from .toyprior import ColoredVoxelAsset

DEFAULT_VIEWS = 16
DEFAULT_ELEVATION = 20.0
IMAGE_SIZE = 64
METRIC_NAMES = ("fid", "kid", "ppl", "adjacent_distance", "adjacent_cosine")


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    azimuth: float = 0.0
    elevation: float = 0.0
    scale: float | None = None
    width: int = IMAGE_SIZE
    height: int = IMAGE_SIZE


class RenderedView(NamedTuple):
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    camera: Camera


def orbit_cameras(views: int = DEFAULT_VIEWS, elevation: float = DEFAULT_ELEVATION, size: int = IMAGE_SIZE) -> list[Camera]:
    """Evenly spaced azimuths at a fixed elevation."""
    if views < 1:
        raise InvalidInputError("need at least one view")
    return [Camera(360.0 * i / views, elevation, None, size, size) for i in range(views)]


def _rotation(azimuth: float, elevation: float) -> np.ndarray:
    a, e = math.radians(azimuth), math.radians(elevation)
    ry = np.array([[math.cos(a), 0.0, math.sin(a)], [0.0, 1.0, 0.0], [-math.sin(a), 0.0, math.cos(a)]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, math.cos(e), -math.sin(e)], [0.0, math.sin(e), math.cos(e)]])
    return rx @ ry


def render_view(asset: ColoredVoxelAsset, camera: Camera) -> RenderedView:
    """Orthographic z-buffered splat of the voxels over a white background.

    The camera looks down -z in its own frame (y up); the nearest voxel on each
    pixel wins and is alpha-blended over white by its opacity.
    """
    n = asset.resolution
    scale = camera.scale if camera.scale is not None else 0.5 * n * math.sqrt(3.0)
    w, h = camera.width, camera.height
    if asset.count == 0:
        return RenderedView(np.ones((h, w, 3), dtype=np.float32), camera)
    centers = asset.positions.astype(np.float64) + 0.5 - n / 2.0
    cam = centers @ _rotation(camera.azimuth, camera.elevation).T
    px = np.floor((cam[:, 0] / (2.0 * scale) + 0.5) * w).astype(np.int64)
    py = np.floor((0.5 - cam[:, 1] / (2.0 * scale)) * h).astype(np.int64)
    depth = -cam[:, 2]
    k = max(1, int(round(w / (2.0 * scale))))
    op = asset.opacity.astype(np.float32)[:, None]
    colors = op * asset.rgb.astype(np.float32) + (np.float32(1.0) - op)
    img = kernels.splat(px, py, depth, colors, k, w, h)
    return RenderedView(np.clip(img, 0.0, 1.0), camera)


def render_views(asset: ColoredVoxelAsset, cameras: Sequence[Camera]) -> list[RenderedView]:
    if len(cameras) == 0:
        raise InvalidInputError("render_views needs at least one camera")
    return [render_view(asset, c) for c in cameras]


# --------------------------------------------------------------------------
# Feature extractors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureExtractor:
    """``flatten`` returns raw pixels; ``projection`` is a fixed random leaky-ReLU MLP."""

    kind: str = "projection"
    depth: int = 2
    width: int = 64
    dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("flatten", "projection"):
            raise InvalidInputError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "projection" and min(self.depth, self.width, self.dim) < 1:
            raise InvalidInputError("projection depth, width and dim must be positive")

    def describe(self) -> str:
        if self.kind == "flatten":
            return "flatten"
        return f"projection:depth={self.depth},width={self.width},dim={self.dim},seed={self.seed}"

    @classmethod
    def parse(cls, text: str) -> "FeatureExtractor":
        """Parse ``flatten`` or ``projection[:key=value,...]``."""
        kind, _, rest = text.strip().partition(":")
        if kind == "flatten":
            if rest:
                raise InvalidInputError("flatten takes no options")
            return cls("flatten")
        if kind != "projection":
            raise InvalidInputError(f"unknown extractor {text!r}; use 'flatten' or 'projection[:depth=..,width=..,dim=..,seed=..]'")
        opts = {}
        for item in filter(None, rest.split(",")):
            key, _, val = item.partition("=")
            if key not in ("depth", "width", "dim", "seed") or not val:
                raise InvalidInputError(f"bad extractor option {item!r}")
            opts[key] = int(val)
        return cls("projection", **opts)

    def layers(self, in_dim: int) -> list[tuple[np.ndarray, np.ndarray]]:
        sizes = [in_dim] + [self.width] * (self.depth - 1) + [self.dim]
        out = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            rng = Rng(self.seed, "extractor/projection", frame=i)
            wgt = seeded_gaussian(rng, (a, b)) * np.float32(1.0 / math.sqrt(a))
            bias = seeded_gaussian(rng.key(step=1), (b,)) * np.float32(0.1)
            out.append((wgt, bias))
        return out


def feature_extract(views: Sequence[RenderedView], extractor: FeatureExtractor) -> np.ndarray:
    """One feature row per view."""
    if len(views) == 0:
        return np.zeros((0, extractor.dim if extractor.kind == "projection" else 0), dtype=np.float32)
    x = np.stack([np.asarray(v.rgb if isinstance(v, RenderedView) else v, dtype=np.float32).reshape(-1) for v in views])
    if extractor.kind == "flatten":
        return x
    h = x - np.float32(0.5)
    layers = extractor.layers(x.shape[1])
    for i, (wgt, bias) in enumerate(layers):
        h = h @ wgt + bias
        if i < len(layers) - 1:
            h = np.maximum(h, np.float32(0.1) * h)
    return h.astype(np.float32)


# --------------------------------------------------------------------------
# Distribution and path metrics
# --------------------------------------------------------------------------


def _samples(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidInputError(f"{name} needs at least 2 samples, got shape {x.shape}")
    return x


def fid(features_a, features_b) -> float:
    """Squared Frechet distance between Gaussian fits (unbiased covariances)."""
    a, b = _samples(features_a, "features_a"), _samples(features_b, "features_b")
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError("feature dimensions differ")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = psd_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    cross = psd_sqrt(0.5 * (middle + middle.T))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray, degree: int = 3) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** degree


def kid(features_a, features_b, degree: int = 3) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel (x.y/d + 1)^3."""
    a, b = _samples(features_a, "features_a"), _samples(features_b, "features_b")
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError("feature dimensions differ")
    m, n = a.shape[0], b.shape[0]
    kaa = polynomial_kernel(a, a, degree)
    kbb = polynomial_kernel(b, b, degree)
    kab = polynomial_kernel(a, b, degree)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def _distance(a: np.ndarray, b: np.ndarray, dist: str) -> np.ndarray:
    if dist == "euclidean":
        return np.linalg.norm(a - b, axis=-1)
    if dist == "angular":
        na = np.linalg.norm(a, axis=-1)
        nb = np.linalg.norm(b, axis=-1)
        cos = np.einsum("...i,...i->...", a, b) / np.maximum(na * nb, 1e-300)
        return np.arccos(np.clip(cos, -1.0, 1.0))
    raise InvalidInputError(f"unknown distance {dist!r}; use 'euclidean' or 'angular'")


def ppl(trajectory_features, dist: str = "euclidean") -> float:
    """Summed adjacent-frame distance divided by the endpoint distance."""
    f = np.asarray(trajectory_features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise InvalidInputError("ppl needs an (L >= 2, d) trajectory")
    end = float(_distance(f[0], f[-1], dist))
    if end <= 1e-12:
        raise DegenerateEndpointsError("trajectory endpoints coincide; path length is undefined")
    steps = _distance(f[:-1], f[1:], dist)
    return math.fsum(steps.tolist()) / end


class AdjacentStats(NamedTuple):
    mean_distance: float
    mean_cosine: float


def adjacent_stats(trajectory_features) -> AdjacentStats:
    """Mean adjacent Euclidean distance and cosine similarity.

    Accepts (L, d) for one view or (L, views, d); per-view means are averaged.
    """
    f = np.asarray(trajectory_features, dtype=np.float64)
    if f.ndim == 2:
        f = f[:, None, :]
    if f.ndim != 3 or f.shape[0] < 2:
        raise InvalidInputError("adjacent_stats needs at least 2 frames")
    a, b = f[:-1], f[1:]
    d = np.linalg.norm(a - b, axis=-1)
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    cos = np.einsum("lvi,lvi->lv", a, b) / np.maximum(na * nb, 1e-300)
    return AdjacentStats(float(d.mean(axis=0).mean()), float(cos.mean(axis=0).mean()))


def fid_frames(frames: int) -> tuple[int, int]:
    """The two intermediate frames compared against the endpoints."""
    return frames // 3, (2 * frames) // 3


def trajectory_features(assets: Sequence[ColoredVoxelAsset], views: int = DEFAULT_VIEWS,
                        extractor: FeatureExtractor = FeatureExtractor()) -> np.ndarray:
    """(frames, views, d) features of every frame under the orbit cameras."""
    cams = orbit_cameras(views)
    return np.stack([feature_extract(render_views(a, cams), extractor) for a in assets])


def evaluate_trajectory(assets: Sequence[ColoredVoxelAsset], views: int = DEFAULT_VIEWS,
                        extractor: FeatureExtractor = FeatureExtractor(), strict: bool = True) -> dict:
    """The five trajectory metrics, keyed by ``METRIC_NAMES``.

    With ``strict=False`` a degenerate path length is reported as NaN instead of raising.
    """
    if len(assets) < 2:
        raise InvalidInputError("a trajectory needs at least 2 frames")
    feats = trajectory_features(assets, views, extractor)
    frames = feats.shape[0]
    lo, hi = fid_frames(frames)
    reference = np.concatenate([feats[0], feats[-1]])
    generated = np.concatenate([feats[lo], feats[hi]])
    try:
        path = float(np.mean([ppl(feats[:, v, :]) for v in range(feats.shape[1])]))
    except DegenerateEndpointsError:
        if strict:
            raise
        path = float("nan")
    adj = adjacent_stats(feats)
    return {
        "fid": fid(generated, reference),
        "kid": kid(generated, reference),
        "ppl": path,
        "adjacent_distance": adj.mean_distance,
        "adjacent_cosine": adj.mean_cosine,
    }
