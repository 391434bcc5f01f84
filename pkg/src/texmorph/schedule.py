"""Interpolation-coefficient and patch-size schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from scipy.special import betainc

from .errors import InvalidInputError


@dataclass(frozen=True)
class MorphSchedule:
    alphas: tuple
    beta_param: float = 5.0
    steps: int = 25
    s_max: int = 4
    tau0: float = 0.5
    patch_sizes: tuple = field(default=())

    @property
    def frames(self) -> int:
        return len(self.alphas)

    def as_dict(self) -> dict:
        return {
            "frames": self.frames,
            "alphas": [float(a) for a in self.alphas],
            "beta": self.beta_param,
            "steps": self.steps,
            "s_max": self.s_max,
            "tau0": self.tau0,
            "patch_sizes": list(self.patch_sizes),
        }


def beta_quantile(p: float, a: float, b: float, tol: float = 1e-10) -> float:
    """Inverse of the regularised incomplete beta function by bisection."""
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if betainc(a, b, mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def alpha_schedule(frames: int, beta_param: float = 5.0, *, steps: int = 25, s_max: int = 4,
                   tau0: float = 0.5) -> MorphSchedule:
    """Beta(beta, beta) quantiles at evenly spaced probabilities, endpoints pinned to 0 and 1."""
    if frames < 2:
        raise InvalidInputError(f"need at least 2 frames, got {frames}")
    if not beta_param > 0:
        raise InvalidInputError(f"beta parameter must be positive, got {beta_param}")
    last = frames - 1
    alphas = [0.0] * frames
    alphas[last] = 1.0
    for i in range(1, last):
        j = last - i
        if i > j:
            alphas[i] = 1.0 - alphas[j]
        elif i == j:
            alphas[i] = 0.5
        else:
            alphas[i] = beta_quantile(i / last, beta_param, beta_param)
    sizes = tuple(patch_size_schedule(t, steps, s_max) for t in range(steps)) if steps > 0 else ()
    return MorphSchedule(tuple(alphas), float(beta_param), int(steps), int(s_max), float(tau0), sizes)


def patch_size_schedule(t: int, steps: int, s_max: int = 4) -> int:
    """Patch side at denoise step ``t``: halves through s_max..1 over evenly split step ranges."""
    if not 0 <= t < steps:
        raise InvalidInputError(f"step {t} outside [0, {steps})")
    if s_max < 1 or s_max & (s_max - 1):
        raise InvalidInputError(f"s_max must be a power of two, got {s_max}")
    levels = int(math.log2(s_max)) + 1
    return max(1, s_max >> (t * levels // steps))
