"""Noise-prior estimation from a single noisy plane.

The plane is cut into a grid of square patches. For each patch the mean
``L`` and population variance ``v`` are computed, the smoothest patches
(lowest ``sqrt(v) / sqrt(L)``) are kept, and the line ``v = a * L + b`` is
fitted by least squares. The prior is ``(sqrt(a), sqrt(b))``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .errors import EmptyPatch, RankDeficient, TooFewPatches
from .image_io import ColorImage, ImagePlane, PatchView, patch_grid
from .noise_model import NoisePrior, make_rng

RANK_TOL = 1e-6


@dataclass(frozen=True)
class PatchStats:
    mean: float
    variance: float
    smoothness: float
    grid_x: int = 0
    grid_y: int = 0


@dataclass
class LonpeConfig:
    patch_size: int = 16
    select_ratio: float = 0.10
    use_smoothness_filter: bool = True
    min_mean: float = 1e-4
    min_patches: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.select_ratio <= 1.0:
            raise ValueError("select_ratio must be in (0, 1]")
        if self.min_patches < 2:
            raise ValueError("min_patches must be >= 2")


@dataclass
class PriorEstimate:
    prior: NoisePrior
    residual_rms: float
    patches_used: int
    clamped: str = "none"

    def to_dict(self) -> dict:
        return {
            "sigma_s": self.prior.sigma_s,
            "sigma_r": self.prior.sigma_r,
            "residual_rms": self.residual_rms,
            "patches_used": self.patches_used,
            "clamped": self.clamped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def smoothness(mean: float, variance: float) -> float:
    if mean <= 0.0:
        return math.inf
    return math.sqrt(variance) / math.sqrt(mean)


def patch_stats(patch) -> PatchStats:
    """Statistics of one patch (a PatchView or any array of pixels)."""
    gx = gy = 0
    if isinstance(patch, PatchView):
        gx, gy, patch = patch.grid_x, patch.grid_y, patch.data
    values = np.asarray(patch, dtype=np.float64).ravel()
    if values.size == 0:
        raise EmptyPatch("patch has no pixels")
    mean = float(values.mean())
    variance = float(np.mean((values - mean) ** 2))
    return PatchStats(mean, variance, smoothness(mean, variance), gx, gy)


def plane_stats(plane: ImagePlane, patch_size: int) -> list[PatchStats]:
    """Stats for every grid patch in row-major order (kernel-backed)."""
    patch_grid(plane, patch_size)
    means, variances = kernels.patch_moments(plane.data, patch_size)
    out = []
    for gy in range(means.shape[0]):
        for gx in range(means.shape[1]):
            m, v = float(means[gy, gx]), float(variances[gy, gx])
            out.append(PatchStats(m, v, smoothness(m, v), gx, gy))
    return out


def _keep_count(ratio: float, n: int) -> int:
    return max(1, math.ceil(ratio * n - 1e-9))


def select_smooth(stats: list[PatchStats], config: LonpeConfig) -> list[PatchStats]:
    """Keep the smoothest ``ceil(select_ratio * n)`` patches.

    With the smoothness filter off, a seeded uniform subset of the same
    size is returned instead.
    """
    if not stats:
        raise TooFewPatches("no patches to select from")
    usable = [s for s in stats if s.mean >= config.min_mean]
    k = _keep_count(config.select_ratio, len(usable))
    if len(usable) < config.min_patches or k < config.min_patches:
        raise TooFewPatches(
            f"{min(k, len(usable))} patches kept, {config.min_patches} required"
        )
    if config.use_smoothness_filter:
        # stable sort keeps row-major order among ties
        return sorted(usable, key=lambda s: s.smoothness)[:k]
    rng = make_rng(config.seed)
    idx = np.sort(rng.choice(len(usable), size=k, replace=False))
    return [usable[i] for i in idx]


def _residual(L, v, a, b):
    r = v - (a * L + b)
    return float(np.sqrt(np.mean(r * r)))


def solve_line(L, v):
    """Unconstrained least-squares ``(a, b)`` from the 2x2 normal equations."""
    L = np.asarray(L, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n = L.size
    # centred elimination of the normal equations; same solution, better conditioned
    Lm, vm = L.mean(), v.mean()
    dL = L - Lm
    sxx = float(np.dot(dL, dL))
    if sxx <= 0.0:
        raise RankDeficient("luminance values do not span a line")
    a = float(np.dot(dL, v - vm)) / sxx
    b = float(vm - a * Lm)
    return a, b


def fit_prior(selected: list[PatchStats]) -> PriorEstimate:
    """Least-squares prior from patch stats, clamped to nonnegative slope/intercept."""
    if len(selected) < 2:
        raise TooFewPatches("at least two patches are needed")
    L = np.array([s.mean for s in selected])
    v = np.array([s.variance for s in selected])
    if L.max() - L.min() < RANK_TOL:
        raise RankDeficient(
            f"luminance spread {L.max() - L.min():.3g} below {RANK_TOL}; rank([L, 1]) < 2"
        )
    a, b = solve_line(L, v)
    clamped = "none"
    if a < 0.0 or b < 0.0:
        # optimum lies on the boundary: compare the two edges
        candidates = []
        a_edge = max(float(np.dot(L, v) / np.dot(L, L)), 0.0)
        candidates.append((_residual(L, v, a_edge, 0.0), a_edge, 0.0))
        b_edge = max(float(v.mean()), 0.0)
        candidates.append((_residual(L, v, 0.0, b_edge), 0.0, b_edge))
        _, a, b = min(candidates, key=lambda c: c[0])
        if a == 0.0 and b == 0.0:
            clamped = "both"
        elif b == 0.0:
            clamped = "sigma_r"
        else:
            clamped = "sigma_s"
    prior = NoisePrior(min(math.sqrt(a), 1.0), min(math.sqrt(b), 1.0))
    return PriorEstimate(prior, _residual(L, v, a, b), len(selected), clamped)


def estimate_from_stats(stats: list[PatchStats], config: LonpeConfig) -> PriorEstimate:
    return fit_prior(select_smooth(stats, config))


def estimate(plane, config: LonpeConfig | None = None) -> PriorEstimate:
    """Estimate the prior of an ImagePlane, or of a ColorImage by pooling
    patch stats from its three channels (they share one prior)."""
    config = config or LonpeConfig()
    if isinstance(plane, ColorImage):
        stats = [s for p in plane.planes for s in plane_stats(p, config.patch_size)]
    else:
        stats = plane_stats(plane, config.patch_size)
    return estimate_from_stats(stats, config)


def config_dict(config: LonpeConfig) -> dict:
    return asdict(config)
