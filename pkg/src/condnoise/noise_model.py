"""Synthetic sensor noise with known ground-truth priors.

Four generators are provided:

``gaussian``
    additive white Gaussian noise with std ``sigma_r``.
``sv_gaussian``
    spatially varying Gaussian, ``sv_map * N(0, 1)``.
``poisson_gaussian``
    heteroscedastic Gaussian ``N(0, sigma_s**2 * L + sigma_r**2)``.
``exact_poisson_gaussian``
    ``Poisson(L / sigma_s**2) * sigma_s**2 + N(0, sigma_r**2)``. The photon
    count uses gain ``sigma_s**2`` so its variance matches the
    heteroscedastic model exactly.

Random draws use a Philox (counter-based) generator keyed by the seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, ShapeMismatch
from .image_io import ColorImage, ImagePlane

KINDS = ("gaussian", "sv_gaussian", "poisson_gaussian", "exact_poisson_gaussian")


@dataclass(frozen=True)
class NoisePrior:
    sigma_s: float
    sigma_r: float

    def __post_init__(self):
        for name in ("sigma_s", "sigma_r"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise InvalidSpec(f"{name}={v} outside [0, 1]")

    def as_tuple(self) -> tuple[float, float]:
        return (self.sigma_s, self.sigma_r)


@dataclass
class NoiseSpec:
    kind: str
    prior: NoisePrior = field(default_factory=lambda: NoisePrior(0.0, 0.0))
    sv_map: ImagePlane | None = None
    clip: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown noise kind {self.kind!r}")
        if (self.kind == "sv_gaussian") != (self.sv_map is not None):
            raise InvalidSpec("sv_map is required for sv_gaussian and only for it")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise InvalidSpec("seed must fit in 64 bits")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "sigma_s": self.prior.sigma_s,
            "sigma_r": self.prior.sigma_r,
            "clip": self.clip,
            "seed": int(self.seed),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict, sv_map: ImagePlane | None = None) -> "NoiseSpec":
        try:
            prior = NoisePrior(float(d["sigma_s"]), float(d["sigma_r"]))
            return cls(d["kind"], prior, sv_map, bool(d.get("clip", False)), int(d.get("seed", 0)))
        except KeyError as exc:
            raise InvalidSpec(f"missing field {exc}") from None

    @classmethod
    def from_json(cls, text: str, sv_map: ImagePlane | None = None) -> "NoiseSpec":
        return cls.from_dict(json.loads(text), sv_map)


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def pixel_variance(L, prior: NoisePrior):
    """Model variance ``sigma_s**2 * L + sigma_r**2`` (scalar or array)."""
    return prior.sigma_s ** 2 * L + prior.sigma_r ** 2


def expected_variance_curve(prior: NoisePrior, L_grid) -> list[tuple[float, float]]:
    return [(float(L), float(pixel_variance(L, prior))) for L in L_grid]


def add_noise(clean: np.ndarray, kind: str, prior: NoisePrior, rng: np.random.Generator,
              sv_map: np.ndarray | None = None, clip: bool = False) -> np.ndarray:
    """Array-level sampler shared by :func:`sample_noise` and the data loaders."""
    L = np.asarray(clean, dtype=np.float64)
    s2, r = prior.sigma_s ** 2, prior.sigma_r
    if kind == "gaussian" or (kind == "exact_poisson_gaussian" and s2 == 0.0):
        out = L + r * rng.standard_normal(L.shape)
    elif kind == "sv_gaussian":
        if sv_map is None or sv_map.shape != L.shape[-2:]:
            raise ShapeMismatch("sv_map must match the image dimensions")
        out = L + sv_map * rng.standard_normal(L.shape)
    elif kind == "poisson_gaussian":
        out = L + np.sqrt(s2 * np.maximum(L, 0.0) + r * r) * rng.standard_normal(L.shape)
    elif kind == "exact_poisson_gaussian":
        counts = rng.poisson(np.maximum(L, 0.0) / s2)
        out = counts * s2 + r * rng.standard_normal(L.shape)
    else:
        raise InvalidSpec(f"unknown noise kind {kind!r}")
    if clip:
        np.clip(out, 0.0, 1.0, out=out)
    return out


def sample_noise(clean, spec: NoiseSpec):
    """Return a noisy copy of ``clean`` (ImagePlane, ColorImage or array)."""
    rng = make_rng(spec.seed)
    sv = spec.sv_map.data if spec.sv_map is not None else None
    if isinstance(clean, ImagePlane):
        return ImagePlane(add_noise(clean.data, spec.kind, spec.prior, rng, sv, spec.clip),
                          clean.bit_depth)
    if isinstance(clean, ColorImage):
        return ColorImage(add_noise(clean.data, spec.kind, spec.prior, rng, sv, spec.clip),
                          clean.bit_depth)
    return add_noise(clean, spec.kind, spec.prior, rng, sv, spec.clip)


def random_prior(rng: np.random.Generator, s_max: float = 0.3, r_max: float = 50 / 255) -> NoisePrior:
    """Uniform draw over the synthetic training ranges."""
    return NoisePrior(float(rng.uniform(0.0, s_max)), float(rng.uniform(0.0, r_max)))
