"""Sequential perturbations: time warping via a mixed truncated normal sampler,
time masking, and plain Gaussian feature noise.

Warping draws T sample locations from a mixture of normal distributions
truncated to [0, T], sorts them, and pins the endpoints to 0 and T-1 by an
affine rescale. Resampling any T x K sequence at those locations (linear
interpolation) slows some parts of the timeline down and speeds others up
while preserving temporal order. The distortion strength of a mixture is
summarized by the KL divergence of its discretized density against uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class SamplerConfig:
    """Ranges for drawing mixture parameters.

    n is uniform over the inclusive integer range, component means are uniform
    over [0, T], component sigmas are log-uniform over
    [sigma_rel[0] * T, sigma_rel[1] * T], and mixture weights are flat
    Dirichlet.
    """

    n_range: tuple[int, int] = (1, 5)
    sigma_rel: tuple[float, float] = (0.05, 1.0)

    def validate(self) -> None:
        if not (1 <= self.n_range[0] <= self.n_range[1]):
            raise ConfigError(f"empty component count range {self.n_range}")
        if not (0.0 < self.sigma_rel[0] <= self.sigma_rel[1]):
            raise ConfigError(f"sigma range must satisfy 0 < lo <= hi, got {self.sigma_rel}")


@dataclass
class MTNDParams:
    means: np.ndarray    # (n,) in [0, T]
    sigmas: np.ndarray   # (n,) > 0
    weights: np.ndarray  # (n,) >= 0, sums to 1
    T: float

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = self.means.shape[0]
        if n < 1 or self.sigmas.shape[0] != n or self.weights.shape[0] != n:
            raise ValidationError("means / sigmas / weights must share a length >= 1")
        if np.any(self.sigmas <= 0):
            raise ValidationError("all sigmas must be > 0")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValidationError("weights must sum to 1")

    @property
    def n(self) -> int:
        return self.means.shape[0]


@dataclass
class WarpGrid:
    """T sorted sample locations in [0, T-1], plus draw diagnostics."""

    g: np.ndarray
    kl: float | None = None
    in_band: bool = True
    params: MTNDParams | None = None


@dataclass(frozen=True)
class MaskConfig:
    p: float = 0.3

    def validate(self) -> None:
        if not (0.0 <= self.p <= 1.0):
            raise ConfigError(f"masking probability must be in [0, 1], got {self.p}")


def sample_mtnd(T: float, rng: np.random.Generator, cfg: SamplerConfig | None = None) -> MTNDParams:
    cfg = cfg or SamplerConfig()
    cfg.validate()
    n = int(rng.integers(cfg.n_range[0], cfg.n_range[1] + 1))
    means = rng.uniform(0.0, T, size=n)
    lo, hi = cfg.sigma_rel[0] * T, cfg.sigma_rel[1] * T
    sigmas = np.exp(rng.uniform(np.log(lo), np.log(hi), size=n))
    weights = rng.dirichlet(np.ones(n))
    return MTNDParams(means=means, sigmas=sigmas, weights=weights, T=float(T))


def _cell_masses(params: MTNDParams, edges: np.ndarray) -> np.ndarray:
    """Probability mass of the truncated mixture in each [edges[b], edges[b+1])."""
    mu = params.means[:, None]
    sig = params.sigmas[:, None]
    cdf = ndtr((edges[None, :] - mu) / sig)  # (n, bins+1)
    z = cdf[:, -1] - cdf[:, 0]  # mass inside [0, T] before renormalization
    z = np.maximum(z, 1e-300)
    per_comp = np.diff(cdf, axis=1) / z[:, None]
    masses = params.weights @ per_comp
    total = masses.sum()
    if total <= 0:
        raise ValidationError("degenerate mixture: zero mass on [0, T]")
    return masses / total


def kl_to_uniform(params: MTNDParams, bins: int = 50) -> float:
    """KL divergence of the bin-discretized mixture density from uniform.

    Sum over bins of p_b * ln(p_b * bins), with 0 * ln 0 = 0. Non-negative,
    zero iff the discretized density is uniform.
    """
    if bins < 2:
        raise ConfigError(f"bins must be >= 2, got {bins}")
    edges = np.linspace(0.0, params.T, bins + 1)
    p = _cell_masses(params, edges)
    nz = p > 0
    kl = float(np.sum(p[nz] * np.log(p[nz] * bins)))
    return max(kl, 0.0)  # clip float fuzz just below zero


def _sample_truncated(params: MTNDParams, size: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws from the mixture truncated to [0, T]."""
    comp = rng.choice(params.n, size=size, p=params.weights)
    mu = params.means[comp]
    sig = params.sigmas[comp]
    lo = ndtr((0.0 - mu) / sig)
    hi = ndtr((params.T - mu) / sig)
    u = rng.uniform(0.0, 1.0, size=size)
    q = np.clip(lo + u * (hi - lo), 1e-15, 1.0 - 1e-15)
    return np.clip(mu + sig * ndtri(q), 0.0, params.T)


def make_grid(
    params: MTNDParams,
    T: int,
    rng: np.random.Generator,
    target_kl_band: tuple[float, float] | None = None,
    sampler_config: SamplerConfig | None = None,
    kl_bins: int = 50,
    max_band_attempts: int = 1000,
) -> WarpGrid:
    """Draw a sorted, endpoint-pinned warp grid of T locations.

    If ``target_kl_band`` is given, the mixture parameters are rejection
    resampled (using ``sampler_config``) until kl_to_uniform lands in the
    band; after ``max_band_attempts`` the closest draw so far is used and the
    grid is flagged with ``in_band=False``.
    """
    if T < 2:
        raise ValidationError(f"grid needs T >= 2, got {T}")
    kl = kl_to_uniform(params, kl_bins)
    in_band = True
    if target_kl_band is not None:
        lo, hi = target_kl_band
        if not (0.0 <= lo <= hi):
            raise ConfigError(f"bad KL band {target_kl_band}")
        best, best_dist = (params, kl), _band_distance(kl, lo, hi)
        attempts = 0
        while best_dist > 0.0 and attempts < max_band_attempts:
            cand = sample_mtnd(params.T, rng, sampler_config)
            ckl = kl_to_uniform(cand, kl_bins)
            dist = _band_distance(ckl, lo, hi)
            if dist < best_dist:
                best, best_dist = (cand, ckl), dist
            attempts += 1
        params, kl = best
        in_band = best_dist == 0.0

    for _ in range(100):
        x = np.sort(_sample_truncated(params, T, rng))
        span = x[-1] - x[0]
        if span > 0:
            g = (x - x[0]) * ((T - 1) / span)
            g[0] = 0.0
            g[-1] = float(T - 1)
            return WarpGrid(g=g, kl=kl, in_band=in_band, params=params)
    raise ValidationError("could not draw a non-degenerate grid in 100 attempts")


def _band_distance(kl: float, lo: float, hi: float) -> float:
    if lo <= kl <= hi:
        return 0.0
    return lo - kl if kl < lo else kl - hi


def identity_grid(T: int) -> WarpGrid:
    return WarpGrid(g=np.arange(T, dtype=np.float64), kl=0.0, in_band=True)


def warp(seq: np.ndarray, grid: WarpGrid) -> np.ndarray:
    """Resample rows of a T x K sequence at the grid locations.

    Row t of the output is the linear interpolation of the input at location
    g_t. The same grid applies to features, targets, and teacher signals.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2:
        raise ValidationError(f"warp expects a 2-D sequence, got shape {seq.shape}")
    T = seq.shape[0]
    g = grid.g
    if g.shape[0] != T:
        raise ValidationError(f"grid length {g.shape[0]} != sequence length {T}")
    if np.any(g < 0.0) or np.any(g > T - 1):
        raise ValidationError("grid locations outside [0, T-1]")
    i0 = np.floor(g).astype(np.intp)
    lam = g - i0
    i1 = np.minimum(i0 + 1, T - 1)
    return (1.0 - lam)[:, None] * seq[i0] + lam[:, None] * seq[i1]


def mask(
    seq: np.ndarray, cfg: MaskConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Zero whole rows independently with probability p; returns (masked, mask).

    Surviving rows are not rescaled: the student must reconstruct dropped
    snippets from temporal context, while the teacher sees the clean input.
    """
    cfg.validate()
    seq = np.asarray(seq, dtype=np.float64)
    dropped = rng.random(seq.shape[0]) < cfg.p
    out = seq.copy()
    out[dropped] = 0.0
    return out, dropped


def gaussian_noise(seq: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive i.i.d. N(0, sigma^2) noise; sigma = 0 is the identity."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    seq = np.asarray(seq, dtype=np.float64)
    if sigma == 0:
        return seq.copy()
    return seq + rng.normal(0.0, sigma, size=seq.shape)
