"""SVD-based residual spectrum analysis.

Truncated factorization, tail energy, entropy effective rank, log-linear
tail fits, and Marchenko-Pastur reference quantiles. Everything here is a
pure function of its inputs; per-layer profiles can be computed
concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Tail values below this fraction of the total energy are dropped from the
# log-linear fit window (their logs are numerically meaningless).
FIT_FLOOR = 1e-12


@dataclass(frozen=True)
class SvdFactors:
    """Factors of w = u @ diag(d) @ v.T with column-orthonormal u, v.

    Column signs are canonical: in every column of ``u`` the entry of
    largest absolute value is positive (ties broken by lowest row index),
    with the matching column of ``v`` flipped to compensate.
    """

    u: np.ndarray  # n x k
    d: np.ndarray  # k, descending, >= 0
    v: np.ndarray  # m x k

    @property
    def rank(self) -> int:
        return len(self.d)

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.d) @ self.v.T


def _canonical_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # argmax returns the first occurrence, which is the lowest row index on ties
    pivot = np.argmax(np.abs(u), axis=0)
    flip = u[pivot, np.arange(u.shape[1])] < 0
    u = np.where(flip[None, :], -u, u)
    v = np.where(flip[None, :], -v, v)
    return u, v


def svd_full(w: np.ndarray) -> SvdFactors:
    """Full thin SVD with the canonical sign convention applied."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={w.ndim}")
    if not np.all(np.isfinite(w)):
        raise ValueError("input matrix contains non-finite values")
    u, d, vt = np.linalg.svd(w, full_matrices=False)
    u, v = _canonical_signs(u, vt.T)
    return SvdFactors(u=u, d=d, v=v)


def truncate(factors: SvdFactors, k: int) -> SvdFactors:
    """Keep the top-k singular triplets (the best rank-k approximation)."""
    if not 0 <= k <= factors.rank:
        raise ValueError(f"rank {k} out of range [0, {factors.rank}]")
    return SvdFactors(u=factors.u[:, :k], d=factors.d[:k], v=factors.v[:, :k])


def tail_energy(sigma: np.ndarray, r: int) -> float:
    """Sum of squared singular values beyond the first ``r``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if not 0 <= r <= len(sigma):
        raise ValueError(f"rank {r} out of range [0, {len(sigma)}]")
    return float(np.sum(np.square(sigma[r:])))


def effective_rank(sigma: np.ndarray) -> float:
    """exp of the Shannon entropy of the L1-normalized singular spectrum.

    Scale-invariant; lies in [1, len(sigma)].
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("singular values must be non-negative")
    total = sigma.sum()
    if total == 0:
        raise ValueError("all-zero spectrum has no effective rank")
    p = sigma / total
    p = p[p > 0]
    return float(np.exp(-np.sum(p * np.log(p))))


def mp_singular_quantiles(ratio: float, q_list, grid_points: int = 100_001) -> np.ndarray:
    """Singular-value quantiles of the Marchenko-Pastur law at unit variance.

    ``ratio`` is the aspect ratio min/max of the matrix, in (0, 1]. The
    eigenvalue law is supported on [(1-sqrt(ratio))^2, (1+sqrt(ratio))^2];
    quantiles are computed by numeric CDF inversion in the singular-value
    domain (square roots of the eigenvalue support).
    """
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    q = np.asarray(q_list, dtype=np.float64)
    if np.any((q < 0) | (q > 1)):
        raise ValueError("quantiles must lie in [0, 1]")
    s_lo = abs(1.0 - math.sqrt(ratio))
    s_hi = 1.0 + math.sqrt(ratio)
    s = np.linspace(s_lo, s_hi, grid_points)
    # density of singular values: 2*s*f(s^2) with f the eigenvalue density
    inner = np.maximum((s_hi**2 - s**2) * (s**2 - s_lo**2), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        pdf = np.sqrt(inner) / (math.pi * ratio * s)
    if s_lo == 0.0:  # ratio == 1: finite limit at s = 0
        pdf[0] = s_hi / math.pi
    cdf = np.concatenate([[0.0], np.cumsum((pdf[1:] + pdf[:-1]) * 0.5 * np.diff(s))])
    cdf /= cdf[-1]
    return np.interp(q, cdf, s)


@dataclass(frozen=True)
class SpectralProfile:
    """Singular spectrum of one layer plus its log-linear tail fit.

    ``tail[r]`` is the squared Frobenius error of the best rank-r
    approximation, r = 0..min(n, m); ``tail[min(n, m)] == 0``. When
    ``fit_valid``, tail(r) ~ exp(fit_a * r + fit_b) with fit_a < 0.
    """

    layer_name: str
    n: int
    m: int
    sigma: np.ndarray
    tail: np.ndarray
    fit_a: float
    fit_b: float
    fit_valid: bool

    @property
    def min_dim(self) -> int:
        return min(self.n, self.m)

    @property
    def cost_per_rank(self) -> int:
        """Parameters consumed per unit of rank."""
        return self.n + self.m

    def tail_at(self, r: int) -> float:
        return float(self.tail[r])


def _fit_log_linear(tail: np.ndarray) -> tuple[float, float, bool]:
    r_max = len(tail) - 2  # cap at min(n, m) - 1
    if r_max < 0 or tail[0] <= 0:
        return 0.0, 0.0, False
    r = np.arange(r_max + 1)
    values = tail[: r_max + 1]
    keep = values >= FIT_FLOOR * tail[0]
    if keep.sum() < 3:
        return 0.0, 0.0, False
    a, b = np.polyfit(r[keep], np.log(values[keep]), 1)
    return float(a), float(b), bool(a < 0)


def profile_from_singular_values(sigma: np.ndarray, n: int, m: int,
                                 name: str) -> SpectralProfile:
    """Profile from an already-computed spectrum (avoids a second SVD)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    s2 = np.square(sigma)
    tail = np.concatenate([np.cumsum(s2[::-1])[::-1], [0.0]])
    fit_a, fit_b, fit_valid = _fit_log_linear(tail)
    return SpectralProfile(layer_name=name, n=n, m=m, sigma=sigma, tail=tail,
                           fit_a=fit_a, fit_b=fit_b, fit_valid=fit_valid)


def build_profile(w: np.ndarray, name: str) -> SpectralProfile:
    """Spectrum, exact tail-energy curve, and log-linear fit for one matrix."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"layer {name!r}: expected a 2-D matrix, got ndim={w.ndim}")
    if not np.all(np.isfinite(w)):
        raise ValueError(f"layer {name!r}: non-finite values")
    sigma = np.linalg.svd(w, compute_uv=False)
    return profile_from_singular_values(sigma, w.shape[0], w.shape[1], name)
