"""FID, rFID and histogram Jensen-Shannon divergence with pluggable feature extractors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from lqgan.errors import NumericalError, ShapeError
from lqgan.rng import stream

NEG_EIG_TOL = 1e-8
DEFAULT_BINS = 64
SPACE_RANGES = {"raw": (0.0, 1.0), "feature": (-1.0, 1.0)}


@dataclass
class GaussianStats:
    mu: np.ndarray
    cov: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    """Mean and unbiased covariance of (n, d) features."""
    x = np.asarray(features, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if len(x) == 0:
        raise ShapeError("cannot estimate statistics of an empty set")
    mu = x.mean(axis=0)
    if len(x) > 1:
        c = x - mu
        cov = (c.T @ c) / (len(x) - 1)
        cov = 0.5 * (cov + cov.T)
    else:
        cov = np.zeros((x.shape[1], x.shape[1]))
    return GaussianStats(mu, cov, len(x))


@dataclass
class FidResult:
    value: float
    n_real: int
    n_fake: int
    dim: int
    under_sampled: bool
    warnings: list[str] = field(default_factory=list)

    def __float__(self) -> float:
        return self.value

    def to_dict(self) -> dict:
        return {
            "fid": self.value,
            "n_real": self.n_real,
            "n_fake": self.n_fake,
            "dim": self.dim,
            "under_sampled": self.under_sampled,
            "warnings": list(self.warnings),
        }


def _psd_eigvals(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    scale = max(1.0, float(np.max(np.abs(w), initial=0.0)))
    if np.any(w < -NEG_EIG_TOL * scale):
        raise NumericalError(f"{what} is not positive semi-definite", min_eigenvalue=float(w.min()))
    return np.clip(w, 0.0, None), v


def frechet_distance(s1: GaussianStats, s2: GaussianStats) -> FidResult:
    """||mu1 - mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^{1/2}).

    The square-root trace comes from the eigenvalues of the symmetric matrix
    C1^{1/2} C2 C1^{1/2}, which share the spectrum of C1 C2.
    """
    if s1.dim != s2.dim:
        raise ShapeError("feature dimensions differ", dims=[s1.dim, s2.dim])
    diff = s1.mu - s2.mu
    w1, v1 = _psd_eigvals(s1.cov, "first covariance")
    root1 = (v1 * np.sqrt(w1)) @ v1.T
    inner = root1 @ s2.cov @ root1
    w, _ = _psd_eigvals(inner, "covariance product")
    tr_sqrt = float(np.sum(np.sqrt(w)))
    value = float(diff @ diff) + float(np.trace(s1.cov)) + float(np.trace(s2.cov)) - 2.0 * tr_sqrt
    warnings = []
    if value < -1e-6:
        raise NumericalError("Frechet distance came out negative", value=value)
    value = max(value, 0.0)
    under = s1.n <= s1.dim or s2.n <= s2.dim
    if under:
        warnings.append(f"sample count does not exceed feature dimension {s1.dim}; covariance is rank deficient")
    return FidResult(value, s1.n, s2.n, s1.dim, under, warnings)


# ---------------------------------------------------------------------------
# Feature extractors


class FeatureExtractor:
    """Maps samples of shape (n, ...) to features (n, dim) deterministically."""

    kind = "base"
    dim: int | None = None

    def __call__(self, samples: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim}


class PixelFlatten(FeatureExtractor):
    kind = "pixel"

    def __call__(self, samples):
        x = np.asarray(samples, dtype=np.float64)
        out = x.reshape(len(x), -1)
        self.dim = out.shape[1]
        return out


class RandomProjection(FeatureExtractor):
    """Fixed Gaussian projection of flattened samples, scaled by 1/sqrt(input dim)."""

    kind = "random-projection"

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._mats: dict[int, np.ndarray] = {}

    def _matrix(self, d_in: int) -> np.ndarray:
        m = self._mats.get(d_in)
        if m is None:
            m = stream(self.seed, f"metrics/projection/{d_in}/{self.dim}").standard_normal((d_in, self.dim))
            m /= np.sqrt(d_in)
            self._mats[d_in] = m
        return m

    def __call__(self, samples):
        x = np.asarray(samples, dtype=np.float64)
        x = x.reshape(len(x), -1)
        return x @ self._matrix(x.shape[1])

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "seed": self.seed}


class EncoderFeatures(FeatureExtractor):
    """Latent codes of a trained autoencoder."""

    kind = "ae-encoder"

    def __init__(self, ae):
        self.ae = ae
        self.dim = ae.cfg.d_z

    def __call__(self, samples):
        return self.ae.encode_array(np.asarray(samples))


def make_extractor(kind: str, ae=None, dim: int = 64, seed: int = 0) -> FeatureExtractor:
    if kind == "pixel":
        return PixelFlatten()
    if kind == "random-projection":
        return RandomProjection(dim, seed)
    if kind == "ae-encoder":
        if ae is None:
            raise ValueError("ae-encoder features need a trained autoencoder")
        return EncoderFeatures(ae)
    raise ValueError(f"unknown feature extractor {kind!r}")


def fid(real: np.ndarray, fake: np.ndarray, extractor: FeatureExtractor | None = None) -> FidResult:
    """FID between two sample sets using one shared extractor."""
    if len(real) == 0 or len(fake) == 0:
        raise ShapeError("FID needs non-empty sample sets", n_real=len(real), n_fake=len(fake))
    extractor = extractor or PixelFlatten()
    return frechet_distance(gaussian_stats(extractor(real)), gaussian_stats(extractor(fake)))


def rfid(reconstruct: Callable[[np.ndarray], np.ndarray], images: np.ndarray,
         extractor: FeatureExtractor | None = None) -> FidResult:
    """FID between ``images`` and their reconstructions.

    ``reconstruct`` is anything mapping an image batch to same-shaped images,
    typically ``Autoencoder.reconstruct_array``.
    """
    return fid(images, reconstruct(images), extractor)


# ---------------------------------------------------------------------------
# Jensen-Shannon divergence


def histograms(samples: np.ndarray, bins: int, lo: float, hi: float) -> np.ndarray:
    """Per-dimension normalized histograms, shape (dim, bins).

    Values outside [lo, hi] land in the edge bins.
    """
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(len(x), -1)
    n, d = x.shape
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    flat = idx + (np.arange(d) * bins)[None, :]
    counts = np.bincount(flat.ravel(), minlength=d * bins).reshape(d, bins)
    return counts / float(n)


def _kl_terms(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    out = np.zeros(p.shape[0])
    mask = p > 0
    ratio = np.where(mask, p / np.where(m > 0, m, 1.0), 1.0)
    out += np.sum(np.where(mask, p * np.log(ratio), 0.0), axis=1)
    return out


def jsd_per_dim(p_samples: np.ndarray, q_samples: np.ndarray, space: str = "feature",
                bins: int = DEFAULT_BINS) -> np.ndarray:
    if bins < 2:
        raise ValueError("need at least two bins")
    if len(p_samples) == 0 or len(q_samples) == 0:
        raise ShapeError("JSD needs non-empty sample sets")
    lo, hi = SPACE_RANGES[space]
    p = histograms(p_samples, bins, lo, hi)
    q = histograms(q_samples, bins, lo, hi)
    if p.shape != q.shape:
        raise ShapeError("sample dimensions differ", shapes=[list(p.shape), list(q.shape)])
    m = 0.5 * (p + q)
    return 0.5 * (_kl_terms(p, m) + _kl_terms(q, m))


def jsd(p_samples: np.ndarray, q_samples: np.ndarray, space: str = "feature", bins: int = DEFAULT_BINS) -> float:
    """Histogram JSD (natural log, bounded by ln 2) averaged over dimensions.

    ``space`` selects the histogram range: "raw" pixels in [0, 1] or
    "feature" latents in [-1, 1].
    """
    return float(np.mean(jsd_per_dim(p_samples, q_samples, space, bins)))


LN2 = math.log(2.0)
