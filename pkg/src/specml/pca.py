"""Band standardization, streaming covariance, and PCA over pixel vectors.

The observations are individual pixels: every B-vector of band values is
one row. Fitting standardizes each band to zero mean and unit variance
(population convention, divide by n), accumulates the covariance of the
standardized pixels in a mergeable single-pass accumulator, and
eigendecomposes it with a cyclic Jacobi sweep. Projection maps each pixel
through the retained eigenvector rows, so spatial dimensions pass through
unchanged while the band dimension drops from B to k.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .data import SampleSet
from .errors import (
    DegenerateBand,
    DimensionMismatch,
    EmptyBucket,
    EmptySet,
    InvalidConfig,
    InvalidRule,
    NoConvergence,
    NotSymmetric,
)
from .validation import check_pixel_matrix

# Bands whose standard deviation falls below this (relative to |mean|) are
# flagged degenerate and standardized with sigma treated as 1.
_DEGENERATE_TOL = 1e-12

PCA_MAGIC = b"PCA1"
_PCA_HEADER = struct.Struct("<4sII")


class Standardizer:
    """Single-pass per-band mean and standard deviation.

    Uses batched Welford updates, so feeding pixels in any chunking yields
    the same statistics up to rounding. Population convention: variance is
    the centered second moment divided by n.
    """

    def __init__(self, bands: int):
        if bands < 1:
            raise InvalidConfig("bands must be >= 1")
        self.bands = bands
        self.count = 0
        self._mean = np.zeros(bands)
        self._m2 = np.zeros(bands)

    def update(self, pixels) -> "Standardizer":
        x = check_pixel_matrix(pixels, "pixels", bands=self.bands)
        m = x.shape[0]
        if m == 0:
            return self
        batch_mean = x.mean(axis=0)
        batch_m2 = ((x - batch_mean) ** 2).sum(axis=0)
        if self.count == 0:
            self._mean = batch_mean
            self._m2 = batch_m2
        else:
            delta = batch_mean - self._mean
            total = self.count + m
            self._m2 += batch_m2 + delta**2 * (self.count * m / total)
            self._mean += delta * (m / total)
        self.count += m
        return self

    @property
    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise EmptyBucket("standardizer saw no pixels")
        return self._mean.copy()

    @property
    def std(self) -> np.ndarray:
        """Population standard deviation per band; needs count >= 2."""
        if self.count < 2:
            raise EmptyBucket("standardizer needs at least 2 pixels")
        return np.sqrt(self._m2 / self.count)

    @property
    def degenerate(self) -> np.ndarray:
        """Boolean mask of bands with (numerically) zero variance."""
        scale = np.maximum(np.abs(self._mean), 1.0)
        return self.std <= _DEGENERATE_TOL * scale

    def effective_std(self) -> np.ndarray:
        """Std with degenerate bands replaced by 1 to avoid division by zero."""
        return np.where(self.degenerate, 1.0, self.std)

    def standardize(self, pixels) -> np.ndarray:
        x = check_pixel_matrix(pixels, "pixels", bands=self.bands)
        return (x - self.mean) / self.effective_std()


def fit_standardizer(sample_set: SampleSet, bucket: str | None = "train",
                     strict: bool = False) -> Standardizer:
    """Fit per-band statistics over all pixels of one split bucket.

    Raises DegenerateBand in strict mode if any band has zero variance;
    otherwise the band is flagged and standardized with sigma treated as 1.
    """
    indices = sample_set.bucket_indices(bucket)
    if len(indices) == 0:
        raise EmptyBucket(f"bucket {bucket!r} holds no samples")
    st = Standardizer(sample_set.bands)
    for i in indices:
        st.update(_raster_pixels(sample_set.rasters[i]))
    if st.count < 2:
        raise EmptyBucket(f"bucket {bucket!r} holds fewer than 2 pixels")
    if strict and st.degenerate.any():
        band = int(np.flatnonzero(st.degenerate)[0])
        raise DegenerateBand(f"band {band} has zero variance", band=band)
    return st


def _raster_pixels(raster: np.ndarray) -> np.ndarray:
    """View a (B, H, W) raster as an (H*W, B) pixel matrix."""
    b = raster.shape[0]
    return np.asarray(raster, dtype=np.float64).reshape(b, -1).T


class CovAccumulator:
    """Streaming covariance of B-vectors, mergeable across partitions.

    Stores the running mean and the centered co-moment matrix. The
    co-moment is kept exactly symmetric by symmetrizing each batch product,
    so merges commute up to the documented 1e-10 relative tolerance.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise InvalidConfig("dim must be >= 1")
        self.dim = dim
        self.count = 0
        self._mean = np.zeros(dim)
        self._comoment = np.zeros((dim, dim))

    def accumulate(self, pixels) -> "CovAccumulator":
        x = np.asarray(pixels, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionMismatch(
                f"expected (n, {self.dim}) pixel batch, got {x.shape}"
            )
        m = x.shape[0]
        if m == 0:
            return self
        batch_mean = x.mean(axis=0)
        centered = x - batch_mean
        prod = centered.T @ centered
        prod = (prod + prod.T) * 0.5
        self._merge_moments(m, batch_mean, prod)
        return self

    def merge(self, other: "CovAccumulator") -> "CovAccumulator":
        if other.dim != self.dim:
            raise DimensionMismatch("accumulators have different dimensions")
        if other.count:
            self._merge_moments(other.count, other._mean, other._comoment)
        return self

    def _merge_moments(self, m, mean, comoment):
        if self.count == 0:
            self._mean = mean.copy()
            self._comoment = comoment.copy()
        else:
            delta = mean - self._mean
            total = self.count + m
            self._comoment += comoment + np.outer(delta, delta) * (self.count * m / total)
            self._mean += delta * (m / total)
        self.count += m

    @property
    def mean(self) -> np.ndarray:
        return self._mean.copy()

    def finalize(self) -> np.ndarray:
        """Population covariance of everything accumulated so far."""
        if self.count == 0:
            raise EmptySet("covariance accumulator saw no pixels")
        return self._comoment / self.count


def eigendecompose_symmetric(matrix, max_sweeps: int = 100):
    """Full spectrum of a symmetric matrix via cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted descending
    and eigenvectors as orthonormal ROWS, each signed so its
    largest-magnitude entry is positive. Residuals satisfy
    |A v - lambda v| <= 1e-8 * ||A||_F with large margin; the sweep loop
    stops once the off-diagonal Frobenius norm falls below 1e-14 * ||A||_F.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSymmetric(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if n > 64:
        raise InvalidConfig("eigensolver is sized for matrices up to 64x64")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if float(np.abs(a - a.T).max(initial=0.0)) > 1e-9 * scale:
        raise NotSymmetric("matrix is not symmetric within 1e-9")

    a = (a + a.T) * 0.5
    v = np.eye(n)
    fro = np.linalg.norm(a)
    if fro == 0.0 or n == 1:
        return _order_spectrum(np.diag(a).copy(), v)

    tol = 1e-14 * fro
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol:
            return _order_spectrum(np.diag(a).copy(), v)
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = math.copysign(1.0, theta) / (
                        abs(theta) + math.sqrt(theta * theta + 1.0)
                    )
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                app, aqq = a[p, p], a[q, q]
                row_p = a[p].copy()
                row_q = a[q].copy()
                new_p = c * row_p - s * row_q
                new_q = s * row_p + c * row_q
                a[p], a[q] = new_p, new_q
                a[:, p], a[:, q] = new_p, new_q
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = a[q, p] = 0.0

                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
    raise NoConvergence(f"Jacobi sweep cap ({max_sweeps}) reached")


def _order_spectrum(values, columns):
    order = np.argsort(-values, kind="stable")
    values = values[order]
    rows = columns[:, order].T.copy()
    # Sign convention: make the largest-magnitude entry of each row positive.
    for row in rows:
        lead = np.argmax(np.abs(row))
        if row[lead] < 0:
            row *= -1.0
    return values, rows


@dataclass
class PcaModel:
    """Fitted standardization plus eigenbasis of the band correlation.

    ``components`` rows are eigenvectors; ``eigenvalues`` are the matching
    variances, clamped at zero. ``total_variance`` is the full-spectrum
    eigenvalue sum from fitting; it survives truncation so explained
    ratios stay meaningful, but is unknown (None) for truncated models
    loaded from disk, since the file format stores only retained values.
    """

    mean: np.ndarray          # (B,)
    std: np.ndarray           # (B,) effective, degenerate bands already 1
    components: np.ndarray    # (k, B)
    eigenvalues: np.ndarray   # (k,), descending, >= 0
    total_variance: float | None = None

    @property
    def bands(self) -> int:
        return self.components.shape[1]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def explained_ratio(self) -> np.ndarray | None:
        if self.total_variance is None:
            return None
        if self.total_variance == 0.0:
            return np.zeros_like(self.eigenvalues)
        return self.eigenvalues / self.total_variance

    @property
    def cumulative_explained(self) -> np.ndarray | None:
        ratio = self.explained_ratio
        return None if ratio is None else np.cumsum(ratio)


def fit_pca(sample_set: SampleSet, subsample_fraction: float = 0.4,
            seed: int = 0, bucket: str | None = "train") -> PcaModel:
    """Fit a full (k = B) PCA model on a seeded subsample of one bucket.

    The subsample picks whole samples without replacement; the standardizer
    and the covariance accumulator both run over exactly those samples'
    pixels. An unsplit set is treated as all-training.
    """
    if not 0.0 < subsample_fraction <= 1.0:
        raise InvalidConfig("subsample_fraction must be in (0, 1]")
    indices = sample_set.bucket_indices(bucket)
    if len(indices) == 0:
        raise EmptyBucket(f"bucket {bucket!r} holds no samples")
    n_pick = max(1, int(round(subsample_fraction * len(indices))))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(indices, size=n_pick, replace=False))

    st = Standardizer(sample_set.bands)
    for i in chosen:
        st.update(_raster_pixels(sample_set.rasters[i]))
    if st.count < 2:
        raise EmptyBucket("subsample holds fewer than 2 pixels")

    acc = CovAccumulator(sample_set.bands)
    for i in chosen:
        acc.accumulate(st.standardize(_raster_pixels(sample_set.rasters[i])))
    eigenvalues, components = eigendecompose_symmetric(acc.finalize())
    eigenvalues = np.maximum(eigenvalues, 0.0)
    return PcaModel(
        mean=st.mean,
        std=st.effective_std(),
        components=components,
        eigenvalues=eigenvalues,
        total_variance=float(eigenvalues.sum()),
    )


def select_components(model: PcaModel, k: int | None = None,
                      variance_threshold: float | None = None) -> PcaModel:
    """Truncate a model to the top k rows, or to the minimal prefix whose
    cumulative explained ratio reaches ``variance_threshold``.

    Exactly one rule must be given.
    """
    if (k is None) == (variance_threshold is None):
        raise InvalidRule("give exactly one of k or variance_threshold")
    if k is not None:
        if not 1 <= k <= model.bands:
            raise InvalidRule(f"k must be in [1, {model.bands}]")
        keep = k
    else:
        if not 0.0 < variance_threshold <= 1.0:
            raise InvalidRule("variance_threshold must be in (0, 1]")
        cum = model.cumulative_explained
        if cum is None:
            raise InvalidRule("model lacks full-spectrum totals; refit to use a threshold")
        keep = int(np.searchsorted(cum, variance_threshold - 1e-9)) + 1
        keep = min(keep, model.n_components)
    return PcaModel(
        mean=model.mean,
        std=model.std,
        components=model.components[:keep].copy(),
        eigenvalues=model.eigenvalues[:keep].copy(),
        total_variance=model.total_variance,
    )


def project(model: PcaModel, rasters) -> np.ndarray:
    """Project rasters to k bands: each pixel maps to W @ ((p - mean) / std).

    Accepts a single (B, H, W) raster or an (N, B, H, W) stack and returns
    float64 output of the same rank with k bands; height and width pass
    through unchanged.
    """
    arr = np.asarray(rasters, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4:
        raise DimensionMismatch(f"expected (B, H, W) or (N, B, H, W), got {arr.shape}")
    n, b, h, w = arr.shape
    if b != model.bands:
        raise DimensionMismatch(f"model has {model.bands} bands, raster has {b}")
    flat = arr.reshape(n, b, h * w)
    standardized = (flat - model.mean[:, None]) / model.std[:, None]
    out = np.einsum("kb,nbp->nkp", model.components, standardized)
    out = out.reshape(n, model.n_components, h, w)
    return out[0] if single else out


def transform_pixels(model: PcaModel, pixels) -> np.ndarray:
    """Project an (n, B) pixel matrix to (n, k)."""
    x = check_pixel_matrix(pixels, "pixels", bands=model.bands)
    return ((x - model.mean) / model.std) @ model.components.T


def transform_sampleset(model: PcaModel, sample_set: SampleSet) -> SampleSet:
    """Project a whole SampleSet, keeping labels and split assignments.

    The MSB1 container stores float32, so the projected values are cast.
    """
    projected = project(model, sample_set.rasters).astype(np.float32)
    return SampleSet(projected, sample_set.labels, sample_set.split_codes,
                     sample_set.split_seed)


def save_pca(model: PcaModel, path) -> None:
    """Write a model: magic PCA1, u32 B, u32 k, then mean, std,
    eigenvalues (k) and components (k x B), all float64 little-endian."""
    with open(path, "wb") as fh:
        fh.write(_PCA_HEADER.pack(PCA_MAGIC, model.bands, model.n_components))
        for block in (model.mean, model.std, model.eigenvalues, model.components):
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_pca(path) -> PcaModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PCA_MAGIC:
        raise InvalidConfig(f"{path}: not a PCA1 model file")
    _, b, k = _PCA_HEADER.unpack_from(raw)
    expected = _PCA_HEADER.size + 8 * (b + b + k + k * b)
    if len(raw) != expected:
        raise InvalidConfig(f"{path}: size {len(raw)} does not match header")
    body = np.frombuffer(raw, dtype="<f8", offset=_PCA_HEADER.size)
    mean, std = body[:b].copy(), body[b:2 * b].copy()
    eigenvalues = body[2 * b:2 * b + k].copy()
    components = body[2 * b + k:].reshape(k, b).copy()
    total = float(eigenvalues.sum()) if k == b else None
    return PcaModel(mean, std, components, eigenvalues, total)


class PcaReducer(BaseEstimator, TransformerMixin):
    """Estimator wrapper so the reduction composes with sklearn pipelines.

    fit accepts either an (N, B, H, W) raster stack or an (n, B) pixel
    matrix; the first axis is the subsampling unit. transform preserves the
    input rank. Give at most one of ``n_components`` / ``variance_threshold``;
    with neither, the full spectrum is kept.
    """

    def __init__(self, n_components=None, variance_threshold=None,
                 subsample_fraction=1.0, seed=0):
        self.n_components = n_components
        self.variance_threshold = variance_threshold
        self.subsample_fraction = subsample_fraction
        self.seed = seed

    def fit(self, X, y=None):
        if self.n_components is not None and self.variance_threshold is not None:
            raise InvalidRule("give at most one of n_components / variance_threshold")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise InvalidConfig("subsample_fraction must be in (0, 1]")
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim not in (2, 4):
            raise DimensionMismatch("fit expects (n, B) pixels or (N, B, H, W) rasters")
        n = arr.shape[0]
        if n == 0:
            raise EmptySet("cannot fit on an empty array")
        n_pick = max(1, int(round(self.subsample_fraction * n)))
        rng = np.random.default_rng(self.seed)
        chosen = np.sort(rng.choice(n, size=n_pick, replace=False))

        bands = arr.shape[1]
        st = Standardizer(bands)
        acc = CovAccumulator(bands)
        for i in chosen:
            st.update(self._pixels_of(arr[i]))
        if st.count < 2:
            raise EmptyBucket("need at least 2 pixels to fit")
        for i in chosen:
            acc.accumulate(st.standardize(self._pixels_of(arr[i])))
        eigenvalues, components = eigendecompose_symmetric(acc.finalize())
        eigenvalues = np.maximum(eigenvalues, 0.0)
        model = PcaModel(st.mean, st.effective_std(), components, eigenvalues,
                         float(eigenvalues.sum()))
        if self.n_components is not None:
            model = select_components(model, k=self.n_components)
        elif self.variance_threshold is not None:
            model = select_components(model, variance_threshold=self.variance_threshold)
        self.model_ = model
        return self

    @staticmethod
    def _pixels_of(sample: np.ndarray) -> np.ndarray:
        if sample.ndim == 3:
            return _raster_pixels(sample)
        return sample[None, :]

    def transform(self, X):
        if not hasattr(self, "model_"):
            raise InvalidConfig("PcaReducer is not fitted")
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim == 2:
            return transform_pixels(self.model_, arr)
        return project(self.model_, arr)
