"""Sample containers, the MSB1 binary format, synthetic data, and splitting.

MSB1 layout (little-endian, no compression, no padding):

    magic   4 bytes  b"MSB1"
    N       u32      sample count
    B       u32      bands per sample
    H       u32      raster height
    W       u32      raster width
    C       u32      classes per label vector
    then per sample:
        B*H*W float32 pixel values, band-major
        C     uint8   label bytes (0 or 1)

Split assignments are not part of the file; they are reapplied
deterministically from a recorded seed via :func:`split`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    EmptySet,
    InconsistentShape,
    InvalidConfig,
    NonFiniteValue,
    TruncatedFile,
)

MAGIC = b"MSB1"
_HEADER = struct.Struct("<4sIIIII")

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class SampleSet:
    """A stack of multi-band rasters with multi-hot labels.

    Treated as immutable after construction; safe to share read-only.
    ``split_codes`` is None until :func:`split` assigns buckets.
    """

    rasters: np.ndarray                 # (N, B, H, W) float32
    labels: np.ndarray                  # (N, C) uint8, entries 0/1
    split_codes: np.ndarray | None = None   # (N,) uint8 in {0,1,2}
    split_seed: int | None = None

    def __post_init__(self):
        if self.rasters.ndim != 4:
            raise InconsistentShape("rasters must be a (N, B, H, W) array")
        if self.labels.ndim != 2:
            raise InconsistentShape("labels must be a (N, C) array")
        if self.rasters.shape[0] != self.labels.shape[0]:
            raise InconsistentShape(
                f"{self.rasters.shape[0]} rasters but {self.labels.shape[0]} label rows"
            )
        b, h, w = self.rasters.shape[1:]
        if min(b, h, w) < 1 or self.labels.shape[1] < 1:
            raise InconsistentShape("bands, height, width and classes must be >= 1")
        if not np.all(np.isfinite(self.rasters)):
            raise NonFiniteValue("rasters contain NaN or infinite values")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise InconsistentShape("label entries must be exactly 0 or 1")
        if self.split_codes is not None:
            if self.split_codes.shape != (self.n_samples,):
                raise InconsistentShape("split_codes must have one entry per sample")
            if self.n_samples and self.split_codes.max(initial=0) > SPLIT_TEST:
                raise InconsistentShape("split codes must be 0 (train), 1 (val) or 2 (test)")

    @property
    def n_samples(self) -> int:
        return self.rasters.shape[0]

    @property
    def bands(self) -> int:
        return self.rasters.shape[1]

    @property
    def height(self) -> int:
        return self.rasters.shape[2]

    @property
    def width(self) -> int:
        return self.rasters.shape[3]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def empty_label_count(self) -> int:
        """Samples whose label vector is all zeros (permitted, but reported)."""
        if self.n_samples == 0:
            return 0
        return int((self.labels.sum(axis=1) == 0).sum())

    def bucket_indices(self, bucket: str | None) -> np.ndarray:
        """Indices of one split bucket.

        ``bucket=None`` selects every sample. An unsplit set is treated as
        all-training, so ``bucket="train"`` also selects everything there.
        """
        if bucket is None:
            return np.arange(self.n_samples)
        if bucket not in SPLIT_NAMES:
            raise InvalidConfig(f"unknown bucket {bucket!r}")
        if self.split_codes is None:
            if bucket == "train":
                return np.arange(self.n_samples)
            return np.empty(0, dtype=np.int64)
        code = SPLIT_NAMES.index(bucket)
        return np.flatnonzero(self.split_codes == code)

    def subset(self, indices) -> "SampleSet":
        indices = np.asarray(indices, dtype=np.int64)
        codes = None if self.split_codes is None else self.split_codes[indices]
        return SampleSet(self.rasters[indices], self.labels[indices], codes, self.split_seed)


def save_sampleset(sample_set: SampleSet, path) -> None:
    """Write the set in MSB1 form; load/save round-trips bit-exactly."""
    n = sample_set.n_samples
    b, h, w = sample_set.bands, sample_set.height, sample_set.width
    c = sample_set.n_classes
    header = _HEADER.pack(MAGIC, n, b, h, w, c)
    raster_bytes = (
        np.ascontiguousarray(sample_set.rasters, dtype="<f4")
        .reshape(n, b * h * w)
        .view(np.uint8)
    )
    label_bytes = np.ascontiguousarray(sample_set.labels, dtype=np.uint8)
    payload = np.concatenate([raster_bytes, label_bytes], axis=1)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def load_sampleset(path) -> SampleSet:
    """Read an MSB1 file, rejecting malformed headers and non-finite pixels."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC:
            raise BadMagic(f"{path}: not an MSB1 file")
        raise TruncatedFile(f"{path}: header incomplete")
    magic, n, b, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, found {magic!r}")
    if min(b, h, w, c) < 1:
        raise InconsistentShape(f"{path}: header declares a zero dimension")
    record = b * h * w * 4 + c
    payload = raw[_HEADER.size:]
    if len(payload) < n * record:
        raise TruncatedFile(
            f"{path}: payload holds {len(payload)} bytes, header promises {n * record}"
        )
    if len(payload) > n * record:
        raise InconsistentShape(f"{path}: {len(payload) - n * record} trailing bytes")
    flat = np.frombuffer(payload, dtype=np.uint8).reshape(n, record) if n else \
        np.empty((0, record), dtype=np.uint8)
    rasters = (
        np.ascontiguousarray(flat[:, : b * h * w * 4])
        .view("<f4")
        .reshape(n, b, h, w)
        .astype(np.float32, copy=False)
    )
    labels = np.ascontiguousarray(flat[:, b * h * w * 4:])
    finite = np.isfinite(rasters)
    if not finite.all():
        sample, band = np.argwhere(~finite)[0][:2]
        raise NonFiniteValue(
            f"{path}: non-finite pixel in sample {sample}, band {band}",
            sample=int(sample), band=int(band),
        )
    if not np.all((labels == 0) | (labels == 1)):
        raise InconsistentShape(f"{path}: label byte outside {{0, 1}}")
    return SampleSet(rasters, labels)


@dataclass
class SynthConfig:
    """Parameters of the synthetic low-rank generator.

    Pixels are drawn as ``A @ u + noise_sigma * eps`` with ``u`` an i.i.d.
    standard normal latent of dimension ``latent_rank`` per pixel, so the
    population pixel covariance is ``A @ A.T + noise_sigma**2 * I``. Labels
    threshold fixed random linear functionals of each sample's scaled mean
    latent, which keeps every class linearly recoverable from the raster.
    """

    n_samples: int
    bands: int = 13
    height: int = 4
    width: int = 4
    classes: int = 9
    latent_rank: int = 3
    noise_sigma: float = 0.01
    seed: int = 0

    def validate(self):
        if self.n_samples < 0:
            raise InvalidConfig("n_samples must be >= 0")
        if min(self.bands, self.height, self.width, self.classes) < 1:
            raise InvalidConfig("bands, height, width and classes must be >= 1")
        if not 1 <= self.latent_rank <= self.bands:
            raise InvalidConfig("latent_rank must satisfy 1 <= latent_rank <= bands")
        if not self.noise_sigma >= 0:
            raise InvalidConfig("noise_sigma must be >= 0")


def synthesis_mixing_matrix(config: SynthConfig) -> np.ndarray:
    """The (B, latent_rank) mixing matrix a given config will use.

    Exposed so tests can evaluate the population covariance analytically.
    Rows are rescaled to norms in [1, 2], keeping every band's signal well
    above the noise floor.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    g = rng.standard_normal((config.bands, config.latent_rank))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    row_scale = rng.uniform(1.0, 2.0, size=(config.bands, 1))
    return g / norms * row_scale


def synthesize(config: SynthConfig) -> SampleSet:
    """Generate a deterministic low-rank SampleSet per ``config``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    b, r = config.bands, config.latent_rank
    h, w, c = config.height, config.width, config.classes
    n = config.n_samples
    n_pix = h * w

    # Draw order is fixed: mixing matrix, class geometry, latents, noise.
    g = rng.standard_normal((b, r))
    mixing = g / np.linalg.norm(g, axis=1, keepdims=True)
    mixing = mixing * rng.uniform(1.0, 2.0, size=(b, 1))
    dirs = rng.standard_normal((c, r))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    thresholds = rng.uniform(-0.6, 0.6, size=c)

    latents = rng.standard_normal((n, r, n_pix))
    noise = rng.standard_normal((n, b, n_pix))
    pixels = np.einsum("br,nrp->nbp", mixing, latents) + config.noise_sigma * noise
    rasters = pixels.reshape(n, b, h, w).astype(np.float32)

    # Mean latent scaled back to unit variance; labels are exact thresholds.
    scores = (latents.mean(axis=2) * math.sqrt(n_pix)) @ dirs.T
    labels = (scores >= thresholds).astype(np.uint8)
    return SampleSet(rasters, labels)


def split(sample_set: SampleSet, ratio=(5, 1, 1), seed: int = 0) -> SampleSet:
    """Assign train/val/test buckets by seeded shuffle.

    Bucket sizes follow largest-remainder apportionment (ties favor train),
    which keeps every bucket within one sample of its exact proportion.
    Returns a new SampleSet sharing the underlying arrays.
    """
    if sample_set.n_samples == 0:
        raise EmptySet("cannot split an empty sample set")
    ratio = tuple(float(x) for x in ratio)
    if len(ratio) != 3 or any(x <= 0 for x in ratio):
        raise InvalidConfig("ratio must be three positive numbers")

    n = sample_set.n_samples
    exact = np.array(ratio) * (n / sum(ratio))
    counts = np.floor(exact).astype(np.int64)
    fractions = exact - counts
    for _ in range(n - int(counts.sum())):
        pick = int(np.argsort(-fractions, kind="stable")[0])
        counts[pick] += 1
        fractions[pick] = -1.0

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    codes = np.empty(n, dtype=np.uint8)
    start = 0
    for code, count in enumerate(counts):
        codes[perm[start:start + count]] = code
        start += count
    return SampleSet(sample_set.rasters, sample_set.labels, codes, seed)
