"""Zero-mean mixed Poisson-Gaussian corruption and empirical verification.

The Poisson component is signal-dependent: each pixel p draws a count from
Poisson(k * p) and the analytic mean k * p is subtracted, leaving exactly
zero mean and variance p / k in normalized units. The Gaussian component is
declared on the 8-bit 0-255 intensity scale and converted by / 255^2.
Corruption never clips; clipping would bias the noise mean.

Reproducibility: all sampling uses numpy PCG64 generators derived from a
SeedSequence keyed by (master seed, source id, copy index), which makes
every corrupted copy regenerable from its provenance record alone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .imaging import ImageGrid

# Gaussian variance is declared on the 8-bit intensity scale.
INTENSITY_SCALE = 255.0

NOISE_COMPONENTS = ("poisson", "gaussian", "mixed")


def _id_words(source_id: str) -> tuple[int, int]:
    digest = hashlib.blake2s(source_id.encode("utf-8"), digest_size=8).digest()
    value = int.from_bytes(digest, "little")
    return value & 0xFFFFFFFF, value >> 32


def stream_key(seed: int, source_id: str, copy: int) -> tuple[int, ...]:
    """Spawn key identifying one corruption stream; recorded as provenance."""
    lo, hi = _id_words(source_id)
    return (lo, hi, int(copy))


def stream_for(seed: int, source_id: str, copy: int) -> np.random.Generator:
    """Independent generator for one (source, copy) corruption."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=stream_key(seed, source_id, copy))
    return np.random.Generator(np.random.PCG64(ss))


def rng_from_seed(seed: int, *words: int) -> np.random.Generator:
    """Generator for non-corruption uses (splits, init, shuffles)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(w) for w in words))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class NoiseSpec:
    """Parameters of the mixed noise model.

    poisson_scale is the photon-count scale k in counts per unit normalized
    intensity; None disables the Poisson component. gaussian_variance is
    sigma^2 on the 0-255 scale. rho is the correlation between independent
    noise draws and is fixed at 0.
    """

    poisson_scale: float | None = 255.0
    gaussian_variance: float = 15.0
    rho: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.poisson_scale is not None and not self.poisson_scale > 0:
            raise ConfigError(
                f"noise.poisson_scale must be > 0 or 'off', got {self.poisson_scale}"
            )
        if self.gaussian_variance < 0:
            raise ConfigError(
                f"noise.gaussian_variance must be >= 0, got {self.gaussian_variance}"
            )
        if self.rho != 0.0:
            raise ConfigError(f"noise.rho is fixed at 0, got {self.rho}")

    @property
    def poisson_enabled(self) -> bool:
        return self.poisson_scale is not None

    def variance_at(self, intensity) -> np.ndarray:
        """Analytic per-pixel noise variance in normalized units."""
        p = np.asarray(intensity, dtype=np.float64)
        var = np.full_like(p, self.gaussian_variance / INTENSITY_SCALE**2)
        if self.poisson_enabled:
            var = var + p / self.poisson_scale
        return var

    def to_dict(self) -> dict:
        return {
            "poisson_scale": "off" if self.poisson_scale is None else self.poisson_scale,
            "gaussian_variance": self.gaussian_variance,
            "rho": self.rho,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        scale = d.get("poisson_scale", 255.0)
        if scale in ("off", None):
            scale = None
        return cls(
            poisson_scale=scale,
            gaussian_variance=float(d.get("gaussian_variance", 15.0)),
            rho=float(d.get("rho", 0.0)),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class NoiseField:
    """One sampled noise realization, same shape as its source image."""

    values: np.ndarray
    component: str

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 2:
            raise DomainError(f"noise field must be 2-D, got {vals.ndim}-D")
        if not np.all(np.isfinite(vals)):
            raise DomainError("noise field contains non-finite values")
        if self.component not in NOISE_COMPONENTS:
            raise DomainError(f"unknown noise component '{self.component}'")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class StatsReport:
    """Empirical noise statistics with named tolerance checks."""

    empirical_mean: float
    empirical_variance: float
    sample_count: int
    tolerance_pass: dict = field(default_factory=dict)
    expected_variance: float | None = None
    max_rel_deviation: float | None = None

    def __post_init__(self):
        if self.sample_count < 1:
            raise DomainError("StatsReport needs at least one sample")

    @property
    def passed(self) -> bool:
        return all(self.tolerance_pass.values())


def sample_poisson_component(img: ImageGrid, k: float, rng: np.random.Generator) -> NoiseField:
    """Signal-dependent zero-mean Poisson noise: (Poisson(k*p) - k*p) / k."""
    if not k > 0:
        raise ConfigError(f"poisson scale must be > 0, got {k}")
    p = img.pixels.astype(np.float64)
    if p.min() < 0:
        raise DomainError(
            f"image '{img.id}' has negative pixels; poisson sampling needs a normalized image"
        )
    rate = k * p
    counts = rng.poisson(rate)
    noise = (counts - rate) / k
    return NoiseField(noise.astype(np.float32), "poisson")


def sample_gaussian_component(
    shape: tuple[int, int], sigma2: float, rng: np.random.Generator
) -> NoiseField:
    """I.i.d. zero-mean Gaussian noise with variance sigma2 / 255^2."""
    if sigma2 < 0:
        raise ConfigError(f"gaussian variance must be >= 0, got {sigma2}")
    if sigma2 == 0:
        return NoiseField(np.zeros(shape, dtype=np.float32), "gaussian")
    std = np.sqrt(sigma2) / INTENSITY_SCALE
    noise = rng.normal(0.0, std, size=shape)
    return NoiseField(noise.astype(np.float32), "gaussian")


def sample_mixed(img: ImageGrid, spec: NoiseSpec, rng: np.random.Generator) -> NoiseField:
    """Sum of the enabled components, zero mean by construction."""
    total = np.zeros(img.shape, dtype=np.float32)
    if spec.poisson_enabled:
        total = total + sample_poisson_component(img, spec.poisson_scale, rng).values
    total = total + sample_gaussian_component(img.shape, spec.gaussian_variance, rng).values
    return NoiseField(total, "mixed")


def corrupt(img: ImageGrid, spec: NoiseSpec, rng: np.random.Generator) -> ImageGrid:
    """Add one mixed-noise realization to a normalized image, unclipped.

    With the Poisson component off and zero Gaussian variance the output
    equals the input bit for bit.
    """
    if not spec.poisson_enabled and spec.gaussian_variance == 0:
        return img
    noise = sample_mixed(img, spec, rng)
    return img.with_pixels(img.pixels + noise.values)


def noise_stats(
    img: ImageGrid, spec: NoiseSpec, rng: np.random.Generator, n_samples: int
) -> StatsReport:
    """Empirical mean/variance of the mixed noise over >= n_samples draws.

    Pixels of the (constant or varying) source image all contribute; draws
    are repeated until the total sample count reaches n_samples. Statistics
    accumulate in float64.
    """
    per_draw = img.pixels.size
    draws = max(1, -(-int(n_samples) // per_draw))
    total = 0.0
    total_sq = 0.0
    count = 0
    for _ in range(draws):
        vals = sample_mixed(img, spec, rng).values.astype(np.float64)
        total += float(vals.sum())
        total_sq += float((vals * vals).sum())
        count += vals.size
    mean = total / count
    var = total_sq / count - mean * mean
    expected = float(np.mean(spec.variance_at(img.pixels)))
    sigma_total = np.sqrt(expected)
    checks = {
        "mean_within_clt_bound": abs(mean) <= 4.0 * sigma_total / np.sqrt(count),
        "variance_within_2pct": expected == 0.0 or abs(var - expected) / expected <= 0.02,
    }
    return StatsReport(mean, var, count, checks, expected_variance=expected)


def verify_additivity(
    img: ImageGrid,
    spec_o: NoiseSpec,
    spec_s: NoiseSpec,
    n_samples: int,
    rng_o: np.random.Generator | None = None,
    rng_s: np.random.Generator | None = None,
) -> StatsReport:
    """Check Var[n_o + n_s] = Var[n_o] + Var[n_s] per pixel class (rho = 0).

    Draws independent realizations of both specs over the image, groups the
    samples by distinct pixel value, and reports the maximum relative
    deviation of the summed-noise variance from the sum of the component
    variances. Passes at <= 5%.
    """
    if n_samples < 10_000:
        raise ConfigError(f"verify_additivity needs n_samples >= 10000, got {n_samples}")
    if rng_o is None:
        rng_o = stream_for(spec_o.seed, img.id, 0)
    if rng_s is None:
        rng_s = stream_for(spec_s.seed, img.id, 1)

    per_draw = img.pixels.size
    draws = max(1, -(-int(n_samples) // per_draw))
    fields_o = np.stack(
        [sample_mixed(img, spec_o, rng_o).values for _ in range(draws)]
    ).astype(np.float64)
    fields_s = np.stack(
        [sample_mixed(img, spec_s, rng_s).values for _ in range(draws)]
    ).astype(np.float64)
    summed = fields_o + fields_s

    classes = np.unique(img.pixels)
    max_dev = 0.0
    max_dev_analytic = 0.0
    var_sum_all = float(summed.var())
    for value in classes:
        mask = img.pixels == value
        var_o = float(fields_o[:, mask].var())
        var_s = float(fields_s[:, mask].var())
        var_sum = float(summed[:, mask].var())
        expected = var_o + var_s
        if expected > 0:
            max_dev = max(max_dev, abs(var_sum - expected) / expected)
        analytic = float(spec_o.variance_at(value) + spec_s.variance_at(value))
        if analytic > 0:
            max_dev_analytic = max(
                max_dev_analytic, abs(var_sum - analytic) / analytic
            )
    checks = {
        "additivity_within_5pct": max_dev <= 0.05,
        "analytic_within_5pct": max_dev_analytic <= 0.05,
    }
    return StatsReport(
        float(summed.mean()),
        var_sum_all,
        int(summed.size),
        checks,
        expected_variance=float(
            np.mean(spec_o.variance_at(img.pixels) + spec_s.variance_at(img.pixels))
        ),
        max_rel_deviation=max_dev,
    )
