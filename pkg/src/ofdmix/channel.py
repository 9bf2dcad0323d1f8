"""Per-source impairments and superposition.

Each source's stream passes through (in this fixed order) multipath,
integer-sample timing delay, sampling-frequency-offset resampling, and
carrier-frequency-offset rotation; the streams are then summed with their
arrival offsets and circularly-symmetric Gaussian noise is added.  The CFO
exponential sits outside the channel sum, mirroring the impairment model's
nesting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .frame import OfdmConfig
from .transmitter import TxFrame

SFO_LIMIT = 1e-3  # oscillators beyond 1000 ppm are out of model range
SFO_KERNEL_TAPS = 48


@dataclass(frozen=True)
class SourceProfile:
    """True impairments of one transmitter as seen at the channel input.

    ``cfo_hz`` is the residual after any transmitter-side coarse
    pre-compensation; ``sfo_ratio`` is (T - T') / T for transmitter sample
    period T and receiver period T'.
    """

    source_id: int
    cfo_hz: float = 0.0
    sfo_ratio: float = 0.0
    sto_samples: int = 0
    arrival_offset: int = 0

    def __post_init__(self):
        if not abs(self.sfo_ratio) < SFO_LIMIT:
            raise ConfigError(f"|sfo_ratio| must be < {SFO_LIMIT:g}")
        for name in ("cfo_hz", "sfo_ratio"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")

    def in_spec(self, config: OfdmConfig) -> bool:
        """Within the usable CP timing budget (first 2 CP samples carry ISI)."""
        return abs(self.arrival_offset) <= config.cp_len - 2


@dataclass(frozen=True)
class MultipathModel:
    """Sparse tap-delay response; delay-0 tap present, delays ascending."""

    taps: tuple[tuple[int, complex], ...]

    def __post_init__(self):
        taps = tuple((int(d), complex(g)) for d, g in self.taps)
        object.__setattr__(self, "taps", taps)
        delays = [d for d, _ in taps]
        if not taps or delays[0] != 0:
            raise ConfigError("multipath model needs a tap at delay 0")
        if delays != sorted(delays) or len(set(delays)) != len(delays):
            raise ConfigError("tap delays must be strictly ascending")

    @property
    def power(self) -> float:
        return float(sum(abs(g) ** 2 for _, g in self.taps))

    def normalized(self) -> "MultipathModel":
        scale = 1.0 / math.sqrt(self.power)
        return MultipathModel(tuple((d, g * scale) for d, g in self.taps))

    @property
    def max_delay(self) -> int:
        return self.taps[-1][0]

    def kernel(self) -> np.ndarray:
        h = np.zeros(self.max_delay + 1, dtype=complex)
        for d, g in self.taps:
            h[d] = g
        return h

    def frequency_response(self, ks, n_subcarriers: int) -> np.ndarray:
        """Transfer function at logical subcarriers under the package's DFT sign."""
        ks = np.asarray(ks)
        out = np.zeros(ks.shape, dtype=complex)
        for d, g in self.taps:
            out = out + g * np.exp(2j * np.pi * ks * d / n_subcarriers)
        return out


def los_channel(rng: np.random.Generator | None = None) -> MultipathModel:
    """Single unit tap; random phase when an rng is supplied."""
    phase = 0.0 if rng is None else 2 * np.pi * rng.random()
    return MultipathModel(((0, np.exp(1j * phase)),))


def nlos_channel(rng: np.random.Generator | None = None) -> MultipathModel:
    """Three taps at delays {0, 1, 2} with exponentially decaying power."""
    power = np.exp(-np.arange(3, dtype=float))
    power /= power.sum()
    if rng is None:
        phases = np.zeros(3)
    else:
        phases = 2 * np.pi * rng.random(3)
    gains = np.sqrt(power) * np.exp(1j * phases)
    return MultipathModel(tuple((d, gains[d]) for d in range(3)))


@dataclass(frozen=True)
class NoiseModel:
    """AWGN level referenced to the measured superimposed-signal power."""

    snr_db: float | None  # None = noiseless
    rng_seed: int = 0


# ---------------------------------------------------------------------------
# Impairment operators
# ---------------------------------------------------------------------------

def apply_cfo(samples: np.ndarray, cfo_hz: float, sample_period: float) -> np.ndarray:
    """Rotate sample n by e^{j 2 pi cfo n T}."""
    if not math.isfinite(cfo_hz):
        raise ConfigError("cfo must be finite")
    if cfo_hz == 0.0:
        return np.array(samples, dtype=complex)
    n = np.arange(len(samples))
    return samples * np.exp(2j * np.pi * cfo_hz * n * sample_period)


def _sinc_kernel(frac: np.ndarray, taps: int) -> tuple[np.ndarray, np.ndarray]:
    half = taps // 2
    j = np.arange(-(half - 1), half + 1)
    t = frac[:, None] - j[None, :]
    w = np.sinc(t) * (0.5 + 0.5 * np.cos(np.pi * t / half))
    return j, w


def apply_sfo(
    samples: np.ndarray, sfo_ratio: float, taps: int = SFO_KERNEL_TAPS
) -> np.ndarray:
    """Resample so output m equals the input at fractional index m*(1 - ratio).

    Band-limited interpolation with a Hann-windowed sinc; samples outside the
    input are treated as zero.
    """
    if not abs(sfo_ratio) < SFO_LIMIT:
        raise ConfigError(f"|sfo_ratio| must be < {SFO_LIMIT:g}")
    if sfo_ratio == 0.0:
        return np.array(samples, dtype=complex)
    x = np.asarray(samples, dtype=complex)
    m = np.arange(len(x))
    center = m * (1.0 - sfo_ratio)
    base = np.floor(center).astype(int)
    j, w = _sinc_kernel(center - base, taps)
    idx = base[:, None] + j[None, :]
    valid = (idx >= 0) & (idx < len(x))
    xi = np.where(valid, x[np.clip(idx, 0, len(x) - 1)], 0.0)
    return (xi * w).sum(axis=1)


def apply_multipath(samples: np.ndarray, model: MultipathModel) -> np.ndarray:
    """Discrete convolution with the sparse tap response (length preserved)."""
    return np.convolve(samples, model.kernel())[: len(samples)]


def apply_integer_delay(samples: np.ndarray, delay: int) -> np.ndarray:
    """Shift by a whole number of samples, zero-filling; length preserved."""
    out = np.zeros_like(np.asarray(samples, dtype=complex))
    if delay == 0:
        out[:] = samples
    elif delay > 0:
        out[delay:] = samples[: len(samples) - delay]
    else:
        out[:delay] = samples[-delay:]
    return out


def propagate(
    frame: TxFrame,
    profile: SourceProfile,
    multipath: MultipathModel,
    config: OfdmConfig,
    pad: int = 256,
) -> np.ndarray:
    """Run one source through its impairment chain (fixed operator order).

    Returns the stream padded with ``pad`` zeros at both ends so delays and
    resampling drift never clip frame content; the frame's nominal start sits
    at sample ``pad``.
    """
    if pad < abs(profile.sto_samples + frame.emit_offset) + multipath.max_delay + 8:
        raise ConfigError("pad too small for the requested timing offsets")
    x = np.zeros(len(frame.samples) + 2 * pad, dtype=complex)
    x[pad : pad + len(frame.samples)] = frame.samples
    x = apply_multipath(x, multipath)
    x = apply_integer_delay(x, profile.sto_samples + frame.emit_offset)
    x = apply_sfo(x, profile.sfo_ratio)
    x = apply_cfo(x, profile.cfo_hz, config.sample_period)
    return x


def superimpose(
    streams: Sequence[tuple[np.ndarray, int]],
    noise: NoiseModel,
) -> np.ndarray:
    """Sum the streams at their integer arrival offsets and add AWGN.

    Noise power is set from the measured power of the superimposed sum over
    the samples where at least one stream is present, not from any nominal
    level; per-component variance is half the total noise power.  Output is
    bit-reproducible for a given (inputs, rng_seed).
    """
    if not streams:
        raise ConfigError("superimpose needs at least one stream")
    total_len = max(len(s) + off for s, off in streams)
    out = np.zeros(total_len, dtype=complex)
    active = np.zeros(total_len, dtype=bool)
    for samples, offset in streams:
        if offset < 0:
            raise ConfigError("arrival offsets on the common timeline must be >= 0")
        out[offset : offset + len(samples)] += samples
        active[offset : offset + len(samples)] = True

    if noise.snr_db is None or math.isinf(noise.snr_db):
        return out

    p_signal = float(np.mean(np.abs(out[active]) ** 2))
    p_noise = p_signal / (10.0 ** (noise.snr_db / 10.0))
    sigma = math.sqrt(p_noise / 2.0)
    rng = np.random.default_rng(noise.rng_seed)
    out = out + sigma * (
        rng.standard_normal(total_len) + 1j * rng.standard_normal(total_len)
    )
    return out
