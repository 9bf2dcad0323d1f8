"""Per-source channel estimation and offset tracking.

Each source's channel is measured from its own interference-free LTS slot.
Residual carrier offset is tracked symbol by symbol from the source's two
pilot subcarriers at +/-k0: the symmetric (k-independent) part of the pilot
phase pair is the common carrier rotation, the antisymmetric part is the
k-proportional timing/sampling ramp.  The sampling-offset ratio is inferred
from the carrier error ratio (gamma ~ epsilon, both come from the same
oscillator) unless the configuration overrides it.

Phase corrections follow, per symbol s and subcarrier k,

    theta(k, s) = 2 pi k n_eps / N_c                      (timing, constant in s)
                + s * 2 pi k gamma (N_c + L) / N_c        (sampling drift)
                + s * 2 pi df_step2 (N_c + L) T           (residual carrier)

with s counted from the channel-estimation snapshot; once pilot tracking has
locked, the accumulated terms are re-anchored on the measured pilot phases
instead of extrapolated from the snapshot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import EstimationError
from .frame import FrameLayout, OfdmConfig, analyze

PILOT_FLOOR = 0.1  # fraction of the expected pilot magnitude
TRACK_ALPHA = 0.5  # exponential smoothing per symbol


def demodulate_grid(
    samples: np.ndarray, start: int, n_symbols: int, config: OfdmConfig
) -> np.ndarray:
    """FFT rows for ``n_symbols`` symbols whose CP begins at ``start``.

    Every window opens ``fft_window_offset`` samples into the CP, the same
    earliness used for training-slot demodulation, so window placement phase
    cancels between channel estimate and data.
    """
    n = config.n_subcarriers
    first = start + config.fft_window_offset
    idx = first + np.arange(n_symbols)[:, None] * config.symbol_len + np.arange(n)
    if first < 0 or idx[-1, -1] >= len(samples):
        raise EstimationError("demodulation window outside the captured stream")
    return analyze(np.asarray(samples)[idx], n)


def demodulate_lts_slot(
    samples: np.ndarray, slot_payload_start: int, config: OfdmConfig
) -> np.ndarray:
    """The two LTS repetitions as FFT rows, window-aligned like data symbols.

    ``slot_payload_start`` is where the first repetition begins (after the
    double guard).  Windows open ``window_earliness`` samples early, inside
    the guard, exactly as data windows open inside their CP.
    """
    n = config.n_subcarriers
    first = slot_payload_start - config.window_earliness
    idx = first + np.arange(2)[:, None] * n + np.arange(n)
    if first < 0 or idx[-1, -1] >= len(samples):
        raise EstimationError("LTS slot outside the captured stream")
    return analyze(np.asarray(samples)[idx], n)


@dataclass(frozen=True)
class ChannelEstimate:
    """Per-subcarrier complex gain of one source (NaN where undefined)."""

    source_id: int
    h: np.ndarray  # bin order, length n_subcarriers
    snapshot_symbol: float  # data-grid symbol index of the estimation midpoint

    def at_bins(self, bins: np.ndarray) -> np.ndarray:
        return self.h[np.asarray(bins, dtype=int)]


def estimate_channel(
    rx_lts_symbols: np.ndarray,
    reference_lts: np.ndarray,
    source_id: int,
    snapshot_symbol: float = 0.0,
    ref_floor: float = 1e-9,
) -> ChannelEstimate:
    """Average RX/REF over the LTS repetitions on the nonzero reference bins.

    Bins whose reference is ~0 are left NaN (uninterpolated); an all-zero
    reference is an estimation failure.
    """
    rx = np.atleast_2d(np.asarray(rx_lts_symbols, dtype=complex))
    ref = np.asarray(reference_lts, dtype=complex)
    usable = np.abs(ref) > ref_floor
    if not usable.any():
        raise EstimationError("reference LTS is identically zero")
    h = np.full(ref.shape, np.nan + 1j * np.nan, dtype=complex)
    h[usable] = (rx[:, usable] / ref[usable]).mean(axis=0)
    return ChannelEstimate(source_id=source_id, h=h, snapshot_symbol=snapshot_symbol)


def estimate_cfo_from_lts(
    t1_window: np.ndarray, t2_window: np.ndarray, config: OfdmConfig
) -> float:
    """Carrier offset from the phase advance between the two LTS repetitions.

    Unambiguous up to +/- sample_rate / (2 N_c), far beyond any residual this
    receiver is asked to track.
    """
    acc = np.vdot(t1_window, t2_window)  # sum conj(t1) * t2
    if abs(acc) < 1e-30:
        raise EstimationError("LTS repetitions carry no energy")
    return float(
        np.angle(acc) / (2 * np.pi * config.n_subcarriers * config.sample_period)
    )


# ---------------------------------------------------------------------------
# Offset state and phase corrections
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OffsetState:
    """Tracking state of one source within one frame.

    ``phase_anchor``/``slope_anchor`` hold the accumulated common phase and
    per-subcarrier phase slope at ``anchor_symbol``; before the first pilot
    update they sit at the model values (anchor at the snapshot), making the
    correction exactly the closed-form expression above.
    """

    source_id: int
    residual_cfo: float = 0.0  # Hz, smoothed step-2 estimate
    cfo_ratio: float = 0.0  # epsilon = total cfo / carrier
    sfo_ratio_est: float = 0.0  # gamma-hat
    sto_residual: float = 0.0  # samples relative to the common FFT grid
    snapshot_symbol: float = 0.0
    anchor_symbol: float = 0.0
    phase_anchor: float = 0.0  # rad, common component at anchor_symbol
    slope_anchor: float = 0.0  # rad per subcarrier at anchor_symbol
    low_confidence: bool = False

    @classmethod
    def initial(
        cls,
        source_id: int,
        config: OfdmConfig,
        *,
        sto_residual: float,
        residual_cfo: float,
        coarse_cfo: float = 0.0,
        snapshot_symbol: float = 0.0,
        gamma_override: float | None = None,
    ) -> "OffsetState":
        eps = (coarse_cfo + residual_cfo) / config.carrier_freq
        gamma = eps if gamma_override is None else gamma_override
        return cls(
            source_id=source_id,
            residual_cfo=residual_cfo,
            cfo_ratio=eps,
            sfo_ratio_est=gamma,
            sto_residual=sto_residual,
            snapshot_symbol=snapshot_symbol,
            anchor_symbol=snapshot_symbol,
            phase_anchor=0.0,
            slope_anchor=2 * np.pi * sto_residual / config.n_subcarriers,
        )

    def cfo_phase_rate(self, config: OfdmConfig) -> float:
        """Common phase advance per symbol from the residual carrier offset."""
        return 2 * np.pi * self.residual_cfo * config.symbol_len * config.sample_period

    def sfo_slope_rate(self, config: OfdmConfig) -> float:
        """Per-subcarrier phase-slope advance per symbol from the sampling drift."""
        return (
            2 * np.pi * self.sfo_ratio_est * config.symbol_len / config.n_subcarriers
        )


def phase_correction(k, s: float, state: OffsetState, config: OfdmConfig) -> np.ndarray:
    """Correction phase theta(k, s) for symbol ``s`` (state current through s-1)."""
    k = np.asarray(k, dtype=float)
    ds = s - state.anchor_symbol
    slope = state.slope_anchor + ds * state.sfo_slope_rate(config)
    common = state.phase_anchor + ds * state.cfo_phase_rate(config)
    return k * slope + common


def _wrap(angle):
    return (np.asarray(angle) + np.pi) % (2 * np.pi) - np.pi


def track_residual_cfo(
    symbol: np.ndarray,
    pilot_map: tuple[int, ...],
    state: OffsetState,
    channel: ChannelEstimate,
    config: OfdmConfig,
    s: float,
    pilot_value: complex = 1.0 + 0j,
    alpha: float = TRACK_ALPHA,
    pilot_floor: float = PILOT_FLOOR,
) -> OffsetState:
    """Fold symbol ``s``'s pilot pair into the tracking state.

    The pilot phases (after channel compensation and removal of the predicted
    correction) decompose into a common part, which re-anchors the carrier
    phase and updates the smoothed residual-CFO rate, and an antisymmetric
    k-proportional part, which re-anchors the timing/sampling slope.  Pilots
    below the magnitude floor leave the state unchanged except for a
    low-confidence flag.
    """
    k_pos = max(pilot_map)
    k_neg = min(pilot_map)
    bins = config.bins([k_neg, k_pos])
    rx = np.asarray(symbol, dtype=complex)[bins]
    href = channel.at_bins(bins)
    expected = np.abs(href * pilot_value)
    if np.any(~np.isfinite(expected)) or np.any(np.abs(rx) < pilot_floor * expected):
        return replace(state, low_confidence=True)

    ratio = rx / (href * pilot_value)
    predicted = phase_correction(np.array([k_neg, k_pos]), s, state, config)
    resid = _wrap(np.angle(ratio) - predicted)
    common_resid = float(resid.mean())
    slope_resid = float((resid[1] - resid[0]) / (k_pos - k_neg))

    ds = s - state.anchor_symbol
    new_phase = state.phase_anchor + ds * state.cfo_phase_rate(config) + alpha * common_resid
    new_slope = state.slope_anchor + ds * state.sfo_slope_rate(config) + alpha * slope_resid

    new_cfo = state.residual_cfo
    if ds > 0:
        # the anchored phase increment implies a rate; smooth toward it
        rate_obs = (alpha * common_resid / ds) + state.cfo_phase_rate(config)
        cfo_obs = rate_obs / (2 * np.pi * config.symbol_len * config.sample_period)
        new_cfo = (1 - alpha) * state.residual_cfo + alpha * cfo_obs

    return replace(
        state,
        residual_cfo=new_cfo,
        cfo_ratio=(state.cfo_ratio - state.residual_cfo / config.carrier_freq)
        + new_cfo / config.carrier_freq,
        anchor_symbol=s,
        phase_anchor=new_phase,
        slope_anchor=new_slope,
        low_confidence=False,
    )


# ---------------------------------------------------------------------------
# Timing-offset estimation from the phase slope
# ---------------------------------------------------------------------------

def estimate_sto_slope(
    demodulated_lts: np.ndarray,
    reference: np.ndarray,
    config: OfdmConfig,
    ref_floor: float = 1e-9,
) -> tuple[int, float]:
    """Timing offset from the linear phase-vs-subcarrier ramp of an LTS symbol.

    Weighted least-squares fit of the unwrapped phase of RX/REF against the
    logical subcarrier index; the slope maps to ``n_eps = slope * N_c / (2 pi)``.
    Returns ``(integer part, fractional residue)``.  The sequential unwrap is
    valid while the per-step increment stays below pi, i.e. |n_eps| < N_c/4
    across the two-bin gap at DC; larger offsets are out of range.
    """
    rx = np.asarray(demodulated_lts, dtype=complex)
    ref = np.asarray(reference, dtype=complex)
    n = config.n_subcarriers
    half = n // 2
    ks = np.array([k for k in range(-half + 1, half) if k != 0])
    bins = config.bins(ks)
    usable = np.abs(ref[bins]) > ref_floor
    ks = ks[usable]
    bins = bins[usable]
    if ks.size < 2:
        raise EstimationError("not enough usable subcarriers for a slope fit")

    ratio = rx[bins] / ref[bins]
    steps = _wrap(np.diff(np.angle(ratio)))
    phases = np.concatenate([[np.angle(ratio[0])], np.angle(ratio[0]) + np.cumsum(steps)])
    weights = np.abs(ref[bins]) ** 2

    kw = ks - np.average(ks, weights=weights)
    pw = phases - np.average(phases, weights=weights)
    slope = float(np.sum(weights * kw * pw) / np.sum(weights * kw * kw))

    n_eps = slope * n / (2 * np.pi)
    if abs(n_eps) > n / 2:
        raise EstimationError(f"timing offset {n_eps:.1f} outside +/- N_c/2")
    n_int = int(np.round(n_eps))
    return n_int, float(n_eps - n_int)
