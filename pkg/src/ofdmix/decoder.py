"""Dynamic decoding criteria and joint maximum-likelihood demapping.

Every data cell of the superimposed grid is decoded by exhaustively
minimizing  || sum_i p_{g_i} c_i  -  x ||^2  over all constellation
combinations, where c_i is source i's *decoding criterion*: its channel
estimate rotated by the accumulated timing/sampling/carrier correction for
that symbol.  The dynamic mode rebuilds the criteria every symbol from the
tracked offsets; the baseline mode compensates one average carrier offset on
the whole stream and then keeps the criteria frozen at the channel estimate.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .channel import apply_cfo
from .errors import DetectionError, EstimationError
from .detector import DetectionResult
from .frame import Constellation, FrameLayout, OfdmConfig, PILOT_VALUE, lts_reference
from .sync import (
    ChannelEstimate,
    OffsetState,
    demodulate_grid,
    demodulate_lts_slot,
    estimate_cfo_from_lts,
    estimate_channel,
    phase_correction,
    track_residual_cfo,
)

MODE_DYNAMIC = "phycode"
MODE_BASELINE = "tpnc"
MODES = (MODE_DYNAMIC, MODE_BASELINE)


@dataclass(frozen=True)
class DecodingCriterion:
    """Per-subcarrier coefficients of one source at one symbol.

    ``c[j]`` corresponds to ``config.data_subcarriers[j]``; the magnitude is
    the channel gain, the phase correction is unit modulus.
    """

    source_id: int
    symbol: int
    c: np.ndarray


@dataclass(frozen=True)
class JointDecision:
    """Winning constellation combination for one received value."""

    indices: tuple[int, ...]  # 1-based, one per source
    metric: float
    runner_up_metric: float


@dataclass(frozen=True)
class ReceiverConfig:
    """Everything the receiver knows a priori about the frame it decodes."""

    config: OfdmConfig
    layout: FrameLayout
    constellation: Constellation
    coarse_cfo_hz: Mapping[int, float] = field(default_factory=dict)
    gamma_mode: str = "infer"  # infer (gamma ~ epsilon) | oracle | zero
    oracle_gamma: Mapping[int, float] = field(default_factory=dict)
    track_alpha: float = 0.5
    pilot_floor: float = 0.1
    collect_trace: bool = False


@dataclass
class DecodeResult:
    bits: dict  # source_id -> payload bits (padding stripped)
    evm_symbols: np.ndarray  # mean EVM (%) per decoded grid symbol
    evm_pct: float  # frame mean EVM (%)
    mode: str
    trace: list | None = None  # (symbol, source, residual_cfo_hz, gamma_est, theta_kmax)


def build_criterion(
    h: ChannelEstimate, state: OffsetState, s: int, config: OfdmConfig
) -> DecodingCriterion:
    """c[k, s] = h[k] * e^{j theta(k, s)} on the data subcarriers."""
    ks = np.asarray(config.data_subcarriers)
    theta = phase_correction(ks, s, state, config)
    c = h.at_bins(config.bins(ks)) * np.exp(1j * theta)
    return DecodingCriterion(source_id=h.source_id, symbol=s, c=c)


@functools.lru_cache(maxsize=32)
def _combo_table(n_sources: int, n_points: int) -> np.ndarray:
    """All index combinations, lexicographic in (g_1, ..., g_N)."""
    grids = np.meshgrid(*[np.arange(n_points)] * n_sources, indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


def _decide_cells(
    x: np.ndarray, c_rows: np.ndarray, constellation: Constellation
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized exhaustive search over one symbol's data cells.

    ``x``: (n_cells,) received values; ``c_rows``: (n_sources, n_cells)
    criteria.  Returns (combo index per cell, reconstructed points per cell).
    ``argmin`` takes the first occurrence, which under the lexicographic
    combo table realizes the lowest-index tie-break.
    """
    combos = _combo_table(c_rows.shape[0], constellation.n_points)
    points = constellation.points[combos]  # (n_combos, n_sources)
    candidates = points @ c_rows  # (n_combos, n_cells)
    dist = np.abs(candidates - x[None, :]) ** 2
    best = dist.argmin(axis=0)
    return best, candidates[best, np.arange(len(x))]


def joint_ml_decode(
    x: complex,
    criteria: Sequence[complex],
    constellation: Constellation,
) -> JointDecision:
    """Exhaustive minimum-distance decision for one received value.

    ``criteria`` holds each source's criterion at this (subcarrier, symbol)
    cell.  Ties resolve to the lexicographically first index tuple; indices
    are reported 1-based.
    """
    c = np.asarray(criteria, dtype=complex)
    if c.ndim != 1 or c.size < 1:
        raise EstimationError("need one criterion value per source")
    if not np.all(np.isfinite(c)):
        raise EstimationError("criteria must be finite")
    combos = _combo_table(c.size, constellation.n_points)
    candidates = constellation.points[combos] @ c
    dist = np.abs(candidates - x) ** 2
    order = np.argsort(dist, kind="stable")
    best = int(order[0])
    runner = float(dist[order[1]]) if dist.size > 1 else float(dist[order[0]])
    return JointDecision(
        indices=tuple(int(g) + 1 for g in combos[best]),
        metric=float(dist[best]),
        runner_up_metric=runner,
    )


# ---------------------------------------------------------------------------
# Frame decoding
# ---------------------------------------------------------------------------

def _slot_windows(rx, payload_start: int, config: OfdmConfig):
    """Time-domain T1/T2 windows of a training slot (window-earliness aligned)."""
    n = config.n_subcarriers
    first = payload_start - config.window_earliness
    if first < 0 or first + 2 * n > len(rx):
        raise EstimationError("LTS slot outside the captured stream")
    return rx[first : first + n], rx[first + n : first + 2 * n]


def decode_frame(
    rx_samples: np.ndarray,
    detection: DetectionResult,
    rxcfg: ReceiverConfig,
    mode: str = MODE_DYNAMIC,
) -> DecodeResult:
    """Decode one superimposed frame end to end.

    Dynamic mode estimates each source's channel on its own detected timing,
    anchors the common FFT grid on the latest source (earlier sources'
    windows then sit inside their own CP, never in the following symbol), and
    rebuilds every source's criterion each symbol from pilot tracking.  The
    baseline mode derotates the whole stream by the mean of the per-source
    carrier estimates and decodes with static criteria.
    """
    if mode not in MODES:
        raise ValueError(f"unknown decoder mode {mode!r}")
    config, layout, const = rxcfg.config, rxcfg.layout, rxcfg.constellation
    rx = np.asarray(rx_samples, dtype=complex)

    missing = [s for s in layout.source_ids if s not in detection.per_source_start]
    if missing:
        raise DetectionError(f"detection carries no start for sources {missing}")
    starts = {s: int(detection.per_source_start[s]) for s in layout.source_ids}
    anchor = max(starts.values())
    gi2 = 2 * config.cp_len

    cfo_hat: dict[int, float] = {}
    for sid in layout.source_ids:
        slot = layout.slot_of(sid)
        t1, t2 = _slot_windows(rx, starts[sid] + slot.start + gi2, config)
        cfo_hat[sid] = estimate_cfo_from_lts(t1, t2, config)

    if mode == MODE_BASELINE:
        avg_cfo = float(np.mean(list(cfo_hat.values())))
        rx = apply_cfo(rx, -avg_cfo, config.sample_period)

    ref = lts_reference(config)
    grid_start = anchor + layout.data_start
    first_data_window = grid_start + config.fft_window_offset

    channels: dict[int, ChannelEstimate] = {}
    states: dict[int, OffsetState] = {}
    for sid in layout.source_ids:
        slot = layout.slot_of(sid)
        # The baseline has a single receive clock: slots demodulated on the
        # common anchor.  Dynamic mode aligns each slot to its own source.
        slot_base = anchor if mode == MODE_BASELINE else starts[sid]
        payload_start = slot_base + slot.start + gi2
        rows = demodulate_lts_slot(rx, payload_start, config)
        t1_win_start = payload_start - config.window_earliness
        snapshot = (
            t1_win_start + config.n_subcarriers / 2 - first_data_window
        ) / layout.symbol_len
        channels[sid] = estimate_channel(rows, ref, sid, snapshot_symbol=snapshot)
        if mode == MODE_DYNAMIC:
            gamma_override: float | None
            if rxcfg.gamma_mode == "oracle":
                gamma_override = float(rxcfg.oracle_gamma.get(sid, 0.0))
            elif rxcfg.gamma_mode == "zero":
                gamma_override = 0.0
            elif rxcfg.gamma_mode == "infer":
                gamma_override = None
            else:
                raise ValueError(f"unknown gamma_mode {rxcfg.gamma_mode!r}")
            states[sid] = OffsetState.initial(
                sid,
                config,
                sto_residual=starts[sid] - anchor,
                residual_cfo=cfo_hat[sid],
                coarse_cfo=float(rxcfg.coarse_cfo_hz.get(sid, 0.0)),
                snapshot_symbol=snapshot,
                gamma_override=gamma_override,
            )

    grid = demodulate_grid(rx, grid_start, layout.n_grid_symbols, config)
    data_bins = config.bins(config.data_subcarriers)
    k_max = int(np.max(config.data_subcarriers))
    owners = np.asarray(layout.reest_owner) if layout.reest_owner else None

    source_order = list(layout.source_ids)
    decisions = []
    err_rows, recon_rows = [], []
    trace: list | None = [] if rxcfg.collect_trace else None

    for s in range(layout.n_grid_symbols):
        row = grid[s]
        if owners is not None and owners[s] != 0:
            sid = int(owners[s])
            h_new = np.full(config.n_subcarriers, np.nan + 1j * np.nan, dtype=complex)
            h_new[data_bins] = row[data_bins] / ref[data_bins]
            pbins = config.bins(config.pilots_of(sid))
            h_new[pbins] = row[pbins] / PILOT_VALUE
            channels[sid] = ChannelEstimate(sid, h_new, snapshot_symbol=float(s))
            if mode == MODE_DYNAMIC:
                states[sid] = OffsetState.initial(
                    sid,
                    config,
                    sto_residual=0.0,
                    residual_cfo=states[sid].residual_cfo,
                    coarse_cfo=float(rxcfg.coarse_cfo_hz.get(sid, 0.0)),
                    snapshot_symbol=float(s),
                    gamma_override=states[sid].sfo_ratio_est,
                )
            continue

        if mode == MODE_DYNAMIC:
            c_rows = np.stack(
                [build_criterion(channels[sid], states[sid], s, config).c
                 for sid in source_order]
            )
        else:
            c_rows = np.stack(
                [channels[sid].at_bins(data_bins) for sid in source_order]
            )
        combo_idx, recon = _decide_cells(row[data_bins], c_rows, const)
        decisions.append(combo_idx)
        err_rows.append(np.abs(row[data_bins] - recon))
        recon_rows.append(np.abs(recon))

        if mode == MODE_DYNAMIC:
            for sid in source_order:
                if rxcfg.collect_trace:
                    st = states[sid]
                    trace.append(
                        (
                            s,
                            sid,
                            st.residual_cfo,
                            st.sfo_ratio_est,
                            float(phase_correction(k_max, s, st, config)),
                        )
                    )
                states[sid] = track_residual_cfo(
                    row,
                    config.pilots_of(sid),
                    states[sid],
                    channels[sid],
                    config,
                    s,
                    alpha=rxcfg.track_alpha,
                    pilot_floor=rxcfg.pilot_floor,
                )

    combo_matrix = np.stack(decisions)  # (n_data_symbols, n_cells)
    combos = _combo_table(len(source_order), const.n_points)
    err = np.stack(err_rows)
    rms = float(np.sqrt(np.mean(np.stack(recon_rows) ** 2)))
    evm = 100.0 * err / max(rms, 1e-30)

    bits: dict[int, np.ndarray] = {}
    for pos, sid in enumerate(source_order):
        point_idx = combos[combo_matrix.reshape(-1), pos]
        all_bits = const.indices_to_bits(point_idx)
        bits[sid] = all_bits[: layout.payload_bits]

    return DecodeResult(
        bits=bits,
        evm_symbols=evm.mean(axis=1),
        evm_pct=float(evm.mean()),
        mode=mode,
        trace=trace,
    )
