"""Waveform synthesis and coarse per-device pre-compensation.

``ofdm_modulate`` turns a source's frequency grid into the full time-domain
frame (shared STS, own LTS slot, CP-extended data symbols).  Coarse CFO/STO
calibration is applied per (tx, rx) device pair from a measured table; the
timing part is carried as an emission offset so the pre-compensation stays
exactly invertible sample for sample.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import IO, Mapping

import numpy as np

from .errors import ConfigError, LayoutError, UncalibratedDeviceError
from .frame import (
    FrameLayout,
    OfdmConfig,
    SymbolGrid,
    lts_slot_waveform,
    sts_waveform,
    synthesize,
)


@dataclass(frozen=True)
class TxFrame:
    """Time-domain frame of one source, plus its deliberate emission shift."""

    samples: np.ndarray
    source_id: int
    layout: FrameLayout
    emit_offset: int = 0  # samples; negative = advanced emission

    def __post_init__(self):
        if len(self.samples) != self.layout.frame_len:
            raise LayoutError(
                f"frame has {len(self.samples)} samples, layout demands {self.layout.frame_len}"
            )


def ofdm_modulate(grid: SymbolGrid, config: OfdmConfig, layout: FrameLayout) -> TxFrame:
    """Synthesize the frame: STS, own LTS slot, then CP-prefixed data symbols."""
    n_grid, n = grid.symbols.shape
    if n != config.n_subcarriers or n_grid != layout.n_grid_symbols:
        raise LayoutError("grid shape does not match config/layout")

    out = np.zeros(layout.frame_len, dtype=complex)
    out[: layout.sts_len] = sts_waveform(config, layout.sts_repeats)

    slot = layout.slot_of(grid.source_id)
    out[slot.start : slot.start + slot.length] = lts_slot_waveform(config)

    data = synthesize(grid.symbols, n)  # (n_grid, n)
    cp = data[:, -config.cp_len :]
    symbols = np.concatenate([cp, data], axis=1).reshape(-1)
    out[layout.data_start : layout.data_start + symbols.size] = symbols
    return TxFrame(samples=out, source_id=grid.source_id, layout=layout)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalEntry:
    """Coarse offsets measured for one (tx, rx) device pair."""

    cfo_step1_hz: float
    sto_samples: int = 0


@dataclass
class CalibrationTable:
    entries: dict = field(default_factory=dict)  # (tx_device, rx_device) -> CalEntry

    def set(self, tx_device, rx_device, entry: CalEntry) -> None:
        self.entries[(tx_device, rx_device)] = entry

    def get(self, tx_device, rx_device) -> CalEntry:
        try:
            return self.entries[(tx_device, rx_device)]
        except KeyError:
            raise UncalibratedDeviceError(
                f"no calibration entry for tx={tx_device!r}, rx={rx_device!r}"
            ) from None


def calibrate(measured_cfo_series, sto_samples: int = 0) -> CalEntry:
    """Collapse a series of CFO measurements into one coarse entry (the mean).

    The residual around the mean is what the receiver-side fine correction
    must absorb.
    """
    series = np.asarray(measured_cfo_series, dtype=float)
    if series.size == 0:
        raise ConfigError("calibration needs at least one CFO measurement")
    if not np.all(np.isfinite(series)):
        raise ConfigError("calibration series contains non-finite values")
    return CalEntry(cfo_step1_hz=float(series.mean()), sto_samples=int(sto_samples))


def precompensate(
    frame: TxFrame, table: CalibrationTable, rx_device, config: OfdmConfig
) -> TxFrame:
    """Apply the coarse (tx, rx) calibration at the transmitter.

    The CFO part counter-rotates every sample (the channel will add
    ``e^{+j 2 pi df n T}``); the STO part advances the emission instant
    (``emit_offset``), realized when the stream is placed on the channel
    timeline.  Applying the opposite entry restores the frame exactly.
    """
    entry = table.get(frame.source_id, rx_device)
    n = np.arange(len(frame.samples))
    rotated = frame.samples * np.exp(
        -2j * np.pi * entry.cfo_step1_hz * n * config.sample_period
    )
    return replace(
        frame, samples=rotated, emit_offset=frame.emit_offset - entry.sto_samples
    )


# ---------------------------------------------------------------------------
# IQ capture files
# ---------------------------------------------------------------------------

IQ_MAGIC = b"SPHY"
IQ_VERSION = 1


def write_iq(fh: IO[bytes], samples: np.ndarray) -> None:
    """Interleaved little-endian float32 (I, Q) pairs behind a 5-byte header."""
    fh.write(IQ_MAGIC)
    fh.write(struct.pack("B", IQ_VERSION))
    interleaved = np.empty(2 * len(samples), dtype="<f4")
    interleaved[0::2] = np.real(samples).astype("<f4")
    interleaved[1::2] = np.imag(samples).astype("<f4")
    fh.write(interleaved.tobytes())


def read_iq(fh: IO[bytes]) -> np.ndarray:
    magic = fh.read(4)
    if magic != IQ_MAGIC:
        raise ConfigError(f"bad IQ file magic {magic!r}")
    (version,) = struct.unpack("B", fh.read(1))
    if version != IQ_VERSION:
        raise ConfigError(f"unsupported IQ file version {version}")
    raw = np.frombuffer(fh.read(), dtype="<f4")
    return raw[0::2].astype(float) + 1j * raw[1::2].astype(float)


def dump_iq_files(frames: Mapping[int, TxFrame], prefix: str) -> list[str]:
    """Write one IQ file per source; returns the created paths."""
    paths = []
    for source_id, frame in sorted(frames.items()):
        path = f"{prefix}_src{source_id}.iq"
        with open(path, "wb") as fh:
            write_iq(fh, frame.samples)
        paths.append(path)
    return paths
