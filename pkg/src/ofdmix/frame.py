"""OFDM numerology, constellations, and the superimposed-signal frame layout.

Frames carry a shared short training sequence (10 repetitions of a 16-sample
period), one long-training slot per source (time multiplexed, separated by
NULL guard symbols so a late source never collides with another source's
training), and a data region in which all sources transmit simultaneously.
Each source additionally owns a disjoint pair of pilot subcarriers that stay
interference-free through the superposition.

Subcarrier indices are *logical* (signed, DC = 0 excluded); FFT-bin order is
``k % n_subcarriers``.  Time-domain synthesis uses the unitary forward DFT
(``fft/sqrt(N)``) and analysis the unitary inverse, so a delay of ``n``
samples shows up as a phase of ``+2*pi*k*n/N`` at subcarrier ``k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, LayoutError

# Pilot pairs handed out to sources in order.  The first two reuse the
# 802.11a pilot positions, split between sources; later pairs are carved out
# of the data set.
PILOT_PAIR_POOL: tuple[tuple[int, int], ...] = ((-21, 21), (-7, 7), (-14, 14), (-3, 3))

_ACTIVE = tuple(k for k in range(-26, 27) if k != 0)
DEFAULT_DATA_SUBCARRIERS: tuple[int, ...] = tuple(
    k for k in _ACTIVE if abs(k) not in (7, 21)
)


def _as_sorted_tuple(ks) -> tuple[int, ...]:
    return tuple(sorted(int(k) for k in ks))


@dataclass(frozen=True)
class OfdmConfig:
    """Numerology and subcarrier allocation shared by every frame.

    ``fft_window_offset`` is the number of samples into the cyclic prefix at
    which the receiver FFT window starts.  The first two CP samples carry
    inter-symbol interference from multipath, so the offset must be at least
    2; the default of 4 leaves a two-sample margin for timing error.
    """

    n_subcarriers: int = 64
    cp_len: int = 16
    sample_rate: float = 1.0e7
    carrier_freq: float = 5.8e9
    data_subcarriers: tuple[int, ...] = DEFAULT_DATA_SUBCARRIERS
    pilot_map: Mapping[int, tuple[int, ...]] = field(
        default_factory=lambda: {1: (-21, 21), 2: (-7, 7)}
    )
    fft_window_offset: int = 4

    def __post_init__(self):
        object.__setattr__(self, "data_subcarriers", _as_sorted_tuple(self.data_subcarriers))
        object.__setattr__(
            self,
            "pilot_map",
            {int(s): _as_sorted_tuple(ks) for s, ks in dict(self.pilot_map).items()},
        )
        if self.cp_len >= self.n_subcarriers:
            raise ConfigError("cp_len must be smaller than n_subcarriers")
        if not 2 <= self.fft_window_offset < self.cp_len:
            raise ConfigError("fft_window_offset must be in [2, cp_len)")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        half = self.n_subcarriers // 2
        used: set[int] = set()
        for name, ks in [("data_subcarriers", self.data_subcarriers)] + [
            (f"pilot_map[{s}]", ks) for s, ks in self.pilot_map.items()
        ]:
            for k in ks:
                if k == 0 or not -half < k < half:
                    raise ConfigError(f"{name}: subcarrier {k} outside usable band")
                if k in used:
                    raise ConfigError(f"{name}: subcarrier {k} assigned twice")
                used.add(k)

    @property
    def sample_period(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def symbol_len(self) -> int:
        """Samples per OFDM symbol including cyclic prefix."""
        return self.n_subcarriers + self.cp_len

    @property
    def window_earliness(self) -> int:
        """How many samples before the nominal payload start each FFT window opens."""
        return self.cp_len - self.fft_window_offset

    def bins(self, ks) -> np.ndarray:
        """Map logical subcarrier indices onto FFT bins."""
        return np.asarray(ks, dtype=int) % self.n_subcarriers

    def pilots_of(self, source_id: int) -> tuple[int, ...]:
        try:
            return self.pilot_map[source_id]
        except KeyError:
            raise ConfigError(f"no pilot allocation for source {source_id}") from None

    @classmethod
    def for_sources(cls, n_sources: int, **overrides) -> "OfdmConfig":
        """Default configuration with disjoint pilot pairs for ``n_sources``.

        Pairs beyond the first two are taken out of the data set, shrinking it.
        """
        if n_sources < 1:
            raise ConfigError("n_sources must be >= 1")
        if n_sources > len(PILOT_PAIR_POOL):
            raise ConfigError(
                f"only {len(PILOT_PAIR_POOL)} disjoint pilot pairs available, "
                f"requested {n_sources}"
            )
        pilot_map = {s + 1: PILOT_PAIR_POOL[s] for s in range(n_sources)}
        taken = {k for pair in pilot_map.values() for k in pair}
        data = tuple(k for k in _ACTIVE if k not in taken)
        return cls(data_subcarriers=data, pilot_map=pilot_map, **overrides)


# ---------------------------------------------------------------------------
# Constellations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Constellation:
    """Gray-mapped constellation with unit average power.

    ``order`` is the number of bits per symbol; ``points[i]`` is the point
    whose bit pattern is the ``order``-bit binary expansion of ``i`` (MSB
    first).  The bit-pattern/index relation is therefore a bijection by
    construction.
    """

    name: str
    order: int
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=complex)
        if len(pts) != 2 ** self.order:
            raise ConfigError("constellation size must be 2**order")
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return 2 ** self.order

    def bits_to_indices(self, bits: np.ndarray) -> np.ndarray:
        """Pack a flat bit array (length divisible by order) into point indices."""
        b = np.asarray(bits, dtype=int).reshape(-1, self.order)
        weights = 1 << np.arange(self.order - 1, -1, -1)
        return b @ weights

    def indices_to_bits(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=int)
        shifts = np.arange(self.order - 1, -1, -1)
        return ((idx[:, None] >> shifts) & 1).reshape(-1)

    def modulate(self, bits: np.ndarray) -> np.ndarray:
        return self.points[self.bits_to_indices(bits)]

    def nearest_indices(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=complex)
        return np.abs(v[..., None] - self.points).argmin(axis=-1)


def _gray_levels(n_bits: int) -> np.ndarray:
    """Amplitude levels indexed by bit pattern so adjacent levels differ in one bit."""
    n = 2 ** n_bits
    gray = np.arange(n) ^ (np.arange(n) >> 1)
    levels = np.empty(n)
    amplitudes = 2 * np.arange(n) - (n - 1)  # -(n-1), ..., +(n-1)
    for pattern, amp in zip(gray, amplitudes):
        levels[pattern] = amp
    return levels


def constellation(name: str) -> Constellation:
    """Build one of the supported constellations: bpsk, qpsk, 16qam."""
    key = name.strip().lower()
    if key == "bpsk":
        return Constellation("bpsk", 1, np.array([-1.0 + 0j, 1.0 + 0j]))
    if key == "qpsk":
        lv = _gray_levels(1)
        pts = np.array([complex(lv[i >> 1], lv[i & 1]) for i in range(4)]) / math.sqrt(2)
        return Constellation("qpsk", 2, pts)
    if key in ("16qam", "qam16"):
        lv = _gray_levels(2)
        pts = np.array(
            [complex(lv[i >> 2], lv[i & 3]) for i in range(16)]
        ) / math.sqrt(10)
        return Constellation("16qam", 4, pts)
    raise ConfigError(f"unknown constellation {name!r}")


def constellation_for_order(order: int) -> Constellation:
    names = {1: "bpsk", 2: "qpsk", 4: "16qam"}
    if order not in names:
        raise ConfigError(f"unsupported constellation order {order}")
    return constellation(names[order])


# ---------------------------------------------------------------------------
# Training sequences
# ---------------------------------------------------------------------------

def _sts_freq(n: int) -> np.ndarray:
    """Short-training frequency sequence (802.11a, energy on every 4th bin)."""
    s = np.zeros(n, dtype=complex)
    plus = [-24, -16, -4, 12, 16, 20, 24]
    minus = [-20, -12, -8, 4, 8]
    for k in plus:
        s[k % n] = 1 + 1j
    for k in minus:
        s[k % n] = -1 - 1j
    return s * math.sqrt(13.0 / 6.0)


_LTS_RIGHT = [1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1]
_LTS_LEFT = [1, 1, -1, -1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, -1, 1, 1, -1, -1, 1, -1, 1, -1, 1, 1, 1]


def _lts_freq(n: int) -> np.ndarray:
    """Long-training frequency sequence (802.11a, +/-1 on the 52 active bins)."""
    s = np.zeros(n, dtype=complex)
    for i, k in enumerate(range(1, 27)):
        s[k % n] = _LTS_RIGHT[i]
    for i, k in enumerate(range(-26, 0)):
        s[k % n] = _LTS_LEFT[i]
    return s


def synthesize(grid_rows: np.ndarray, n: int) -> np.ndarray:
    """Unitary synthesis (forward DFT) of frequency rows into time samples."""
    return np.fft.fft(grid_rows, axis=-1) / math.sqrt(n)


def analyze(windows: np.ndarray, n: int) -> np.ndarray:
    """Unitary analysis (inverse DFT) of time windows into frequency rows."""
    return np.fft.ifft(windows, axis=-1) * math.sqrt(n)


def sts_waveform(config: OfdmConfig, repeats: int) -> np.ndarray:
    """Short training sequence: ``repeats`` repetitions of the 16-sample period."""
    period = config.n_subcarriers // 4
    base = synthesize(_sts_freq(config.n_subcarriers), config.n_subcarriers)[:period]
    base = base / np.sqrt(np.mean(np.abs(base) ** 2))
    return np.tile(base, repeats)


def lts_symbol(config: OfdmConfig) -> np.ndarray:
    """One long-training symbol (time domain, unit average power)."""
    t = synthesize(_lts_freq(config.n_subcarriers), config.n_subcarriers)
    return t / np.sqrt(np.mean(np.abs(t) ** 2))


def lts_reference(config: OfdmConfig) -> np.ndarray:
    """Frequency-domain reference matching :func:`lts_symbol` (bin order)."""
    ref = _lts_freq(config.n_subcarriers)
    t = synthesize(ref, config.n_subcarriers)
    return ref / np.sqrt(np.mean(np.abs(t) ** 2))


def lts_slot_waveform(config: OfdmConfig) -> np.ndarray:
    """One source's training slot: double-length guard + two LTS repetitions."""
    t = lts_symbol(config)
    gi2 = t[-2 * config.cp_len :]
    return np.concatenate([gi2, t, t])


# ---------------------------------------------------------------------------
# Frame layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LtsSlot:
    source_id: int
    start: int  # sample offset from frame start
    length: int


@dataclass(frozen=True)
class FrameLayout:
    """Static geometry of one superimposed frame (identical for all sources)."""

    sts_repeats: int
    sts_period: int
    lts_slots: tuple[LtsSlot, ...]
    null_guard_symbols: int
    n_data_symbols: int
    n_sources: int
    payload_bits: int
    bits_per_cell: int
    n_data_subcarriers: int
    symbol_len: int
    data_start: int
    frame_len: int
    reestimation_every: int = 0
    reest_owner: tuple[int, ...] = ()  # source owning each grid row, 0 = data row

    @property
    def sts_len(self) -> int:
        return self.sts_repeats * self.sts_period

    @property
    def capacity_bits(self) -> int:
        return self.n_data_symbols * self.n_data_subcarriers * self.bits_per_cell

    @property
    def padding_bits(self) -> int:
        return self.capacity_bits - self.payload_bits

    @property
    def n_grid_symbols(self) -> int:
        """Rows in the data-region grid, including re-estimation rows."""
        return len(self.reest_owner) if self.reest_owner else self.n_data_symbols

    def slot_of(self, source_id: int) -> LtsSlot:
        for slot in self.lts_slots:
            if slot.source_id == source_id:
                return slot
        raise LayoutError(f"no LTS slot for source {source_id}")

    @property
    def source_ids(self) -> tuple[int, ...]:
        return tuple(slot.source_id for slot in self.lts_slots)

    def data_row_indices(self) -> np.ndarray:
        """Grid rows that carry payload (excludes re-estimation rows)."""
        if not self.reest_owner:
            return np.arange(self.n_data_symbols)
        return np.flatnonzero(np.asarray(self.reest_owner) == 0)


def build_layout(
    config: OfdmConfig,
    n_sources: int,
    payload_bits: int,
    constellation: Constellation,
    null_guard_symbols: int = 2,
    sts_repeats: int = 10,
    reestimation_every: int = 0,
) -> FrameLayout:
    """Compute the frame geometry for ``n_sources`` superimposed transmitters.

    The preamble is a shared STS followed by one LTS slot per source.  With
    two or more sources, every slot is followed by ``null_guard_symbols``
    silent symbols so that inter-source timing spread cannot push one
    source's training into another's FFT window; a single source degenerates
    to the conventional STS + LTS + data frame.
    """
    if payload_bits <= 0:
        raise LayoutError("payload must contain at least one bit")
    if n_sources < 1:
        raise LayoutError("need at least one source")
    missing = [s for s in range(1, n_sources + 1) if s not in config.pilot_map]
    if missing:
        raise LayoutError(
            f"no disjoint pilot sets for sources {missing}; extend pilot_map"
        )

    n = config.n_subcarriers
    sym = config.symbol_len
    sts_period = n // 4
    sts_len = sts_repeats * sts_period
    slot_len = 2 * config.cp_len + 2 * n
    guard = null_guard_symbols * sym if n_sources > 1 else 0

    slots = []
    pos = sts_len
    for s in range(1, n_sources + 1):
        slots.append(LtsSlot(source_id=s, start=pos, length=slot_len))
        pos += slot_len + guard
    data_start = pos

    bits_per_row = constellation.order * len(config.data_subcarriers)
    n_data_symbols = math.ceil(payload_bits / bits_per_row)

    reest_owner: tuple[int, ...] = ()
    if reestimation_every > 0:
        owner: list[int] = []
        placed = 0
        while placed < n_data_symbols:
            if placed and placed % reestimation_every == 0:
                owner.extend(range(1, n_sources + 1))
            owner.append(0)
            placed += 1
        reest_owner = tuple(owner)

    n_grid = len(reest_owner) if reest_owner else n_data_symbols
    frame_len = data_start + n_grid * sym

    return FrameLayout(
        sts_repeats=sts_repeats,
        sts_period=sts_period,
        lts_slots=tuple(slots),
        null_guard_symbols=null_guard_symbols,
        n_data_symbols=n_data_symbols,
        n_sources=n_sources,
        payload_bits=payload_bits,
        bits_per_cell=constellation.order,
        n_data_subcarriers=len(config.data_subcarriers),
        symbol_len=sym,
        data_start=data_start,
        frame_len=frame_len,
        reestimation_every=reestimation_every,
        reest_owner=reest_owner,
    )


# ---------------------------------------------------------------------------
# Bit mapping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SymbolGrid:
    """Frequency-domain data grid of one source: rows are FFT-bin vectors."""

    symbols: np.ndarray  # (n_grid_symbols, n_subcarriers) complex
    source_id: int


PILOT_VALUE = 1.0 + 0j


def map_bits(
    bits: Sequence[int],
    constellation: Constellation,
    layout: FrameLayout,
    config: OfdmConfig,
    source_id: int,
) -> SymbolGrid:
    """Gray-map a payload onto this source's data cells.

    The payload is zero-padded to fill the last symbol; its own pilot
    subcarriers carry the known pilot value, everything else (including other
    sources' pilots and re-estimation rows it does not own) stays zero.
    """
    bits = np.asarray(bits, dtype=int)
    if bits.size > layout.capacity_bits:
        raise LayoutError(
            f"payload of {bits.size} bits exceeds frame capacity {layout.capacity_bits}"
        )
    if bits.size != layout.payload_bits:
        raise LayoutError("bit count does not match the layout's payload_bits")
    padded = np.zeros(layout.capacity_bits, dtype=int)
    padded[: bits.size] = bits
    points = constellation.modulate(padded).reshape(
        layout.n_data_symbols, layout.n_data_subcarriers
    )

    n = config.n_subcarriers
    grid = np.zeros((layout.n_grid_symbols, n), dtype=complex)
    data_bins = config.bins(config.data_subcarriers)
    rows = layout.data_row_indices()
    grid[rows[:, None], data_bins[None, :]] = points
    grid[:, config.bins(config.pilots_of(source_id))] = PILOT_VALUE

    if layout.reest_owner:
        ref = lts_reference(config)
        own = np.flatnonzero(np.asarray(layout.reest_owner) == source_id)
        for r in own:
            grid[r, :] = 0
            grid[r, data_bins] = ref[data_bins]
            grid[r, config.bins(config.pilots_of(source_id))] = PILOT_VALUE
    return SymbolGrid(symbols=grid, source_id=source_id)


def unmap_grid(
    grid: SymbolGrid,
    constellation: Constellation,
    layout: FrameLayout,
    config: OfdmConfig,
) -> np.ndarray:
    """Inverse of :func:`map_bits` (nearest-point demap, padding stripped)."""
    data_bins = config.bins(config.data_subcarriers)
    rows = layout.data_row_indices()
    cells = grid.symbols[rows[:, None], data_bins[None, :]].reshape(-1)
    idx = constellation.nearest_indices(cells)
    return constellation.indices_to_bits(idx)[: layout.payload_bits]
