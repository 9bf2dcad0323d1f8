"""Two-step superimposed-frame detection.

Step one runs an incremental auto-correlation against the periodic short
training sequence: one new complex multiply per advanced sample, with a
plateau over the STS whose trailing edge anchors the search.  Step two runs
a matched-filter cross-correlation of each source's long training symbol
inside a bounded window around its expected slot, giving sample-accurate
per-source starts with normalized confidences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DetectionError, SourceNotFoundError
from .frame import FrameLayout, OfdmConfig, lts_symbol


@dataclass
class OpCounter:
    """Instrumentation hook: tallies the complex multiplies an op performs."""

    complex_mults: int = 0

    def add(self, n: int) -> None:
        self.complex_mults += int(n)


@dataclass(frozen=True)
class DetectorParams:
    threshold: float = 0.8
    plateau_len: int = 8
    corr_window: int = 64
    confidence_floor: float = 0.3
    search_halfwidth: int = 80  # samples each side of the expected slot position


@dataclass(frozen=True)
class CoarseCandidate:
    rising_edge: int
    trailing_edge: int
    peak_metric: float


@dataclass(frozen=True)
class DetectionResult:
    coarse_start: int
    per_source_start: dict  # source_id -> estimated frame start (samples)
    confidence: dict  # source_id -> normalized correlation peak in [0, 1]

    def __post_init__(self):
        for sid, conf in self.confidence.items():
            if not 0.0 <= conf <= 1.0 + 1e-9:
                raise DetectionError(f"confidence for source {sid} outside [0, 1]")
        for sid, start in self.per_source_start.items():
            if start < self.coarse_start:
                raise DetectionError(
                    f"fine start for source {sid} precedes the coarse anchor"
                )


def auto_correlate(
    samples: np.ndarray,
    period: int,
    window: int,
    threshold: float = 0.8,
    plateau_len: int = 8,
    counter: OpCounter | None = None,
):
    """Running periodicity metric and its above-threshold plateaus.

    M(n) = |sum_i r(n+i) conj(r(n+i+period))| / sum_i |r(n+i+period)|^2 over a
    sliding window, computed from cumulative sums so each advanced sample
    costs one fresh complex multiply.  Returns ``(metric, candidates)`` where
    each candidate is a run of at least ``plateau_len`` samples above
    ``threshold``.
    """
    x = np.asarray(samples, dtype=complex)
    if len(x) < window + period:
        raise DetectionError("input shorter than correlation window + period")

    prod = x[:-period] * np.conj(x[period:])
    power = np.abs(x[period:]) ** 2
    if counter is not None:
        counter.add(len(prod))  # one lag product per advanced sample

    cp = np.concatenate([[0.0 + 0j], np.cumsum(prod)])
    ce = np.concatenate([[0.0], np.cumsum(power)])
    n_pos = len(prod) - window + 1
    num = np.abs(cp[window:window + n_pos] - cp[:n_pos])
    den = ce[window:window + n_pos] - ce[:n_pos]
    metric = np.where(den > 1e-30, num / np.maximum(den, 1e-30), 0.0)

    above = metric > threshold
    candidates = []
    edges = np.flatnonzero(np.diff(np.concatenate([[False], above, [False]])))
    for lo, hi in zip(edges[0::2], edges[1::2]):
        if hi - lo >= plateau_len:
            seg = metric[lo:hi]
            candidates.append(
                CoarseCandidate(
                    rising_edge=int(lo),
                    trailing_edge=int(hi - 1),
                    peak_metric=float(seg.max()),
                )
            )
    return metric, candidates


def cross_correlate_lts(
    samples: np.ndarray,
    search_window: tuple[int, int],
    lts_reference: np.ndarray,
    source_id: int,
    confidence_floor: float = 0.3,
    counter: OpCounter | None = None,
) -> tuple[int, float]:
    """Matched-filter peak of the LTS template inside a bounded search window.

    Returns ``(start_index, confidence)`` where the confidence is the
    Cauchy-Schwarz-normalized correlation magnitude (1.0 for a clean template
    hit).  Raises :class:`SourceNotFoundError` when no lag clears the floor.
    """
    x = np.asarray(samples, dtype=complex)
    tmpl = np.asarray(lts_reference, dtype=complex)
    lo, hi = search_window
    lo = max(int(lo), 0)
    hi = min(int(hi), len(x) - len(tmpl))
    if hi < lo:
        raise SourceNotFoundError(f"search window empty for source {source_id}")

    seg = x[lo : hi + len(tmpl)]
    corr = np.correlate(seg, tmpl, mode="valid")  # conjugates the template
    if counter is not None:
        counter.add(len(corr) * len(tmpl))

    sq = np.concatenate([[0.0], np.cumsum(np.abs(seg) ** 2)])
    window_energy = sq[len(tmpl):] - sq[: len(corr)]
    tmpl_energy = float(np.sum(np.abs(tmpl) ** 2))
    denom = np.sqrt(np.maximum(window_energy * tmpl_energy, 1e-30))
    conf = np.abs(corr) / denom

    best = int(np.argmax(np.abs(corr)))
    confidence = float(min(conf[best], 1.0))
    if confidence < confidence_floor:
        raise SourceNotFoundError(
            f"no correlation peak above floor for source {source_id}"
        )
    return lo + best, confidence


def lts_template(config: OfdmConfig) -> np.ndarray:
    """Both long-training repetitions, the fine-search matched filter."""
    t = lts_symbol(config)
    return np.concatenate([t, t])


def detect_frame(
    samples: np.ndarray,
    config: OfdmConfig,
    layout: FrameLayout,
    params: DetectorParams = DetectorParams(),
    counter: OpCounter | None = None,
    return_metric: bool = False,
):
    """Full two-step detection of one superimposed frame.

    The coarse anchor comes from the trailing edge of the STS plateau (the
    plateau ends where the STS ends); each source's LTS is then searched in a
    window of at most two symbols around its slot position relative to that
    anchor.
    """
    metric, candidates = auto_correlate(
        samples,
        period=layout.sts_period,
        window=params.corr_window,
        threshold=params.threshold,
        plateau_len=params.plateau_len,
        counter=counter,
    )
    if not candidates:
        raise DetectionError("no STS plateau above threshold")
    cand = max(candidates, key=lambda c: c.trailing_edge - c.rising_edge)
    # The last metric position fully inside the STS is
    # start + sts_len - window - period, so invert that to anchor the frame.
    coarse_start = cand.trailing_edge - (
        layout.sts_len - params.corr_window - layout.sts_period
    )

    template = lts_template(config)
    gi2 = 2 * config.cp_len
    per_source_start: dict[int, int] = {}
    confidence: dict[int, float] = {}
    for slot in layout.lts_slots:
        expected = coarse_start + slot.start + gi2
        peak, conf = cross_correlate_lts(
            samples,
            (expected - params.search_halfwidth, expected + params.search_halfwidth),
            template,
            slot.source_id,
            confidence_floor=params.confidence_floor,
            counter=counter,
        )
        per_source_start[slot.source_id] = peak - slot.start - gi2
        confidence[slot.source_id] = conf

    result = DetectionResult(
        coarse_start=min(coarse_start, *per_source_start.values()),
        per_source_start=per_source_start,
        confidence=confidence,
    )
    if return_metric:
        return result, metric
    return result
