"""Speculation utility: benefit (tokens per iteration) over cost (time per
iteration relative to a no-speculation baseline).

Windowed utility feeds the controller; run-level utility is computed from
totals, which makes ``utility * TPOT == t_base`` an exact identity.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import IO, Iterable, Sequence

PROBE = "baseline_probe"
SET = "set"


class MissingBaseline(RuntimeError):
    """Cost was requested before any baseline probe completed."""


@dataclass(slots=True)
class IterationRecord:
    iter_index: int
    k_used: int
    tokens_emitted: int
    draft_time: float
    verify_time: float
    sampling_time: float
    total_time: float
    phase_tag: str = SET

    def __post_init__(self):
        if not 1 <= self.tokens_emitted <= self.k_used + 1:
            raise ValueError(
                f"iteration {self.iter_index}: tokens_emitted={self.tokens_emitted} "
                f"outside [1, {self.k_used + 1}]"
            )


@dataclass(slots=True)
class BaselineEstimate:
    t_base: float
    samples: int
    last_refresh_iter: int


def mean_probe_time(probe_records: Sequence[IterationRecord]) -> float:
    if not probe_records:
        raise ValueError("baseline refresh needs at least one probe iteration")
    return sum(r.total_time for r in probe_records) / len(probe_records)


class UtilityAnalyzer:
    """Tracks recent iterations and the no-speculation baseline.

    Args:
        window_len: Number of non-probe iterations in the sliding window.
    """

    def __init__(self, window_len: int = 16):
        if window_len < 1:
            raise ValueError("window_len must be >= 1")
        self.window_len = window_len
        self.baseline: BaselineEstimate | None = None
        self._window: deque[IterationRecord] = deque(maxlen=window_len)
        # Run totals include probe iterations: they are real decode steps.
        self.total_tokens = 0
        self.total_time = 0.0
        self.iterations = 0

    def record(self, rec: IterationRecord) -> None:
        self.total_tokens += rec.tokens_emitted
        self.total_time += rec.total_time
        self.iterations += 1
        if rec.phase_tag != PROBE:
            self._window.append(rec)

    def refresh_baseline(self, probe_records: Sequence[IterationRecord]) -> BaselineEstimate:
        t = mean_probe_time(probe_records)
        self.baseline = BaselineEstimate(t, len(probe_records), probe_records[-1].iter_index)
        return self.baseline

    @property
    def t_base(self) -> float:
        if self.baseline is None:
            raise MissingBaseline("no baseline measurement yet")
        return self.baseline.t_base

    def _slice(self, n: int | None):
        recs = self._window
        if n is not None and n < len(recs):
            recs = list(recs)[-n:]
        return sum(r.tokens_emitted for r in recs), sum(r.total_time for r in recs), len(recs)

    @property
    def window_size(self) -> int:
        return len(self._window)

    def etr(self, last: int | None = None) -> float:
        tokens, _, n = self._slice(last)
        return tokens / n if n else 1.0

    def cost(self, last: int | None = None) -> float:
        _, time, n = self._slice(last)
        t_base = self.t_base
        return (time / n) / t_base if n else 1.0

    def utility(self, last: int | None = None) -> float:
        """ETR over cost for the window (or its last ``last`` entries)."""
        tokens, time, n = self._slice(last)
        if n == 0:
            return 1.0
        return (tokens / n) / ((time / n) / self.t_base)

    def recent_utility(self, n: int) -> float:
        return self.utility(last=n)

    def run_utility(self) -> float:
        return totals_utility(self.total_tokens, self.total_time, self.iterations, self.t_base)

    def snapshot(self) -> dict:
        return {
            "window": len(self._window),
            "etr": self.etr(),
            "cost": self.cost() if self.baseline else None,
            "utility": self.utility() if self.baseline else None,
            "t_base": self.baseline.t_base if self.baseline else None,
        }


def totals_utility(tokens: int, time: float, iterations: int, t_base: float) -> float:
    return (tokens / iterations) / ((time / iterations) / t_base)


def run_utility(records: Sequence[IterationRecord], t_base: float) -> float:
    """Cumulative utility of a run: mean emitted tokens over mean normalized time."""
    if not records:
        raise ValueError("run_utility needs at least one record")
    if not t_base > 0:
        raise ValueError("t_base must be > 0")
    tokens = sum(r.tokens_emitted for r in records)
    time = sum(r.total_time for r in records)
    return totals_utility(tokens, time, len(records), t_base)


def tpot(records: Sequence[IterationRecord]) -> float:
    return sum(r.total_time for r in records) / sum(r.tokens_emitted for r in records)


def harmonic_mean(values: Iterable[float]) -> float:
    vals = list(values)
    if not vals:
        raise ValueError("harmonic mean of no values")
    if any(v <= 0 for v in vals):
        raise ValueError("harmonic mean needs positive values")
    return len(vals) / sum(1.0 / v for v in vals)


def windowed_utilities(records: Sequence[IterationRecord], t_base: float, window: int = 16) -> list[float]:
    """Utility of consecutive non-overlapping windows, probes excluded."""
    recs = [r for r in records if r.phase_tag != PROBE]
    out = []
    for start in range(0, len(recs) - window + 1, window):
        chunk = recs[start:start + window]
        out.append(run_utility(chunk, t_base))
    return out


def write_telemetry(records: Iterable[IterationRecord], fh: IO[str], **extra) -> None:
    """Write one JSON object per iteration; ``extra`` fields are prepended."""
    for rec in records:
        row = dict(extra)
        row.update(asdict(rec))
        fh.write(json.dumps(row) + "\n")


def read_telemetry(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
