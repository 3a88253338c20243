"""Acceptance processes, request streams and trace replay.

A workload decides how many draft tokens the target model accepts on each
iteration. Synthetic profiles cycle through phases of different per-token
acceptance probability; recorded traces replay real acceptance counts.
"""
from __future__ import annotations

import csv
import io
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from specmoe.cost_model import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class StreamExhausted(Exception):
    """The request stream has used up its budget."""


class TraceError(ValueError):
    """A malformed acceptance trace."""


class MissingTraceRecord(KeyError):
    def __init__(self, request_id: int, iteration: int):
        super().__init__(f"trace has no record for request {request_id}, iteration {iteration}")
        self.request_id = request_id
        self.iteration = iteration

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class AcceptancePhase:
    per_token_accept_prob: float
    mean_duration: float = 1.0
    affinity_override: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.per_token_accept_prob <= 1.0:
            raise ConfigError("per_token_accept_prob must lie in [0, 1]")
        if self.mean_duration < 1:
            raise ConfigError("mean_duration must be >= 1")
        if self.affinity_override is not None and not 0.0 <= self.affinity_override <= 1.0:
            raise ConfigError("affinity_override must lie in [0, 1]")


@dataclass(frozen=True)
class OutputLength:
    """Distribution of output lengths: ``fixed`` or inclusive ``uniform``."""

    kind: str = "fixed"
    low: int = 256
    high: int = 256

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform"):
            raise ConfigError(f"unknown output length distribution {self.kind!r}")
        if self.low < 1 or self.high < self.low:
            raise ConfigError("output lengths must satisfy 1 <= low <= high")

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return self.low
        return int(rng.integers(self.low, self.high + 1))

    @property
    def mean(self) -> float:
        return (self.low + self.high) / 2


@dataclass(frozen=True)
class WorkloadProfile:
    """One task's acceptance behaviour.

    ``transition`` is ``"cyclic"`` (phases in order, wrapping around) or a
    square row-stochastic matrix consulted whenever a phase runs out.
    """

    name: str
    phases: tuple[AcceptancePhase, ...]
    transition: str | tuple[tuple[float, ...], ...] = "cyclic"
    output_len: OutputLength = field(default_factory=OutputLength)
    expert_affinity: float | None = None

    def __post_init__(self):
        if not self.phases:
            raise ConfigError(f"{self.name}: a profile needs at least one phase")
        object.__setattr__(self, "phases", tuple(self.phases))
        if self.transition != "cyclic":
            matrix = np.asarray(self.transition, dtype=float)
            n = len(self.phases)
            if matrix.shape != (n, n):
                raise ConfigError(f"{self.name}: transition matrix must be {n}x{n}")
            if np.any(matrix < 0) or not np.allclose(matrix.sum(axis=1), 1.0):
                raise ConfigError(f"{self.name}: transition rows must be probability vectors")
            object.__setattr__(self, "transition", tuple(tuple(r) for r in matrix.tolist()))
        if self.expert_affinity is not None and not 0.0 <= self.expert_affinity <= 1.0:
            raise ConfigError(f"{self.name}: expert_affinity must lie in [0, 1]")

    @classmethod
    def constant(cls, name: str, p: float, output_len: int = 256, affinity: float | None = None):
        return cls(name, (AcceptancePhase(p),), output_len=OutputLength("fixed", output_len, output_len),
                   expert_affinity=affinity)

    def stationary_shares(self) -> np.ndarray:
        """Long-run fraction of iterations spent in each phase."""
        n = len(self.phases)
        means = np.array([ph.mean_duration for ph in self.phases])
        if self.transition == "cyclic":
            visits = np.full(n, 1.0 / n)
        else:
            matrix = np.asarray(self.transition)
            w, v = np.linalg.eig(matrix.T)
            visits = np.real(v[:, np.argmin(np.abs(w - 1.0))])
            visits = visits / visits.sum()
        weighted = visits * means
        return weighted / weighted.sum()


class ProfileState:
    """Mutable cursor through a profile's phases for one request."""

    __slots__ = ("profile", "phase_index", "remaining")

    def __init__(self, profile: WorkloadProfile, rng: np.random.Generator, phase_index: int = 0):
        self.profile = profile
        self.phase_index = phase_index
        self.remaining = _duration(profile.phases[phase_index], rng)

    @property
    def phase(self) -> AcceptancePhase:
        return self.profile.phases[self.phase_index]

    @property
    def affinity(self) -> float | None:
        ph = self.phase
        if ph.affinity_override is not None:
            return ph.affinity_override
        return self.profile.expert_affinity

    def accepted(self, k: int, rng: np.random.Generator) -> int:
        return sample_accepted(self, k, rng)

    def advance(self, rng: np.random.Generator) -> None:
        advance_phase(self, rng)


def _duration(phase: AcceptancePhase, rng: np.random.Generator) -> int:
    if phase.mean_duration <= 1:
        return 1
    return int(rng.geometric(1.0 / phase.mean_duration))


def sample_accepted(state: ProfileState, k: int, rng: np.random.Generator) -> int:
    """Length of the accepted draft prefix out of ``k`` proposals.

    Draft tokens are accepted independently with the phase's probability,
    and the first rejection discards the rest. One draw is consumed per call
    regardless of ``k`` so different policies see aligned random streams.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    p = state.phase.per_token_accept_prob
    if p >= 1.0:
        rng.random()
        return k
    # Successes before the first failure.
    run = int(rng.geometric(1.0 - p)) - 1
    return min(run, k)


def advance_phase(state: ProfileState, rng: np.random.Generator) -> ProfileState:
    profile = state.profile
    if len(profile.phases) == 1:
        return state
    state.remaining -= 1
    if state.remaining > 0:
        return state
    if profile.transition == "cyclic":
        nxt = (state.phase_index + 1) % len(profile.phases)
    else:
        row = profile.transition[state.phase_index]
        nxt = int(rng.choice(len(row), p=row))
    state.phase_index = nxt
    state.remaining = _duration(profile.phases[nxt], rng)
    return state


@dataclass(frozen=True)
class RequestStream:
    """A mix of task profiles served back to back.

    The budget is either ``tokens`` (stop once the planned output lengths
    reach it) or ``requests``.
    """

    mix: tuple[tuple[WorkloadProfile, float], ...]
    tokens: int | None = None
    requests: int | None = None
    name: str = ""

    def __post_init__(self):
        if not self.mix:
            raise ConfigError("a request stream needs at least one profile")
        object.__setattr__(self, "mix", tuple((p, float(s)) for p, s in self.mix))
        total = sum(s for _, s in self.mix)
        if abs(total - 1.0) > 1e-6:
            raise ConfigError(f"stream shares must sum to 1, got {total}")
        if any(s < 0 for _, s in self.mix):
            raise ConfigError("stream shares must be non-negative")
        if self.tokens is None and self.requests is None:
            raise ConfigError("a request stream needs a tokens or requests budget")


class StreamCursor:
    __slots__ = ("stream", "planned_tokens", "issued", "_shares")

    def __init__(self, stream: RequestStream):
        self.stream = stream
        self.planned_tokens = 0
        self.issued = 0
        self._shares = np.array([s for _, s in stream.mix])

    def exhausted(self) -> bool:
        s = self.stream
        if s.requests is not None and self.issued >= s.requests:
            return True
        return s.tokens is not None and self.planned_tokens >= s.tokens


def next_request(cursor: StreamCursor, rng: np.random.Generator) -> tuple[WorkloadProfile, int]:
    """Draw the next request's profile (by share) and output length."""
    if cursor.exhausted():
        raise StreamExhausted(f"stream exhausted after {cursor.issued} requests")
    mix = cursor.stream.mix
    idx = 0 if len(mix) == 1 else int(rng.choice(len(mix), p=cursor._shares))
    profile = mix[idx][0]
    length = profile.output_len.sample(rng)
    cursor.issued += 1
    cursor.planned_tokens += length
    return profile, length


# ---------------------------------------------------------------- traces

TRACE_FIELDS = ("request_id", "iter", "k_offered", "accepted")


@dataclass(frozen=True)
class TraceRecord:
    request_id: int
    iter: int
    k_offered: int
    accepted: int


class AcceptanceTrace:
    """Recorded acceptance outcomes indexed by (request, iteration)."""

    def __init__(self, records: Iterable[TraceRecord]):
        self._index: dict[tuple[int, int], TraceRecord] = {}
        self._order: list[int] = []
        seen: set[int] = set()
        for rec in records:
            if rec.k_offered < 0 or not 0 <= rec.accepted <= rec.k_offered:
                raise TraceError(
                    f"request {rec.request_id} iter {rec.iter}: need 0 <= accepted <= k_offered"
                )
            key = (rec.request_id, rec.iter)
            if key in self._index:
                raise TraceError(f"duplicate record for request {rec.request_id} iter {rec.iter}")
            if rec.request_id not in seen:
                seen.add(rec.request_id)
                self._order.append(rec.request_id)
            self._index[key] = rec
        self._lengths = {}
        for rid, it in self._index:
            self._lengths[rid] = max(self._lengths.get(rid, 0), it + 1)
        for rid, n in self._lengths.items():
            for it in range(n):
                if (rid, it) not in self._index:
                    raise TraceError(f"request {rid} is missing iteration {it}")

    def __len__(self):
        return len(self._index)

    @property
    def request_ids(self) -> list[int]:
        return list(self._order)

    def iterations(self, request_id: int) -> int:
        return self._lengths.get(request_id, 0)

    def record(self, request_id: int, iteration: int) -> TraceRecord:
        try:
            return self._index[(request_id, iteration)]
        except KeyError:
            raise MissingTraceRecord(request_id, iteration) from None

    def records(self, request_id: int) -> list[TraceRecord]:
        return [self._index[(request_id, i)] for i in range(self.iterations(request_id))]

    # -- IO
    @classmethod
    def load(cls, path: str | Path) -> "AcceptanceTrace":
        text = Path(path).read_text()
        return cls.parse(text, source=str(path))

    @classmethod
    def parse(cls, text: str, source: str = "<trace>") -> "AcceptanceTrace":
        stripped = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        if not stripped:
            return cls([])
        if stripped[0].lstrip().startswith("{"):
            rows = []
            for n, ln in enumerate(stripped, 1):
                try:
                    rows.append(json.loads(ln))
                except json.JSONDecodeError as exc:
                    raise TraceError(f"{source}: line {n}: {exc.msg}") from None
        else:
            reader = csv.DictReader(io.StringIO("\n".join(stripped)), skipinitialspace=True)
            if reader.fieldnames is None or set(reader.fieldnames) != set(TRACE_FIELDS):
                raise TraceError(f"{source}: header must be {','.join(TRACE_FIELDS)}")
            rows = list(reader)
        records = []
        for n, row in enumerate(rows, 1):
            try:
                records.append(TraceRecord(*(int(row[f]) for f in TRACE_FIELDS)))
            except (KeyError, TypeError, ValueError):
                raise TraceError(f"{source}: record {n} needs integer fields {TRACE_FIELDS}") from None
        return cls(records)

    def dumps(self) -> str:
        out = io.StringIO()
        out.write(",".join(TRACE_FIELDS) + "\n")
        for rid in self._order:
            for rec in self.records(rid):
                out.write(f"{rec.request_id},{rec.iter},{rec.k_offered},{rec.accepted}\n")
        return out.getvalue()


def replay_acceptance(trace: AcceptanceTrace, request_id: int, iteration: int, k: int) -> int:
    """Recorded acceptance truncated to ``k`` (acceptance is a causal prefix)."""
    return min(trace.record(request_id, iteration).accepted, k)


class TraceCursor:
    """Acceptance source replaying one request of a trace."""

    __slots__ = ("trace", "request_id", "iteration", "affinity")

    def __init__(self, trace: AcceptanceTrace, request_id: int, affinity: float | None = None):
        self.trace = trace
        self.request_id = request_id
        self.iteration = 0
        self.affinity = affinity

    def accepted(self, k: int, rng=None) -> int:
        return replay_acceptance(self.trace, self.request_id, self.iteration, k)

    def advance(self, rng=None) -> None:
        self.iteration += 1


# ---------------------------------------------------------------- fixtures

def profile_from_dict(name: str, data: dict) -> WorkloadProfile:
    try:
        phases = tuple(
            AcceptancePhase(
                float(ph["p"]),
                float(ph.get("mean_duration", 1)),
                ph.get("affinity"),
            )
            for ph in data["phases"]
        )
    except KeyError as exc:
        raise ConfigError(f"task {name!r}: phase is missing {exc}") from None
    transition = data.get("transition", "cyclic")
    if isinstance(transition, list):
        transition = tuple(tuple(float(x) for x in row) for row in transition)
    elif transition != "cyclic":
        raise ConfigError(f"task {name!r}: transition must be 'cyclic' or a matrix")
    ol = data.get("output_len", {"kind": "fixed", "low": 256, "high": 256})
    if isinstance(ol, int):
        ol = {"kind": "fixed", "low": ol, "high": ol}
    output_len = OutputLength(ol.get("kind", "uniform"), int(ol["low"]), int(ol.get("high", ol["low"])))
    return WorkloadProfile(
        name=name,
        phases=phases,
        transition=transition,
        output_len=output_len,
        expert_affinity=data.get("affinity"),
    )


def _load_task_file(text: str, source: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def task_names() -> list[str]:
    root = resources.files("specmoe") / "tasks"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def load_task(name: str, model: str | None = None, path: str | Path | None = None) -> RequestStream:
    """Load a task fixture as a request stream.

    Fixtures may carry per-model sections (``[models.<name>]``) that replace
    the default ``[profiles.*]`` calibration for that model.
    """
    if path is not None:
        text, source = Path(path).read_text(), str(path)
    else:
        res = resources.files("specmoe") / "tasks" / f"{name}.toml"
        if not res.is_file():
            raise ConfigError(f"unknown task fixture {name!r}; available: {task_names()}")
        text, source = res.read_text(), f"task fixture {name}"
    data = _load_task_file(text, source)
    return stream_from_dict(name, data, model)


def stream_from_dict(name: str, data: dict, model: str | None = None) -> RequestStream:
    profiles_src = dict(data.get("profiles", {}))
    if model is not None:
        override = data.get("models", {}).get(model, {}).get("profiles", {})
        profiles_src.update(override)
    if not profiles_src:
        raise ConfigError(f"task {name!r} defines no profiles")
    profiles = {pname: profile_from_dict(pname, pdata) for pname, pdata in profiles_src.items()}
    mix_src = data.get("mix", {pname: 1.0 / len(profiles) for pname in profiles})
    mix = []
    for pname, share in mix_src.items():
        if pname not in profiles:
            raise ConfigError(f"task {name!r}: mix references unknown profile {pname!r}")
        mix.append((profiles[pname], float(share)))
    total = sum(s for _, s in mix)
    mix = [(p, s / total) for p, s in mix]
    budget = data.get("budget", {})
    return RequestStream(
        tuple(mix),
        tokens=budget.get("tokens", 20000 if "requests" not in budget else None),
        requests=budget.get("requests"),
        name=name,
    )


def with_budget(stream: RequestStream, tokens: int | None = None, requests: int | None = None) -> RequestStream:
    if tokens is None and requests is None:
        return stream
    return RequestStream(stream.mix, tokens=tokens, requests=requests, name=stream.name)


def expected_emitted(p: float, k: int) -> float:
    """Mean tokens emitted per iteration: ``sum_{i=0..k} p**i``."""
    return sum(p ** i for i in range(k + 1))


def trace_from_records(rows: Sequence[tuple[int, int, int, int]]) -> AcceptanceTrace:
    return AcceptanceTrace(TraceRecord(*r) for r in rows)
