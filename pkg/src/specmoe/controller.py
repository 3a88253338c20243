"""Test-and-set speculation manager.

The controller alternates between a short *test* phase, where it tries a few
speculation lengths for ``t_trial`` iterations each and measures their
utility, and a longer *set* phase that commits to the best one. Speculation
is switched off (K=0) when no tested K pays for itself, and each consecutive
K=0 set doubles in length so that hopeless requests are probed less often.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

from specmoe.cost_model import ConfigError
from specmoe.utility import PROBE, SET, IterationRecord, UtilityAnalyzer


@dataclass(frozen=True)
class ControllerConfig:
    t_trial: int = 4
    max_trials: int = 4
    s_set: int = 16
    s_cap: int = 256
    k_max: int = 3
    k_start: int = 3
    convergence_band: float = 0.10
    baseline_refresh_interval: int = 100
    baseline_probe_len: int = 4
    backoff: bool = True
    history_len: int = 32

    def __post_init__(self):
        if self.t_trial < 1 or self.max_trials < 1:
            raise ConfigError("t_trial and max_trials must be >= 1")
        if self.s_set < self.t_trial:
            raise ConfigError("s_set must be >= t_trial")
        if self.s_cap < self.s_set:
            raise ConfigError("s_cap must be >= s_set")
        if not 0.0 < self.convergence_band < 1.0:
            raise ConfigError("convergence_band must lie in (0, 1)")
        if self.k_max < 1:
            raise ConfigError("k_max must be >= 1")
        if self.k_start < 1:
            raise ConfigError("k_start must be >= 1")
        if self.baseline_probe_len < 1 or self.baseline_refresh_interval < 1:
            raise ConfigError("baseline probe length and refresh interval must be >= 1")

    @property
    def t_test(self) -> int:
        return self.max_trials * self.t_trial


class Phase(enum.Enum):
    WARMUP = "warmup"
    TEST = "test"
    SET = "set"
    PROBE = "probe"


class Trial(NamedTuple):
    k: int
    utility: float


class HillClimbStep(NamedTuple):
    next_k: int
    converged: bool


def _sign(x: int) -> int:
    return (x > 0) - (x < 0)


def hill_climb_next_k(prev: Trial | None, curr: Trial, k_max: int, band: float = 0.10) -> HillClimbStep:
    """Pick the next K to try from the last two trials.

    Rising utility keeps moving the same way; falling utility steps back to
    the far side of the previous K. With no distinct previous trial, probe
    downwards when speculation is losing and upwards otherwise. The result
    is clamped to ``[1, k_max]``; a clamp that lands on ``curr.k`` flips
    direction once.
    """
    if prev is None or prev.k == curr.k:
        step = -1 if curr.utility < 1.0 else 1
        nxt = curr.k + step
        if not 1 <= nxt <= k_max:
            nxt = curr.k - step
        return HillClimbStep(max(1, min(k_max, nxt)), False)

    converged = abs(curr.utility - prev.utility) < band * prev.utility
    direction = _sign(curr.k - prev.k)
    if curr.utility > prev.utility:
        nxt = curr.k + direction
    else:
        nxt = prev.k - direction
    return HillClimbStep(max(1, min(k_max, nxt)), converged)


@dataclass(frozen=True)
class ControllerEvent:
    iter_index: int
    kind: str
    k: int
    utility: float | None = None
    next_k: int | None = None
    set_len: int | None = None
    reason: str = ""


@dataclass
class ControllerState:
    phase: Phase = Phase.WARMUP
    trial_no: int = 0
    trial_iters_done: int = 0
    set_remaining: int = 0
    probe_remaining: int = 0
    curr_k: int = 0
    prev_k: int = 0
    curr_util: float | None = None
    prev_util: float | None = None
    best_k: int = 0
    best_util: float = float("-inf")
    k_history: deque = field(default_factory=lambda: deque(maxlen=32))
    backoff_level: int = 0
    s_current: int = 16
    set_k: int = 0
    last_refresh_iter: int = -1
    trials: list = field(default_factory=list)


class SpeculationController:
    """Per-request speculation manager.

    Call ``next_k(None, analyzer)`` before the first iteration and
    ``next_k(record, analyzer)`` after each one; the return value is the K for
    the upcoming iteration and ``tag`` says which phase it belongs to.
    """

    def __init__(self, config: ControllerConfig | None = None):
        self.config = config or ControllerConfig()
        cfg = self.config
        self.state = ControllerState(
            k_history=deque(maxlen=cfg.history_len),
            s_current=cfg.s_set,
        )
        self.events: list[ControllerEvent] = []
        self._probes: list[IterationRecord] = []
        self._after_probe_k = 0
        self._iter = -1
        self._started = False
        self.tag = PROBE

    # ------------------------------------------------------------ decisions
    def select_k_start(self) -> int:
        """Non-zero K with the best utility in recent history, else the default."""
        best = None
        for k, u in self.state.k_history:
            if k >= 1 and (best is None or u > best[1] or (u == best[1] and k < best[0])):
                best = (k, u)
        k = best[0] if best is not None else self.config.k_start
        return max(1, min(self.config.k_max, k))

    def next_k(self, latest: IterationRecord | None, analyzer: UtilityAnalyzer) -> int:
        st = self.state
        if not self._started:
            self._started = True
            self._begin_probe(Phase.WARMUP, after_k=None)
            return self._emit()
        if latest is None:
            return self._emit()
        self._iter = latest.iter_index
        if st.phase in (Phase.WARMUP, Phase.PROBE):
            self._probes.append(latest)
            st.probe_remaining -= 1
            if st.probe_remaining == 0:
                analyzer.refresh_baseline(self._probes)
                st.last_refresh_iter = latest.iter_index
                self.events.append(ControllerEvent(latest.iter_index, "baseline", 0,
                                                   utility=analyzer.t_base))
                self._probes = []
                k = self.select_k_start() if st.phase is Phase.WARMUP else self._after_probe_k
                self._begin_test(k)
        elif st.phase is Phase.TEST:
            st.trial_iters_done += 1
            if st.trial_iters_done >= self.config.t_trial:
                self.end_of_trial(analyzer.recent_utility(self.config.t_trial))
        elif st.phase is Phase.SET:
            st.set_remaining -= 1
            if st.set_remaining <= 0:
                self.end_of_set()
        return self._emit()

    def _emit(self) -> int:
        st = self.state
        if st.phase in (Phase.WARMUP, Phase.PROBE):
            self.tag = PROBE
            return 0
        if st.phase is Phase.TEST:
            self.tag = f"test:{st.trial_no}"
            return st.curr_k
        self.tag = SET
        return st.set_k

    # ----------------------------------------------------------- transitions
    def _begin_probe(self, phase: Phase, after_k: int | None) -> None:
        st = self.state
        st.phase = phase
        st.probe_remaining = self.config.baseline_probe_len
        self._after_probe_k = after_k if after_k is not None else 0
        self._probes = []

    def _begin_test(self, k: int) -> None:
        st = self.state
        st.phase = Phase.TEST
        st.trial_no = 1
        st.trial_iters_done = 0
        st.curr_k = k
        st.prev_k = k
        st.curr_util = None
        st.prev_util = None
        st.best_k = 0
        st.best_util = float("-inf")
        st.trials = []

    def _enter_set(self, k: int, reason: str) -> None:
        st = self.state
        st.phase = Phase.SET
        st.set_k = k
        st.set_remaining = st.s_current
        self.events.append(ControllerEvent(self._iter, "set", k, utility=st.best_util
                                           if st.best_util > float("-inf") else None,
                                           set_len=st.s_current, reason=reason))

    def end_of_trial(self, trial_utility: float) -> None:
        """Record the finished trial and pick the next trial or the set K."""
        st, cfg = self.state, self.config
        k = st.curr_k
        curr = Trial(k, trial_utility)
        prev = st.trials[-1] if st.trials else None
        st.trials.append(curr)
        st.k_history.append(curr)
        if trial_utility > st.best_util or (trial_utility == st.best_util and k < st.best_k):
            st.best_k, st.best_util = k, trial_utility
        st.prev_k, st.prev_util = (prev.k, prev.utility) if prev else (k, trial_utility)
        st.curr_util = trial_utility

        if trial_utility < 1.0 and k == 1:
            self.events.append(ControllerEvent(self._iter, "trial", k, trial_utility, 0, reason="k1_loses"))
            self._enter_set(0, "utility below 1 at k=1")
            return

        step = hill_climb_next_k(prev, curr, cfg.k_max, cfg.convergence_band)
        tested = {t.k for t in st.trials}
        reason = ""
        if st.trial_no >= cfg.max_trials:
            reason = "max_trials"
        elif step.converged:
            reason = "converged"
        elif len(st.trials) >= 3 and st.trials[-3].utility > st.trials[-2].utility > curr.utility:
            reason = "decreasing"
        elif step.next_k in tested:
            reason = "explored"
        self.events.append(ControllerEvent(self._iter, "trial", k, trial_utility,
                                           None if reason else step.next_k, reason=reason))
        if reason:
            self._enter_set(st.best_k if st.best_util >= 1.0 else 0, reason)
            return
        st.trial_no += 1
        st.trial_iters_done = 0
        st.curr_k = step.next_k

    def end_of_set(self) -> None:
        """Adjust back-off and schedule the next test phase (and baseline probes if due)."""
        st, cfg = self.state, self.config
        if st.set_k == 0:
            if cfg.backoff and cfg.s_set * 2 ** (st.backoff_level + 1) <= cfg.s_cap:
                st.backoff_level += 1
                st.s_current = cfg.s_set * 2 ** st.backoff_level
            next_k = 1
        else:
            st.backoff_level = 0
            st.s_current = cfg.s_set
            next_k = self.select_k_start()
        if self._iter - st.last_refresh_iter >= cfg.baseline_refresh_interval:
            self._begin_probe(Phase.PROBE, after_k=next_k)
        else:
            self._begin_test(next_k)
