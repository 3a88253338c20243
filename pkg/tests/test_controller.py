import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specmoe.controller import (
    ControllerConfig,
    Phase,
    SpeculationController,
    Trial,
    hill_climb_next_k,
)
from specmoe.cost_model import ConfigError
from specmoe.utility import PROBE, IterationRecord


class Landscape:
    """Analyzer stand-in reporting a fixed utility for each K."""

    t_base = 1.0

    def __init__(self, utilities, rng=None, noise=0.0):
        self.utilities = utilities
        self.k = 0
        self.rng = rng
        self.noise = noise

    def refresh_baseline(self, probes):
        pass

    def recent_utility(self, n):
        u = float(self.utilities(self.k) if callable(self.utilities) else self.utilities[self.k - 1])
        if self.noise:
            u *= 1 + self.rng.uniform(-self.noise, self.noise)
        return u


def drive(ctrl, analyzer, iterations):
    """Run the controller for ``iterations`` steps; return (k, tag) per step."""
    out = []
    k = ctrl.next_k(None, analyzer)
    for i in range(iterations):
        analyzer.k = k
        out.append((k, ctrl.tag))
        k = ctrl.next_k(IterationRecord(i, k, 1, 0.0, 1.0, 0.0, 1.0, ctrl.tag), analyzer)
    return out


# ------------------------------------------------------------ hill climbing

@pytest.mark.parametrize("prev,curr,expected", [
    (None, Trial(3, 1.2), 4),
    (None, Trial(3, 0.8), 2),
    (Trial(2, 1.3), Trial(3, 1.6), 4),
    (Trial(2, 1.3), Trial(3, 1.1), 1),
    (Trial(3, 1.1), Trial(2, 1.3), 1),
    (Trial(3, 1.3), Trial(2, 1.1), 4),
])
def test_hill_climb_steps(prev, curr, expected):
    assert hill_climb_next_k(prev, curr, k_max=7).next_k == expected


def test_hill_climb_clamps_and_converges():
    assert hill_climb_next_k(None, Trial(3, 1.2), k_max=3).next_k == 2
    assert hill_climb_next_k(None, Trial(1, 0.5), k_max=3).next_k == 2
    assert hill_climb_next_k(Trial(2, 1.3), Trial(3, 1.6), k_max=3).next_k == 3
    step = hill_climb_next_k(Trial(2, 1.30), Trial(3, 1.28), k_max=7)
    assert step.converged
    assert not hill_climb_next_k(Trial(2, 1.0), Trial(3, 1.2), k_max=7).converged


# ------------------------------------------------------------ trial / set

def test_config_validation():
    with pytest.raises(ConfigError):
        ControllerConfig(s_set=2, t_trial=4)
    with pytest.raises(ConfigError):
        ControllerConfig(k_start=0)
    with pytest.raises(ConfigError):
        ControllerConfig(convergence_band=1.5)
    assert ControllerConfig().t_test == 16


def test_warmup_then_first_trial_at_k_start():
    ctrl = SpeculationController()
    steps = drive(ctrl, Landscape([2, 2, 2]), 6)
    assert steps[:4] == [(0, PROBE)] * 4
    assert steps[4] == (3, "test:1")


def test_k1_below_one_exits_to_k0_set():
    ctrl = SpeculationController(ControllerConfig(k_start=1))
    ctrl._begin_test(1)
    ctrl.end_of_trial(0.8)
    assert ctrl.state.phase is Phase.SET and ctrl.state.set_k == 0


def test_max_trials_takes_best():
    ctrl = SpeculationController(ControllerConfig(max_trials=3, k_max=7))
    ctrl._begin_test(3)
    ctrl.end_of_trial(1.2)
    ctrl.state.curr_k = 2
    ctrl.state.trial_no = 2
    ctrl.end_of_trial(1.5)
    ctrl.state.curr_k = 1
    ctrl.state.trial_no = 3
    ctrl.end_of_trial(1.3)
    assert ctrl.state.phase is Phase.SET and ctrl.state.set_k == 2


def test_all_losing_trials_set_k0():
    ctrl = SpeculationController()
    ctrl._begin_test(3)
    ctrl.end_of_trial(0.9)
    assert ctrl.state.curr_k == 2
    ctrl.end_of_trial(0.8)
    assert ctrl.state.phase is Phase.SET and ctrl.state.set_k == 0


def test_ties_prefer_smaller_k():
    ctrl = SpeculationController(ControllerConfig(k_max=5))
    ctrl._begin_test(2)
    ctrl.end_of_trial(1.5)
    ctrl.state.curr_k = 3
    ctrl.end_of_trial(1.5)
    assert ctrl.state.set_k == 2


def test_backoff_doubles_and_caps():
    cfg = ControllerConfig(s_set=16, s_cap=64)
    ctrl = SpeculationController(cfg)
    lengths = []
    for _ in range(5):
        ctrl._enter_set(0, "test")
        lengths.append(ctrl.state.s_current)
        ctrl.end_of_set()
        assert ctrl.state.curr_k == 1
    assert lengths == [16, 32, 64, 64, 64]
    ctrl._enter_set(2, "test")
    ctrl.end_of_set()
    assert ctrl.state.s_current == 16 and ctrl.state.backoff_level == 0


def test_next_test_after_good_set_uses_history_best():
    ctrl = SpeculationController(ControllerConfig(k_max=5))
    ctrl.state.k_history.extend([Trial(3, 1.4), Trial(2, 1.9), Trial(1, 1.2)])
    ctrl._enter_set(2, "test")
    ctrl.end_of_set()
    assert ctrl.state.curr_k == 2


def test_test_phase_arithmetic_24_units():
    # Zero benefit, 2x cost: trial at k=1 then a k=0 set.
    cfg = ControllerConfig(k_start=1)
    ctrl = SpeculationController(cfg)
    steps = drive(ctrl, Landscape(lambda k: 0.5), 4 + 20)
    cycle = steps[4:24]
    units = sum(2 if k else 1 for k, _ in cycle)
    assert [k for k, _ in cycle[:4]] == [1] * 4
    assert [k for k, _ in cycle[4:]] == [0] * 16
    assert units == 24


def test_refresh_probes_only_at_set_boundaries():
    steps = drive(SpeculationController(), Landscape(lambda k: 0.5), 600)
    probe_idx = [i for i, (_, tag) in enumerate(steps) if tag == PROBE]
    assert probe_idx[:4] == [0, 1, 2, 3]
    later = probe_idx[4:]
    assert later and len(later) % 4 == 0
    for start in later[::4]:
        assert steps[start - 1][1] == "set"
        assert steps[start + 4][1] == "test:1"


@settings(max_examples=60, deadline=None)
@given(
    utilities=st.lists(st.floats(0.2, 4.0), min_size=1, max_size=7),
    seed=st.integers(0, 1000),
)
def test_invariants_under_random_landscapes(utilities, seed):
    cfg = ControllerConfig(k_max=len(utilities), k_start=min(3, len(utilities)))
    ctrl = SpeculationController(cfg)
    steps = drive(ctrl, Landscape(utilities, np.random.default_rng(seed), noise=0.2), 800)
    run = 0
    for k, tag in steps:
        assert 0 <= k <= cfg.k_max
        if tag.startswith("test"):
            assert k >= 1
            run += 1
            assert run <= cfg.t_test
        else:
            run = 0
        if k == 0:
            assert tag in (PROBE, "set")
    assert ctrl.state.s_current == cfg.s_set * 2 ** ctrl.state.backoff_level <= cfg.s_cap


def test_deterministic_sequences():
    a = drive(SpeculationController(), Landscape([1.2, 1.8, 1.4], np.random.default_rng(5), 0.05), 500)
    b = drive(SpeculationController(), Landscape([1.2, 1.8, 1.4], np.random.default_rng(5), 0.05), 500)
    assert a == b


def test_decision_events_logged():
    ctrl = SpeculationController()
    drive(ctrl, Landscape([1.2, 1.8, 1.4]), 60)
    kinds = [e.kind for e in ctrl.events]
    assert kinds[0] == "baseline"
    assert "trial" in kinds and "set" in kinds
    assert any(e.kind == "set" and e.k == 2 for e in ctrl.events)
