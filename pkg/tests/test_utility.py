import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specmoe.utility import (
    PROBE,
    IterationRecord,
    MissingBaseline,
    UtilityAnalyzer,
    harmonic_mean,
    mean_probe_time,
    read_telemetry,
    run_utility,
    tpot,
    windowed_utilities,
    write_telemetry,
)


def rec(i, k, tokens, time, tag="set"):
    return IterationRecord(i, k, tokens, 0.0, time, 0.0, time, tag)


def test_record_validation():
    with pytest.raises(ValueError):
        rec(0, 2, 4, 1.0)
    with pytest.raises(ValueError):
        rec(0, 0, 0, 1.0)


def test_missing_baseline():
    an = UtilityAnalyzer()
    an.record(rec(0, 1, 2, 1.0))
    with pytest.raises(MissingBaseline):
        an.utility()
    with pytest.raises(ValueError):
        mean_probe_time([])


def test_window_excludes_probes_and_slides():
    an = UtilityAnalyzer(window_len=4)
    an.refresh_baseline([rec(0, 0, 1, 2.0, PROBE), rec(1, 0, 1, 4.0, PROBE)])
    assert an.t_base == 3.0
    for i in range(6):
        an.record(rec(i, 3, 4, 6.0))
    an.record(rec(6, 0, 1, 3.0, PROBE))
    assert an.window_size == 4
    assert an.etr() == 4.0
    assert an.cost() == 2.0
    assert an.utility() == 2.0
    assert an.iterations == 7
    an.record(rec(7, 1, 1, 3.0))
    assert an.utility(last=1) == pytest.approx(1.0)


def test_three_tokens_at_double_cost():
    an = UtilityAnalyzer()
    an.refresh_baseline([rec(0, 0, 1, 10.0, PROBE)])
    for i in range(8):
        an.record(rec(i, 3, 2 if i % 2 else 4, 20.0))
    assert an.etr() == 3.0
    assert an.utility() == 1.5


@settings(max_examples=200, deadline=None)
@given(
    rows=st.lists(st.tuples(st.integers(0, 7), st.floats(0.0, 1.0), st.floats(0.01, 50.0)), min_size=1, max_size=60),
    t_base=st.floats(0.01, 50.0),
)
def test_utility_times_tpot_is_t_base(rows, t_base):
    records = [rec(i, k, 1 + int(f * k), t) for i, (k, f, t) in enumerate(rows)]
    u = run_utility(records, t_base)
    assert abs(u * tpot(records) - t_base) / t_base <= 1e-9


def test_run_utility_errors():
    with pytest.raises(ValueError):
        run_utility([], 1.0)
    with pytest.raises(ValueError):
        run_utility([rec(0, 0, 1, 1.0)], 0.0)


def test_harmonic_mean():
    assert harmonic_mean([1.0, 2.0, 4.0]) == pytest.approx(3 / 1.75)
    with pytest.raises(ValueError):
        harmonic_mean([])
    with pytest.raises(ValueError):
        harmonic_mean([1.0, 0.0])


def test_windowed_utilities():
    records = [rec(i, 1, 2, 1.0) for i in range(8)] + [rec(8, 0, 1, 1.0, PROBE)]
    assert windowed_utilities(records, 1.0, window=4) == [2.0, 2.0]


def test_telemetry_round_trip(tmp_path):
    records = [rec(0, 0, 1, 1.5, PROBE), rec(1, 2, 3, 2.5)]
    buf = io.StringIO()
    write_telemetry(records, buf, request_id=7)
    path = tmp_path / "t.jsonl"
    path.write_text(buf.getvalue())
    rows = read_telemetry(path)
    assert rows[0]["request_id"] == 7
    assert rows[1]["tokens_emitted"] == 3
    assert rows[0]["phase_tag"] == PROBE
    assert [IterationRecord(**{k: v for k, v in r.items() if k != "request_id"}) for r in rows] == records


def test_snapshot_before_and_after_baseline():
    an = UtilityAnalyzer()
    assert an.snapshot()["utility"] is None
    an.refresh_baseline([rec(0, 0, 1, 1.0, PROBE)])
    an.record(rec(1, 1, 2, 1.0))
    assert an.snapshot()["utility"] == 2.0
    assert an.run_utility() == 2.0
