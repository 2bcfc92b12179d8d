import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapprune.labeling import empirical_probability, load_labels, save_labels

from conftest import make_map, make_session

POSES = [(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)]


def session_with_counts(sid, counts):
    """A session where landmark ``i`` is detected ``counts[i]`` times."""
    events = []
    for lid, c in enumerate(counts):
        events += [(k % len(POSES), lid, 5.0, 0.0) for k in range(c)]
    return make_session(sid, POSES, events)


def test_label_examples():
    fmap = make_map([(10, 0), (0, 10), (-10, 0), (0, -10)])
    # landmark 0 holds the max frequency and shows up every time
    sessions = [
        session_with_counts(0, [4, 2, 1, 0]),
        session_with_counts(1, [4, 2, 1, 0]),
        session_with_counts(2, [4, 0, 1, 0]),
    ]
    lab = empirical_probability(fmap, sessions)
    assert lab[0] == pytest.approx(1.0)
    assert lab[3] == 0.0


def test_half_frequency_two_of_three():
    fmap = make_map([(10, 0), (0, 10)])
    sessions = [
        session_with_counts(0, [2, 2]),
        session_with_counts(1, [2, 1]),
        session_with_counts(2, [2, 0]),
    ]
    # landmark 1: 3 detections vs 6 for the leader, matched in 2 of 3 sessions
    lab = empirical_probability(fmap, sessions)
    assert lab[1] == pytest.approx(0.5 * 2 / 3)
    assert lab[0] == pytest.approx(1.0)


def test_needs_two_sessions():
    fmap = make_map([(10, 0)])
    with pytest.raises(ValueError):
        empirical_probability(fmap, [session_with_counts(0, [1])])


def test_no_detections_error():
    fmap = make_map([(10, 0)])
    with pytest.raises(ValueError):
        empirical_probability(fmap, [session_with_counts(0, [0]), session_with_counts(1, [0])])


counts_st = st.integers(2, 6).flatmap(
    lambda n_lm: st.lists(st.lists(st.integers(0, 6), min_size=n_lm, max_size=n_lm), min_size=2, max_size=6)
)


@settings(max_examples=80)
@given(counts_st)
def test_label_invariants(table):
    n_lm = len(table[0])
    if sum(map(sum, table)) == 0:
        return
    fmap = make_map([(10 * i + 5, 0) for i in range(n_lm)])
    sessions = [session_with_counts(i, row) for i, row in enumerate(table)]
    lab = empirical_probability(fmap, sessions)
    assert np.all((lab >= 0) & (lab <= 1))
    never = np.array([all(row[j] == 0 for row in table) for j in range(n_lm)])
    np.testing.assert_array_equal(lab == 0, never)


@settings(max_examples=80)
@given(counts_st, st.integers(1, 3))
def test_uniform_extra_session_keeps_order_at_equal_coverage(table, scale):
    # the session-coverage factor can reorder landmarks seen in different numbers of
    # sessions (see the example below), so order is only guaranteed at equal coverage
    n_lm = len(table[0])
    if sum(map(sum, table)) == 0:
        return
    fmap = make_map([(10 * i + 5, 0) for i in range(n_lm)])
    sessions = [session_with_counts(i, row) for i, row in enumerate(table)]
    seen = [sum(row[j] > 0 for row in table) for j in range(n_lm)]
    before = empirical_probability(fmap, sessions)
    extra = session_with_counts(len(table), [scale] * n_lm)
    after = empirical_probability(fmap, sessions + [extra])
    for i in range(n_lm):
        for j in range(n_lm):
            if seen[i] == seen[j] and before[i] < before[j] - 1e-12:
                assert after[i] < after[j] + 1e-12


def test_uniform_extra_session_can_reorder_unequal_coverage():
    fmap = make_map([(10, 0), (20, 0), (30, 0)])
    sessions = [session_with_counts(0, [7, 2, 0]), session_with_counts(1, [0, 2, 1])]
    before = empirical_probability(fmap, sessions)
    assert before[0] < before[1]
    after = empirical_probability(fmap, sessions + [session_with_counts(2, [1, 1, 1])])
    assert after[0] > after[1]


def test_label_csv_round_trip(tmp_path):
    ids = np.array([3, 7, 9])
    vals = np.array([0.0, 1.0, 1 / 3])
    save_labels(ids, vals, tmp_path / "l.csv")
    i2, v2 = load_labels(tmp_path / "l.csv")
    np.testing.assert_array_equal(i2, ids)
    np.testing.assert_array_equal(v2, vals)
