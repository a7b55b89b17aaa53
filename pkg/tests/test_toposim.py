import math
from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from dsalab.datagen import apply_topology_change
from dsalab.grid import GridModel, build_admittance, bundled_grid_path, load_grid
from dsalab.toposim import (
    REFERENCE_THRESHOLD_68BUS, SvSequence, calibrate_threshold, calibration_csv, compute_svs, gate_new_topology,
    mean_rmse, svs_of_matrix, svs_rmse,
)

seqs = st.lists(st.floats(0, 100), min_size=4, max_size=4).map(lambda v: SvSequence(np.sort(v)[::-1]))


@pytest.fixture(scope="module")
def case9():
    return load_grid(bundled_grid_path("case9"))


def test_svs_examples():
    np.testing.assert_allclose(svs_of_matrix(np.diag([3.0, 1.0])).values, [3.0, 1.0], atol=1e-12)
    np.testing.assert_array_equal(svs_of_matrix(np.zeros((3, 3))).values, np.zeros(3))
    np.testing.assert_allclose(svs_of_matrix(np.diag([1.0, 3.0])).values, [3.0, 1.0], atol=1e-12)


def test_all_lines_out_gives_zero_sequence(case9):
    dark = replace(case9, lines=tuple(replace(ln, in_service=False) for ln in case9.lines))
    np.testing.assert_array_equal(compute_svs(dark).values, 0.0)


def test_svs_match_independent_oracle(case9):
    oracle = scipy.linalg.svdvals(np.abs(build_admittance(case9)))
    np.testing.assert_allclose(compute_svs(case9).values, oracle, atol=1e-8)


def test_svs_invariant_to_bus_order(case9):
    perm = np.random.default_rng(0).permutation(case9.n_bus)
    shuffled = replace(case9, buses=tuple(case9.buses[i] for i in perm))
    np.testing.assert_allclose(compute_svs(shuffled).values, compute_svs(case9).values, atol=1e-10)


def test_rmse_examples():
    a = SvSequence(np.array([3.0, 1.0]))
    b = SvSequence(np.array([1.0, 1.0]))
    assert svs_rmse(a, a) == 0.0
    assert svs_rmse(a, b) == pytest.approx(math.sqrt(2), abs=1e-12)
    assert svs_rmse(b, a) == svs_rmse(a, b)


def test_unequal_lengths_zero_padded(caplog):
    a = SvSequence(np.array([3.0, 1.0, 1.0]))
    b = SvSequence(np.array([3.0, 1.0]))
    assert svs_rmse(a, b) == pytest.approx(math.sqrt(1 / 3), abs=1e-12)
    assert "zero-padding" in caplog.text


def test_sequence_invariants():
    with pytest.raises(ValueError):
        SvSequence(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        SvSequence(np.array([1.0, -0.5]))


@settings(max_examples=200, deadline=None)
@given(seqs, seqs, seqs)
def test_rmse_is_pseudometric(a, b, c):
    ab, bc, ac = svs_rmse(a, b), svs_rmse(b, c), svs_rmse(a, c)
    assert ab >= 0 and ab == pytest.approx(svs_rmse(b, a))
    assert svs_rmse(a, a) == 0
    assert ac <= ab + bc + 1e-9


def test_gate_identical_topologies(case9):
    known = [compute_svs(case9)] * 3
    d = gate_new_topology(case9, known, threshold=0.5)
    assert d.mean_rmse == 0.0 and not d.retrain
    with pytest.raises(ValueError):
        gate_new_topology(case9, [], 1.0)


def test_gate_averages_over_known(case9):
    t1 = apply_topology_change(case9, ["4-5a"], "T1")
    t2 = apply_topology_change(case9, ["6-7a"], "T2")
    known = [compute_svs(case9), compute_svs(t1)]
    expected = 0.5 * (svs_rmse(compute_svs(t2), known[0]) + svs_rmse(compute_svs(t2), known[1]))
    assert gate_new_topology(t2, known, 0.0).mean_rmse == pytest.approx(expected, rel=1e-12)
    assert mean_rmse(compute_svs(t2), known) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(seqs, st.lists(seqs, min_size=1, max_size=4), st.floats(0, 50), st.floats(0, 50))
def test_gate_monotone_in_threshold(new, known, h, bump):
    low = gate_new_topology(new, known, h)
    high = gate_new_topology(new, known, h + bump)
    assert low.retrain or not high.retrain
    assert low.retrain == (low.mean_rmse > h)


def test_reference_threshold_constant():
    assert REFERENCE_THRESHOLD_68BUS == 16.0


def test_calibration_degenerate_and_errors():
    h, rows = calibrate_threshold({"a": 0.0, "b": 0.0, "c": 0.0}, {"a": 0.9, "b": 0.9, "c": 0.9}, ["a", "b"])
    assert h == math.inf
    assert [r.topology_id for r in rows] == ["a", "b", "c"]
    with pytest.raises(ValueError):
        calibrate_threshold({"a": 0.0, "b": 1.0}, {"a": 0.9, "b": 0.8}, ["a"])
    with pytest.raises(ValueError):
        calibrate_threshold({"a": 0.0, "b": 1.0, "c": 2.0}, {"a": 0.9, "b": 0.8, "c": 0.5}, [])


def test_calibration_threshold_separates_failing_topology():
    rmse = {"T0": 1.2, "T1": 1.5, "T2": 1.3, "X": 3.3}
    f2 = {"T0": 0.95, "T1": 0.93, "T2": 0.94, "X": 0.80}
    h, rows = calibrate_threshold(rmse, f2, ["T0", "T1", "T2"])
    assert h == pytest.approx(0.5 * (1.5 + 3.3))
    assert [r.topology_id for r in rows] == ["T0", "T2", "T1", "X"]
    assert all(r.mean_rmse <= h for r in rows if r.seen)
    csv = calibration_csv(rows)
    assert csv == calibration_csv(calibrate_threshold(rmse, f2, ["T0", "T1", "T2"])[1])
    assert csv.splitlines()[0] == "topology_id,mean_rmse,f2,seen"
