import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsalab.grid import (
    Bus, Generator, GridModel, Line, Load, ModelRejectedError, build_admittance, bundled_grid_path,
    generator_output, grid_from_dict, grid_to_dict, load_grid, overload_index, solve_power_flow,
    static_overload_index, with_loads,
)


def two_bus(p_load=0.5, q_load=0.0, in_service=True, r=0.0):
    return GridModel(
        buses=[Bus(1, "slack"), Bus(2, "PQ")],
        lines=[Line(1, 2, r=r, x=0.1, in_service=in_service, id="1-2")],
        generators=[Generator(1, p_set=0.0)],
        loads=[Load(2, p_load, q_load)],
    )


@pytest.fixture(scope="module")
def case9():
    return load_grid(bundled_grid_path("case9"))


def test_two_bus_admittance():
    Y = build_admittance(two_bus())
    np.testing.assert_allclose(Y, [[-10j, 10j], [10j, -10j]], atol=1e-12)


def test_out_of_service_line_gives_zero_matrix():
    Y = build_admittance(two_bus(in_service=False))
    assert np.all(Y == 0)


def test_ring_diagonal_and_off_diagonal():
    y = 1.0 / complex(0.01, 0.1)
    grid = GridModel(
        buses=[Bus(1, "slack"), Bus(2, "PQ"), Bus(3, "PQ")],
        lines=[Line(1, 2, 0.01, 0.1, id="a"), Line(2, 3, 0.01, 0.1, id="b"), Line(3, 1, 0.01, 0.1, id="c")],
    )
    Y = build_admittance(grid)
    np.testing.assert_allclose(np.diag(Y), [2 * y] * 3)
    off = Y[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off, [-y] * 6)


def test_row_sums_equal_shunts_without_charging(case9):
    shunted = GridModel(
        buses=[Bus(1, "slack"), Bus(2, "PQ", shunt_g=0.02, shunt_b=0.3), Bus(3, "PQ", shunt_b=-0.1)],
        lines=[Line(1, 2, 0.02, 0.2, id="a"), Line(2, 3, 0.0, 0.1, id="b")],
    )
    np.testing.assert_allclose(build_admittance(shunted).sum(axis=1), [0, 0.02 + 0.3j, -0.1j], atol=1e-12)


def test_zero_injection_flat_start():
    grid = two_bus(p_load=0.0)
    sol = solve_power_flow(grid)
    assert sol.converged and sol.iterations == 0
    np.testing.assert_allclose(sol.v_mag, 1.0)
    np.testing.assert_allclose(sol.v_ang, 0.0)


def test_two_bus_matches_hand_solution():
    # Lossless line with Q = 0 at the load: V2 = cos(d) and P = V2 sin(d) / x,
    # so sin(2d) = 2 P x on the high-voltage branch.
    p, x = 0.5, 0.1
    d = 0.5 * math.asin(2 * p * x)
    sol = solve_power_flow(two_bus(p_load=p))
    assert sol.converged
    assert sol.v_mag[1] == pytest.approx(math.cos(d), abs=1e-9)
    assert sol.v_ang[1] == pytest.approx(-d, abs=1e-9)
    assert sol.mismatch <= 1e-8


def test_beyond_loadability_does_not_converge():
    # Maximum transfer with Q = 0 over a lossless line is V1^2 / (2x) = 5 pu.
    assert solve_power_flow(two_bus(p_load=4.9)).converged
    sol = solve_power_flow(two_bus(p_load=5.5))
    assert not sol.converged
    assert sol.message


def test_disconnected_grid_rejected():
    with pytest.raises(ModelRejectedError):
        solve_power_flow(two_bus(in_service=False))


def test_model_invariants_enforced():
    with pytest.raises(ModelRejectedError):
        GridModel(buses=[Bus(1, "PQ"), Bus(2, "PQ")], lines=[])
    with pytest.raises(ModelRejectedError):
        GridModel(buses=[Bus(1, "slack")], lines=[Line(1, 7, 0.0, 0.1)])
    with pytest.raises(ModelRejectedError):
        Line(1, 2, 0.0, 0.0)
    with pytest.raises(ModelRejectedError):
        Bus(1, "PQ", v_mag=0.0)
    with pytest.raises(ModelRejectedError):
        Generator(1, p_set=2.0, p_max=1.0)


def test_json_round_trip(case9):
    again = grid_from_dict(grid_to_dict(case9))
    assert again == case9


@pytest.mark.parametrize("scale", [0.6, 1.0, 1.3])
def test_generation_equals_load_plus_losses(case9, scale):
    p, q = case9.bus_load()
    grid = with_loads(case9, [ld.p * scale for ld in case9.loads], [ld.q * scale for ld in case9.loads])
    sol = solve_power_flow(grid)
    assert sol.converged
    pg, _ = generator_output(grid, sol)
    losses = float(np.sum(sol.line_flows[:, 0].real + sol.line_flows[:, 1].real))
    assert losses >= -1e-9
    assert pg.sum() == pytest.approx(sum(ld.p for ld in grid.loads) + losses, abs=1e-6)


def test_power_flow_is_deterministic(case9):
    a, b = solve_power_flow(case9), solve_power_flow(case9)
    assert a.iterations == b.iterations
    assert np.array_equal(a.v_mag, b.v_mag) and np.array_equal(a.v_ang, b.v_ang)


def test_overload_index_examples():
    assert overload_index([0.5], [1.0], 2) == pytest.approx(0.25, abs=1e-12)
    assert overload_index([1.0, 0.5], [1.0, 1.0], 2) == pytest.approx(1.25, abs=1e-12)
    assert overload_index([0.0, 0.0, 0.0]) == 0.0


def test_overload_index_rejects_infinite_ratio():
    with pytest.raises(ModelRejectedError):
        overload_index([np.inf])


def test_static_overload_index_uses_mean_end_flow():
    grid = GridModel(
        buses=[Bus(1, "slack"), Bus(2, "PQ")],
        lines=[Line(1, 2, 0.01, 0.1, rating_mva=100.0, id="1-2")],
        generators=[Generator(1, p_set=0.0)],
        loads=[Load(2, 0.4, 0.1)],
    )
    sol = solve_power_flow(grid)
    s = 0.5 * (abs(sol.line_flows[0, 0]) + abs(sol.line_flows[0, 1]))
    assert static_overload_index(grid, sol) == pytest.approx(s ** 2, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 3), min_size=1, max_size=6), st.integers(0, 5), st.floats(0, 2), st.integers(1, 4))
def test_overload_index_monotone(ratios, k, bump, p):
    k = k % len(ratios)
    raised = list(ratios)
    raised[k] += bump
    assert overload_index(raised, exponent=p) >= overload_index(ratios, exponent=p)
