import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridflow import pf_core
from gridflow.case_io import (
    BUNDLED_CASES, BusKind, CaseFormatError, bundled_case_text, build_ybus, load_case,
    network_from_json, network_to_json, parse_matpower,
)

from conftest import branch_row, bus_row, case_text, gen_row, random_network, two_bus


def test_ieee14_counts(case14):
    assert (case14.n, len(case14.branches), case14.n_gen) == (14, 20, 5)
    assert len(case14.pq_set) == 9 and len(case14.pv_set) == 4
    assert case14.input_dim == 22
    assert case14.slack == 0


def test_index_sets_partition_buses(case14, case39, case118):
    for net in (case14, case39, case118):
        assert len(net.pv_set) + len(net.pq_set) + 1 == net.n
        covered = sorted(k for gens in net.gens_at_bus.values() for k in gens)
        assert covered == list(range(net.n_gen))
        for b in net.pv_set:
            assert net.gens_at_bus.get(b)


def test_minimal_two_bus():
    net = two_bus()
    assert net.n == 2 and net.pv_set == () and net.pq_set == (1,)


def test_per_unit_load_totals(case118):
    text = bundled_case_text("case118")
    raw = re.search(r"mpc\.bus = \[(.*?)\];", text, re.S).group(1)
    mw = sum(float(line.split()[2]) for line in raw.strip().splitlines() if line.strip())
    assert abs(case118.array("p_load").sum() * case118.base_mva - mw) < 1e-9


def test_costs_rescaled_to_per_unit(case14):
    # gen 1 of case14: 0.0430293 $/MW^2h, 20 $/MWh
    c = case14.costs[0]
    assert c.a == pytest.approx(0.0430293 * 100**2)
    assert c.b == pytest.approx(20 * 100)


def test_linear_gencost_padded():
    text = case_text([bus_row(1, 3), bus_row(2, 1, pd=10)], [gen_row(1)], [branch_row(1, 2)],
                     [[2, 0, 0, 2, 15, 3]])
    c = parse_matpower(text).costs[0]
    assert (c.a, c.b, c.c) == (0.0, 1500.0, 3.0)


def test_rejects_cubic_gencost():
    text = case_text([bus_row(1, 3), bus_row(2, 1)], [gen_row(1)], [branch_row(1, 2)],
                     [[2, 0, 0, 4, 1, 1, 1, 1]])
    with pytest.raises(CaseFormatError):
        parse_matpower(text)


def test_rejects_piecewise_gencost():
    text = case_text([bus_row(1, 3), bus_row(2, 1)], [gen_row(1)], [branch_row(1, 2)],
                     [[1, 0, 0, 2, 0, 0, 100, 2000]])
    with pytest.raises(CaseFormatError):
        parse_matpower(text)


def test_no_slack_rejected():
    text = case_text([bus_row(1, 2), bus_row(2, 1)], [gen_row(1)], [branch_row(1, 2)])
    with pytest.raises(CaseFormatError, match="slack"):
        parse_matpower(text)


def test_duplicate_bus_rejected():
    text = case_text([bus_row(1, 3), bus_row(1, 1)], [gen_row(1)], [branch_row(1, 1)])
    with pytest.raises(CaseFormatError, match="duplicate"):
        parse_matpower(text)


def test_malformed_row_reports_line():
    text = case_text([bus_row(1, 3), bus_row(2, 1)[:5]], [gen_row(1)], [branch_row(1, 2)])
    lineno = text.splitlines().index("\t" + "\t".join(str(x) for x in bus_row(2, 1)[:5]) + ";") + 1
    with pytest.raises(CaseFormatError, match=f"line {lineno}"):
        parse_matpower(text)


def test_non_numeric_value_reports_line():
    text = case_text([bus_row(1, 3), bus_row(2, 1)], [gen_row(1)], [branch_row(1, 2)]).replace("135", "abc", 1)
    with pytest.raises(CaseFormatError, match="line"):
        parse_matpower(text)


def test_unknown_field_warns_and_is_skipped(caplog):
    text = case_text([bus_row(1, 3), bus_row(2, 1)], [gen_row(1)], [branch_row(1, 2)])
    text += "mpc.mystery = [\n1 2 3;\n];\n"
    net = parse_matpower(text)
    assert net.n == 2
    assert "mystery" in caplog.text


def test_comments_and_whitespace_tolerated():
    text = case_text([bus_row(1, 3), bus_row(2, 1, pd=10)], [gen_row(1)], [branch_row(1, 2)])
    noisy = text.replace("mpc.bus = [", "%% bus data\nmpc.bus = [   % trailing comment\n\n")
    assert parse_matpower(noisy) == parse_matpower(text)


def test_out_of_service_generator_dropped_and_pv_demoted(caplog):
    text = case_text([bus_row(1, 3), bus_row(2, 2), bus_row(3, 1)],
                     [gen_row(1), gen_row(2, status=0)],
                     [branch_row(1, 2), branch_row(2, 3)],
                     [[2, 0, 0, 3, 0.01, 10, 0], [2, 0, 0, 3, 0.01, 12, 0]])
    net = parse_matpower(text)
    assert net.n_gen == 1
    assert net.buses[1].kind is BusKind.PQ
    assert "treating as PQ" in caplog.text
    assert len(net.costs) == 1


def test_two_bus_ybus():
    y = two_bus(x=0.1).ybus.dense()
    np.testing.assert_allclose(y, np.array([[-10j, 10j], [10j, -10j]]), atol=1e-12)


def test_zero_impedance_branch_rejected():
    text = case_text([bus_row(1, 3), bus_row(2, 1)], [gen_row(1)], [branch_row(1, 2, r=0, x=0)])
    with pytest.raises(CaseFormatError, match="impedance"):
        parse_matpower(text).ybus


def test_out_of_service_branch_excluded():
    text = case_text([bus_row(1, 3), bus_row(2, 1), bus_row(3, 1)], [gen_row(1)],
                     [branch_row(1, 2), branch_row(2, 3), branch_row(1, 3, status=0)])
    y = parse_matpower(text).ybus.dense()
    assert y[0, 2] == 0 and y[2, 0] == 0


def test_tap_and_shift_follow_pi_model():
    text = case_text([bus_row(1, 3), bus_row(2, 1)], [gen_row(1)],
                     [branch_row(1, 2, r=0.02, x=0.2, b=0.1, ratio=0.95, angle=10)])
    y = parse_matpower(text).ybus.dense()
    ys = 1 / (0.02 + 0.2j)
    t = 0.95 * np.exp(1j * np.radians(10))
    expected = np.array([
        [(ys + 0.05j) / (t * np.conj(t)), -ys / np.conj(t)],
        [-ys / t, ys + 0.05j],
    ])
    np.testing.assert_allclose(y, expected, atol=1e-12)


def test_bus_shunt_on_diagonal():
    text = case_text([bus_row(1, 3), bus_row(2, 1, gs=5, bs=19)], [gen_row(1)], [branch_row(1, 2, r=0, x=0.1)])
    y = parse_matpower(text).ybus.dense()
    assert y[1, 1] == pytest.approx(0.05 + 0.19j - 10j)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 9))
def test_row_sums_vanish_without_shunts(seed, n):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n, shunts=False, taps=False)
    net = type(net)(net.base_mva, net.buses, net.generators,
                    tuple(type(b)(b.from_bus, b.to_bus, b.r, b.x, 0.0) for b in net.branches), net.costs)
    y = net.ybus.dense()
    assert np.max(np.abs(y.sum(axis=1))) < 1e-12
    np.testing.assert_array_equal(y, y.T)


def test_sparsity_structurally_symmetric(case118):
    m = case118.ybus.matrix
    pattern = (m != 0).astype(int)
    assert (pattern != pattern.T).nnz == 0
    rows = list(case118.ybus.rows())
    assert len(rows) == 118 and all(isinstance(j, int) for j, _, _ in rows[0])


def test_stored_solution_consistency_case39(case39):
    # case39 ships a solution stored to enough digits for a 1e-3 check
    res = pf_core.residual(pf_core.stored_state(case39), pf_core.stored_dispatch(case39),
                           np.zeros(case39.input_dim), case39)
    assert max(np.abs(res.p_res).max(), np.abs(res.q_res).max()) < 1e-3


def test_stored_solution_ieee14_matches_newton(case14):
    # the stored IEEE14 voltages are rounded to 3 decimals, so compare against a solved state
    from gridflow.oracle_eval import newton_pf

    sol = newton_pf(case14, pf_core.stored_dispatch(case14))
    assert sol.converged
    assert np.max(np.abs(sol.state.v - case14.array("v_init"))) < 1.5e-3
    assert np.max(np.abs(sol.state.theta - case14.array("theta_init"))) < np.radians(0.05)


@pytest.mark.parametrize("name", BUNDLED_CASES)
def test_json_round_trip(name):
    net = load_case(name)
    again = network_from_json(network_to_json(net))
    assert again == net
    assert again.buses == net.buses and again.generators == net.generators
    assert again.branches == net.branches and again.costs == net.costs


def test_load_case_from_files(tmp_path, fixture3):
    m = tmp_path / "f.m"
    m.write_text(bundled_case_text("case3_fixture"))
    j = tmp_path / "f.json"
    j.write_text(network_to_json(fixture3))
    assert load_case(m).buses == fixture3.buses
    assert load_case(j) == fixture3


def test_ybus_is_cached(case14):
    assert case14.ybus is case14.ybus
    assert build_ybus(case14).matrix.nnz == case14.ybus.matrix.nnz
