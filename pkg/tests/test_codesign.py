import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgcodesign.codesign import (
    CodesignError,
    CodesignProblem,
    CodesignResult,
    DistributedGains,
    Layout,
    assemble_global_lmi,
    assemble_interconnection,
    dissipation_form,
    extract_topology,
    global_lmi_matrix,
    reverify,
    solve_codesign,
)
from mgcodesign.dqnet import build_incidence
from mgcodesign.sdp import min_eig_sym


def test_layout_dimensions_by_hand():
    lay = Layout(N=2, L=1, M=1)
    # inputs: 2 DGs x (3 + 2 + 7), one line x (2 + 2 + 2), one load x (2 + 2)
    assert lay.n_u == 24 + 6 + 4
    assert lay.n_y == 8 + 2 + 2
    assert lay.n_w == 14 + 2 + 2
    assert lay.lmi_size == 34 + 2 * 12 + 18
    assert lay.u_load(0) == 30 and lay.y_line(0) == 8 and lay.w_load(0) == 16


def test_interconnection_without_gains_follows_incidence(demo_design):
    net = demo_design.net
    ic = assemble_interconnection(net)
    lay = ic.layout
    _, Bd, Bl = build_incidence(net)
    for i in range(net.N):
        r = lay.u_dg(i)
        # no consensus inputs
        np.testing.assert_array_equal(ic.M_u[r:r + 3], 0.0)
        for l in range(net.L):
            np.testing.assert_array_equal(ic.M_u[r + 3:r + 5, lay.y_line(l):lay.y_line(l) + 2],
                                          Bd[i, l] * np.eye(2))
    for l in range(net.L):
        for m in range(net.M):
            np.testing.assert_array_equal(
                ic.M_u[lay.u_line(l) + 2:lay.u_line(l) + 4, lay.y_load(m):lay.y_load(m) + 2],
                Bl[m, l] * np.eye(2))
    # every disturbance reaches exactly one input
    W = ic.M_u[:, lay.n_y:]
    np.testing.assert_array_equal(W.sum(axis=0), 1.0)
    np.testing.assert_array_equal(ic.M_z, np.hstack([np.eye(lay.n_y), np.zeros((lay.n_y, lay.n_w))]))


def test_assembled_matrix_is_exactly_symmetric(demo_design):
    d = demo_design
    sdp = assemble_global_lmi(d.prob)
    M = sdp.evaluate("global", d.result.values)
    assert M.shape == (d.prob.layout.lmi_size,) * 2
    np.testing.assert_array_equal(M, M.T)


def test_demo_solution_is_certified(demo_design):
    d = demo_design
    r = d.result
    assert r.status in ("optimal", "feasible")
    assert r.min_eig >= -1e-7
    assert reverify(d.prob, r, r.gains) >= -1e-7
    assert r.gains.balance_residual() <= 1e-9
    assert np.all(r.p > 0) and np.all(r.p_line > 0) and np.all(r.p_load > 0)
    F = dissipation_form(d.prob, r.gains, r.p, r.p_line, r.p_load, r.gamma_t)
    assert min_eig_sym(-F, sym_tol=1e-9) >= -1e-5 * max(1.0, r.gamma_t)
    assert d.topology_margin >= -1e-5


def test_dissipation_form_rejects_small_gain(demo_design):
    """Both routes agree that a much smaller gain bound is not certified."""
    d = demo_design
    r = d.result
    F = dissipation_form(d.prob, r.gains, r.p, r.p_line, r.p_load, 0.5 * r.gamma_t)
    assert np.max(np.linalg.eigvalsh(F)) > 1e-6
    vals = dict(r.values, gamma_t=0.5 * r.gamma_t)
    assert min_eig_sym(global_lmi_matrix(d.prob, vals), sym_tol=1e-9) < -1e-6


def test_expensive_edges_reduce_to_the_fixed_zero_problem(demo_design):
    """With very costly edges the optimum has no consensus gains, so its gain
    bound matches the program with every gain fixed to zero."""
    d = demo_design
    big = solve_codesign(d.problem(1e4))
    none = solve_codesign(d.problem(1e4, allowed=set()))
    assert big.gains.edges(tol=1e-6) == []
    assert big.gamma_t == pytest.approx(none.gamma_t, rel=1e-3)
    assert none.gains.edges() == []


def test_gamma_bar_bound(demo_design):
    d = demo_design
    g = d.result.gamma_t
    ok = solve_codesign(d.problem(1e-2, gamma_bar=1.5 * g))
    assert ok.gamma_t <= 1.5 * g * (1 + 1e-6)
    with pytest.raises(CodesignError) as err:
        solve_codesign(d.problem(1e-2, gamma_bar=1e-3))
    assert err.value.details["status"] == "infeasible"
    assert err.value.details["gamma_bar"] == 1e-3


def test_topology_threshold_zero_keeps_support(demo_design):
    d = demo_design
    gains, edges, margin = extract_topology(d.prob, d.result, tau_sparse=0.0)
    assert edges == d.result.gains.edges()
    np.testing.assert_array_equal(gains.K_hat, d.result.gains.K_hat)
    assert margin >= -1e-7


def test_zero_gains_have_empty_topology(demo_design):
    d = demo_design
    zero = DistributedGains.zeros(d.net.N, d.net.P_max, d.net.Q_max)
    assert zero.edges() == []
    np.testing.assert_array_equal(zero.consensus_matrix(), 0.0)
    res = CodesignResult(zero, d.result.p, d.result.p_line, d.result.p_load, d.result.gamma_t,
                         0.0, "optimal", 0.0, dict(d.result.values))
    gains, edges, _ = extract_topology(d.prob, res)
    assert edges == [] and gains.balance_residual() == 0.0


def test_extracted_gains_keep_balance(demo_design):
    d = demo_design
    assert d.gains.balance_residual() <= 1e-12
    assert set(d.edges) <= set(d.result.gains.edges())


def test_uniform_cost_scaling_keeps_support(demo_design):
    """Scaling every weight of the objective leaves the minimiser alone."""
    d = demo_design
    scaled = solve_codesign(d.problem(10 * 1e-2, c0=10 * d.prob.c0))
    assert scaled.gamma_t == pytest.approx(d.result.gamma_t, rel=1e-3)
    _, edges, _ = extract_topology(d.problem(10 * 1e-2, c0=10 * d.prob.c0), scaled)
    assert edges == d.edges


def test_missing_certificate_or_bad_cost(demo_design):
    d = demo_design
    with pytest.raises(CodesignError, match="missing certificate"):
        CodesignProblem(d.net, d.dg_certs[:2], d.line_certs, d.load_certs)
    with pytest.raises(CodesignError):
        CodesignProblem(d.net, d.dg_certs, d.line_certs, d.load_certs, c=-1.0)
    bad = d.line_certs[0].__class__.from_dict(d.line_certs[0].to_dict())
    bad.nu = 0.0
    with pytest.raises(CodesignError, match="non-negative"):
        CodesignProblem(d.net, d.dg_certs, [bad] + d.line_certs[1:], d.load_certs)


def test_result_round_trip(demo_design):
    r = demo_design.result
    back = CodesignResult.from_dict(r.to_dict())
    np.testing.assert_array_equal(back.gains.K_hat, r.gains.K_hat)
    assert back.gamma_t == r.gamma_t and back.gamma == pytest.approx(np.sqrt(r.gamma_t))


ratings = st.lists(st.floats(0.01, 1.0), min_size=2, max_size=5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_consensus_vanishes_under_proportional_sharing(seed, N, s_p, s_q):
    rng = np.random.default_rng(seed)
    P_max, Q_max = rng.uniform(0.01, 1.0, N), rng.uniform(0.01, 1.0, N)
    K = np.zeros((N, N, 3, 2))
    K[:, :, 0, 0] = rng.normal(size=(N, N))
    K[:, :, 1, 1] = rng.normal(size=(N, N))
    K[:, :, 2, 0] = rng.normal(size=(N, N))
    g = DistributedGains.from_offdiag(K, P_max, Q_max)
    assert g.balance_residual() <= 1e-12
    x = np.column_stack([s_p * P_max, s_q * Q_max]).reshape(-1)
    np.testing.assert_allclose(g.consensus_matrix() @ x, 0.0, atol=1e-12 * (1 + np.abs(K).max()) * N)
    # the physical gains reproduce the consensus inputs from relative errors
    P = rng.uniform(0, 1, N) * P_max
    u = g.consensus_matrix() @ np.column_stack([P, np.zeros(N)]).reshape(-1)
    rel = P / P_max
    u_P = np.array([sum(g.K_P[i, j] * (rel[i] - rel[j]) for j in range(N)) for i in range(N)])
    np.testing.assert_allclose(u[0::3], u_P, atol=1e-10)
    back = DistributedGains.from_dict(g.to_dict())
    np.testing.assert_array_equal(back.K_hat, g.K_hat)
