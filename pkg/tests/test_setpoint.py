import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from mgcodesign.dqnet import DqValue, LineParams, LoadParams, MgNetwork
from mgcodesign.setpoint import (
    SetpointError,
    SetpointProblem,
    delivered_power,
    design_operating_point,
    injection_map,
    power_sharing_residual,
)

from conftest import make_dg


def asymmetric_net():
    """Two DGs with different ratings and lines feeding one load."""
    dgs = [make_dg("A", P_max=0.04, Q_max=0.05), make_dg("B", P_max=0.08, Q_max=0.05, R_t=0.08)]
    loads = [LoadParams("m", 2e-5, 0.1, DqValue(0.01, -0.04))]
    lines = [LineParams("a", 1.5, 4e-3, "A", "m"), LineParams("b", 2.5, 6e-3, "B", "m")]
    return MgNetwork(dgs=dgs, loads=loads, lines=lines)


def slsqp_oracle(prob: SetpointProblem, starts=12, seed=0):
    """Multi-start SLSQP on the same program with unknowns ``(V, P_s, Q_s)``."""
    net = prob.net
    N = net.N
    G, h = injection_map(net)
    Vd = prob.V_r_desired.reshape(-1)

    def obj(z):
        return prob.alpha_V * np.sum((z[:2 * N] - Vd) ** 2) + prob.alpha_P * z[-2] + prob.alpha_Q * z[-1]

    def eqs(z):
        P, Q, _, _ = delivered_power(G, h, z[:2 * N].reshape(N, 2))
        return np.r_[net.P_max * z[-2] - P, net.Q_max * z[-1] - Q]

    def mags(z):
        m = np.linalg.norm(z[:2 * N].reshape(N, 2), axis=1)
        return np.r_[m - prob.V_min, prob.V_max - m]

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(starts):
        z0 = np.r_[Vd + rng.normal(scale=0.02, size=2 * N), rng.uniform(0, 1, 2)]
        res = minimize(obj, z0, method="SLSQP",
                       constraints=[{"type": "eq", "fun": eqs}, {"type": "ineq", "fun": mags}],
                       bounds=[(None, None)] * (2 * N) + [(0, 1), (0, 1)],
                       options={"ftol": 1e-14, "maxiter": 500})
        if res.success and np.max(np.abs(eqs(res.x))) < 1e-9:
            if best is None or res.fun < best.fun:
                best = res
    return best


def test_demo_symmetric_solution(demo_net):
    res = design_operating_point(SetpointProblem(demo_net))
    assert res.converged and res.residual <= 1e-8
    # identical DGs on a symmetric network keep identical references
    assert np.ptp(res.V_r[:, 0]) < 1e-12 and np.ptp(res.V_r[:, 1]) < 1e-12
    assert 0 <= res.P_s <= 1 and 0 <= res.Q_s <= 1
    rP, rQ = power_sharing_residual(demo_net, res.V_r, res.P_s, res.Q_s)
    assert max(np.abs(rP).max(), np.abs(rQ).max()) <= 1e-8


def test_asymmetric_matches_slsqp_oracle():
    prob = SetpointProblem(asymmetric_net())
    res = design_operating_point(prob)
    assert res.converged
    ref = slsqp_oracle(prob)
    assert ref is not None
    assert res.objective <= ref.fun * (1 + 1e-6) + 1e-12
    np.testing.assert_allclose(res.V_r.reshape(-1), ref.x[:4], atol=1e-5)
    mags = np.linalg.norm(res.V_r, axis=1)
    assert np.all(mags >= prob.V_min - 1e-12) and np.all(mags <= prob.V_max + 1e-12)


def symmetric_pair():
    dgs = [make_dg("A"), make_dg("B")]
    loads = [LoadParams("m", 2e-5, 0.1, DqValue(0.01, -0.04))]
    lines = [LineParams("a", 2.0, 5e-3, "A", "m"), LineParams("b", 2.0, 5e-3, "B", "m")]
    return MgNetwork(dgs=dgs, loads=loads, lines=lines)


def test_pin_q_keeps_zero_angle():
    net = symmetric_pair()
    res = design_operating_point(SetpointProblem(net, pin_q=True))
    np.testing.assert_array_equal(res.V_r[:, 1], 0.0)
    assert res.residual <= 1e-8


def test_symmetric_pair_against_grid_search():
    """Brute force over real references ``(v1, v2)``: the cheapest grid
    point with (nearly) proportional sharing sits on the diagonal next to
    the returned solution."""
    net = symmetric_pair()
    desired = np.array([[1.03, 0.0], [0.97, 0.0]])
    prob = SetpointProblem(net, V_r_desired=desired, pin_q=True)
    res = design_operating_point(prob)
    G, h = injection_map(net)
    grid = np.linspace(prob.V_min, prob.V_max, 401)
    step = grid[1] - grid[0]
    v1, v2 = np.meshgrid(grid, grid, indexing="ij")
    Vc = np.stack([v1.ravel(), v2.ravel()]).astype(complex)  # (2, K)
    S = Vc * np.conj(G @ Vc + h[:, None])
    gap = np.maximum(np.abs(S.real[0] / net.P_max[0] - S.real[1] / net.P_max[1]),
                     np.abs(S.imag[0] / net.Q_max[0] - S.imag[1] / net.Q_max[1]))
    obj = (Vc.real[0] - desired[0, 0]) ** 2 + (Vc.real[1] - desired[1, 0]) ** 2
    obj[gap > 1e-4] = np.inf
    k = int(np.argmin(obj))
    best = None if not np.isfinite(obj[k]) else np.array([[Vc.real[0, k], 0.0], [Vc.real[1, k], 0.0]])
    assert best is not None
    assert abs(best[0, 0] - best[1, 0]) <= 2 * step
    np.testing.assert_allclose(res.V_r[:, 0], best[:, 0], atol=2 * step)
    assert abs(res.V_r[0, 0] - res.V_r[1, 0]) < 1e-10


def test_zero_injection_network_shares_nothing():
    net = MgNetwork(dgs=[make_dg("A")])
    res = design_operating_point(SetpointProblem(net, V_r_desired=[[1.0, 0.0]]))
    assert res.P_s == pytest.approx(0.0, abs=1e-12) and res.Q_s == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(res.V_r, [[1.0, 0.0]], atol=1e-9)
    rP, rQ = power_sharing_residual(net, [[1.0, 0.0]], 0.3, 0.2)
    np.testing.assert_allclose(rP, -net.P_max * 0.3)
    np.testing.assert_allclose(rQ, -net.Q_max * 0.2)


@settings(max_examples=10, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_residual_affine_in_sharing_coefficients(p1, q1, p2, q2):
    net = asymmetric_net()
    V = [[1.0, 0.0], [0.99, 0.01]]
    a = power_sharing_residual(net, V, p1, q1)
    b = power_sharing_residual(net, V, p2, q2)
    m = power_sharing_residual(net, V, 0.5 * (p1 + p2), 0.5 * (q1 + q2))
    np.testing.assert_allclose(m[0], 0.5 * (a[0] + b[0]), atol=1e-15)
    np.testing.assert_allclose(m[1], 0.5 * (a[1] + b[1]), atol=1e-15)


def test_power_weights_reduce_sharing_fraction():
    base = design_operating_point(SetpointProblem(asymmetric_net()))
    pushed = design_operating_point(SetpointProblem(asymmetric_net(), alpha_P=1e-3))
    assert pushed.P_s <= base.P_s + 1e-9


def test_unreachable_sharing_raises():
    """Tight magnitude bounds around very different line impedances leave no
    reference with proportional sharing."""
    dgs = [make_dg("A", P_max=0.01, Q_max=0.01), make_dg("B", P_max=1.0, Q_max=1.0)]
    loads = [LoadParams("m", 2e-5, 0.5, DqValue(0.2, -0.2))]
    lines = [LineParams("a", 0.1, 1e-3, "A", "m"), LineParams("b", 0.1, 1e-3, "B", "m")]
    net = MgNetwork(dgs=dgs, loads=loads, lines=lines)
    with pytest.raises(SetpointError) as err:
        design_operating_point(SetpointProblem(net, V_min=0.999, V_max=1.001, max_iter=10))
    assert err.value.best is not None


def test_problem_validation(demo_net):
    with pytest.raises(ValueError):
        SetpointProblem(demo_net, V_min=1.2, V_max=1.1)
    with pytest.raises(ValueError):
        SetpointProblem(demo_net, alpha_V=0.0)
    with pytest.raises(ValueError):
        SetpointProblem(demo_net, alpha_P=-1.0)
    with pytest.raises(ValueError):
        SetpointProblem(demo_net, V_r_desired=np.tile([1.0, 0.1], (3, 1)), pin_q=True)
    p = SetpointProblem(demo_net, V_r_desired=[DqValue(1.0, 0.0)] * 3)
    assert p.V_min == pytest.approx(0.9) and p.V_max == pytest.approx(1.1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_power_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = asymmetric_net()
    G, h = injection_map(net)
    V = np.column_stack([rng.uniform(0.9, 1.1, 2), rng.uniform(-0.1, 0.1, 2)])
    P, Q, JP, JQ = delivered_power(G, h, V)
    step = 1e-6
    for k in range(4):
        dV = np.zeros(4)
        dV[k] = step
        Pp, Qp, _, _ = delivered_power(G, h, V + dV.reshape(2, 2))
        Pm, Qm, _, _ = delivered_power(G, h, V - dV.reshape(2, 2))
        np.testing.assert_allclose((Pp - Pm) / (2 * step), JP[:, k], atol=1e-8)
        np.testing.assert_allclose((Qp - Qm) / (2 * step), JQ[:, k], atol=1e-8)


def test_injection_map_reproduces_equilibrium():
    from mgcodesign.dqnet import to_complex
    from mgcodesign.equilibrium import solve_network_equilibrium

    net = asymmetric_net()
    G, h = injection_map(net)
    V = np.array([[1.02, 0.01], [0.98, -0.02]])
    eq = solve_network_equilibrium(net, V)
    np.testing.assert_allclose(G @ to_complex(V) + h, to_complex(eq.I_inj), atol=1e-13)
