import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgcodesign.dqnet import (
    DqValue,
    LineParams,
    LoadParams,
    MgNetwork,
    NetworkError,
    assemble_dg_matrices,
    assemble_line_matrices,
    assemble_load_matrices,
    build_incidence,
    real_block,
    stack_dq,
    to_complex,
    to_real,
)

from conftest import make_dg, random_network

finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(finite, finite, finite, finite)
def test_real_block_is_a_ring_homomorphism(a, b, c, d):
    z, w = complex(a, b), complex(c, d)
    np.testing.assert_allclose(real_block(z) @ real_block(w), real_block(z * w), atol=1e-6 * (1 + abs(z * w)))
    np.testing.assert_allclose(real_block(z) + real_block(w), real_block(z + w))
    v = np.array([c, d])
    np.testing.assert_allclose(real_block(z) @ v, to_real(z * complex(c, d))[0], atol=1e-9 * (1 + abs(z) * abs(w)))


def test_real_block_of_j():
    np.testing.assert_array_equal(real_block(1j), [[0, -1], [1, 0]])


def test_real_block_rejects_nonfinite():
    with pytest.raises(ValueError):
        real_block(complex(np.inf, 0))


@given(st.lists(st.tuples(finite, finite), min_size=0, max_size=6))
def test_complex_real_round_trip(pairs):
    a = np.array(pairs, dtype=float).reshape(-1, 2)
    np.testing.assert_array_equal(to_real(to_complex(a)).reshape(-1, 2), a)


def test_dq_value_helpers():
    v = DqValue(3.0, 4.0)
    assert v.norm == 5.0
    assert DqValue.from_complex(v.to_complex()) == v
    assert DqValue.from_array(v.to_array()) == v
    np.testing.assert_array_equal(stack_dq([v, DqValue(1.0)]), [[3, 4], [1, 0]])
    with pytest.raises(ValueError):
        DqValue(np.nan, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_incidence_columns_sum_to_zero(seed):
    net = random_network(np.random.default_rng(seed))
    B, Bd, Bl = build_incidence(net)
    assert B.shape == (net.N + net.M, net.L)
    np.testing.assert_array_equal(B.sum(axis=0), 0.0)
    np.testing.assert_array_equal(np.abs(B).sum(axis=0), 2.0)
    np.testing.assert_array_equal(np.vstack([Bd, Bl]), B)


def test_incidence_sign_convention():
    net = MgNetwork(dgs=[make_dg("A"), make_dg("B")],
                    lines=[LineParams("l", 1.0, 1e-3, head="A", tail="B")])
    _, Bd, _ = build_incidence(net)
    np.testing.assert_array_equal(Bd[:, 0], [1.0, -1.0])


def test_network_validation():
    a, b = make_dg("A"), make_dg("B")
    with pytest.raises(NetworkError, match="not connected"):
        MgNetwork(dgs=[a, b])
    with pytest.raises(NetworkError, match="unknown endpoint"):
        MgNetwork(dgs=[a, b], lines=[LineParams("l", 1.0, 1e-3, head="A", tail="C")])
    with pytest.raises(NetworkError, match="duplicate"):
        MgNetwork(dgs=[a, make_dg("A")], lines=[LineParams("l", 1.0, 1e-3, head="A", tail="A2")])
    with pytest.raises(NetworkError, match="self-loop"):
        LineParams("l", 1.0, 1e-3, head="A", tail="A")
    with pytest.raises(NetworkError):
        LineParams("l", -1.0, 1e-3, head="A", tail="B")
    with pytest.raises(NetworkError):
        LoadParams("m", C_t=0.0, Y_L=1.0, I_L_bar=DqValue(0.0))
    with pytest.raises(NetworkError):
        make_dg("bad", L_t=0.0)


def test_dg_matrices_match_complex_phasor_model():
    """At steady state in the rotating frame the filter obeys the complex
    phasor relations; the real matrices must reproduce them."""
    dg = make_dg("A", Y_L=0.03)
    w0 = 2 * np.pi * 50
    A, B, E, F = assemble_dg_matrices(dg, w0)
    assert A.shape == (7, 7) and B.shape == (7, 3) and E.shape == (7, 7) and F.shape == (7, 2)
    V, It, xi = 1.0 + 0.1j, 0.2 - 0.05j, 0.03 + 0.01j
    u = V + dg.filter_impedance(w0) * It
    IL = It - dg.shunt_admittance(w0) * V - xi  # local-load current balancing the node
    x = np.r_[to_real(V)[0], to_real(It)[0], 0.0, 0.0, 0.0]
    w = np.r_[-to_real(IL)[0], 0.0, 0.0, 0.0, 0.0, 0.0]
    dx = A @ x + B @ np.r_[to_real(u)[0], 0.0] + E @ w + F @ to_real(xi)[0]
    np.testing.assert_allclose(dx[:4], 0.0, atol=1e-9)


def test_line_and_load_matrices():
    ln = LineParams("l", 2.0, 5e-3, "a", "b")
    A, B = assemble_line_matrices(ln, 100.0)
    np.testing.assert_allclose(A, -400 * np.eye(2) + real_block(-100j))
    np.testing.assert_allclose(B, np.eye(2) / 5e-3)
    ld = LoadParams("m", C_t=1e-3, Y_L=0.5, I_L_bar=DqValue(0.0))
    A, B = assemble_load_matrices(ld, 100.0)
    np.testing.assert_allclose(A, -500 * np.eye(2) + real_block(-100j))
    np.testing.assert_allclose(B, -np.eye(2) / 1e-3)
