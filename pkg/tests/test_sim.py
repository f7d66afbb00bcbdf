import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgcodesign.dqnet import LineParams, LoadParams, DqValue, assemble_line_matrices, assemble_load_matrices
from mgcodesign.sim import (
    ClosedLoop,
    LoadStep,
    Scenario,
    SimulationError,
    band_limited_noise,
    export_csv,
    metrics,
    performance_output,
    simulate,
    storage_balance,
)


def _run(d, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        return simulate(d.net, d.eq, d.K0, d.gains, Scenario(**kw))


def _perturbed_x0(d, scale=1e-2, seed=0):
    cl = ClosedLoop(d.net, d.eq, d.K0, d.gains)
    rng = np.random.default_rng(seed)
    return cl.x_E + scale * rng.standard_normal(cl.n)


def test_equilibrium_is_held(demo_design):
    tr = _run(demo_design, t_end=0.05)
    m = metrics(tr, demo_design.eq)
    assert m["drift_rel"] <= 1e-6
    assert m["l2_gain"] is None and m["w_energy"] == 0.0


@pytest.mark.parametrize("t_end, dt", [(0.01, 2e-5), (0.0101, 2e-5), (1e-3, 1e-4)])
def test_sample_count(demo_design, t_end, dt):
    tr = _run(demo_design, t_end=t_end, dt=dt)
    K = int(np.floor(t_end / dt + 1e-9))
    assert len(tr.t) == K + 1 and tr.x.shape[0] == K + 1
    np.testing.assert_allclose(np.diff(tr.t), dt, rtol=1e-12)
    assert tr.t[0] == 0.0


def test_runs_are_deterministic(demo_design):
    kw = dict(t_end=0.01, noise_rms=1e-3, seed=11)
    a, b = _run(demo_design, **kw), _run(demo_design, **kw)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.w, b.w)
    c = _run(demo_design, t_end=0.01, noise_rms=1e-3, seed=12)
    assert not np.array_equal(a.w, c.w)


def test_rk4_convergence_order(demo_design):
    d = demo_design
    x0 = _perturbed_x0(d)
    # the fastest closed-loop pole is about 2.5e4 rad/s; steps from 1e-5 s
    # down are in the asymptotic regime
    T = 2e-3
    ref = _run(d, t_end=T, dt=T / 3200, x0=x0).x[-1]
    errs = [np.max(np.abs(_run(d, t_end=T, dt=dt, x0=x0).x[-1] - ref)) for dt in (T / 200, T / 400, T / 800)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 3.5), (errs, orders)


@settings(max_examples=30)
@given(st.floats(0.01, 5.0), st.floats(1e-4, 1e-2), st.floats(10.0, 400.0),
       st.tuples(*[st.floats(-10, 10)] * 4))
def test_line_and_load_energy_balance(R, L, w0, vals):
    """``d/dt (L|I|^2/2) = -R|I|^2 + I.dV``: the frame rotation does no work."""
    I, v = np.array(vals[:2]), np.array(vals[2:])
    A, B = assemble_line_matrices(LineParams("l", R, L, "a", "b"), w0)
    assert L * I @ (A @ I + B @ v) == pytest.approx(-R * I @ I + I @ v, rel=1e-9, abs=1e-9)
    A, B = assemble_load_matrices(LoadParams("m", L, R, DqValue(0.0)), w0)
    assert L * I @ (A @ I + B @ v) == pytest.approx(-R * I @ I - I @ v, rel=1e-9, abs=1e-9)


def test_storage_balance_along_perturbed_trajectory(demo_design):
    d = demo_design
    tr = _run(d, t_end=0.02, x0=_perturbed_x0(d, 1e-3, seed=3), noise_rms=1e-4, seed=2)
    for i, cert in enumerate(d.dg_certs):
        assert storage_balance(tr, d.eq, i, cert) >= -1e-5


def test_noise_gain_below_design_bound(demo_design):
    d = demo_design
    tr = _run(d, t_end=0.1, noise_rms=1e-3, noise_t_end=0.06, seed=5)
    m = metrics(tr, d.eq, gamma_designed=d.result.gamma)
    assert m["l2_gain"] is not None and m["l2_within_design"]
    z = performance_output(tr, d.eq)
    assert z.shape == (len(tr.t), d.prob.layout.n_y)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-4, 1.0), st.integers(10, 400))
def test_noise_has_requested_rms(seed, rms, n):
    w = band_limited_noise(np.random.default_rng(seed), n, 3, 2e-5, rms)
    np.testing.assert_allclose(np.sqrt(np.mean(w**2, axis=0)), rms, rtol=1e-9)
    np.testing.assert_allclose(w.mean(axis=0), 0.0, atol=1e-12 * rms * n)
    assert band_limited_noise(np.random.default_rng(seed), n, 3, 2e-5, 0.0).max() == 0.0


def test_divergence_is_reported(demo_design):
    d = demo_design
    bad = [k + 5e3 * np.eye(2, 7) for k in d.K0]
    with pytest.raises(SimulationError) as err:
        simulate(d.net, d.eq, bad, None, Scenario(t_end=0.5))
    assert 0 < err.value.t <= 0.5
    assert "diverged" in str(err.value)


def test_stiffness_warning(demo_design):
    d = demo_design
    with pytest.warns(RuntimeWarning, match="L_min/R_max"):
        simulate(d.net, d.eq, d.K0, None, Scenario(t_end=2e-2, dt=1e-2))


def test_load_step_applies_at_its_time(demo_design):
    d = demo_design
    step = LoadStep(time=0.004, load=0, I_L_bar=(0.05, -0.02))
    tr = _run(d, t_end=0.01, load_steps=[step])
    k = int(round(0.004 / tr.dt))
    assert np.max(np.abs(tr.x[:k] - tr.x[0])) <= 1e-9
    assert np.max(np.abs(tr.x[-1] - tr.x[0])) > 1e-6


def test_sampled_consensus_is_held(demo_design):
    d = demo_design
    tr = _run(d, t_end=0.004, x0=_perturbed_x0(d, 1e-3), consensus_period=1e-3)
    hold = int(round(1e-3 / tr.dt))
    for start in range(0, len(tr.t) - 1, hold):
        block = tr.u_D[start:start + hold]
        np.testing.assert_array_equal(block, np.broadcast_to(block[0], block.shape))


def test_csv_export_round_trip(demo_design, tmp_path):
    tr = _run(demo_design, t_end=1e-3)
    path = export_csv(tr, tmp_path / "trace.csv", metadata={"seed": 7})
    header = path.read_text().splitlines()[0].split(",")
    assert header[0] == "time" and len(header) == tr.table().shape[1]
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data, tr.table())
    assert json.loads(path.with_suffix(".json").read_text()) == {"seed": 7}


def test_scenario_validation(demo_design):
    with pytest.raises(ValueError):
        Scenario(dt=0.0)
    with pytest.raises(ValueError):
        Scenario(t_end=1e-6, dt=1e-5)
    with pytest.raises(ValueError):
        Scenario(noise_rms=-1.0)
    d = demo_design
    with pytest.raises(ValueError):
        simulate(d.net, d.eq, d.K0, None, Scenario(t_end=1e-3, x0=np.zeros(3)))
