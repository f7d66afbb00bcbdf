"""Nonlinear closed-loop simulation and verification metrics.

All quantities live in the common ``omega0`` frame.  Each DG carries its
frequency error ``w~`` as a state and the rotation ``-1j*w~`` acts on its
PCC voltage and filter current, which is the only nonlinearity of the
physical model.  The controllers are

* ``u_V = u_S + K0 (x - x_E) + [u_P, u_Q]`` on the VSC voltage command,
* ``u_Omega`` on the frequency state,
* ``[u_P, u_Q, u_Omega]_i = sum_j K^_ij [P_j, Q_j]`` from the consensus gains.

Integration is classical fixed-step RK4.  Inputs (load steps, reference
steps, disturbances, held consensus signals) are constant over each step.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .codesign import DistributedGains
from .dqnet import (
    MgNetwork,
    assemble_dg_matrices,
    assemble_line_matrices,
    assemble_load_matrices,
    build_incidence,
)
from .equilibrium import EquilibriumPoint, dg_states
from .localsynth import PassivityCert, build_error_output_matrices, dg_pairing, dg_plant

__all__ = [
    "SimulationError",
    "LoadStep",
    "ReferenceStep",
    "Scenario",
    "SimTrace",
    "ClosedLoop",
    "simulate",
    "band_limited_noise",
    "metrics",
    "performance_output",
    "storage_balance",
    "export_csv",
]

DIVERGENCE_NORM = 1e6


class SimulationError(ArithmeticError):
    """The state norm exceeded the divergence bound."""

    def __init__(self, message, t: float = float("nan")):
        super().__init__(message)
        self.t = t


@dataclass(frozen=True)
class LoadStep:
    """At ``time`` the constant-current part of load ``load`` (index) becomes
    ``I_L_bar`` (absolute dq value)."""

    time: float
    load: int
    I_L_bar: tuple


@dataclass(frozen=True)
class ReferenceStep:
    """At ``time`` the voltage reference of DG ``dg`` becomes ``V_r``."""

    time: float
    dg: int
    V_r: tuple


@dataclass
class Scenario:
    """Simulation settings.

    ``x0`` defaults to the equilibrium.  Noise is seeded white noise through
    a first-order low-pass at ``noise_cutoff`` Hz, rescaled so every channel
    has RMS ``noise_rms`` over ``[0, noise_t_end)``.  ``consensus_period``
    switches the consensus law to a zero-order hold at that period.
    """

    t_end: float = 1.0
    dt: float = 2e-5
    x0: Optional[np.ndarray] = None
    load_steps: Sequence[LoadStep] = ()
    reference_steps: Sequence[ReferenceStep] = ()
    noise_rms: float = 0.0
    noise_t_end: Optional[float] = None
    noise_cutoff: float = 1000.0
    seed: int = 0
    consensus_period: Optional[float] = None

    def __post_init__(self):
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        if not self.t_end >= self.dt:
            raise ValueError("t_end must be at least dt")
        if self.noise_rms < 0:
            raise ValueError("noise_rms must be non-negative")

    @property
    def n_steps(self) -> int:
        return int(np.floor(self.t_end / self.dt + 1e-9))


@dataclass
class SimTrace:
    """Uniformly sampled trajectory (one sample per step).

    ``x`` is ``(K, n)`` with the DG states first (7 per DG), then line
    currents and load voltages.  ``u_L`` is the local feedback part of the
    voltage command, ``u_D`` the consensus signals ``[u_P, u_Q, u_Omega]``,
    ``xi`` the current injected by each DG, ``w`` the disturbance held over
    the step starting at each sample.
    """

    t: np.ndarray
    x: np.ndarray
    u_L: np.ndarray
    u_D: np.ndarray
    xi: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    w: np.ndarray
    net: MgNetwork = field(repr=False)
    dt: float = 0.0

    @property
    def P_norm(self) -> np.ndarray:
        return self.P / self.net.P_max

    @property
    def Q_norm(self) -> np.ndarray:
        return self.Q / self.net.Q_max

    def dg_block(self, i: int) -> np.ndarray:
        return self.x[:, 7 * i:7 * i + 7]

    def column_names(self) -> list:
        names = []
        for dg in self.net.dgs:
            names += [f"{dg.id}.{s}" for s in ("Vd", "Vq", "Itd", "Itq", "vd", "vq", "w")]
        for ln in self.net.lines:
            names += [f"{ln.id}.Id", f"{ln.id}.Iq"]
        for ld in self.net.loads:
            names += [f"{ld.id}.Vd", f"{ld.id}.Vq"]
        for dg in self.net.dgs:
            names += [f"{dg.id}.{s}" for s in ("uLd", "uLq", "uP", "uQ", "uOmega", "P", "Q",
                                               "P_norm", "Q_norm")]
        return names

    def table(self) -> np.ndarray:
        N = self.net.N
        cols = [self.t[:, None], self.x]
        for i in range(N):
            cols += [self.u_L[:, i], self.u_D[:, i], self.P[:, i:i + 1], self.Q[:, i:i + 1],
                     self.P_norm[:, i:i + 1], self.Q_norm[:, i:i + 1]]
        return np.hstack(cols)


class ClosedLoop:
    """Pre-assembled closed-loop vector field.

    Parameters
    ----------
    net : MgNetwork
    eq : EquilibriumPoint
    K0 : sequence of (2, 7) arrays
        Local gains per DG.
    gains : DistributedGains, optional
        Consensus gains; ``None`` disables communication.
    """

    def __init__(self, net: MgNetwork, eq: EquilibriumPoint, K0: Sequence[np.ndarray],
                 gains: Optional[DistributedGains] = None):
        self.net, self.eq = net, eq
        N, L, M = net.N, net.L, net.M
        self.N, self.L, self.M = N, L, M
        self.n = 7 * N + 2 * L + 2 * M
        self.n_w = 7 * N + 2 * L + 2 * M
        self.K0 = [np.asarray(k, dtype=float).reshape(2, 7) for k in K0]
        if len(self.K0) != N:
            raise ValueError("need one local gain per DG")
        _, Bd, Bl = build_incidence(net)
        self.Bd, self.Bl = Bd, Bl
        w0 = net.omega0
        n = self.n
        A = np.zeros((n, n))
        Ew = np.zeros((n, self.n_w))
        ol, om = 7 * N, 7 * N + 2 * L
        self._L_t = np.array([dg.L_t for dg in net.dgs])
        self._tau = np.array([dg.tau for dg in net.dgs])
        self._B = []
        xE = dg_states(eq)
        self.x_E = np.concatenate([xE.reshape(-1), eq.I_E.reshape(-1), eq.V_check_E.reshape(-1)])
        for i, dg in enumerate(net.dgs):
            Ai, Bi, Ei, Fi = assemble_dg_matrices(dg, w0)
            s = slice(7 * i, 7 * i + 7)
            A[s, s] = Ai + Bi[:, :2] @ self.K0[i]
            for l in range(L):
                A[s, ol + 2 * l:ol + 2 * l + 2] += Bd[i, l] * Fi
            Ew[s, 7 * i:7 * i + 7] = Ei
            self._B.append(Bi)
        for l, ln in enumerate(net.lines):
            Al, Bb = assemble_line_matrices(ln, w0)
            s = slice(ol + 2 * l, ol + 2 * l + 2)
            A[s, s] = Al
            for k in range(N):
                A[s, 7 * k:7 * k + 2] += Bd[k, l] * Bb
            for m in range(M):
                A[s, om + 2 * m:om + 2 * m + 2] += Bl[m, l] * Bb
            Ew[s, 7 * N + 2 * l:7 * N + 2 * l + 2] = Bb
        for m, ld in enumerate(net.loads):
            Am, Bc = assemble_load_matrices(ld, w0)
            s = slice(om + 2 * m, om + 2 * m + 2)
            A[s, s] = Am
            for l in range(L):
                A[s, ol + 2 * l:ol + 2 * l + 2] += Bl[m, l] * Bc
            Ew[s, 7 * N + 2 * L + 2 * m:7 * N + 2 * L + 2 * m + 2] = Bc
        self.A, self.Ew = A, Ew
        self.gains = gains
        self.Kc = None if gains is None else gains.consensus_matrix()
        self.iV = np.array([[7 * i, 7 * i + 1] for i in range(N)])
        self.iI = self.iV + 2
        self.iw = np.array([7 * i + 6 for i in range(N)])
        self.il = ol + np.arange(2 * L).reshape(L, 2) if L else np.zeros((0, 2), dtype=int)

    def forcing(self, I_loads: np.ndarray, V_refs: np.ndarray) -> np.ndarray:
        """Constant part of the vector field for given load currents and
        voltage references."""
        b = np.zeros(self.n)
        N, L = self.N, self.L
        om = 7 * N + 2 * L
        for i, dg in enumerate(self.net.dgs):
            Bi = self._B[i]
            _, _, Ei, _ = assemble_dg_matrices(dg, self.net.omega0)
            uS = self.eq.u_S[i]
            xE = self.x_E[7 * i:7 * i + 7]
            wbar = np.array([-dg.I_L_bar.d, -dg.I_L_bar.q, 0.0, 0.0, -V_refs[i, 0], -V_refs[i, 1], 0.0])
            b[7 * i:7 * i + 7] = Bi[:, :2] @ (uS - self.K0[i] @ xE) + Ei @ wbar
        for m, ld in enumerate(self.net.loads):
            _, Bc = assemble_load_matrices(ld, self.net.omega0)
            b[om + 2 * m:om + 2 * m + 2] = Bc @ I_loads[m]
        return b

    def injections(self, x: np.ndarray) -> np.ndarray:
        if self.L == 0:
            return np.zeros((self.N, 2))
        return self.Bd @ x[self.il]

    def powers(self, x: np.ndarray):
        V = x[self.iV]
        xi = self.injections(x)
        P = V[:, 0] * xi[:, 0] + V[:, 1] * xi[:, 1]
        Q = V[:, 1] * xi[:, 0] - V[:, 0] * xi[:, 1]
        return P, Q, xi

    def consensus(self, x: np.ndarray) -> np.ndarray:
        if self.Kc is None:
            return np.zeros((self.N, 3))
        P, Q, _ = self.powers(x)
        return (self.Kc @ np.column_stack([P, Q]).reshape(-1)).reshape(self.N, 3)

    def rhs(self, x: np.ndarray, b: np.ndarray, u_D: Optional[np.ndarray] = None) -> np.ndarray:
        dx = self.A @ x + b
        om = x[self.iw]
        for idx in (self.iV, self.iI):
            dx[idx[:, 0]] += om * x[idx[:, 1]]
            dx[idx[:, 1]] -= om * x[idx[:, 0]]
        uD = self.consensus(x) if u_D is None else u_D
        if self.Kc is not None or u_D is not None:
            dx[self.iI[:, 0]] += uD[:, 0] / self._L_t
            dx[self.iI[:, 1]] += uD[:, 1] / self._L_t
            dx[self.iw] += uD[:, 2] / self._tau
        return dx


def band_limited_noise(rng: np.random.Generator, n_steps: int, n_ch: int, dt: float,
                       rms: float, cutoff: float = 1000.0) -> np.ndarray:
    """White noise through a first-order low-pass, rescaled per channel to
    the requested RMS."""
    if n_steps == 0 or rms == 0:
        return np.zeros((n_steps, n_ch))
    e = rng.standard_normal((n_steps, n_ch))
    a = np.exp(-2.0 * np.pi * cutoff * dt)
    y = np.zeros_like(e)
    acc = np.zeros(n_ch)
    for k in range(n_steps):
        acc = a * acc + (1.0 - a) * e[k]
        y[k] = acc
    y -= y.mean(axis=0)
    r = np.sqrt(np.mean(y**2, axis=0))
    r[r == 0] = 1.0
    return y * (rms / r)


def _stiffness_check(net: MgNetwork, dt: float):
    L_min = min([dg.L_t for dg in net.dgs] + [ln.L for ln in net.lines])
    R_max = max([dg.R_t for dg in net.dgs] + [ln.R for ln in net.lines])
    if dt > L_min / R_max:
        warnings.warn(f"dt={dt:g} exceeds L_min/R_max={L_min / R_max:g}; RK4 may be inaccurate",
                      RuntimeWarning, stacklevel=3)


def simulate(net: MgNetwork, eq: EquilibriumPoint, K0: Sequence[np.ndarray],
             gains: Optional[DistributedGains], scenario: Scenario) -> SimTrace:
    """Integrate the closed loop with fixed-step RK4.

    Raises
    ------
    SimulationError
        The state norm exceeded ``1e6``; the message carries the time.
    """
    _stiffness_check(net, scenario.dt)
    cl = ClosedLoop(net, eq, K0, gains)
    dt = scenario.dt
    K = scenario.n_steps
    x = cl.x_E.copy() if scenario.x0 is None else np.asarray(scenario.x0, dtype=float).copy()
    if x.shape != (cl.n,):
        raise ValueError(f"x0 must have length {cl.n}")

    I_loads = np.array([ld.I_L_bar.to_array() for ld in net.loads]).reshape(-1, 2)
    V_refs = eq.V_E.copy()
    events = sorted([(s.time, 0, s) for s in scenario.load_steps]
                    + [(s.time, 1, s) for s in scenario.reference_steps], key=lambda e: e[:2])

    rng = np.random.default_rng(scenario.seed)
    t_noise = scenario.t_end if scenario.noise_t_end is None else scenario.noise_t_end
    k_noise = min(K, int(np.floor(t_noise / dt + 1e-9)))
    noise = band_limited_noise(rng, k_noise, cl.n_w, dt, scenario.noise_rms, scenario.noise_cutoff)

    t = dt * np.arange(K + 1)
    xs = np.empty((K + 1, cl.n))
    wk = np.zeros((K + 1, cl.n_w))
    wk[:k_noise] = noise
    uD_hist = np.empty((K + 1, net.N, 3))
    hold_every = None
    if scenario.consensus_period is not None:
        hold_every = max(1, int(round(scenario.consensus_period / dt)))

    b = cl.forcing(I_loads, V_refs)
    ev = 0
    uD_held = cl.consensus(x)
    for k in range(K + 1):
        while ev < len(events) and events[ev][0] <= t[k] + 0.5 * dt:
            _, kind, step = events[ev]
            if kind == 0:
                I_loads[step.load] = np.asarray(step.I_L_bar, dtype=float)
            else:
                V_refs[step.dg] = np.asarray(step.V_r, dtype=float)
            b = cl.forcing(I_loads, V_refs)
            ev += 1
        xs[k] = x
        if hold_every is not None and k % hold_every == 0:
            uD_held = cl.consensus(x)
        uD_hist[k] = uD_held if hold_every is not None else cl.consensus(x)
        if k == K:
            break
        bk = b + cl.Ew @ wk[k]
        u = uD_held if hold_every is not None else None
        k1 = cl.rhs(x, bk, u)
        k2 = cl.rhs(x + 0.5 * dt * k1, bk, u)
        k3 = cl.rhs(x + 0.5 * dt * k2, bk, u)
        k4 = cl.rhs(x + dt * k3, bk, u)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        nrm = float(np.max(np.abs(x)))
        if not np.isfinite(nrm) or nrm > DIVERGENCE_NORM:
            raise SimulationError(f"state diverged at t={t[k + 1]:.6g} s", t=float(t[k + 1]))

    P = np.empty((K + 1, net.N))
    Q = np.empty((K + 1, net.N))
    xi = np.empty((K + 1, net.N, 2))
    uL = np.empty((K + 1, net.N, 2))
    xE = cl.x_E
    for k in range(K + 1):
        P[k], Q[k], xi[k] = cl.powers(xs[k])
        for i in range(net.N):
            s = slice(7 * i, 7 * i + 7)
            uL[k, i] = cl.K0[i] @ (xs[k, s] - xE[s])
    return SimTrace(t=t, x=xs, u_L=uL, u_D=uD_hist, xi=xi, P=P, Q=Q, w=wk, net=net, dt=dt)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _trapz(y: np.ndarray, dt: float) -> float:
    if len(y) < 2:
        return 0.0
    return float(dt * (np.sum(y) - 0.5 * (y[0] + y[-1])))


def performance_output(trace: SimTrace, eq: EquilibriumPoint) -> np.ndarray:
    """Error outputs ``z = y~`` of every subsystem, shape ``(K, n_y)``.

    DG power rows use the linearisation ``C x~ + D xi~`` of the error model,
    which is what the design certifies."""
    net = trace.net
    cols = []
    for i in range(net.N):
        C, D = build_error_output_matrices(eq, i)
        xt = trace.dg_block(i) - np.r_[eq.V_E[i], eq.I_tE[i], 0.0, 0.0, 0.0]
        eta = np.zeros((len(trace.t), 12))
        eta[:, 3:5] = trace.xi[:, i] - eq.I_inj[i]
        cols.append(xt @ C.T + eta @ D.T)
    ol = 7 * net.N
    for l in range(net.L):
        cols.append(trace.x[:, ol + 2 * l:ol + 2 * l + 2] - eq.I_E[l])
    om = ol + 2 * net.L
    for m in range(net.M):
        cols.append(trace.x[:, om + 2 * m:om + 2 * m + 2] - eq.V_check_E[m])
    return np.hstack(cols)


def metrics(trace: SimTrace, eq: EquilibriumPoint, gamma_designed: Optional[float] = None,
            final_fraction: float = 0.2) -> dict:
    """Voltage regulation, frequency synchronisation, sharing dispersion and
    empirical L2 gain of a trace.

    ``l2_gain`` is ``None`` when the trace carries no disturbance energy.
    """
    net = trace.net
    N = net.N
    K = len(trace.t)
    k0 = int(np.floor((1.0 - final_fraction) * (K - 1)))
    dV = np.stack([np.linalg.norm(trace.dg_block(i)[:, 0:2] - eq.V_E[i], axis=1)
                   for i in range(N)], axis=1)
    V_ref = np.linalg.norm(eq.V_E, axis=1)
    omega = np.stack([trace.dg_block(i)[:, 6] for i in range(N)], axis=1)
    Pn, Qn = trace.P_norm, trace.Q_norm
    disp_P = float(np.max(Pn[k0:].max(axis=1) - Pn[k0:].min(axis=1))) if N > 1 else 0.0
    disp_Q = float(np.max(Qn[k0:].max(axis=1) - Qn[k0:].min(axis=1))) if N > 1 else 0.0
    dev = np.max(np.abs(trace.x - trace.x[0]), axis=0)
    scale = max(1.0, float(np.max(np.abs(trace.x[0]))))

    w_energy = float(trace.dt * np.sum(np.sum(trace.w[:-1] ** 2, axis=1)))
    z = performance_output(trace, eq)
    z_energy = _trapz(np.sum(z**2, axis=1), trace.dt)
    gain = float(np.sqrt(z_energy / w_energy)) if w_energy > 0 else None
    out = {
        "voltage_max": float(dV.max()),
        "voltage_rms": float(np.sqrt(np.mean(dV**2))),
        "voltage_final_rel": float(np.max(dV[k0:] / V_ref)),
        "frequency_final_max": float(np.max(np.abs(omega[k0:]))),
        "sharing_dispersion_P": disp_P,
        "sharing_dispersion_Q": disp_Q,
        "drift_rel": float(np.max(dev) / scale),
        "w_energy": w_energy,
        "z_energy": z_energy,
        "l2_gain": gain,
        "gamma_designed": gamma_designed,
    }
    if gamma_designed is not None and gain is not None:
        out["l2_within_design"] = bool(gain <= gamma_designed)
    return out


def storage_balance(trace: SimTrace, eq: EquilibriumPoint, i: int, cert: PassivityCert,
                    beta: Optional[float] = None) -> float:
    """``int s(eta~, y~) dt - (V(T) - V(0))`` for DG ``i`` along the trace.

    ``V = x~' P x~`` with the certificate's storage matrix and ``s`` its
    supply rate.  Nonnegative (up to integration error) whenever the
    certificate is valid on the visited region.
    """
    net = trace.net
    plant = dg_plant(net.dgs[i], eq, i, net.omega0, beta)
    xE = np.r_[eq.V_E[i], eq.I_tE[i], 0.0, 0.0, 0.0]
    xt = trace.dg_block(i) - xE
    K = len(trace.t)
    eta = np.zeros((K, 12))
    eta[:, 0:3] = trace.u_D[:, i]
    eta[:, 3:5] = trace.xi[:, i] - eq.I_inj[i]
    eta[:, 5:12] = trace.w[:, 7 * i:7 * i + 7]
    y = xt @ plant.C.T + eta @ plant.D.T
    nu_vec = cert.input_indices(5, 7)
    X12 = 0.5 * dg_pairing()
    s = (-np.sum(nu_vec * eta**2, axis=1) + 2.0 * np.sum((eta @ X12) * y, axis=1)
         - cert.rho * np.sum(y**2, axis=1))
    # the input is held over each step, so integrate the supply with the
    # left-point rule for the input and trapezoid for the state
    V = np.einsum("ki,ij,kj->k", xt, cert.P, xt)
    return _trapz(s, trace.dt) - float(V[-1] - V[0])


def export_csv(trace: SimTrace, path, metadata: Optional[dict] = None, every: int = 1):
    """Write the trace as CSV plus a ``.json`` sidecar with ``metadata``."""
    path = Path(path)
    names = ["time"] + trace.column_names()
    data = trace.table()[::max(1, int(every))]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(names)
        for row in data:
            wr.writerow([repr(float(v)) for v in row])
    if metadata is not None:
        with open(path.with_suffix(".json"), "w") as fh:
            json.dump(metadata, fh, indent=2, sort_keys=True)
    return path
