"""Operating point of the microgrid under a fixed voltage reference.

At equilibrium the frequency error and the integrator states vanish, every
PCC voltage equals its reference, and the line/load phasors follow from a
complex linear solve.  Loads are eliminated first (Schur complement on the
load block) so the solve is only over line currents.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dqnet import (
    MgNetwork,
    assemble_dg_matrices,
    assemble_line_matrices,
    assemble_load_matrices,
    build_incidence,
    real_block,
    stack_dq,
    to_complex,
    to_real,
)

__all__ = [
    "EquilibriumError",
    "EquilibriumPoint",
    "solve_network_equilibrium",
    "steady_state_control",
    "frequency_coupling_bound",
    "default_region_radii",
    "equilibrium_residual",
    "dg_states",
]

_COND_LIMIT = 1e12


class EquilibriumError(ArithmeticError):
    """The reduced network system is singular or too ill conditioned."""


@dataclass(frozen=True)
class EquilibriumPoint:
    """All equilibrium quantities, as ``(n, 2)`` dq arrays.

    Attributes
    ----------
    V_E, I_tE, u_S, I_inj : (N, 2)
        PCC voltage, filter current, steady-state VSC command and net
        current injected into the lines, per DG.
    I_E : (L, 2)
        Line currents.
    V_check_E : (M, 2)
        Load bus voltages.
    P_E, Q_E : (N,)
        Power delivered by each DG to the network.
    omega_tilde_E : (N,)
        Always zero.
    beta : (N,)
        Bound of the frequency coupling nonlinearity.
    V_bar, I_bar : float
        Operating-region radii used for ``beta``.
    """

    V_E: np.ndarray
    I_tE: np.ndarray
    I_E: np.ndarray
    V_check_E: np.ndarray
    u_S: np.ndarray
    I_inj: np.ndarray
    P_E: np.ndarray
    Q_E: np.ndarray
    omega_tilde_E: np.ndarray
    beta: np.ndarray
    V_bar: float
    I_bar: float
    condition: float = 1.0

    @property
    def V_r(self) -> np.ndarray:
        return self.V_E

    def to_dict(self) -> dict:
        out = {}
        for name in ("V_E", "I_tE", "I_E", "V_check_E", "u_S", "I_inj", "P_E", "Q_E",
                     "omega_tilde_E", "beta"):
            out[name] = np.asarray(getattr(self, name)).tolist()
        out["V_bar"] = float(self.V_bar)
        out["I_bar"] = float(self.I_bar)
        out["condition"] = float(self.condition)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EquilibriumPoint":
        kw = {}
        for name in ("V_E", "I_tE", "I_E", "V_check_E", "u_S", "I_inj"):
            kw[name] = np.asarray(data[name], dtype=float).reshape(-1, 2)
        for name in ("P_E", "Q_E", "omega_tilde_E", "beta"):
            kw[name] = np.asarray(data[name], dtype=float).reshape(-1)
        return cls(V_bar=float(data["V_bar"]), I_bar=float(data["I_bar"]),
                   condition=float(data.get("condition", 1.0)), **kw)


def _as_dq_array(V_r, n: int) -> np.ndarray:
    if len(V_r) and hasattr(V_r[0], "d"):
        arr = stack_dq(V_r)
    else:
        arr = np.asarray(V_r, dtype=float).reshape(-1, 2)
    if arr.shape != (n, 2):
        raise ValueError(f"expected {n} reference voltages, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("reference voltages must be finite")
    return arr


def default_region_radii(V_r: np.ndarray, I_tE: np.ndarray):
    """Default operating-region radii: 20% of the largest reference
    magnitude and half of the largest filter current magnitude."""
    v = 0.2 * float(np.max(np.linalg.norm(V_r, axis=1)))
    i = 0.5 * float(np.max(np.linalg.norm(I_tE, axis=1)))
    # keep both radii strictly positive for a zero-current network
    return (v if v > 0 else 1.0), (i if i > 0 else max(v, 1.0) * 1e-3)


def solve_network_equilibrium(net: MgNetwork, V_r, V_bar=None, I_bar=None) -> EquilibriumPoint:
    """Solve the coupled DG / line / load equilibrium for references ``V_r``.

    Parameters
    ----------
    net : MgNetwork
    V_r : sequence of DqValue or array_like (N, 2)
        PCC voltage references.
    V_bar, I_bar : float, optional
        Operating-region radii for ``beta``; defaults from
        :func:`default_region_radii`.
    """
    w0 = net.omega0
    Vr = to_complex(_as_dq_array(V_r, net.N))
    _, B_D, B_L = build_incidence(net)
    cond = 1.0
    if net.L:
        Z = np.array([ln.impedance(w0) for ln in net.lines])
        rhs = B_D.T @ Vr
        reduced = np.diag(Z).astype(complex)
        if net.M:
            Yc = np.array([ld.admittance(w0) for ld in net.loads])
            Ic = to_complex(stack_dq([ld.I_L_bar for ld in net.loads]))
            reduced = reduced + B_L.T @ np.diag(1.0 / Yc) @ B_L
            rhs = rhs - B_L.T @ (Ic / Yc)
        # scale rows by 1/Z so the matrix is identity plus load coupling
        reduced = reduced / Z[:, None]
        rhs = rhs / Z
        cond = float(np.linalg.cond(reduced))
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise EquilibriumError(f"reduced network system is near singular (cond ~ {cond:.3e})")
        I_E = np.linalg.solve(reduced, rhs)
        if net.M:
            Vm = -(Ic + B_L @ I_E) / Yc
        else:
            Vm = np.zeros(0, dtype=complex)
    else:
        I_E = np.zeros(0, dtype=complex)
        if net.M:
            # a load without lines would be disconnected; MgNetwork forbids it
            raise EquilibriumError("loads present but no lines")
        Vm = np.zeros(0, dtype=complex)

    I_inj = B_D @ I_E if net.L else np.zeros(net.N, dtype=complex)
    Ysh = np.array([dg.shunt_admittance(w0) for dg in net.dgs])
    IL = to_complex(stack_dq([dg.I_L_bar for dg in net.dgs]))
    I_tE = Ysh * Vr + IL + I_inj
    Zt = np.array([dg.filter_impedance(w0) for dg in net.dgs])
    u_E = Vr + Zt * I_tE
    S = Vr * np.conj(I_inj)

    V_E = to_real(Vr)
    I_tE_r = to_real(I_tE)
    vb, ib = default_region_radii(V_E, I_tE_r)
    V_bar = vb if V_bar is None else float(V_bar)
    I_bar = ib if I_bar is None else float(I_bar)
    beta = frequency_coupling_bound(V_E, I_tE_r, V_bar, I_bar)
    return EquilibriumPoint(
        V_E=V_E,
        I_tE=I_tE_r,
        I_E=to_real(I_E).reshape(-1, 2),
        V_check_E=to_real(Vm).reshape(-1, 2),
        u_S=to_real(u_E),
        I_inj=to_real(I_inj),
        P_E=S.real.copy(),
        Q_E=S.imag.copy(),
        omega_tilde_E=np.zeros(net.N),
        beta=beta,
        V_bar=V_bar,
        I_bar=I_bar,
        condition=cond,
    )


def steady_state_control(eq: EquilibriumPoint, net: MgNetwork) -> np.ndarray:
    """``u_S = V_r + Z_t I_tE`` per DG, expanded through real 2x2 blocks."""
    out = np.zeros((net.N, 2))
    for i, dg in enumerate(net.dgs):
        out[i] = eq.V_E[i] + real_block(dg.filter_impedance(net.omega0)) @ eq.I_tE[i]
    return out


def frequency_coupling_bound(V_E, I_tE, V_bar: float, I_bar: float) -> np.ndarray:
    """Per-DG bound ``beta`` with ``||g(x)|| <= beta |w~|`` on the region
    ``||V - V_E|| <= V_bar``, ``||I_t - I_tE|| <= I_bar``."""
    if not (V_bar > 0 and I_bar > 0):
        raise ValueError("operating-region radii must be positive")
    V_E = np.asarray(V_E, dtype=float).reshape(-1, 2)
    I_tE = np.asarray(I_tE, dtype=float).reshape(-1, 2)
    v_tot = V_bar + np.linalg.norm(V_E, axis=1)
    i_tot = I_bar + np.linalg.norm(I_tE, axis=1)
    return np.sqrt(v_tot**2 + i_tot**2)


def dg_states(eq: EquilibriumPoint) -> np.ndarray:
    """Equilibrium DG state vectors, shape ``(N, 7)``."""
    N = eq.V_E.shape[0]
    x = np.zeros((N, 7))
    x[:, 0:2] = eq.V_E
    x[:, 2:4] = eq.I_tE
    return x


def equilibrium_residual(net: MgNetwork, eq: EquilibriumPoint, V_r=None) -> dict:
    """Norms of every dynamic equation evaluated at ``eq``.

    The check uses the real state-space matrices, so it is independent of
    the complex solve used to produce ``eq``.  Keys: ``dg_voltage``,
    ``dg_current``, ``integrator``, ``frequency``, ``line``, ``load``.
    """
    V_ref = eq.V_E if V_r is None else _as_dq_array(V_r, net.N)
    _, B_D, B_L = build_incidence(net)
    w0 = net.omega0
    res = {k: 0.0 for k in ("dg_voltage", "dg_current", "integrator", "frequency", "line", "load")}
    xs = dg_states(eq)
    for i, dg in enumerate(net.dgs):
        A, B, E, F = assemble_dg_matrices(dg, w0)
        x = xs[i].copy()
        x[6] = eq.omega_tilde_E[i]
        u = np.array([eq.u_S[i, 0], eq.u_S[i, 1], 0.0])
        wbar = np.array([-dg.I_L_bar.d, -dg.I_L_bar.q, 0.0, 0.0, -V_ref[i, 0], -V_ref[i, 1], 0.0])
        xi = eq.I_inj[i] if net.L == 0 else B_D[i] @ eq.I_E
        dx = A @ x + B @ u + E @ wbar + F @ xi
        res["dg_voltage"] = max(res["dg_voltage"], float(np.linalg.norm(dx[0:2])))
        res["dg_current"] = max(res["dg_current"], float(np.linalg.norm(dx[2:4])))
        res["integrator"] = max(res["integrator"], float(np.linalg.norm(dx[4:6])))
        res["frequency"] = max(res["frequency"], float(abs(dx[6])))
    for l, ln in enumerate(net.lines):
        A, Bb = assemble_line_matrices(ln, w0)
        drive = B_D[:, l] @ eq.V_E + (B_L[:, l] @ eq.V_check_E if net.M else 0.0)
        dI = A @ eq.I_E[l] + Bb @ drive
        res["line"] = max(res["line"], float(np.linalg.norm(dI)))
    for m, ld in enumerate(net.loads):
        A, Bc = assemble_load_matrices(ld, w0)
        inj = B_L[m] @ eq.I_E
        dV = A @ eq.V_check_E[m] + Bc @ (inj + ld.I_L_bar.to_array())
        res["load"] = max(res["load"], float(np.linalg.norm(dV)))
    return res
