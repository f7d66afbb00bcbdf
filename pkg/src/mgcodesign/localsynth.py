"""Per-subsystem passivity: DG voltage controllers, line and load certificates.

Supply rates are of the input-feedforward / output-feedback passive type

    s(u, y) = u' X12 y * 2 - sum_k nu_k |u_k|^2 - rho |y|^2,

written as ``X = [[X11, X12], [X12', X22]]`` with ``X11 = -diag(nu)``,
``X22 = -rho I``.  A DG port carries 12 inputs ``[u_P, u_Q, u_Omega, xi_d,
xi_q, w(7)]`` and 4 outputs ``[V~_d, V~_q, P~, Q~]``.  The coupling inputs
(first five) share the index ``nu`` while the seven disturbance inputs get
their own index ``nu_w``.  Line and load ports follow the same split.

DG synthesis works on a diagonally balanced state coordinate system and
maps the certificate back, which keeps the conic solve well conditioned for
SI-scale parameters.  The returned certificate is always re-checked in the
original coordinates by direct substitution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .dqnet import (
    DgParams,
    LineParams,
    LoadParams,
    assemble_dg_matrices,
    assemble_line_matrices,
    assemble_load_matrices,
    real_block,
)
from .equilibrium import EquilibriumPoint
from .sdp import SdpProblem, min_eig_sym, solve_sdp

__all__ = [
    "PassivityCert",
    "LocalGains",
    "DgPlant",
    "SynthesisError",
    "DG_INPUTS",
    "DG_COUPLING",
    "dg_pairing",
    "line_pairing",
    "load_pairing",
    "build_error_output_matrices",
    "dg_plant",
    "dg_dissipativity_matrix",
    "check_dg_certificate",
    "synthesize_local_controller",
    "verify_dg_dissipativity",
    "refine_output_index",
    "DgVerification",
    "line_lmi",
    "load_lmi",
    "line_passivity",
    "load_passivity",
    "maximize_line_rho",
    "maximize_load_rho",
    "line_port_lmi",
    "load_port_lmi",
    "line_port_certificate",
    "load_port_certificate",
]

DG_INPUTS = 12
DG_COUPLING = 5  # u_P, u_Q, u_Omega, xi_d, xi_q
DG_OUTPUTS = 4
# storage blocks in PI-structured mode: (V, v) together, I_t, w~
_PI_BLOCKS = ((0, 1, 4, 5), (2, 3), (6,))


class SynthesisError(RuntimeError):
    """An LMI was infeasible or its solution failed the substitution check."""

    def __init__(self, message, subsystem: str = "", details: Optional[dict] = None):
        super().__init__(message)
        self.subsystem = subsystem
        self.details = details or {}


@dataclass
class PassivityCert:
    """IF-OFP certificate of one subsystem.

    ``nu`` indexes the coupling inputs and ``nu_w`` the disturbance inputs
    (``None`` for a certificate of the coupling port only).  ``lmi_residual``
    is the smallest eigenvalue of the certifying matrix written as ``>= 0``.
    """

    kind: str
    nu: float
    rho: float
    P: np.ndarray
    nu_w: Optional[float] = None
    lam: Optional[float] = None
    lmi_residual: float = float("nan")

    def input_indices(self, n_coupling: int, n_dist: int) -> np.ndarray:
        nw = self.nu if self.nu_w is None else self.nu_w
        return np.concatenate([np.full(n_coupling, self.nu), np.full(n_dist, nw)])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "nu": self.nu, "nu_w": self.nu_w, "rho": self.rho,
            "lam": self.lam, "lmi_residual": self.lmi_residual,
            "P": np.asarray(self.P).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PassivityCert":
        return cls(kind=d["kind"], nu=float(d["nu"]), rho=float(d["rho"]),
                   P=np.asarray(d["P"], dtype=float),
                   nu_w=None if d.get("nu_w") is None else float(d["nu_w"]),
                   lam=None if d.get("lam") is None else float(d["lam"]),
                   lmi_residual=float(d.get("lmi_residual", float("nan"))))


@dataclass
class LocalGains:
    """Local feedback ``u_L = K0 (x - x_E)``.  In PI-structured mode
    ``K0 = [K_P, 0, K_I, 0]``; in full mode every column may be nonzero."""

    K0: np.ndarray

    @property
    def K_P(self) -> np.ndarray:
        return self.K0[:, 0:2]

    @property
    def K_I(self) -> np.ndarray:
        return self.K0[:, 4:6]

    @classmethod
    def from_pi(cls, K_P, K_I) -> "LocalGains":
        K0 = np.zeros((2, 7))
        K0[:, 0:2] = K_P
        K0[:, 4:6] = K_I
        return cls(K0)

    def is_pi_structured(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.K0[:, 2:4]) <= tol) and np.all(np.abs(self.K0[:, 6]) <= tol))


# --------------------------------------------------------------------------
# supply-rate pairings
# --------------------------------------------------------------------------

def dg_pairing() -> np.ndarray:
    """12x4 pairing ``J`` with ``X12 = J / 2``.

    Consensus inputs pair with the power outputs, and the line current
    drawn from the DG pairs with its voltage with a minus sign (the current
    leaves the DG).
    """
    J = np.zeros((DG_INPUTS, DG_OUTPUTS))
    J[0, 2] = J[1, 3] = 1.0
    J[3, 0] = J[4, 1] = -1.0
    return J


def line_pairing() -> np.ndarray:
    """6x2 pairing of ``[u_from_DG(2), u_from_load(2), w(2)]`` with the
    line current."""
    return np.vstack([np.eye(2), np.eye(2), np.zeros((2, 2))])


def load_pairing() -> np.ndarray:
    """4x2 pairing of ``[incidence-weighted line current(2), w(2)]`` with the
    load voltage; the current input counts current *leaving* the bus."""
    return np.vstack([-np.eye(2), np.zeros((2, 2))])


# --------------------------------------------------------------------------
# DG model pieces
# --------------------------------------------------------------------------

def build_error_output_matrices(eq: EquilibriumPoint, i: int):
    """Linearised output ``y~ = C_y x~ + D_y eta~`` of DG ``i``.

    ``y~ = [V~_d, V~_q, P~, Q~]``; the power rows come from differentiating
    ``P = V.I`` and ``Q = V_q I_d - V_d I_q`` at the equilibrium.
    """
    Vd, Vq = eq.V_E[i]
    Id, Iq = eq.I_inj[i]
    C = np.zeros((4, 7))
    C[0, 0] = C[1, 1] = 1.0
    C[2, 0:2] = [Id, Iq]
    C[3, 0:2] = [-Iq, Id]
    D = np.zeros((4, DG_INPUTS))
    D[2, 3:5] = [Vd, Vq]
    D[3, 3:5] = [Vq, -Vd]
    return C, D


@dataclass
class DgPlant:
    """Matrices of the DG error system used by synthesis and verification."""

    A_bar: np.ndarray  # 7x7, includes the linear part of the frequency coupling
    B_bar: np.ndarray  # 7x2, voltage command channel
    B_hat: np.ndarray  # 7x12, [B, F, E]
    C: np.ndarray      # 4x7
    D: np.ndarray      # 4x12
    E_g: np.ndarray    # 7x4, nonlinearity channel
    beta: float
    e7: np.ndarray = field(default_factory=lambda: np.eye(7)[:, 6])


def dg_plant(dg: DgParams, eq: EquilibriumPoint, i: int, omega0: float,
             beta: Optional[float] = None) -> DgPlant:
    """Assemble the error-system matrices of DG ``i`` around ``eq``.

    The rotation term ``-1j*w~*x`` splits into a part linear in ``w~``
    (``g_bar e7'``, ``g_bar`` built from the equilibrium) and a remainder
    that only acts on the first four states and obeys
    ``|g| <= beta |w~|``.
    """
    A, B, E, F = assemble_dg_matrices(dg, omega0)
    rot = real_block(-1j)
    g_bar = np.zeros(7)
    g_bar[0:2] = rot @ eq.V_E[i]
    g_bar[2:4] = rot @ eq.I_tE[i]
    A_bar = A + np.outer(g_bar, np.eye(7)[6])
    C, D = build_error_output_matrices(eq, i)
    return DgPlant(
        A_bar=A_bar, B_bar=B[:, :2], B_hat=np.hstack([B, F, E]), C=C, D=D,
        E_g=np.eye(7)[:, :4], beta=float(eq.beta[i] if beta is None else beta),
    )


def _x11(nu: float, nu_w: float) -> np.ndarray:
    return -np.diag(np.r_[np.full(DG_COUPLING, nu), np.full(DG_INPUTS - DG_COUPLING, nu_w)])


def dg_dissipativity_matrix(plant: DgPlant, K0, P, lam, nu, nu_w, rho) -> np.ndarray:
    """Matrix ``W`` over ``[eta, x, phi]`` whose negative semidefiniteness
    certifies ``V' <= s(eta, y)`` for ``V = x'Px`` on the region where the
    nonlinearity bound holds (S-procedure multiplier ``lam``)."""
    A_cl = plant.A_bar + plant.B_bar @ np.asarray(K0)
    X12 = 0.5 * dg_pairing()
    C, D, Bh, Eg = plant.C, plant.D, plant.B_hat, plant.E_g
    e7 = plant.e7.reshape(-1, 1)
    H = lambda M: M + M.T
    ee = -_x11(nu, nu_w) - H(X12 @ D) + rho * D.T @ D
    ex = Bh.T @ P - X12 @ C + rho * D.T @ C
    xx = H(P @ A_cl) + rho * C.T @ C + lam * plant.beta**2 * (e7 @ e7.T)
    xp = P @ Eg
    W = np.block([
        [ee, ex, np.zeros((DG_INPUTS, 4))],
        [ex.T, xx, xp],
        [np.zeros((4, DG_INPUTS)), xp.T, -lam * np.eye(4)],
    ])
    return (W + W.T) / 2


def check_dg_certificate(plant: DgPlant, K0, cert: PassivityCert) -> float:
    """Margin ``min_eig(-W)`` of a certificate, by direct substitution."""
    W = dg_dissipativity_matrix(plant, K0, cert.P, cert.lam, cert.nu, cert.nu_w, cert.rho)
    return min_eig_sym(-W, sym_tol=1e-9)


def _balancing(A: np.ndarray) -> np.ndarray:
    """Diagonal scaling ``T`` such that ``T^-1 A T`` is balanced."""
    _, (scale, _) = sla.matrix_balance(A, permute=False, separate=True)
    return np.diag(scale)


def _structure_masks(mode: str, blocks=None):
    """Sparsity masks of ``(Y, Z)`` for a synthesis mode (``None`` = dense).

    With ``Y`` block diagonal and ``Z`` supported on the columns of the
    ``(V, v)`` block, ``K0 = Z Y^-1`` vanishes on the ``I_t`` and ``w~``
    columns, which is exactly the PI structure.
    """
    if mode == "full":
        return None, None
    if mode != "pi-structured":
        raise ValueError(f"unknown synthesis mode {mode!r}")
    ymask = np.zeros((7, 7), dtype=bool)
    for blk in (blocks or _PI_BLOCKS):
        ymask[np.ix_(blk, blk)] = True
    zmask = np.zeros((2, 7), dtype=bool)
    zmask[:, list(_PI_BLOCKS[0])] = True
    return ymask, zmask


def _synthesis_problem(plant: DgPlant, T: np.ndarray, nu_max: float, nu_w_max: float,
                       eps: float, decay: float, mode: str) -> SdpProblem:
    Ti = np.linalg.inv(T)
    As, Bs, Bhs = Ti @ plant.A_bar, Ti @ plant.B_bar, Ti @ plant.B_hat
    As = As @ T
    Cs, Egs = plant.C @ T, Ti @ plant.E_g
    cs = (plant.e7 @ T).reshape(1, -1)
    D, beta = plant.D, plant.beta
    X12 = 0.5 * dg_pairing()
    nz = DG_INPUTS - DG_COUPLING

    p = SdpProblem(eps=eps, name="dg-synthesis")
    ymask, zmask = _structure_masks(mode)
    p.matrix("Y", (7, 7), symmetric=True, mask=ymask)
    p.matrix("Z", (2, 7), mask=zmask)
    for name in ("mu", "nu", "nu_w", "rho_t"):
        p.scalar(name)

    def big(v, o):
        Y, Z = v["Y"], v["Z"]
        G = As @ Y + Bs @ Z
        N11 = o.diag(o.hstack([v["nu"] * np.ones(DG_COUPLING), v["nu_w"] * np.ones(nz)]))
        XD = X12 @ D
        r_ex = Bhs.T - X12 @ Cs @ Y
        M = o.bmat([
            [N11 - XD - XD.T, r_ex, np.zeros((DG_INPUTS, 4)), D.T, np.zeros((DG_INPUTS, 1))],
            [r_ex.T, G + G.T, v["mu"] * Egs, Y @ Cs.T, beta * Y @ cs.T],
            [np.zeros((4, DG_INPUTS)), v["mu"] * Egs.T, -v["mu"] * np.eye(4), np.zeros((4, 4)), np.zeros((4, 1))],
            [D, Cs @ Y, np.zeros((4, 4)), -v["rho_t"] * np.eye(4), np.zeros((4, 1))],
            [np.zeros((1, DG_INPUTS)), beta * cs @ Y, np.zeros((1, 4)), np.zeros((1, 4)), -v["mu"] * np.eye(1)],
        ])
        return -M

    p.add_lmi("dissipativity", big)
    p.add_lmi("storage", lambda v, o: v["Y"])
    if decay > 0:
        p.add_lmi("decay", lambda v, o: -(As @ v["Y"] + Bs @ v["Z"] + (As @ v["Y"] + Bs @ v["Z"]).T
                                          + 2 * decay * v["Y"]), margin=0.0)
    p.add_nonneg("scalars", lambda v, o: o.hstack([v["mu"], -v["nu"], -v["nu_w"], v["rho_t"]]), margin=eps)
    p.add_nonneg("nu_bounds", lambda v, o: o.hstack([v["nu"] + nu_max, v["nu_w"] + nu_w_max]))
    p.minimize(lambda v, o: v["rho_t"])
    return p


def synthesize_local_controller(dg: DgParams, eq: EquilibriumPoint, i: int, omega0: float,
                                beta: Optional[float] = None, eps: float = 1e-6,
                                nu_max: float = 1.0, nu_w_max: float = 100.0,
                                decay: float = 10.0, mode: str = "full",
                                tol: float = 1e-7, name: Optional[str] = None,
                                refine: bool = True):
    """Synthesize ``K0`` and an IF-OFP certificate for DG ``i``.

    The output index ``rho`` is maximised subject to ``-nu_max <= nu < 0``
    and ``-nu_w_max <= nu_w < 0``.  ``decay`` adds ``A_cl' P + P A_cl <=
    -2 decay P`` so the closed loop keeps a stability margin.  With
    ``refine`` the reported ``rho`` is then raised to the largest value the
    recovered gain supports (minus a 0.1% backoff).

    Returns
    -------
    gains : LocalGains
    cert : PassivityCert
        Verified by direct substitution in the original coordinates.

    Raises
    ------
    SynthesisError
        Infeasible LMI, failed substitution check or non-Hurwitz loop.
    """
    label = name or dg.id
    plant = dg_plant(dg, eq, i, omega0, beta)
    T = _balancing(plant.A_bar)
    prob = _synthesis_problem(plant, T, nu_max, nu_w_max, eps, decay, mode)
    sol = solve_sdp(prob)
    if not sol.ok:
        raise SynthesisError(
            f"DG {label}: local synthesis {sol.status} (beta={plant.beta:.4g}); "
            "consider a smaller operating region or a larger nu bound",
            subsystem=label, details={"status": sol.status, **sol.diagnostics})
    v = sol.values
    Ti = np.linalg.inv(T)
    Yinv = np.linalg.inv(v["Y"])
    K0 = v["Z"] @ Yinv @ Ti
    P = Ti.T @ Yinv @ Ti
    P = (P + P.T) / 2
    cert = PassivityCert(kind="dg", nu=float(v["nu"]), nu_w=float(v["nu_w"]),
                         rho=1.0 / float(v["rho_t"]), P=P, lam=1.0 / float(v["mu"]))
    cert.lmi_residual = check_dg_certificate(plant, K0, cert)
    abscissa = float(np.max(np.linalg.eigvals(plant.A_bar + plant.B_bar @ K0).real))
    if cert.lmi_residual < -tol:
        raise SynthesisError(f"DG {label}: certificate fails substitution check "
                             f"(margin {cert.lmi_residual:.3e})", subsystem=label)
    if abscissa >= 0:
        raise SynthesisError(f"DG {label}: closed loop not Hurwitz (abscissa {abscissa:.3e})",
                             subsystem=label)
    if mode == "pi-structured":
        K0[:, 2:4] = 0.0
        K0[:, 6] = 0.0
    if refine:
        # the synthesis objective is loose at the recovered gain; push rho to
        # the largest value this K0 supports and re-certify
        rho_star = refine_output_index(plant, K0, cert.nu, cert.nu_w)
        if rho_star is not None and rho_star > cert.rho:
            ver = verify_dg_dissipativity(dg, eq, i, omega0, K0, cert.nu, rho_star,
                                          beta=plant.beta, nu_w=cert.nu_w, tol=tol)
            if ver.passed:
                cert = ver.cert
    return LocalGains(K0), cert


@dataclass
class DgVerification:
    passed: bool
    margin: float
    cert: Optional[PassivityCert]
    status: str


def _fixed_gain_problem(plant: DgPlant, T: np.ndarray, K0: np.ndarray, nu: float,
                        nu_w: float, rho: Optional[float]) -> SdpProblem:
    """Storage search at a fixed gain in balanced coordinates.

    With ``rho`` given the problem maximises the margin ``t`` in
    ``-W >= t I``; with ``rho=None`` it maximises ``rho`` itself subject to
    ``-W >= 0``.  ``W`` transforms by the congruence ``diag(I, T, I)`` under
    ``P = T^-T Ps T^-1``.
    """
    Ti = np.linalg.inv(T)
    As = Ti @ (plant.A_bar + plant.B_bar @ K0) @ T
    Bhs = Ti @ plant.B_hat
    Cs = plant.C @ T
    Egs = Ti @ plant.E_g
    cs = (plant.e7 @ T).reshape(-1, 1)
    X12 = 0.5 * dg_pairing()
    D = plant.D
    XD = X12 @ D
    n = DG_INPUTS + 11

    p = SdpProblem(eps=0.0, name="dg-verification" if rho is not None else "dg-rho")
    p.matrix("Ps", (7, 7), symmetric=True)
    p.scalar("lam")
    p.scalar("t" if rho is not None else "rho")

    def neg_w(v, o):
        Ps, lam = v["Ps"], v["lam"]
        r = rho if rho is not None else v["rho"]
        ee = -_x11(nu, nu_w) - XD - XD.T + r * (D.T @ D)
        ex = Bhs.T @ Ps - X12 @ Cs + r * (D.T @ Cs)
        xx = Ps @ As + As.T @ Ps + r * (Cs.T @ Cs) + plant.beta**2 * lam * (cs @ cs.T)
        xp = Ps @ Egs
        W = o.bmat([[ee, ex, np.zeros((DG_INPUTS, 4))],
                    [ex.T, xx, xp],
                    [np.zeros((4, DG_INPUTS)), xp.T, -lam * np.eye(4)]])
        return -W - v["t"] * np.eye(n) if rho is not None else -W

    p.add_lmi("dissipativity", neg_w, margin=0.0)
    p.add_lmi("storage", lambda v, o: v["Ps"], margin=0.0)
    if rho is not None:
        p.add_nonneg("lam", lambda v, o: o.hstack([v["lam"], 1.0 - v["t"]]))
        p.maximize(lambda v, o: v["t"])
    else:
        p.add_nonneg("lam", lambda v, o: o.hstack([v["lam"], v["rho"]]))
        p.maximize(lambda v, o: v["rho"])
    return p


def refine_output_index(plant: DgPlant, K0, nu: float, nu_w: float,
                        backoff: float = 1e-3) -> Optional[float]:
    """Largest ``rho`` certifiable for the fixed gain ``K0`` and indices
    ``(nu, nu_w)``, shrunk by the relative ``backoff``; ``None`` if the
    search fails."""
    T = _balancing(plant.A_bar)
    sol = solve_sdp(_fixed_gain_problem(plant, T, np.asarray(K0, dtype=float), nu, nu_w, None),
                    tol_psd=1e-9)
    if not sol.ok:
        return None
    return float(sol.values["rho"]) * (1.0 - backoff)


def verify_dg_dissipativity(dg: DgParams, eq: EquilibriumPoint, i: int, omega0: float,
                            K0, nu: float, rho: float, beta: Optional[float] = None,
                            nu_w: Optional[float] = None, tol: float = 1e-7) -> DgVerification:
    """Check whether the fixed gain ``K0`` achieves IF-OFP(``nu``, ``rho``).

    Searches only over the storage matrix ``P`` and the S-procedure
    multiplier ``lam``.  The search maximises the margin ``t`` in
    ``-W(P, lam) >= t I``; the pair is certified when the margin of the
    returned point, re-evaluated in the original coordinates, is at least
    ``-tol``.
    """
    nu_w = nu if nu_w is None else nu_w
    plant = dg_plant(dg, eq, i, omega0, beta)
    T = _balancing(plant.A_bar)
    Ti = np.linalg.inv(T)
    K0 = np.asarray(K0, dtype=float)
    sol = solve_sdp(_fixed_gain_problem(plant, T, K0, nu, nu_w, rho), tol_psd=1e-9)
    if not sol.ok:
        return DgVerification(False, float("-inf"), None, sol.status)
    Ps, lam = sol.values["Ps"], float(sol.values["lam"])
    P = Ti.T @ Ps @ Ti
    P = (P + P.T) / 2
    cert = PassivityCert(kind="dg", nu=nu, nu_w=nu_w, rho=rho, P=P, lam=lam)
    margin = check_dg_certificate(plant, K0, cert)
    cert.lmi_residual = margin
    pos = min_eig_sym(P, sym_tol=1e-9) > 0
    return DgVerification(bool(margin >= -tol and pos and lam >= 0), margin, cert, sol.status)


# --------------------------------------------------------------------------
# lines and loads
# --------------------------------------------------------------------------

def line_lmi(line: LineParams, omega0: float, nu, rho, P):
    """Coupling-port certificate matrix of a line (must be PSD)."""
    A, B = assemble_line_matrices(line, omega0)
    return _two_port(A, B, 0.5 * np.eye(2), nu, rho, P)


def load_lmi(load: LoadParams, omega0: float, nu, rho, P):
    """Coupling-port certificate matrix of a load (must be PSD)."""
    A, B = assemble_load_matrices(load, omega0)
    return _two_port(A, B, -0.5 * np.eye(2), nu, rho, P)


def _two_port(A, B, X12, nu, rho, P, o=None):
    if o is None:
        P = np.asarray(P, dtype=float)
        M = np.block([[-(P @ A + A.T @ P) - rho * np.eye(2), -P @ B + X12],
                      [(-P @ B + X12).T, -nu * np.eye(2)]])
        return (M + M.T) / 2
    off = -P @ B + X12
    return o.bmat([[-(P @ A + A.T @ P) - rho * np.eye(2), off], [off.T, -nu * np.eye(2)]])


def line_passivity(line: LineParams, omega0: float) -> PassivityCert:
    """Analytic certificate ``(nu, rho, P) = (0, R, L/2 I)`` of a line."""
    P = 0.5 * line.L * np.eye(2)
    res = min_eig_sym(line_lmi(line, omega0, 0.0, line.R, P))
    return PassivityCert(kind="line", nu=0.0, rho=line.R, P=P, lmi_residual=res)


def load_passivity(load: LoadParams, omega0: float) -> PassivityCert:
    """Analytic certificate ``(nu, rho, P) = (0, Y_L, C_t/2 I)`` of a load."""
    P = 0.5 * load.C_t * np.eye(2)
    res = min_eig_sym(load_lmi(load, omega0, 0.0, load.Y_L, P))
    return PassivityCert(kind="load", nu=0.0, rho=load.Y_L, P=P, lmi_residual=res)


def _maximize_rho(A, B, X12):
    # the input index is held at its largest feasible value 0; letting it go
    # negative trades input shortage for a larger output index
    p = SdpProblem(eps=0.0, name="two-port-rho")
    p.matrix("P", (2, 2), symmetric=True)
    p.scalar("rho")
    p.add_lmi("port", lambda v, o: _two_port(A, B, X12, 0.0, v["rho"], v["P"], o))
    p.add_lmi("storage", lambda v, o: v["P"])
    p.maximize(lambda v, o: v["rho"])
    return solve_sdp(p, tol_psd=1e-9)


def maximize_line_rho(line: LineParams, omega0: float):
    """Numerically maximise ``rho`` over the line port LMI at ``nu = 0``."""
    A, B = assemble_line_matrices(line, omega0)
    return _maximize_rho(A, B, 0.5 * np.eye(2))


def maximize_load_rho(load: LoadParams, omega0: float):
    """Numerically maximise ``rho`` over the load port LMI at ``nu = 0``."""
    A, B = assemble_load_matrices(load, omega0)
    return _maximize_rho(A, B, -0.5 * np.eye(2))


def _full_port(A, Bh, J, nu_vec, rho, P):
    P = np.asarray(P, dtype=float)
    off = -P @ Bh + 0.5 * J.T
    M = np.block([[-(P @ A + A.T @ P) - rho * np.eye(2), off],
                  [off.T, -np.diag(nu_vec)]])
    return (M + M.T) / 2


def line_port_lmi(line: LineParams, omega0: float, cert: PassivityCert) -> np.ndarray:
    """Certificate matrix for the line port including its disturbance."""
    A, B = assemble_line_matrices(line, omega0)
    Bh = np.hstack([B, B, np.eye(2) / line.L])
    return _full_port(A, Bh, line_pairing(), cert.input_indices(4, 2), cert.rho, cert.P)


def load_port_lmi(load: LoadParams, omega0: float, cert: PassivityCert) -> np.ndarray:
    """Certificate matrix for the load port including its disturbance."""
    A, B = assemble_load_matrices(load, omega0)
    Bh = np.hstack([B, B])
    return _full_port(A, Bh, load_pairing(), cert.input_indices(2, 2), cert.rho, cert.P)


def _port_indices(gap: float, kappa: float, rho: float):
    # coupling index gets the kappa margin; the disturbance index is the
    # smallest magnitude making the 2x2 minor nonnegative, plus 1%
    return -kappa * rho, -1.01 / (4.0 * gap)


def line_port_certificate(line: LineParams, omega0: float, kappa: float = 0.01,
                          rho_fraction: float = 0.5) -> PassivityCert:
    """Line certificate with strictly negative input indices.

    ``rho = rho_fraction * R`` leaves room for a finite disturbance index;
    ``P = L/2 I`` as for the coupling port.
    """
    rho = rho_fraction * line.R
    nu, nu_w = _port_indices(line.R - rho, kappa, rho)
    cert = PassivityCert(kind="line", nu=nu, nu_w=nu_w, rho=rho, P=0.5 * line.L * np.eye(2))
    cert.lmi_residual = min_eig_sym(line_port_lmi(line, omega0, cert))
    return cert


def load_port_certificate(load: LoadParams, omega0: float, kappa: float = 0.01,
                          rho_fraction: float = 0.5) -> PassivityCert:
    """Load counterpart of :func:`line_port_certificate`."""
    rho = rho_fraction * load.Y_L
    nu, nu_w = _port_indices(load.Y_L - rho, kappa, rho)
    cert = PassivityCert(kind="load", nu=nu, nu_w=nu_w, rho=rho, P=0.5 * load.C_t * np.eye(2))
    cert.lmi_residual = min_eig_sym(load_port_lmi(load, omega0, cert))
    return cert
