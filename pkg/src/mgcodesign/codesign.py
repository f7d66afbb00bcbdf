"""Global co-design of consensus gains and communication topology.

Every subsystem (DG, line, load) comes with an IF-OFP certificate.  With
storage weights ``p`` the networked error system is L2 stable from the
disturbances ``w`` to the performance output ``z = y`` (all subsystem outputs)
when

    [[X11_p, 0,  L ],
     [0,     I,  Ey],
     [L',    Ey', R ]]  >=  eps I,

where ``L = X11_p M_u + S Q T`` is linear in the decision variables,
``R = -Ey' X22_p Ey - He(L' X12_bold Ey) + gamma~ Ew' Ew`` and ``Q`` holds the
row-scaled consensus gains.  ``X12_bold = X11_p^-1 X12_p`` does not depend on
``p`` because every certificate shares one storage weight across its input
and output blocks.

Consensus gains use the pattern ``K^_ij = [[a, 0], [0, b], [c, 0]]`` mapping
``(P~_j, Q~_j)`` into ``(u_P, u_Q, u_Omega)`` of DG ``i``.  Diagonal blocks are
fixed by the balance condition so the consensus inputs vanish whenever the
normalized powers agree.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .dqnet import MgNetwork, build_incidence
from .localsynth import (
    DG_COUPLING,
    DG_INPUTS,
    PassivityCert,
    dg_pairing,
    line_pairing,
    load_pairing,
)
from .sdp import NUMPY_OPS, SdpProblem, min_eig_sym, solve_sdp

__all__ = [
    "CodesignError",
    "Layout",
    "CodesignProblem",
    "DistributedGains",
    "CodesignResult",
    "Interconnection",
    "assemble_interconnection",
    "assemble_global_lmi",
    "solve_codesign",
    "global_lmi_matrix",
    "dissipation_form",
    "extract_topology",
    "reverify",
    "P_MIN",
]

P_MIN = 1e-8
# free entries of a consensus block: (input row, output column) inside the
# DG's 12 inputs and 4 outputs, and which rating scales the balance term
_PATTERN = ((0, 2, "P"), (1, 3, "Q"), (2, 2, "P"))


class CodesignError(RuntimeError):
    """The global LMI is infeasible or its inputs are invalid."""

    def __init__(self, message, details: Optional[dict] = None):
        super().__init__(message)
        self.details = details or {}


@dataclass(frozen=True)
class Layout:
    """Offsets of every subsystem inside the stacked input, output and
    disturbance vectors.

    Inputs: DG ``[u_D(3), xi(2), w(7)]``, line ``[V_from_DGs(2),
    V_from_loads(2), w(2)]``, load ``[I_lines(2), w(2)]``.  Outputs: DG
    ``[V~(2), P~, Q~]``, line current, load voltage.
    """

    N: int
    L: int
    M: int

    @property
    def n_u(self) -> int:
        return 12 * self.N + 6 * self.L + 4 * self.M

    @property
    def n_y(self) -> int:
        return 4 * self.N + 2 * self.L + 2 * self.M

    @property
    def n_w(self) -> int:
        return 7 * self.N + 2 * self.L + 2 * self.M

    def u_dg(self, i):
        return 12 * i

    def u_line(self, l):
        return 12 * self.N + 6 * l

    def u_load(self, m):
        return 12 * self.N + 6 * self.L + 4 * m

    def y_dg(self, i):
        return 4 * i

    def y_line(self, l):
        return 4 * self.N + 2 * l

    def y_load(self, m):
        return 4 * self.N + 2 * self.L + 2 * m

    def w_dg(self, i):
        return 7 * i

    def w_line(self, l):
        return 7 * self.N + 2 * l

    def w_load(self, m):
        return 7 * self.N + 2 * self.L + 2 * m

    @property
    def lmi_size(self) -> int:
        return self.n_u + 2 * self.n_y + self.n_w


@dataclass
class DistributedGains:
    """Consensus gains ``K^_ij`` (``(N, N, 3, 2)``) with the balance-condition
    diagonal, plus the ratings they were balanced against."""

    K_hat: np.ndarray
    P_max: np.ndarray
    Q_max: np.ndarray

    @classmethod
    def from_offdiag(cls, K_off: np.ndarray, P_max, Q_max) -> "DistributedGains":
        """Build from off-diagonal blocks; the diagonal is recomputed."""
        K = np.array(K_off, dtype=float, copy=True)
        N = K.shape[0]
        P_max = np.asarray(P_max, dtype=float)
        Q_max = np.asarray(Q_max, dtype=float)
        for i in range(N):
            K[i, i] = _balance_block(K, i, P_max, Q_max)
        return cls(K, P_max, Q_max)

    @classmethod
    def zeros(cls, N: int, P_max, Q_max) -> "DistributedGains":
        return cls.from_offdiag(np.zeros((N, N, 3, 2)), P_max, Q_max)

    @property
    def N(self) -> int:
        return self.K_hat.shape[0]

    def _physical(self, row: int, col: int, rating: np.ndarray) -> np.ndarray:
        K = -self.K_hat[:, :, row, col] * rating[None, :]
        np.fill_diagonal(K, 0.0)
        return K

    @property
    def K_P(self) -> np.ndarray:
        """``K^P_ij`` for ``u_P,i = sum_j K^P_ij (P_i/P_i^max - P_j/P_j^max)``."""
        return self._physical(0, 0, self.P_max)

    @property
    def K_Q(self) -> np.ndarray:
        return self._physical(1, 1, self.Q_max)

    @property
    def K_Omega(self) -> np.ndarray:
        return self._physical(2, 0, self.P_max)

    def edges(self, tol: float = 0.0) -> list:
        """Directed edges ``(j, i)``: DG ``i`` listens to DG ``j``."""
        out = []
        for i in range(self.N):
            for j in range(self.N):
                if i != j and np.max(np.abs(self.K_hat[i, j])) > tol:
                    out.append((j, i))
        return out

    def balance_residual(self) -> float:
        worst = 0.0
        for i in range(self.N):
            worst = max(worst, float(np.max(np.abs(
                self.K_hat[i, i] - _balance_block(self.K_hat, i, self.P_max, self.Q_max)))))
        return worst

    def consensus_matrix(self) -> np.ndarray:
        """``(3N, 2N)`` map from ``[P_1, Q_1, P_2, ...]`` to
        ``[u_P,1, u_Q,1, u_Omega,1, ...]``."""
        N = self.N
        out = np.zeros((3 * N, 2 * N))
        for i in range(N):
            for j in range(N):
                out[3 * i:3 * i + 3, 2 * j:2 * j + 2] = self.K_hat[i, j]
        return out

    def to_dict(self) -> dict:
        return {"K_hat": self.K_hat.tolist(), "P_max": self.P_max.tolist(),
                "Q_max": self.Q_max.tolist(), "K_P": self.K_P.tolist(),
                "K_Q": self.K_Q.tolist(), "K_Omega": self.K_Omega.tolist(),
                "edges": [list(e) for e in self.edges()]}

    @classmethod
    def from_dict(cls, d: dict) -> "DistributedGains":
        return cls(np.asarray(d["K_hat"], dtype=float), np.asarray(d["P_max"], dtype=float),
                   np.asarray(d["Q_max"], dtype=float))


def _balance_block(K: np.ndarray, i: int, P_max, Q_max) -> np.ndarray:
    out = np.zeros((3, 2))
    for j in range(K.shape[0]):
        if j != i:
            out -= K[i, j] @ np.diag([P_max[j] / P_max[i], Q_max[j] / Q_max[i]])
    # the pattern zeros stay zero
    out[0, 1] = out[1, 0] = out[2, 1] = 0.0
    return out


@dataclass
class Interconnection:
    """Static interconnection ``u = M_u [y; w]`` and ``z = M_z [y; w]``."""

    layout: Layout
    M_u: np.ndarray
    M_z: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return np.vstack([self.M_u, self.M_z])


def _physical_coupling(net: MgNetwork, lay: Layout) -> np.ndarray:
    _, Bd, Bl = build_incidence(net)
    I2 = np.eye(2)
    ny = lay.n_y
    Mu = np.zeros((lay.n_u, ny + lay.n_w))
    for i in range(lay.N):
        r = lay.u_dg(i)
        for l in range(lay.L):
            Mu[r + 3:r + 5, lay.y_line(l):lay.y_line(l) + 2] = Bd[i, l] * I2
        Mu[r + 5:r + 12, ny + lay.w_dg(i):ny + lay.w_dg(i) + 7] = np.eye(7)
    for l in range(lay.L):
        r = lay.u_line(l)
        for k in range(lay.N):
            Mu[r:r + 2, lay.y_dg(k):lay.y_dg(k) + 2] = Bd[k, l] * I2
        for m in range(lay.M):
            Mu[r + 2:r + 4, lay.y_load(m):lay.y_load(m) + 2] = Bl[m, l] * I2
        Mu[r + 4:r + 6, ny + lay.w_line(l):ny + lay.w_line(l) + 2] = I2
    for m in range(lay.M):
        r = lay.u_load(m)
        for l in range(lay.L):
            Mu[r:r + 2, lay.y_line(l):lay.y_line(l) + 2] = Bl[m, l] * I2
        Mu[r + 2:r + 4, ny + lay.w_load(m):ny + lay.w_load(m) + 2] = I2
    return Mu


def assemble_interconnection(net: MgNetwork, gains: Optional[DistributedGains] = None) -> Interconnection:
    """Full static interconnection including the consensus block."""
    lay = Layout(net.N, net.L, net.M)
    Mu = _physical_coupling(net, lay)
    if gains is not None:
        for i in range(lay.N):
            for j in range(lay.N):
                r, c = lay.u_dg(i), lay.y_dg(j)
                Mu[r:r + 3, c + 2:c + 4] += gains.K_hat[i, j]
    Mz = np.hstack([np.eye(lay.n_y), np.zeros((lay.n_y, lay.n_w))])
    return Interconnection(lay, Mu, Mz)


# --------------------------------------------------------------------------
# problem definition
# --------------------------------------------------------------------------

@dataclass
class CodesignProblem:
    """Certificates, weights and bounds of the global LMI.

    ``c`` is either a scalar or an ``(N, N)`` array of edge costs (the
    diagonal is ignored).  ``allowed`` restricts the candidate edges
    ``(j, i)``; ``None`` means every ordered pair.
    """

    net: MgNetwork
    dg_certs: Sequence[PassivityCert]
    line_certs: Sequence[PassivityCert]
    load_certs: Sequence[PassivityCert]
    c: object = 1.0
    c0: Optional[float] = None
    gamma_bar: Optional[float] = None
    eps: float = 1e-6
    allowed: Optional[set] = None

    def __post_init__(self):
        net = self.net
        if len(self.dg_certs) != net.N or len(self.line_certs) != net.L or len(self.load_certs) != net.M:
            raise CodesignError("missing certificate: need one per DG, line and load")
        for cert in list(self.dg_certs) + list(self.line_certs) + list(self.load_certs):
            nus = [cert.nu] + ([] if cert.nu_w is None else [cert.nu_w])
            if any(n >= 0 for n in nus):
                raise CodesignError(
                    f"{cert.kind} certificate has a non-negative input index; the "
                    "global LMI needs strictly negative indices (use a passivity margin)")
            if cert.rho <= 0:
                raise CodesignError(f"{cert.kind} certificate needs rho > 0")
        if self.c0 is None:
            self.c0 = 10.0 * net.N
        C = np.asarray(self.c, dtype=float)
        self.c = np.full((net.N, net.N), float(C)) if C.ndim == 0 else C
        if self.c.shape != (net.N, net.N) or np.any(self.c[~np.eye(net.N, dtype=bool)] <= 0):
            raise CodesignError("edge costs must be positive and of shape (N, N)")
        if self.allowed is None:
            self.allowed = {(j, i) for i in range(net.N) for j in range(net.N) if i != j}

    @property
    def layout(self) -> Layout:
        return Layout(self.net.N, self.net.L, self.net.M)

    def index_vectors(self):
        """Per-subsystem input index vectors, output indices and pairings."""
        nus, rhos, pairs = [], [], []
        for c in self.dg_certs:
            nus.append(c.input_indices(DG_COUPLING, DG_INPUTS - DG_COUPLING))
            rhos.append(c.rho)
            pairs.append(dg_pairing())
        for c in self.line_certs:
            nus.append(c.input_indices(4, 2))
            rhos.append(c.rho)
            pairs.append(line_pairing())
        for c in self.load_certs:
            nus.append(c.input_indices(2, 2))
            rhos.append(c.rho)
            pairs.append(load_pairing())
        return nus, rhos, pairs

    def pairs(self) -> list:
        """Ordered candidate pairs ``(i, j)``: DG ``i`` uses DG ``j``."""
        return sorted((i, j) for (j, i) in self.allowed)


def _q_basis(prob: CodesignProblem):
    """Constant matrices ``G[(i, j, k)]`` such that ``S Q T`` equals
    ``sum q_ij[k] G[(i, j, k)]``, balance terms included."""
    lay = prob.layout
    Pm, Qm = prob.net.P_max, prob.net.Q_max
    basis = {}
    for (i, j) in prob.pairs():
        for k, (r, c, kind) in enumerate(_PATTERN):
            G = np.zeros((lay.n_u, lay.n_y + lay.n_w))
            G[lay.u_dg(i) + r, lay.y_dg(j) + c] = 1.0
            ratio = Pm[j] / Pm[i] if kind == "P" else Qm[j] / Qm[i]
            G[lay.u_dg(i) + r, lay.y_dg(i) + c] -= ratio
            basis[(i, j, k)] = G
    return basis


def _qname(i, j):
    return f"q_{i}_{j}"


def _big(prob: CodesignProblem, v: dict, o, Mu: np.ndarray, basis: dict, X12b: np.ndarray,
         nus, rhos):
    lay = prob.layout
    N, L, M = lay.N, lay.L, lay.M
    ny, nw, nu_ = lay.n_y, lay.n_w, lay.n_u
    weights = [v["p"][i] for i in range(N)]
    weights += [v["p_line"][l] for l in range(L)]
    weights += [v["p_load"][m] for m in range(M)]
    x11 = o.hstack([w * (-nus[k]) for k, w in enumerate(weights)])
    x22 = o.hstack([w * (-rhos[k]) * np.ones(d)
                    for k, (w, d) in enumerate(zip(weights, _out_dims(lay)))])
    X11p = o.diag(x11)
    Lm = X11p @ Mu
    for (i, j) in prob.pairs():
        q = v[_qname(i, j)]
        for k in range(3):
            Lm = Lm + q[k] * basis[(i, j, k)]
    Ey = np.hstack([np.eye(ny), np.zeros((ny, nw))])
    Ew = np.hstack([np.zeros((nw, ny)), np.eye(nw)])
    LX = Lm.T @ X12b @ Ey
    br = -Ey.T @ o.diag(x22) @ Ey - LX - LX.T + v["gamma_t"] * (Ew.T @ Ew)
    big = o.bmat([[X11p, np.zeros((nu_, ny)), Lm],
                  [np.zeros((ny, nu_)), np.eye(ny), Ey],
                  [Lm.T, Ey.T, br]])
    return big


def _out_dims(lay: Layout):
    return [4] * lay.N + [2] * lay.L + [2] * lay.M


def _x12_bold(nus, pairs) -> np.ndarray:
    return sla.block_diag(*[np.diag(-1.0 / nv) @ (0.5 * J) for nv, J in zip(nus, pairs)])


def assemble_global_lmi(prob: CodesignProblem) -> SdpProblem:
    """Build the co-design SDP.

    Decision variables: ``p`` (DG weights), ``p_line``, ``p_load``,
    ``gamma_t`` (squared L2 gain), one 3-vector ``q_i_j`` per candidate edge
    and its epigraph ``t_i_j``.  Objective ``c0 gamma_t + sum c_ij |q_ij|_1``,
    passed to the backend divided by ``c0``.
    """
    lay = prob.layout
    nus, rhos, pairs = prob.index_vectors()
    Mu = _physical_coupling(prob.net, lay)
    basis = _q_basis(prob)
    X12b = _x12_bold(nus, pairs)

    p = SdpProblem(eps=prob.eps, name="global-codesign")
    p.vector("p", lay.N)
    if lay.L:
        p.vector("p_line", lay.L)
    if lay.M:
        p.vector("p_load", lay.M)
    p.scalar("gamma_t")
    for (i, j) in prob.pairs():
        p.vector(_qname(i, j), 3)
        p.vector("t" + _qname(i, j)[1:], 3)

    p.add_lmi("global", lambda v, o: _big(prob, v, o, Mu, basis, X12b, nus, rhos))

    def weights(v, o):
        items = [v["p"]]
        if lay.L:
            items.append(v["p_line"])
        if lay.M:
            items.append(v["p_load"])
        return o.hstack(items)

    p.add_nonneg("weights", weights, margin=P_MIN)
    p.add_nonneg("gamma", lambda v, o: v["gamma_t"], margin=prob.eps)
    if prob.gamma_bar is not None:
        p.add_nonneg("gamma_bar", lambda v, o: prob.gamma_bar - v["gamma_t"])
    if prob.pairs():
        def epi(v, o):
            items = []
            for (i, j) in prob.pairs():
                t, q = v["t" + _qname(i, j)[1:]], v[_qname(i, j)]
                items += [t - q, t + q]
            return o.hstack(items)
        p.add_nonneg("l1_epigraph", epi)

    # divided by c0: a common scaling of the weights leaves the backend's
    # problem, and hence its iterates, unchanged
    def objective(v, o):
        terms = [v["gamma_t"]]
        for (i, j) in prob.pairs():
            terms.append(prob.c[i, j] / prob.c0
                         * o.sum([v["t" + _qname(i, j)[1:]][k] for k in range(3)]))
        return o.sum(terms)

    p.minimize(objective)
    return p


# --------------------------------------------------------------------------
# solve and recover
# --------------------------------------------------------------------------

@dataclass
class CodesignResult:
    gains: DistributedGains
    p: np.ndarray
    p_line: np.ndarray
    p_load: np.ndarray
    gamma_t: float
    min_eig: float
    status: str
    objective: float
    values: dict = field(default_factory=dict)

    @property
    def gamma(self) -> float:
        return float(np.sqrt(self.gamma_t))

    def to_dict(self) -> dict:
        return {"gains": self.gains.to_dict(), "p": self.p.tolist(),
                "p_line": self.p_line.tolist(), "p_load": self.p_load.tolist(),
                "gamma_tilde": self.gamma_t, "gamma": self.gamma, "min_eig": self.min_eig,
                "status": self.status, "objective": self.objective}

    @classmethod
    def from_dict(cls, d: dict) -> "CodesignResult":
        return cls(gains=DistributedGains.from_dict(d["gains"]), p=np.asarray(d["p"], dtype=float),
                   p_line=np.asarray(d["p_line"], dtype=float),
                   p_load=np.asarray(d["p_load"], dtype=float), gamma_t=float(d["gamma_tilde"]),
                   min_eig=float(d["min_eig"]), status=d["status"],
                   objective=float(d["objective"]))


def _row_scale(prob: CodesignProblem, p: np.ndarray) -> np.ndarray:
    """``-p_i nu_i`` of the consensus rows of each DG."""
    return np.array([-p[i] * prob.dg_certs[i].nu for i in range(prob.net.N)])


def _gains_from_values(prob: CodesignProblem, values: dict) -> DistributedGains:
    N = prob.net.N
    scale = _row_scale(prob, np.maximum(np.asarray(values["p"]), P_MIN))
    K = np.zeros((N, N, 3, 2))
    for (i, j) in prob.pairs():
        q = np.asarray(values[_qname(i, j)])
        for k, (r, c, _) in enumerate(_PATTERN):
            K[i, j, r, c - 2] = q[k] / scale[i]
    return DistributedGains.from_offdiag(K, prob.net.P_max, prob.net.Q_max)


def _values_from_gains(prob: CodesignProblem, gains: DistributedGains, base: dict) -> dict:
    vals = dict(base)
    scale = _row_scale(prob, np.asarray(base["p"]))
    for (i, j) in prob.pairs():
        vals[_qname(i, j)] = np.array([gains.K_hat[i, j, r, c - 2] * scale[i]
                                       for (r, c, _) in _PATTERN])
        vals["t" + _qname(i, j)[1:]] = np.abs(vals[_qname(i, j)])
    return vals


def global_lmi_matrix(prob: CodesignProblem, values: dict) -> np.ndarray:
    """Numeric value of the global LMI matrix at ``values``."""
    nus, rhos, pairs = prob.index_vectors()
    lay = prob.layout
    v = dict(values)
    v.setdefault("p_line", np.zeros(0))
    v.setdefault("p_load", np.zeros(0))
    M = _big(prob, v, NUMPY_OPS, _physical_coupling(prob.net, lay), _q_basis(prob),
             _x12_bold(nus, pairs), nus, rhos)
    return (M + M.T) / 2


def dissipation_form(prob: CodesignProblem, gains: DistributedGains, p, p_line, p_load,
                     gamma_t: float) -> np.ndarray:
    """Quadratic form in ``[y; w]`` of ``sum p_k s_k(u_k, y_k) + |z|^2 -
    gamma~ |w|^2`` under the interconnection; it must be negative
    semidefinite.  Built from the interconnection matrix directly, without
    the Schur-complement rewriting used by the LMI."""
    nus, rhos, pairs = prob.index_vectors()
    lay = prob.layout
    ic = assemble_interconnection(prob.net, gains)
    weights = np.r_[np.asarray(p, float), np.asarray(p_line, float), np.asarray(p_load, float)]
    X11 = np.diag(np.concatenate([-w * nv for w, nv in zip(weights, nus)]))
    X12 = sla.block_diag(*[w * 0.5 * J for w, J in zip(weights, pairs)])
    X22 = np.diag(np.concatenate([-w * r * np.ones(d) for w, r, d in zip(weights, rhos, _out_dims(lay))]))
    Ey = np.hstack([np.eye(lay.n_y), np.zeros((lay.n_y, lay.n_w))])
    Ew = np.hstack([np.zeros((lay.n_w, lay.n_y)), np.eye(lay.n_w)])
    Mu = ic.M_u
    cross = Mu.T @ X12 @ Ey
    F = Mu.T @ X11 @ Mu + cross + cross.T + Ey.T @ X22 @ Ey + ic.M_z.T @ ic.M_z - gamma_t * Ew.T @ Ew
    return (F + F.T) / 2


def solve_codesign(prob: CodesignProblem, tol: float = 1e-7) -> CodesignResult:
    """Solve the co-design SDP and recover the consensus gains.

    Raises
    ------
    CodesignError
        Infeasible or numerically failed solve; ``details`` names the
        certificates and the ``gamma_bar`` bound.
    """
    sdp = assemble_global_lmi(prob)
    sol = solve_sdp(sdp, tol_psd=tol)
    if not sol.ok:
        summary = {
            "gamma_bar": prob.gamma_bar,
            "dg": [(c.nu, c.nu_w, c.rho) for c in prob.dg_certs],
            "line": [(c.nu, c.nu_w, c.rho) for c in prob.line_certs],
            "load": [(c.nu, c.nu_w, c.rho) for c in prob.load_certs],
            "solver": sol.diagnostics,
            "status": sol.status,
        }
        raise CodesignError(f"global co-design {sol.status} (gamma_bar={prob.gamma_bar})",
                            details=summary)
    v = sol.values
    p = np.asarray(v["p"], dtype=float)
    if np.any(p <= 10 * P_MIN):
        warnings.warn("a DG storage weight sits at its lower bound; gain recovery is ill conditioned",
                      RuntimeWarning, stacklevel=2)
    gains = _gains_from_values(prob, v)
    M = global_lmi_matrix(prob, v)
    return CodesignResult(
        gains=gains, p=p,
        p_line=np.asarray(v.get("p_line", np.zeros(0)), dtype=float),
        p_load=np.asarray(v.get("p_load", np.zeros(0)), dtype=float),
        gamma_t=float(v["gamma_t"]), min_eig=min_eig_sym(M, sym_tol=1e-9),
        status=sol.status, objective=float(sol.objective) * prob.c0, values=v)


def reverify(prob: CodesignProblem, result: CodesignResult, gains: DistributedGains) -> float:
    """Minimum eigenvalue of the global LMI at ``gains`` with the multipliers
    and ``gamma~`` of ``result``."""
    vals = _values_from_gains(prob, gains, result.values)
    return min_eig_sym(global_lmi_matrix(prob, vals), sym_tol=1e-9)


def extract_topology(prob: CodesignProblem, result: CodesignResult, tau_sparse: float = 1e-4,
                     tol: float = 1e-5):
    """Threshold the consensus gains and re-verify.

    Entries with magnitude ``<= tau_sparse`` are zeroed, then the diagonal is
    recomputed from the balance condition.  If the global LMI no longer
    holds at ``-tol``, removed edges are restored largest first until it
    does.

    Returns
    -------
    gains : DistributedGains
    edges : list of (j, i)
    min_eig : float
    """
    K = result.gains.K_hat.copy()
    N = K.shape[0]
    mask = np.abs(K) > tau_sparse
    removed = []
    for i in range(N):
        for j in range(N):
            if i != j and not mask[i, j].any() and np.any(K[i, j] != 0):
                removed.append((float(np.max(np.abs(K[i, j]))), i, j))
    K_s = np.where(mask, K, 0.0)
    gains = DistributedGains.from_offdiag(K_s, prob.net.P_max, prob.net.Q_max)
    margin = reverify(prob, result, gains)
    removed.sort(reverse=True)
    while margin < -tol:
        if removed:
            _, i, j = removed.pop(0)
            K_s[i, j] = K[i, j]
        elif not np.array_equal(K_s, K):
            K_s = K.copy()  # restore sub-threshold entries of kept edges too
        else:
            break
        gains = DistributedGains.from_offdiag(K_s, prob.net.P_max, prob.net.Q_max)
        margin = reverify(prob, result, gains)
    return gains, gains.edges(), margin
