"""Reference voltages and power-sharing coefficients.

The sharing constraints ask every DG to deliver the same fraction of its
rating, ``P_max,i * P_s = P_i(V_r)`` and ``Q_max,i * Q_s = Q_i(V_r)``.  The
injected currents are affine in ``V_r`` (the network is linear), so the
delivered powers are quadratic and the feasible set is nonconvex.  The
solver below is a sequential convex method: each step linearizes the power
maps at the current iterate (full Jacobian), linearizes the lower magnitude
bound into a halfspace, keeps the upper bound as a second-order cone, solves
the resulting QP, and then projects back onto the equality manifold with a
few minimum-norm Newton corrections.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import cvxpy as cp
import numpy as np

from .dqnet import MgNetwork, stack_dq, to_complex, to_real
from .equilibrium import solve_network_equilibrium

__all__ = [
    "SetpointError",
    "SetpointProblem",
    "SetpointResult",
    "injection_map",
    "delivered_power",
    "power_sharing_residual",
    "design_operating_point",
]


class SetpointError(RuntimeError):
    """The sequential solver failed to reach a feasible sharing point."""

    def __init__(self, message, best: Optional["SetpointResult"] = None):
        super().__init__(message)
        self.best = best


@dataclass
class SetpointProblem:
    """Inputs of the operating-point optimization.

    Parameters
    ----------
    net : MgNetwork
    V_r_desired : (N, 2) array
        Preferred references.  Defaults to ``(1, 0)`` per DG when ``None``.
    V_min, V_max : float
        Bounds on ``|V_r,i|``.  Default to 0.9 and 1.1 times the smallest and
        largest desired magnitude.
    alpha_V, alpha_P, alpha_Q : float
        Objective weights, nonnegative and not all zero.
    pin_q : bool
        Force ``V_r^q = 0`` at every DG (phase reference).
    """

    net: MgNetwork
    V_r_desired: Optional[np.ndarray] = None
    V_min: Optional[float] = None
    V_max: Optional[float] = None
    alpha_V: float = 1.0
    alpha_P: float = 0.0
    alpha_Q: float = 0.0
    pin_q: bool = False
    tol_eq: float = 1e-8
    max_iter: int = 100
    step_tol: float = 1e-10

    def __post_init__(self):
        N = self.net.N
        if self.V_r_desired is None:
            self.V_r_desired = np.tile([1.0, 0.0], (N, 1))
        V = self.V_r_desired
        if len(V) and hasattr(V[0], "d"):
            V = stack_dq(V)
        self.V_r_desired = np.asarray(V, dtype=float).reshape(N, 2)
        mags = np.linalg.norm(self.V_r_desired, axis=1)
        if self.V_min is None:
            self.V_min = 0.9 * float(mags.min())
        if self.V_max is None:
            self.V_max = 1.1 * float(mags.max())
        if not (0 < self.V_min < self.V_max):
            raise ValueError(f"need 0 < V_min < V_max, got {self.V_min}, {self.V_max}")
        if min(self.alpha_V, self.alpha_P, self.alpha_Q) < 0:
            raise ValueError("objective weights must be nonnegative")
        if self.alpha_V == self.alpha_P == self.alpha_Q == 0:
            raise ValueError("objective weights must not all be zero")
        if np.any(mags < self.V_min) or np.any(mags > self.V_max):
            raise ValueError("desired reference magnitude outside [V_min, V_max]")
        if self.pin_q and np.any(self.V_r_desired[:, 1] != 0):
            raise ValueError("pin_q requires desired references with zero q component")


@dataclass
class SetpointResult:
    V_r: np.ndarray
    P_s: float
    Q_s: float
    iterations: int
    residual: float
    converged: bool
    objective: float = float("nan")
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"V_r": self.V_r.tolist(), "P_s": self.P_s, "Q_s": self.Q_s,
                "iterations": self.iterations, "residual": self.residual,
                "converged": self.converged, "objective": self.objective}


def injection_map(net: MgNetwork):
    """Complex ``(G, h)`` with ``I_inj = G V_r + h`` for complex references.

    Built column by column from equilibrium solves at unit references, so it
    inherits the network model exactly.
    """
    N = net.N

    def inj(Vc):
        eq = solve_network_equilibrium(net, to_real(Vc), V_bar=1.0, I_bar=1.0)
        return to_complex(eq.I_inj)

    h = inj(np.zeros(N, dtype=complex))
    G = np.zeros((N, N), dtype=complex)
    for j in range(N):
        e = np.zeros(N, dtype=complex)
        e[j] = 1.0
        G[:, j] = inj(e) - h
    return G, h


def delivered_power(G, h, V: np.ndarray):
    """Powers ``(P, Q)`` delivered to the network and their real Jacobians
    with respect to the stacked ``[V_1d, V_1q, V_2d, ...]``."""
    Vc = to_complex(V)
    I = G @ Vc + h
    S = Vc * np.conj(I)
    N = len(Vc)
    JP = np.zeros((N, 2 * N))
    JQ = np.zeros((N, 2 * N))
    for j in range(N):
        for k, dv in enumerate((1.0, 1j)):
            dV = np.zeros(N, dtype=complex)
            dV[j] = dv
            dS = dV * np.conj(I) + Vc * np.conj(G @ dV)
            JP[:, 2 * j + k] = dS.real
            JQ[:, 2 * j + k] = dS.imag
    return S.real, S.imag, JP, JQ


def power_sharing_residual(net: MgNetwork, V_r, P_s: float, Q_s: float):
    """Residuals ``P(V_r) - P_max P_s`` and ``Q(V_r) - Q_max Q_s`` from a
    fresh equilibrium solve."""
    V = np.asarray(V_r, dtype=float).reshape(net.N, 2)
    eq = solve_network_equilibrium(net, V, V_bar=1.0, I_bar=1.0)
    return eq.P_E - net.P_max * P_s, eq.Q_E - net.Q_max * Q_s


def _newton_project(prob: SetpointProblem, G, h, V, P_s, Q_s, steps: int = 6):
    """Minimum-norm Newton corrections onto the sharing equalities."""
    N = prob.net.N
    Pm, Qm = prob.net.P_max, prob.net.Q_max
    for _ in range(steps):
        P, Q, JP, JQ = delivered_power(G, h, V)
        r = np.r_[Pm * P_s - P, Qm * Q_s - Q]
        if np.max(np.abs(r)) <= 1e-15 * max(1.0, Pm.max(), Qm.max()):
            break
        # unknowns [V (2N), P_s, Q_s]
        J = np.zeros((2 * N, 2 * N + 2))
        J[:N, :2 * N] = -JP
        J[:N, 2 * N] = Pm
        J[N:, :2 * N] = -JQ
        J[N:, 2 * N + 1] = Qm
        if prob.pin_q:
            keep = [c for c in range(2 * N + 2) if not (c < 2 * N and c % 2 == 1)]
        else:
            keep = list(range(2 * N + 2))
        delta = np.zeros(2 * N + 2)
        delta[keep] = -np.linalg.lstsq(J[:, keep], r, rcond=None)[0]
        V = V + delta[:2 * N].reshape(N, 2)
        P_s += delta[2 * N]
        Q_s += delta[2 * N + 1]
    return V, float(P_s), float(Q_s)


def _objective(prob: SetpointProblem, V, P_s, Q_s) -> float:
    return float(prob.alpha_V * np.sum((V - prob.V_r_desired) ** 2)
                 + prob.alpha_P * P_s + prob.alpha_Q * Q_s)


def _qp_step(prob: SetpointProblem, G, h, Vk: np.ndarray, prox: float):
    N = prob.net.N
    P, Q, JP, JQ = delivered_power(G, h, Vk)
    x = cp.Variable(2 * N)
    ps = cp.Variable()
    qs = cp.Variable()
    xk = Vk.reshape(-1)
    cons = [
        prob.net.P_max * ps == P + JP @ (x - xk),
        prob.net.Q_max * qs == Q + JQ @ (x - xk),
        ps >= 0, ps <= 1, qs >= 0, qs <= 1,
    ]
    for i in range(N):
        vi = x[2 * i:2 * i + 2]
        cons.append(cp.norm(vi, 2) <= prob.V_max)
        nk = np.linalg.norm(Vk[i])
        direction = Vk[i] / nk if nk > 0 else np.array([1.0, 0.0])
        cons.append(direction @ vi >= prob.V_min)
        if prob.pin_q:
            cons.append(vi[1] == 0)
    obj = (prob.alpha_V * cp.sum_squares(x - prob.V_r_desired.reshape(-1))
           + prob.alpha_P * ps + prob.alpha_Q * qs + prox * cp.sum_squares(x - xk))
    qp = cp.Problem(cp.Minimize(obj), cons)
    try:
        qp.solve(solver=cp.CLARABEL)
    except cp.error.SolverError:
        return None
    if qp.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or x.value is None:
        return None
    return x.value.reshape(N, 2), float(ps.value), float(qs.value)


def _feasible(prob: SetpointProblem, V, P_s, Q_s, slack: float = 1e-12) -> bool:
    mags = np.linalg.norm(V, axis=1)
    ok = np.all(mags >= prob.V_min - slack) and np.all(mags <= prob.V_max + slack)
    ok = ok and -slack <= P_s <= 1 + slack and -slack <= Q_s <= 1 + slack
    return bool(ok)


def design_operating_point(prob: SetpointProblem) -> SetpointResult:
    """Sequentially linearized solve of the sharing-constrained reference
    design.

    Starts from ``V_r = V_r_desired`` and ``P_s = Q_s = 0.5``.  Converges
    when the QP iterate moves less than ``step_tol`` (or stalls at solver
    precision while already feasible).

    Raises
    ------
    SetpointError
        No feasible point within ``max_iter`` iterations; ``best`` holds the
        iterate with the smallest residual.
    """
    net = prob.net
    G, h = injection_map(net)
    V = prob.V_r_desired.copy()
    if prob.pin_q:
        V[:, 1] = 0.0
    P_s = Q_s = 0.5
    rP, rQ = power_sharing_residual(net, V, P_s, Q_s)
    best = SetpointResult(V.copy(), P_s, Q_s, 0, float(max(np.max(np.abs(rP)), np.max(np.abs(rQ)))),
                          False, _objective(prob, V, P_s, Q_s))
    history = []
    reason = "iteration limit reached"
    prox = 1e-4 * max(prob.alpha_V, 1e-3)
    stall = 0
    prev_step = np.inf
    for it in range(1, prob.max_iter + 1):
        out = _qp_step(prob, G, h, V, prox)
        if out is None:
            reason = f"linearized subproblem infeasible at iteration {it}"
            break
        Vn, ps, qs = out
        if prob.pin_q:
            Vn[:, 1] = 0.0  # the QP returns round-off here
        step = float(np.max(np.abs(Vn - V)))
        Vn, ps, qs = _newton_project(prob, G, h, Vn, ps, qs)
        ps = min(max(ps, 0.0), 1.0)
        qs = min(max(qs, 0.0), 1.0)
        rP, rQ = power_sharing_residual(net, Vn, ps, qs)
        res = float(max(np.max(np.abs(rP)), np.max(np.abs(rQ))))
        feas = res <= prob.tol_eq and _feasible(prob, Vn, ps, qs)
        cand = SetpointResult(Vn, ps, qs, it, res, False, _objective(prob, Vn, ps, qs))
        history.append((step, res))
        if res < best.residual:
            best = cand
        V, P_s, Q_s = Vn, ps, qs
        stall = stall + 1 if step >= 0.5 * prev_step else 0
        prev_step = min(prev_step, step)
        if feas and (step < prob.step_tol or stall >= 3):
            cand.converged = True
            cand.history = history
            return cand
    raise SetpointError(
        f"sharing constraints not met: {reason} (best residual {best.residual:.3e})", best=best)
