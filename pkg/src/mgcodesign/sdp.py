"""Small LMI problem abstraction.

A problem is a set of named decision variables plus constraints written as
*builder* functions ``f(v, ops)``.  ``v`` maps variable names to values and
``ops`` supplies ``bmat``/``hstack``/``diag`` helpers.  The same builder is
evaluated twice:

* with cvxpy expressions, to hand the problem to a conic solver, and
* with plain numpy arrays, to re-check a solution by direct substitution.

The second path never touches the solver, so :func:`verify_solution` is an
independent check of whatever the backend returned.

Example
-------
>>> p = SdpProblem(eps=0.0)
>>> _ = p.scalar("x")
>>> p.add_lmi("psd", lambda v, o: o.bmat([[v["x"], 1.0], [1.0, v["x"]]]))
>>> p.minimize(lambda v, o: v["x"])
>>> sol = solve_sdp(p)
>>> round(sol.values["x"], 6)
1.0
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import cvxpy as cp

__all__ = [
    "SdpProblem",
    "SdpSolution",
    "VerificationReport",
    "SdpError",
    "solve_sdp",
    "verify_solution",
    "min_eig_sym",
    "NUMPY_OPS",
    "CVX_OPS",
    "DEFAULT_SOLVERS",
]

# backends tried in order; an entry is a solver name or ``(name, options)``
DEFAULT_SOLVERS = (
    "CLARABEL",
    ("CLARABEL", {"equilibrate_max_iter": 50, "max_iter": 400}),
    "SCS",
)


class SdpError(ValueError):
    """Malformed problem or matrix."""


class _NumpyOps:
    """Numeric implementations of the helper operations."""

    @staticmethod
    def bmat(blocks):
        return np.block([[np.atleast_2d(np.asarray(b, dtype=float)) for b in row] for row in blocks])

    @staticmethod
    def hstack(items):
        return np.hstack([np.atleast_1d(np.asarray(x, dtype=float)) for x in items])

    @staticmethod
    def vstack(items):
        return np.vstack([np.atleast_2d(np.asarray(x, dtype=float)) for x in items])

    @staticmethod
    def diag(x):
        return np.diag(np.asarray(x, dtype=float).reshape(-1))

    @staticmethod
    def sum(items):
        return sum(items)

    @staticmethod
    def abs(x):
        return np.abs(x)


class _CvxOps:
    """cvxpy implementations of the helper operations."""

    @staticmethod
    def bmat(blocks):
        def as2d(b):
            if isinstance(b, cp.Expression):
                if b.ndim == 0:
                    return cp.reshape(b, (1, 1), order="F")
                if b.ndim == 1:  # same convention as np.atleast_2d: a row
                    return cp.reshape(b, (1, b.shape[0]), order="F")
                return b
            return np.atleast_2d(np.asarray(b, dtype=float))

        return cp.bmat([[as2d(b) for b in row] for row in blocks])

    @staticmethod
    def hstack(items):
        return cp.hstack([x if isinstance(x, cp.Expression) else np.atleast_1d(np.asarray(x, dtype=float))
                          for x in items])

    @staticmethod
    def vstack(items):
        return cp.vstack(list(items))

    @staticmethod
    def diag(x):
        if isinstance(x, cp.Expression):
            return cp.diag(cp.reshape(x, (x.size,), order="F"))
        return np.diag(np.asarray(x, dtype=float).reshape(-1))

    @staticmethod
    def sum(items):
        return cp.sum(cp.hstack(list(items)))

    @staticmethod
    def abs(x):
        return cp.abs(x)


NUMPY_OPS = _NumpyOps()
CVX_OPS = _CvxOps()

Builder = Callable[[dict, object], object]


@dataclass
class _Variable:
    name: str
    shape: tuple
    symmetric: bool
    mask: Optional[np.ndarray]

    @property
    def n_free(self) -> int:
        if self.mask is not None:
            return len(self.free_positions())
        if self.symmetric:
            n = self.shape[0]
            return n * (n + 1) // 2
        return int(np.prod(self.shape)) if self.shape else 1

    def free_positions(self):
        """Index tuples of the free entries of a masked variable (upper
        triangle only when symmetric)."""
        pos = [tuple(int(k) for k in idx) for idx in zip(*np.nonzero(self.mask))]
        if self.symmetric:
            pos = [p for p in pos if p[0] <= p[1]]
        return pos

    def basis(self):
        """Yield unit assignments, one per free entry, as arrays."""
        if self.shape == ():
            yield np.array(1.0)
            return
        if self.mask is not None:
            for idx in self.free_positions():
                e = np.zeros(self.shape)
                e[idx] = 1.0
                if self.symmetric:
                    e[idx[::-1]] = 1.0
                yield e
            return
        if self.symmetric:
            n = self.shape[0]
            for i in range(n):
                for j in range(i, n):
                    e = np.zeros(self.shape)
                    e[i, j] = e[j, i] = 1.0
                    yield e
            return
        for idx in np.ndindex(*self.shape):
            e = np.zeros(self.shape)
            e[idx] = 1.0
            yield e


@dataclass
class _Constraint:
    name: str
    kind: str  # "psd", "nonneg" or "zero"
    builder: Builder
    margin: Optional[float] = None


@dataclass
class VerificationReport:
    """Result of re-evaluating every constraint at a given assignment.

    ``margins`` holds, per constraint, the minimum eigenvalue of
    ``F(x) - eps*I`` (psd), the minimum entry minus the margin (nonneg) or the
    negated max-abs entry (zero).  The report passes iff every margin is
    ``>= -tol``.
    """

    margins: dict
    tol: float
    passed: bool
    worst: Optional[str]

    @property
    def worst_margin(self) -> float:
        return min(self.margins.values()) if self.margins else float("inf")

    def to_dict(self) -> dict:
        return {"tol": self.tol, "passed": self.passed, "worst": self.worst,
                "margins": {k: float(v) for k, v in self.margins.items()}}


@dataclass
class SdpSolution:
    """Solver output.  ``status`` is one of ``optimal``, ``feasible``,
    ``infeasible`` or ``numerical-failure``."""

    status: str
    values: dict
    objective: Optional[float]
    worst_min_eig: Optional[float]
    backend: str = ""
    backend_status: str = ""
    diagnostics: dict = field(default_factory=dict)
    report: Optional[VerificationReport] = None

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


class SdpProblem:
    """Container for variables, constraints and an optional linear objective.

    Parameters
    ----------
    eps : float
        Margin for strict inequalities: psd constraints become
        ``F(x) >= eps*I``.
    """

    def __init__(self, eps: float = 1e-6, name: str = "sdp"):
        if eps < 0:
            raise SdpError("eps must be non-negative")
        self.eps = float(eps)
        self.name = name
        self.variables: dict[str, _Variable] = {}
        self.constraints: list[_Constraint] = []
        self.objective: Optional[Builder] = None
        self.sense = "min"

    # -- declarations -------------------------------------------------
    def _declare(self, var: _Variable):
        if var.name in self.variables:
            raise SdpError(f"duplicate variable {var.name!r}")
        self.variables[var.name] = var
        return var.name

    def scalar(self, name: str) -> str:
        return self._declare(_Variable(name, (), False, None))

    def vector(self, name: str, n: int) -> str:
        return self._declare(_Variable(name, (int(n),), False, None))

    def matrix(self, name: str, shape, symmetric: bool = False, mask=None) -> str:
        shape = tuple(int(s) for s in shape)
        if symmetric and (len(shape) != 2 or shape[0] != shape[1]):
            raise SdpError("symmetric variables must be square")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != shape:
                raise SdpError("mask shape mismatch")
            if symmetric and not np.array_equal(mask, mask.T):
                raise SdpError("mask of a symmetric variable must be symmetric")
        return self._declare(_Variable(name, shape, symmetric, mask))

    def _add(self, con: _Constraint):
        if any(c.name == con.name for c in self.constraints):
            raise SdpError(f"duplicate constraint {con.name!r}")
        self.constraints.append(con)

    def add_lmi(self, name: str, builder: Builder, margin: Optional[float] = None):
        """``builder(v, ops)`` must be symmetric; it is required ``>= margin*I``
        (``margin`` defaults to the problem ``eps``)."""
        self._add(_Constraint(name, "psd", builder, margin))

    def add_nonneg(self, name: str, builder: Builder, margin: float = 0.0):
        """Elementwise ``builder(v, ops) >= margin``."""
        self._add(_Constraint(name, "nonneg", builder, margin))

    def add_zero(self, name: str, builder: Builder):
        """Elementwise ``builder(v, ops) == 0``."""
        self._add(_Constraint(name, "zero", builder, 0.0))

    def minimize(self, builder: Builder):
        self.objective, self.sense = builder, "min"

    def maximize(self, builder: Builder):
        self.objective, self.sense = builder, "max"

    # -- evaluation ---------------------------------------------------
    def zero_assignment(self) -> dict:
        return {n: np.zeros(v.shape) if v.shape else 0.0 for n, v in self.variables.items()}

    def _cvx_variables(self):
        out, cons = {}, []
        for name, var in self.variables.items():
            if var.shape == ():
                out[name] = cp.Variable(name=name)
            elif var.mask is not None:
                pos = var.free_positions()
                z = cp.Variable(len(pos), name=name)
                S = np.zeros((var.shape[0] * var.shape[1], len(pos)))
                for k, (r, c) in enumerate(pos):
                    S[c * var.shape[0] + r, k] = 1.0  # column-major position
                    if var.symmetric:
                        S[r * var.shape[0] + c, k] = 1.0
                out[name] = cp.reshape(S @ z, var.shape, order="F")
            else:
                out[name] = cp.Variable(var.shape, symmetric=var.symmetric, name=name)
        return out, cons

    def evaluate(self, name: str, values: dict) -> np.ndarray:
        con = next(c for c in self.constraints if c.name == name)
        return np.atleast_2d(np.asarray(con.builder(values, NUMPY_OPS), dtype=float))

    def affine_terms(self, name: str):
        """``(F0, [(var, entry_index, Fk)])`` with ``F(x) = F0 + sum x_k Fk``.

        Computed by evaluating the builder at the zero assignment and at each
        unit assignment, so it doubles as a check that the builder is affine
        (the caller can compare ``F(x)`` against the reconstruction).
        """
        base = self.zero_assignment()
        F0 = self.evaluate(name, base)
        terms = []
        for vname, var in self.variables.items():
            for k, e in enumerate(var.basis()):
                vals = dict(base)
                vals[vname] = e if var.shape else 1.0
                Fk = self.evaluate(name, vals) - F0
                if np.any(Fk):
                    terms.append((vname, k, Fk))
        return F0, terms

    def debug_dump(self, values: Optional[dict] = None, affine: bool = False) -> dict:
        """Structured dump: variable table and dense constraint matrices
        (evaluated at ``values``, or the affine decomposition)."""
        out = {
            "name": self.name,
            "eps": self.eps,
            "sense": self.sense,
            "variables": [
                {"name": v.name, "shape": list(v.shape), "symmetric": v.symmetric,
                 "mask": None if v.mask is None else v.mask.astype(int).tolist()}
                for v in self.variables.values()
            ],
            "constraints": [],
        }
        for con in self.constraints:
            entry = {"name": con.name, "kind": con.kind,
                     "margin": self.eps if con.margin is None else con.margin}
            if values is not None:
                entry["value"] = self.evaluate(con.name, values).tolist()
            if affine:
                F0, terms = self.affine_terms(con.name)
                entry["F0"] = F0.tolist()
                entry["terms"] = [{"variable": v, "entry": k, "F": F.tolist()} for v, k, F in terms]
            out["constraints"].append(entry)
        if values is not None:
            out["values"] = {k: np.asarray(v).tolist() for k, v in values.items()}
        return out


def min_eig_sym(M, sym_tol: float = 1e-12) -> float:
    """Smallest eigenvalue of a symmetric matrix.

    Symmetry is checked relative to the matrix scale; a larger asymmetry is
    rejected rather than silently symmetrised.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise SdpError(f"matrix is not square: {M.shape}")
    if M.size == 0:
        return float("inf")
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > sym_tol * scale:
        raise SdpError("matrix is not symmetric within tolerance")
    return float(np.linalg.eigvalsh((M + M.T) / 2)[0])


def verify_solution(p: SdpProblem, values: dict, tol_psd: float = 1e-7,
                    sym_tol: float = 1e-9) -> VerificationReport:
    """Substitute ``values`` into every constraint and check feasibility.

    ``values`` may be an :class:`SdpSolution`.  Only numpy is used here.
    """
    if isinstance(values, SdpSolution):
        values = values.values
    margins = {}
    for con in p.constraints:
        F = p.evaluate(con.name, values)
        margin = p.eps if con.margin is None else con.margin
        if con.kind == "psd":
            m = min_eig_sym(F, sym_tol=sym_tol) - margin
        elif con.kind == "nonneg":
            m = float(np.min(F)) - margin if F.size else float("inf")
        else:
            m = -float(np.max(np.abs(F))) if F.size else 0.0
        margins[con.name] = m
    worst = min(margins, key=margins.get) if margins else None
    passed = all(m >= -tol_psd for m in margins.values())
    return VerificationReport(margins=margins, tol=tol_psd, passed=passed, worst=worst)


def _extract(p: SdpProblem, cvars: dict) -> dict:
    vals = {}
    for name, var in p.variables.items():
        expr = cvars[name]
        v = expr.value
        if v is None:
            return {}
        v = np.asarray(v, dtype=float)
        if var.shape == ():
            vals[name] = float(v)
        else:
            v = v.reshape(var.shape)
            if var.symmetric:
                v = (v + v.T) / 2
            if var.mask is not None:
                v = np.where(var.mask, v, 0.0)
            vals[name] = v
    return vals


_SOLVER_DEFAULTS = {"SCS": {"max_iters": 5000, "eps_abs": 1e-9, "eps_rel": 1e-9}}


def _build_cvx(p: SdpProblem, extra: float):
    cvars, extra_cons = p._cvx_variables()
    cons_map = []
    for con in p.constraints:
        expr = con.builder(cvars, CVX_OPS)
        margin = (p.eps if con.margin is None else con.margin)
        if con.kind == "psd":
            margin = margin + extra
            if not expr.shape:
                cons_map.append((con.name, expr >= margin))
            else:
                n = expr.shape[0]
                cons_map.append((con.name, (expr + expr.T) / 2 >> margin * np.eye(n)))
        elif con.kind == "nonneg":
            cons_map.append((con.name, expr >= margin))
        else:
            cons_map.append((con.name, expr == 0))
    constraints = [c for _, c in cons_map] + extra_cons
    if p.objective is None:
        objective = cp.Minimize(0)
    else:
        obj = p.objective(cvars, CVX_OPS)
        objective = cp.Minimize(obj) if p.sense == "min" else cp.Maximize(obj)
    return cp.Problem(objective, constraints), cvars, cons_map


def solve_sdp(p: SdpProblem, solvers=DEFAULT_SOLVERS, tol_psd: float = 1e-7,
              verbose: bool = False, backoff=(0.0, 1e-6, 1e-5, 1e-4), **solver_opts) -> SdpSolution:
    """Solve with the first backend that returns a verified point.

    Status semantics: ``optimal`` (backend optimal and verified),
    ``feasible`` (backend inexact but verified), ``infeasible`` (backend
    certificate of infeasibility), ``numerical-failure`` otherwise.  The
    returned point of an ``optimal``/``feasible`` solution always passes
    :func:`verify_solution` at ``tol_psd``.

    When a backend returns a point that misses the substitution check by a
    small amount, the solve is repeated with every psd margin raised by the
    next entry of ``backoff``; verification always uses the original
    margins.
    """
    diagnostics = {}
    last_status = "no-backend"
    infeasible_seen = False
    for n_entry, entry in enumerate(solvers):
        solver, entry_opts = (entry, {}) if isinstance(entry, str) else entry
        if solver not in cp.installed_solvers():
            continue
        opts = {**_SOLVER_DEFAULTS.get(solver, {}), **entry_opts, **solver_opts.get(solver, {})}
        for extra in backoff:
            prob, cvars, cons_map = _build_cvx(p, extra)
            key = f"{n_entry}:{solver}" + ("" if extra == 0 else f"+{extra:g}")
            try:
                with warnings.catch_warnings():
                    # inexact points are judged by the substitution check below
                    warnings.filterwarnings("ignore", message="Solution may be inaccurate")
                    prob.solve(solver=solver, verbose=verbose, **opts)
            except cp.error.SolverError as exc:
                diagnostics[key] = f"solver error: {exc}"
                last_status = "solver-error"
                break
            status = prob.status
            last_status = status
            diagnostics[key] = status
            if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
                worst = _most_violated(cons_map)
                if status == cp.INFEASIBLE and extra == 0:
                    return SdpSolution("infeasible", {}, None, None, backend=solver,
                                       backend_status=status,
                                       diagnostics={**diagnostics, "most_violated": worst})
                if extra == 0:
                    diagnostics["most_violated"] = worst
                    infeasible_seen = True
                break
            if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
                break
            values = _extract(p, cvars)
            if not values:
                break
            rep = verify_solution(p, values, tol_psd=tol_psd)
            if rep.passed:
                return SdpSolution(
                    "optimal" if status == cp.OPTIMAL and extra == 0 else "feasible",
                    values, float(prob.value), rep.worst_margin, backend=solver,
                    backend_status=status, diagnostics=diagnostics, report=rep,
                )
            diagnostics[key] = f"{status}; substitution check failed at {rep.worst} ({rep.worst_margin:.3e})"
    status = "infeasible" if infeasible_seen else "numerical-failure"
    return SdpSolution(status, {}, None, None, backend_status=last_status, diagnostics=diagnostics)


def _most_violated(cons_map):
    """Name of the constraint carrying the largest dual certificate."""
    best, best_val = None, -1.0
    for name, con in cons_map:
        dv = con.dual_value
        if dv is None:
            continue
        size = float(np.max(np.abs(np.asarray(dv)))) if np.size(dv) else 0.0
        if size > best_val:
            best, best_val = name, size
    return best
