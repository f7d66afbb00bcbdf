"""dq-frame algebra, microgrid data model and raw state-space matrices.

Every complex phasor is kept as a real ``(d, q)`` pair.  Multiplication by a
complex scalar ``c`` acts on such a pair through :func:`real_block`, so the
rotation ``-1j * omega0`` becomes ``[[0, omega0], [-omega0, 0]]``.

Node and matrix ordering always follows declaration order in the network
description: DG nodes first, then load nodes; lines in the order given.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "DqValue",
    "DgParams",
    "LineParams",
    "LoadParams",
    "MgNetwork",
    "NetworkError",
    "real_block",
    "build_incidence",
    "assemble_dg_matrices",
    "assemble_line_matrices",
    "assemble_load_matrices",
    "DEFAULT_OMEGA0",
    "stack_dq",
    "to_complex",
    "to_real",
]

DEFAULT_OMEGA0 = 2.0 * np.pi * 60.0


class NetworkError(ValueError):
    """Raised for structurally invalid network descriptions."""


@dataclass(frozen=True)
class DqValue:
    """A dq-frame quantity stored as its two real components."""

    d: float
    q: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.d) and np.isfinite(self.q)):
            raise ValueError(f"non-finite dq value ({self.d}, {self.q})")

    @property
    def norm(self) -> float:
        return float(np.hypot(self.d, self.q))

    def to_complex(self) -> complex:
        return complex(self.d, self.q)

    def to_array(self) -> np.ndarray:
        return np.array([self.d, self.q], dtype=float)

    @classmethod
    def from_complex(cls, z: complex) -> "DqValue":
        return cls(float(np.real(z)), float(np.imag(z)))

    @classmethod
    def from_array(cls, a) -> "DqValue":
        a = np.asarray(a, dtype=float).reshape(2)
        return cls(float(a[0]), float(a[1]))


def _positive(name, value):
    if not (np.isfinite(value) and value > 0):
        raise NetworkError(f"{name} must be a positive finite number, got {value!r}")


@dataclass(frozen=True)
class DgParams:
    """Inverter-interfaced DG with RLC filter and a local ZI load.

    Units are whatever consistent system the caller picks (SI by default).
    """

    id: str
    R_t: float
    L_t: float
    C_t: float
    Y_L: float
    I_L_bar: DqValue
    tau: float
    P_max: float
    Q_max: float

    def __post_init__(self):
        for name in ("R_t", "L_t", "C_t", "tau", "P_max", "Q_max"):
            _positive(f"DG {self.id}: {name}", getattr(self, name))
        if not (np.isfinite(self.Y_L) and self.Y_L >= 0):
            raise NetworkError(f"DG {self.id}: Y_L must be >= 0")

    def filter_impedance(self, omega0: float) -> complex:
        """Series filter impedance ``R_t + j*omega0*L_t``."""
        return complex(self.R_t, omega0 * self.L_t)

    def shunt_admittance(self, omega0: float) -> complex:
        """Local load plus filter capacitor, ``Y_L + j*omega0*C_t``."""
        return complex(self.Y_L, omega0 * self.C_t)


@dataclass(frozen=True)
class LineParams:
    """RL line between two nodes; positive current flows head -> tail."""

    id: str
    R: float
    L: float
    head: str
    tail: str

    def __post_init__(self):
        _positive(f"line {self.id}: R", self.R)
        _positive(f"line {self.id}: L", self.L)
        if self.head == self.tail:
            raise NetworkError(f"line {self.id} is a self-loop at {self.head}")

    def impedance(self, omega0: float) -> complex:
        return complex(self.R, omega0 * self.L)


@dataclass(frozen=True)
class LoadParams:
    """ZI load at a point of common coupling (constant-power part is zero)."""

    id: str
    C_t: float
    Y_L: float
    I_L_bar: DqValue

    def __post_init__(self):
        _positive(f"load {self.id}: C_t", self.C_t)
        _positive(f"load {self.id}: Y_L", self.Y_L)

    def admittance(self, omega0: float) -> complex:
        return complex(self.Y_L, omega0 * self.C_t)


@dataclass(frozen=True)
class MgNetwork:
    """Complete plant description.

    The constructor checks endpoint ids, duplicate ids and connectivity.
    """

    dgs: tuple[DgParams, ...]
    loads: tuple[LoadParams, ...] = ()
    lines: tuple[LineParams, ...] = ()
    omega0: float = DEFAULT_OMEGA0
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "dgs", tuple(self.dgs))
        object.__setattr__(self, "loads", tuple(self.loads))
        object.__setattr__(self, "lines", tuple(self.lines))
        if not self.dgs:
            raise NetworkError("network needs at least one DG")
        if not (np.isfinite(self.omega0) and self.omega0 >= 0):
            raise NetworkError("omega0 must be finite and non-negative")
        ids = [n.id for n in self.dgs] + [n.id for n in self.loads]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate node id")
        line_ids = [ln.id for ln in self.lines]
        if len(set(line_ids)) != len(line_ids):
            raise NetworkError("duplicate line id")
        index = {nid: k for k, nid in enumerate(ids)}
        for ln in self.lines:
            for end in (ln.head, ln.tail):
                if end not in index:
                    raise NetworkError(f"line {ln.id}: unknown endpoint {end!r}")
        object.__setattr__(self, "_index", index)
        if not self._connected():
            raise NetworkError("physical graph is not connected")

    def _connected(self) -> bool:
        n = self.n_nodes
        if n == 1:
            return True
        adj = [[] for _ in range(n)]
        for ln in self.lines:
            a, b = self._index[ln.head], self._index[ln.tail]
            adj[a].append(b)
            adj[b].append(a)
        seen = {0}
        stack = [0]
        while stack:
            k = stack.pop()
            for j in adj[k]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == n

    @property
    def N(self) -> int:
        return len(self.dgs)

    @property
    def M(self) -> int:
        return len(self.loads)

    @property
    def L(self) -> int:
        return len(self.lines)

    @property
    def n_nodes(self) -> int:
        return self.N + self.M

    def node_index(self, node_id: str) -> int:
        return self._index[node_id]

    @property
    def P_max(self) -> np.ndarray:
        return np.array([dg.P_max for dg in self.dgs])

    @property
    def Q_max(self) -> np.ndarray:
        return np.array([dg.Q_max for dg in self.dgs])


def real_block(c: complex) -> np.ndarray:
    """Real 2x2 matrix acting on ``(d, q)`` like multiplication by ``c``.

    >>> real_block(1j)
    array([[ 0., -1.],
           [ 1.,  0.]])
    """
    c = complex(c)
    if not np.isfinite(c):
        raise ValueError("real_block needs a finite complex number")
    a, b = c.real, c.imag
    return np.array([[a, -b], [b, a]])


def build_incidence(net: MgNetwork):
    """Node-by-line incidence matrix and its DG / load row partitions.

    Returns
    -------
    B : (N+M, L) ndarray
        ``+1`` where a line leaves a node (its head), ``-1`` where it enters.
    B_D : (N, L) ndarray
    B_L : (M, L) ndarray
    """
    B = np.zeros((net.n_nodes, net.L))
    for l, ln in enumerate(net.lines):
        B[net.node_index(ln.head), l] = 1.0
        B[net.node_index(ln.tail), l] = -1.0
    return B, B[: net.N].copy(), B[net.N:].copy()


def assemble_dg_matrices(dg: DgParams, omega0: float):
    """State-space matrices of one DG with state
    ``[V_d, V_q, It_d, It_q, v_d, v_q, w~]``.

    Returns ``(A, B, E, F)`` with shapes 7x7, 7x3, 7x7 and 7x2.  The input of
    ``B`` is ``[u_Vd, u_Vq, u_Omega]`` and ``F`` takes the net line current
    injected by the DG.
    """
    C, L, R, tau = dg.C_t, dg.L_t, dg.R_t, dg.tau
    I2 = np.eye(2)
    rot = real_block(-1j * omega0)
    A = np.zeros((7, 7))
    A[0:2, 0:2] = -dg.Y_L / C * I2 + rot
    A[0:2, 2:4] = I2 / C
    A[2:4, 0:2] = -I2 / L
    A[2:4, 2:4] = -R / L * I2 + rot
    A[4:6, 0:2] = I2
    A[6, 6] = -1.0 / tau
    B = np.zeros((7, 3))
    B[2, 0] = B[3, 1] = 1.0 / L
    B[6, 2] = 1.0 / tau
    E = np.diag([1 / C, 1 / C, 1 / L, 1 / L, 1.0, 1.0, 1 / tau])
    F = np.zeros((7, 2))
    F[0:2, 0:2] = -I2 / C
    return A, B, E, F


def assemble_line_matrices(line: LineParams, omega0: float):
    """``(A_bar, B_bar)`` of the RL line current dynamics."""
    A = -line.R / line.L * np.eye(2) + real_block(-1j * omega0)
    return A, np.eye(2) / line.L


def assemble_load_matrices(load: LoadParams, omega0: float):
    """``(A_check, B_check)`` of the load-bus voltage dynamics."""
    A = -load.Y_L / load.C_t * np.eye(2) + real_block(-1j * omega0)
    return A, -np.eye(2) / load.C_t


def stack_dq(values: Sequence[DqValue]) -> np.ndarray:
    """Stack a sequence of dq values into an ``(n, 2)`` array."""
    if len(values) == 0:
        return np.zeros((0, 2))
    return np.array([[v.d, v.q] for v in values], dtype=float)


def to_complex(a: np.ndarray) -> np.ndarray:
    """``(n, 2)`` real array to length-n complex vector."""
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    return a[:, 0] + 1j * a[:, 1]


def to_real(z) -> np.ndarray:
    """Complex vector to ``(n, 2)`` real array."""
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    return np.stack([z.real, z.imag], axis=-1)
