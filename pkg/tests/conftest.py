import warnings
from importlib.resources import files

import numpy as np
import pytest

from mgcodesign.codesign import CodesignProblem, extract_topology, solve_codesign
from mgcodesign.config import load_network
from mgcodesign.dqnet import DgParams, DqValue, LineParams, LoadParams, MgNetwork
from mgcodesign.equilibrium import solve_network_equilibrium
from mgcodesign.localsynth import (
    line_port_certificate,
    load_port_certificate,
    synthesize_local_controller,
)

DATA = files("mgcodesign") / "data"


def demo_network() -> MgNetwork:
    return load_network(DATA / "demo3.json")


def make_dg(name, rng=None, P_max=0.05, Q_max=0.05, **kw):
    """Demo-like DG; with ``rng`` the physical parameters are perturbed by up
    to +-30%."""
    base = dict(R_t=0.05, L_t=2e-3, C_t=2e-4, Y_L=0.02, tau=0.05)
    if rng is not None:
        base = {k: v * rng.uniform(0.7, 1.3) for k, v in base.items()}
    base.update(kw)
    return DgParams(id=name, I_L_bar=DqValue(0.0, 0.0), P_max=P_max, Q_max=Q_max, **base)


def random_network(rng: np.random.Generator, n_dg=None, n_load=None, n_line=None) -> MgNetwork:
    """Connected random network with 2-5 DGs, 0-2 loads and 1-4 lines.

    A random spanning tree over all nodes is drawn first; extra lines are
    added between random distinct pairs while the line budget allows.
    """
    N = int(rng.integers(2, 6)) if n_dg is None else n_dg
    # connectivity with at most 4 lines caps the node count at 5
    M = int(rng.integers(0, min(2, 5 - N) + 1)) if n_load is None else n_load
    n_nodes = N + M
    L_min = n_nodes - 1
    if n_line is None:
        n_line = int(rng.integers(max(1, L_min), max(L_min, 4) + 1))
    w0 = 2 * np.pi * 60
    dgs = [DgParams(id=f"D{i}", R_t=rng.uniform(0.02, 0.2), L_t=rng.uniform(1e-3, 5e-3),
                    C_t=rng.uniform(1e-4, 5e-4), Y_L=rng.uniform(0.0, 0.1),
                    I_L_bar=DqValue(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)),
                    tau=rng.uniform(0.02, 0.1), P_max=rng.uniform(0.02, 0.1),
                    Q_max=rng.uniform(0.02, 0.1)) for i in range(N)]
    loads = [LoadParams(id=f"M{m}", C_t=rng.uniform(1e-5, 1e-4), Y_L=rng.uniform(0.05, 0.5),
                        I_L_bar=DqValue(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)))
             for m in range(M)]
    names = [d.id for d in dgs] + [m.id for m in loads]
    order = list(rng.permutation(n_nodes))
    pairs = []
    for k in range(1, n_nodes):
        pairs.append((names[order[k]], names[order[int(rng.integers(0, k))]]))
    while len(pairs) < n_line:
        a, b = rng.choice(n_nodes, size=2, replace=False)
        pairs.append((names[a], names[b]))
    lines = [LineParams(id=f"L{l}", R=rng.uniform(0.1, 3.0), L=rng.uniform(1e-3, 1e-2),
                        head=h, tail=t) for l, (h, t) in enumerate(pairs)]
    return MgNetwork(dgs=dgs, loads=loads, lines=lines, omega0=w0)


def random_references(rng, N):
    mag = rng.uniform(0.95, 1.05, N)
    ang = rng.uniform(-0.05, 0.05, N)
    return np.column_stack([mag * np.cos(ang), mag * np.sin(ang)])


class DemoDesign:
    """Local and global design of the shipped demo at ``c_ij = 0.01``."""

    def __init__(self, c=1e-2):
        self.net = net = demo_network()
        self.eq = eq = solve_network_equilibrium(net, np.tile([1.0, 0.0], (net.N, 1)))
        self.line_certs = [line_port_certificate(l, net.omega0) for l in net.lines]
        self.load_certs = [load_port_certificate(m, net.omega0) for m in net.loads]
        nu_max = 0.75 * min(c.rho for c in self.line_certs)
        self.K0, self.dg_certs = [], []
        for i, dg in enumerate(net.dgs):
            g, cert = synthesize_local_controller(dg, eq, i, net.omega0, nu_max=nu_max)
            self.K0.append(g.K0)
            self.dg_certs.append(cert)
        self.prob = self.problem(c)
        self.result = solve_codesign(self.prob)
        self.gains, self.edges, self.topology_margin = extract_topology(self.prob, self.result)

    def problem(self, c, **kw):
        return CodesignProblem(self.net, self.dg_certs, self.line_certs, self.load_certs, c=c, **kw)


@pytest.fixture(scope="session")
def demo_net():
    return demo_network()


@pytest.fixture(scope="session")
def demo_design():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return DemoDesign()
