"""Batch pipeline stages shared by the command-line interface and tests.

Every stage reads a validated :class:`~mgcodesign.config.PipelineConfig`,
writes deterministic JSON documents (floats with 17 significant digits, keys
sorted, no timestamps) and embeds the SHA-256 of the input network so stale
artifacts can be detected.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .codesign import (
    CodesignProblem,
    CodesignResult,
    DistributedGains,
    assemble_global_lmi,
    dissipation_form,
    extract_topology,
    reverify,
    solve_codesign,
)
from .config import PipelineConfig, network_hash
from .dqnet import MgNetwork, build_incidence
from .equilibrium import EquilibriumPoint, equilibrium_residual, solve_network_equilibrium
from .localsynth import (
    PassivityCert,
    check_dg_certificate,
    dg_plant,
    line_port_certificate,
    line_port_lmi,
    load_port_certificate,
    load_port_lmi,
    synthesize_local_controller,
    verify_dg_dissipativity,
)
from .sdp import min_eig_sym
from .setpoint import SetpointProblem, SetpointResult, design_operating_point, power_sharing_residual
from .sim import LoadStep, Scenario, export_csv, metrics, simulate

__all__ = [
    "dumps",
    "write_json",
    "read_json",
    "StaleArtifactError",
    "check_hash",
    "load_design",
    "run_setpoint",
    "run_equilibrium",
    "run_design",
    "run_simulate",
    "run_verify",
    "run_report",
    "dg_nu_bounds",
    "topology_dot",
]


class StaleArtifactError(ValueError):
    """An artifact was produced from a different network description."""


# --------------------------------------------------------------------------
# deterministic JSON
# --------------------------------------------------------------------------

def _fmt_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        return "null"
    if x == 0:
        return "0.0"
    return format(x, ".17g")


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def dumps(obj, indent: int = 2) -> str:
    """JSON text with every float printed to 17 significant digits."""
    obj = _plain(obj)

    def enc(o, level):
        pad = " " * (indent * (level + 1))
        end = " " * (indent * level)
        if o is None:
            return "null"
        if isinstance(o, bool):
            return "true" if o else "false"
        if isinstance(o, int):
            return str(o)
        if isinstance(o, float):
            return _fmt_float(o)
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, list):
            if not o:
                return "[]"
            if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in o):
                return "[" + ", ".join(enc(v, level + 1) for v in o) + "]"
            return "[\n" + ",\n".join(pad + enc(v, level + 1) for v in o) + "\n" + end + "]"
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [pad + json.dumps(k) + ": " + enc(o[k], level + 1) for k in sorted(o)]
            return "{\n" + ",\n".join(items) + "\n" + end + "}"
        raise TypeError(f"cannot serialise {type(o).__name__}")

    return enc(obj, 0) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def check_hash(doc: dict, net: MgNetwork, what: str):
    h = network_hash(net)
    if doc.get("network_hash") != h:
        raise StaleArtifactError(f"{what} was produced for a different network (hash mismatch)")


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def _desired(cfg: PipelineConfig, net: MgNetwork) -> np.ndarray:
    sp = cfg.setpoint
    if sp.V_r_desired is None:
        return np.tile([1.0, 0.0], (net.N, 1))
    if len(sp.V_r_desired) != net.N:
        raise ValueError(f"setpoint.V_r_desired: expected {net.N} entries")
    return np.array([[v.d, v.q] for v in sp.V_r_desired])


def run_setpoint(cfg: PipelineConfig, net: MgNetwork, tol_eq: Optional[float] = None) -> SetpointResult:
    sp = cfg.setpoint
    prob = SetpointProblem(net=net, V_r_desired=_desired(cfg, net), V_min=sp.V_min, V_max=sp.V_max,
                           alpha_V=sp.alpha_V, alpha_P=sp.alpha_P, alpha_Q=sp.alpha_Q,
                           pin_q=sp.pin_q, tol_eq=sp.tol_eq if tol_eq is None else tol_eq,
                           max_iter=sp.max_iter)
    return design_operating_point(prob)


def setpoint_document(net: MgNetwork, res: SetpointResult) -> dict:
    rP, rQ = power_sharing_residual(net, res.V_r, res.P_s, res.Q_s)
    return {"network_hash": network_hash(net), "setpoint": res.to_dict(),
            "residual_P": rP, "residual_Q": rQ}


def run_equilibrium(cfg: PipelineConfig, net: MgNetwork, V_r=None):
    V_r = _desired(cfg, net) if V_r is None else V_r
    eq = solve_network_equilibrium(net, V_r, V_bar=cfg.local.V_bar, I_bar=cfg.local.I_bar)
    return eq, equilibrium_residual(net, eq)


def equilibrium_document(net: MgNetwork, eq: EquilibriumPoint, residual: dict) -> dict:
    return {"network_hash": network_hash(net), "equilibrium": eq.to_dict(), "residual": residual}


def dg_nu_bounds(net: MgNetwork, line_certs, fraction: float) -> np.ndarray:
    """Per-DG bound on ``|nu|``: ``fraction`` times the smallest output
    index of the lines touching the DG (1 if it has none)."""
    _, Bd, _ = build_incidence(net)
    out = np.ones(net.N)
    for i in range(net.N):
        rhos = [line_certs[l].rho for l in range(net.L) if Bd[i, l] != 0]
        out[i] = fraction * (min(rhos) if rhos else 1.0)
    return out


@dataclass
class Design:
    V_r: np.ndarray
    setpoint: Optional[SetpointResult]
    eq: EquilibriumPoint
    K0: list
    dg_certs: list
    line_certs: list
    load_certs: list
    codesign: CodesignResult
    gains: DistributedGains
    edges: list
    topology_min_eig: float

    def to_dict(self, net: MgNetwork, cfg: PipelineConfig) -> dict:
        ids = [dg.id for dg in net.dgs]
        return {
            "network_hash": network_hash(net),
            "V_r": self.V_r,
            "setpoint": None if self.setpoint is None else self.setpoint.to_dict(),
            "equilibrium": self.eq.to_dict(),
            "local": [{"id": ids[i], "K0": self.K0[i], "cert": self.dg_certs[i].to_dict()}
                      for i in range(net.N)],
            "lines": [{"id": ln.id, "cert": c.to_dict()} for ln, c in zip(net.lines, self.line_certs)],
            "loads": [{"id": ld.id, "cert": c.to_dict()} for ld, c in zip(net.loads, self.load_certs)],
            "codesign": self.codesign.to_dict(),
            "gains": self.gains.to_dict(),
            "edges": [[ids[j], ids[i]] for (j, i) in self.edges],
            "gamma": self.codesign.gamma,
            "topology_min_eig": self.topology_min_eig,
            "options": {"local": cfg.local.model_dump(), "codesign": cfg.codesign.model_dump()},
        }


def _codesign_problem(cfg: PipelineConfig, net: MgNetwork, dg_certs, line_certs, load_certs,
                      c=None) -> CodesignProblem:
    g = cfg.codesign
    return CodesignProblem(net, dg_certs, line_certs, load_certs,
                           c=g.c_ij if c is None else c, c0=g.c_0, gamma_bar=g.gamma_bar, eps=g.eps)


def run_design(cfg: PipelineConfig, net: MgNetwork, tol_eq: Optional[float] = None,
               c=None) -> tuple:
    """Setpoint, equilibrium, local synthesis, line/load certificates, global
    co-design and topology extraction.  Returns ``(Design, sdp_problem)``."""
    sp_res = None
    if cfg.setpoint.enabled:
        sp_res = run_setpoint(cfg, net, tol_eq)
        V_r = sp_res.V_r
    else:
        V_r = _desired(cfg, net)
    eq, _ = run_equilibrium(cfg, net, V_r)
    lo = cfg.local
    line_certs = [line_port_certificate(ln, net.omega0, lo.kappa, lo.line_rho_fraction)
                  for ln in net.lines]
    load_certs = [load_port_certificate(ld, net.omega0, lo.kappa, lo.load_rho_fraction)
                  for ld in net.loads]
    nu_bounds = dg_nu_bounds(net, line_certs, lo.nu_fraction)
    K0, dg_certs = [], []
    for i, dg in enumerate(net.dgs):
        gains, cert = synthesize_local_controller(
            dg, eq, i, net.omega0, eps=lo.eps, nu_max=float(nu_bounds[i]), nu_w_max=lo.nu_w_max,
            decay=lo.decay, mode=lo.mode)
        K0.append(gains.K0)
        dg_certs.append(cert)
    prob = _codesign_problem(cfg, net, dg_certs, line_certs, load_certs, c)
    res = solve_codesign(prob)
    sparse, edges, margin = extract_topology(prob, res, cfg.codesign.tau_sparse)
    design = Design(V_r=np.asarray(V_r), setpoint=sp_res, eq=eq, K0=K0, dg_certs=dg_certs,
                    line_certs=line_certs, load_certs=load_certs, codesign=res, gains=sparse,
                    edges=edges, topology_min_eig=margin)
    return design, prob


def load_design(doc: dict, net: MgNetwork) -> Design:
    check_hash(doc, net, "design")
    return Design(
        V_r=np.asarray(doc["V_r"], dtype=float),
        setpoint=None,
        eq=EquilibriumPoint.from_dict(doc["equilibrium"]),
        K0=[np.asarray(d["K0"], dtype=float) for d in doc["local"]],
        dg_certs=[PassivityCert.from_dict(d["cert"]) for d in doc["local"]],
        line_certs=[PassivityCert.from_dict(d["cert"]) for d in doc["lines"]],
        load_certs=[PassivityCert.from_dict(d["cert"]) for d in doc["loads"]],
        codesign=CodesignResult.from_dict(doc["codesign"]),
        gains=DistributedGains.from_dict(doc["gains"]),
        edges=[], topology_min_eig=float(doc["topology_min_eig"]),
    )


def topology_dot(net: MgNetwork, design: Design) -> str:
    """GraphViz digraph of the communication edges (``j -> i`` when DG ``i``
    uses measurements of DG ``j``)."""
    ids = [dg.id for dg in net.dgs]
    lines = ["digraph communication {"]
    lines += [f'  "{n}";' for n in ids]
    K = design.gains.K_hat
    for (j, i) in design.gains.edges():
        lines.append(f'  "{ids[j]}" -> "{ids[i]}" [label="{np.max(np.abs(K[i, j])):.3g}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _scenarios(cfg: PipelineConfig, net: MgNetwork, seed: int) -> list:
    sc = cfg.scenario
    steps = []
    for st in sc.load_steps:
        try:
            m = net.node_index(st.load) - net.N
        except KeyError:
            raise ValueError(f"scenario.load_steps: unknown load {st.load!r}") from None
        if m < 0:
            raise ValueError(f"scenario.load_steps: {st.load!r} is not a load")
        if st.scale is not None:
            I = tuple(st.scale * net.loads[m].I_L_bar.to_array())
        else:
            I = (st.I_L_bar.d, st.I_L_bar.q)
        steps.append(LoadStep(st.time, m, I))
    seeds = np.random.SeedSequence(seed).generate_state(sc.realizations)
    return [Scenario(t_end=sc.t_end, dt=sc.dt, load_steps=steps, noise_rms=sc.noise_rms,
                     noise_t_end=sc.noise_t_end, noise_cutoff=sc.noise_cutoff, seed=int(s),
                     consensus_period=sc.consensus_period) for s in seeds]


def run_simulate(cfg: PipelineConfig, net: MgNetwork, design: Design, out: Path,
                 seed: Optional[int] = None) -> dict:
    seed = cfg.seed if seed is None else seed
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for r, sc in enumerate(_scenarios(cfg, net, seed)):
        tr = simulate(net, design.eq, design.K0, design.gains, sc)
        m = metrics(tr, design.eq, design.codesign.gamma)
        meta = {"network_hash": network_hash(net), "seed": seed, "realization": r,
                "scenario_seed": sc.seed, "scenario": cfg.scenario.model_dump(mode="json")}
        export_csv(tr, out / f"trace_{r}.csv", meta, every=cfg.scenario.sample_every)
        results.append(m)
    doc = {"network_hash": network_hash(net), "seed": seed, "metrics": results}
    write_json(out / "metrics.json", doc)
    return doc


def run_verify(cfg: PipelineConfig, net: MgNetwork, design: Design, tol: float = 1e-7,
               topology_tol: float = 1e-5) -> dict:
    """Re-check every certificate and the global LMI by substitution and run
    the equilibrium-hold simulation.  ``report["passed"]`` is the overall
    verdict; every check carries its margin."""
    checks = []

    def add(name, margin, limit):
        checks.append({"name": name, "margin": float(margin), "limit": -limit,
                       "passed": bool(np.isfinite(margin) and margin >= -limit)})

    eq = design.eq
    res = equilibrium_residual(net, eq)
    add("equilibrium.residual", -max(res.values()), 1e-9)
    for i, dg in enumerate(net.dgs):
        plant = dg_plant(dg, eq, i, net.omega0)
        add(f"dg.{dg.id}.certificate", check_dg_certificate(plant, design.K0[i], design.dg_certs[i]), tol)
        c = design.dg_certs[i]
        ver = verify_dg_dissipativity(dg, eq, i, net.omega0, design.K0[i], c.nu, c.rho, nu_w=c.nu_w, tol=tol)
        add(f"dg.{dg.id}.verification_lmi", ver.margin, tol)
        A_cl = plant.A_bar + plant.B_bar @ design.K0[i]
        add(f"dg.{dg.id}.hurwitz", -float(np.max(np.linalg.eigvals(A_cl).real)) - 1e-4, 0.0)
    for ln, c in zip(net.lines, design.line_certs):
        add(f"line.{ln.id}.certificate", min_eig_sym(line_port_lmi(ln, net.omega0, c)), tol)
    for ld, c in zip(net.loads, design.load_certs):
        add(f"load.{ld.id}.certificate", min_eig_sym(load_port_lmi(ld, net.omega0, c)), tol)

    prob = _codesign_problem(cfg, net, design.dg_certs, design.line_certs, design.load_certs)
    cs = design.codesign
    cs.values = _codesign_values(design)
    add("global.lmi", reverify(prob, cs, cs.gains) - prob.eps, tol)
    add("global.balance", -cs.gains.balance_residual(), 1e-9)
    add("global.topology_lmi", reverify(prob, cs, design.gains), topology_tol)
    add("global.topology_balance", -design.gains.balance_residual(), 1e-9)
    F = dissipation_form(prob, design.gains, cs.p, cs.p_line, cs.p_load, cs.gamma_t)
    add("global.dissipation_form", -float(np.linalg.eigvalsh(F)[-1]), topology_tol)

    sc = Scenario(t_end=cfg.scenario.hold_t_end, dt=cfg.scenario.dt)
    tr = simulate(net, eq, design.K0, design.gains, sc)
    drift = metrics(tr, eq)["drift_rel"]
    add("simulation.equilibrium_hold", -drift, 1e-6)
    passed = all(c["passed"] for c in checks)
    failed = [c["name"] for c in checks if not c["passed"]]
    return {"network_hash": network_hash(net), "passed": passed, "failed": failed, "checks": checks}


def _codesign_values(design: Design) -> dict:
    cs = design.codesign
    vals = {"p": cs.p, "gamma_t": cs.gamma_t}
    if len(cs.p_line):
        vals["p_line"] = cs.p_line
    if len(cs.p_load):
        vals["p_load"] = cs.p_load
    return vals


def run_report(net: MgNetwork, design: Design, out: Path, metrics_doc: Optional[dict] = None) -> list:
    """CSV tables of gains and certificates plus a plain-text summary."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ids = [dg.id for dg in net.dgs]
    g = design.gains
    rows = ["from,to,K_P,K_Q,K_Omega"]
    for (j, i) in g.edges():
        rows.append(",".join([ids[j], ids[i]] + [_fmt_float(float(K[i, j]) + 0.0)
                                                 for K in (g.K_P, g.K_Q, g.K_Omega)]))
    (out / "gains.csv").write_text("\n".join(rows) + "\n")
    rows = ["subsystem,kind,nu,nu_w,rho,lmi_residual"]
    for name, c in ([(ids[i], c) for i, c in enumerate(design.dg_certs)]
                    + [(ln.id, c) for ln, c in zip(net.lines, design.line_certs)]
                    + [(ld.id, c) for ld, c in zip(net.loads, design.load_certs)]):
        vals = [c.nu, c.nu_w, c.rho, c.lmi_residual]
        rows.append(",".join([name, c.kind] + ["" if x is None else _fmt_float(float(x)) for x in vals]))
    (out / "certificates.csv").write_text("\n".join(rows) + "\n")
    summary = [
        f"DGs: {net.N}  lines: {net.L}  loads: {net.M}",
        f"L2 gain bound gamma: {design.codesign.gamma:.6g}",
        f"communication edges: {len(g.edges())}",
        f"global LMI min eigenvalue: {design.codesign.min_eig:.3e}",
        f"sparsified LMI min eigenvalue: {design.topology_min_eig:.3e}",
    ]
    if metrics_doc:
        for r, m in enumerate(metrics_doc.get("metrics", [])):
            summary.append(f"realization {r}: " + ", ".join(
                f"{k}={v:.3g}" for k, v in m.items() if isinstance(v, float)))
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    return [out / "gains.csv", out / "certificates.csv", out / "summary.txt"]
