"""Command-line driver: ``mgcodesign <command> --config cfg.json --out dir``.

Exit codes: 0 success, 1 input error, 2 numerical failure or singular
network, 3 infeasible design or failed verification.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import pipeline
from .codesign import CodesignError
from .config import ConfigError, load_pipeline_config
from .equilibrium import EquilibriumError
from .localsynth import SynthesisError
from .setpoint import SetpointError
from .sim import SimulationError

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_INPUT", "EXIT_NUMERICAL", "EXIT_INFEASIBLE"]

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2
EXIT_INFEASIBLE = 3

log = logging.getLogger("mgcodesign")

COMMANDS = ("equilibrium", "setpoint", "design", "simulate", "verify", "report")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mgcodesign", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, type=Path,
                    help="pipeline config or bare network JSON")
    ap.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--design", type=Path, default=None,
                    help="design document for simulate/verify/report (default OUT/design.json)")
    ap.add_argument("--setpoint-tol", type=float, default=None,
                    help="equality tolerance of the sharing constraints")
    ap.add_argument("--dump-lmi", action="store_true",
                    help="also write the global LMI variable table and dense matrices")
    ap.add_argument("--emit-dot", action="store_true",
                    help="also write the communication topology as GraphViz")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _load_design(args, net):
    path = args.design or args.out / "design.json"
    if not path.exists():
        raise ConfigError(f"{path}: design document not found (run 'design' first)")
    try:
        return pipeline.load_design(pipeline.read_json(path), net)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed design document ({exc})") from None


def _run(args) -> int:
    if args.seed is not None and args.seed < 0:
        raise ConfigError("--seed must be nonnegative")
    if args.setpoint_tol is not None and not args.setpoint_tol > 0:
        raise ConfigError("--setpoint-tol must be positive")
    cfg, net = load_pipeline_config(args.config)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command

    if cmd == "setpoint":
        res = pipeline.run_setpoint(cfg, net, args.setpoint_tol)
        pipeline.write_json(out / "setpoint.json", pipeline.setpoint_document(net, res))
        log.info("setpoint: P_s=%.6g Q_s=%.6g residual=%.2e", res.P_s, res.Q_s, res.residual)
        return EXIT_OK

    if cmd == "equilibrium":
        V_r = None
        sp_path = out / "setpoint.json"
        if sp_path.exists():
            doc = pipeline.read_json(sp_path)
            pipeline.check_hash(doc, net, "setpoint")
            V_r = doc["setpoint"]["V_r"]
        eq, res = pipeline.run_equilibrium(cfg, net, V_r)
        pipeline.write_json(out / "equilibrium.json", pipeline.equilibrium_document(net, eq, res))
        log.info("equilibrium: max residual %.2e", max(res.values()))
        return EXIT_OK

    if cmd == "design":
        design, prob = pipeline.run_design(cfg, net, args.setpoint_tol)
        pipeline.write_json(out / "design.json", design.to_dict(net, cfg))
        if args.dump_lmi:
            from .codesign import assemble_global_lmi
            sdp = assemble_global_lmi(prob)
            pipeline.write_json(out / "lmi_dump.json",
                                sdp.debug_dump(design.codesign.values, affine=True))
        if args.emit_dot:
            (out / "topology.dot").write_text(pipeline.topology_dot(net, design))
        log.info("design: gamma=%.6g edges=%d", design.codesign.gamma, len(design.gains.edges()))
        return EXIT_OK

    design = _load_design(args, net)
    if cmd == "simulate":
        doc = pipeline.run_simulate(cfg, net, design, out, args.seed)
        for r, m in enumerate(doc["metrics"]):
            log.info("realization %d: voltage_max=%.3g l2_gain=%s", r, m["voltage_max"], m["l2_gain"])
        return EXIT_OK
    if cmd == "verify":
        rep = pipeline.run_verify(cfg, net, design)
        pipeline.write_json(out / "verify.json", rep)
        for c in rep["checks"]:
            print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} margin={c['margin']:.3e}")
        return EXIT_OK if rep["passed"] else EXIT_INFEASIBLE
    if cmd == "report":
        mpath = out / "metrics.json"
        mdoc = pipeline.read_json(mpath) if mpath.exists() else None
        for p in pipeline.run_report(net, design, out, mdoc):
            log.info("wrote %s", p)
        return EXIT_OK
    raise AssertionError(cmd)


def _status(exc) -> Optional[str]:
    details = getattr(exc, "details", None) or {}
    return details.get("status") if isinstance(details, dict) else None


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except (ConfigError, pipeline.StaleArtifactError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EquilibriumError, SimulationError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SynthesisError, CodesignError) as exc:
        where = getattr(exc, "subsystem", None)
        prefix = f"{where}: " if where else ""
        if _status(exc) == "numerical-failure":
            print(f"numerical error: {prefix}{exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        print(f"infeasible: {prefix}{exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SetpointError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
