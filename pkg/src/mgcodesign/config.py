"""JSON schemas for network descriptions and pipeline options.

Validation is done with pydantic models that forbid unknown keys, so a typo
in a field name is reported with its location instead of being ignored.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .dqnet import (
    DEFAULT_OMEGA0,
    DgParams,
    DqValue,
    LineParams,
    LoadParams,
    MgNetwork,
    NetworkError,
)

__all__ = [
    "ConfigError",
    "DqModel",
    "DgModel",
    "LoadModel",
    "LineModel",
    "NetworkModel",
    "PipelineConfig",
    "SetpointOptions",
    "LocalOptions",
    "GlobalOptions",
    "ScenarioOptions",
    "LoadStepModel",
    "load_network",
    "network_from_dict",
    "network_to_dict",
    "network_hash",
    "load_pipeline_config",
]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _no_constant_power(v):
    if v is not None and (v.d != 0.0 or v.q != 0.0):
        raise ValueError("constant-power load components are not supported (must be 0)")
    return v


class DqModel(_Strict):
    d: float
    q: float = 0.0


class DgModel(_Strict):
    id: str
    R_t: float = Field(gt=0)
    L_t: float = Field(gt=0)
    C_t: float = Field(gt=0)
    Y_L: float = Field(ge=0)
    I_L_bar: DqModel = DqModel(d=0.0, q=0.0)
    P_L: Optional[DqModel] = None
    tau: float = Field(gt=0)
    P_max: float = Field(gt=0)
    Q_max: float = Field(gt=0)

    @field_validator("P_L")
    @classmethod
    def _zero_power(cls, v):
        return _no_constant_power(v)


class LoadModel(_Strict):
    id: str
    C_t: float = Field(gt=0)
    Y_L: float = Field(gt=0)
    I_L_bar: DqModel = DqModel(d=0.0, q=0.0)
    P_L: Optional[DqModel] = None

    @field_validator("P_L")
    @classmethod
    def _zero_power(cls, v):
        return _no_constant_power(v)


class LineModel(_Strict):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)
    id: str
    R: float = Field(gt=0)
    L: float = Field(gt=0)
    head: str = Field(alias="from")
    tail: str = Field(alias="to")


class NetworkModel(_Strict):
    omega0: float = Field(default=DEFAULT_OMEGA0, ge=0)
    dgs: list[DgModel] = Field(min_length=1)
    loads: list[LoadModel] = []
    lines: list[LineModel] = []


class SetpointOptions(_Strict):
    enabled: bool = True
    V_r_desired: Optional[list[DqModel]] = None
    V_min: Optional[float] = None
    V_max: Optional[float] = None
    alpha_V: float = Field(default=1.0, ge=0)
    alpha_P: float = Field(default=0.0, ge=0)
    alpha_Q: float = Field(default=0.0, ge=0)
    pin_q: bool = False
    tol_eq: float = Field(default=1e-8, gt=0)
    max_iter: int = Field(default=100, gt=0)


class LocalOptions(_Strict):
    eps: float = Field(default=1e-6, gt=0)
    V_bar: Optional[float] = Field(default=None, gt=0)
    I_bar: Optional[float] = Field(default=None, gt=0)
    nu_fraction: float = Field(default=0.75, gt=0)
    nu_w_max: float = Field(default=100.0, gt=0)
    decay: float = Field(default=10.0, ge=0)
    mode: str = Field(default="full", pattern="^(full|pi-structured)$")
    kappa: float = Field(default=0.01, gt=0, lt=1)
    line_rho_fraction: float = Field(default=0.5, gt=0, lt=1)
    load_rho_fraction: float = Field(default=0.5, gt=0, lt=1)


class GlobalOptions(_Strict):
    eps: float = Field(default=1e-6, gt=0)
    c_ij: float = Field(default=1.0, gt=0)
    c_0: Optional[float] = Field(default=None, gt=0)
    gamma_bar: Optional[float] = Field(default=None, gt=0)
    tau_sparse: float = Field(default=1e-4, ge=0)


class LoadStepModel(_Strict):
    """Constant-current load step: either a ``scale`` of the nominal value or
    an absolute ``I_L_bar``."""

    time: float = Field(ge=0)
    load: str
    scale: Optional[float] = None
    I_L_bar: Optional[DqModel] = None

    @model_validator(mode="after")
    def _one_of(self):
        if (self.scale is None) == (self.I_L_bar is None):
            raise ValueError("give exactly one of scale or I_L_bar")
        return self


class ScenarioOptions(_Strict):
    t_end: float = Field(default=2.0, gt=0)
    dt: float = Field(default=2e-5, gt=0)
    load_steps: list[LoadStepModel] = []
    noise_rms: float = Field(default=0.0, ge=0)
    noise_t_end: Optional[float] = Field(default=None, gt=0)
    noise_cutoff: float = Field(default=1000.0, gt=0)
    realizations: int = Field(default=1, ge=1)
    consensus_period: Optional[float] = Field(default=None, gt=0)
    sample_every: int = Field(default=50, gt=0)
    hold_t_end: float = Field(default=1.0, gt=0)


class PipelineConfig(_Strict):
    """Options for the batch pipeline.  ``network`` is a path (relative to
    the config file) or an inline network object."""

    network: Union[str, NetworkModel]
    seed: int = Field(default=0, ge=0)
    setpoint: SetpointOptions = SetpointOptions()
    local: LocalOptions = LocalOptions()
    codesign: GlobalOptions = GlobalOptions()
    scenario: ScenarioOptions = ScenarioOptions()


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"])
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def network_from_dict(data: dict) -> MgNetwork:
    """Validate a network document and build an :class:`MgNetwork`."""
    try:
        model = NetworkModel.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None
    return _build(model)


def _build(model: NetworkModel) -> MgNetwork:
    dgs = [
        DgParams(
            id=d.id, R_t=d.R_t, L_t=d.L_t, C_t=d.C_t, Y_L=d.Y_L,
            I_L_bar=DqValue(d.I_L_bar.d, d.I_L_bar.q), tau=d.tau,
            P_max=d.P_max, Q_max=d.Q_max,
        )
        for d in model.dgs
    ]
    loads = [
        LoadParams(id=m.id, C_t=m.C_t, Y_L=m.Y_L, I_L_bar=DqValue(m.I_L_bar.d, m.I_L_bar.q))
        for m in model.loads
    ]
    lines = [LineParams(id=l.id, R=l.R, L=l.L, head=l.head, tail=l.tail) for l in model.lines]
    try:
        return MgNetwork(dgs=dgs, loads=loads, lines=lines, omega0=model.omega0)
    except NetworkError as exc:
        raise ConfigError(str(exc)) from None


def load_network(path: Union[str, Path]) -> MgNetwork:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return network_from_dict(data)


def network_to_dict(net: MgNetwork) -> dict:
    return {
        "omega0": net.omega0,
        "dgs": [
            {"id": d.id, "R_t": d.R_t, "L_t": d.L_t, "C_t": d.C_t, "Y_L": d.Y_L,
             "I_L_bar": {"d": d.I_L_bar.d, "q": d.I_L_bar.q}, "tau": d.tau,
             "P_max": d.P_max, "Q_max": d.Q_max}
            for d in net.dgs
        ],
        "loads": [
            {"id": m.id, "C_t": m.C_t, "Y_L": m.Y_L, "I_L_bar": {"d": m.I_L_bar.d, "q": m.I_L_bar.q}}
            for m in net.loads
        ],
        "lines": [
            {"id": l.id, "R": l.R, "L": l.L, "from": l.head, "to": l.tail} for l in net.lines
        ],
    }


def network_hash(net: MgNetwork) -> str:
    """SHA-256 of the canonical JSON form of the network."""
    blob = json.dumps(network_to_dict(net), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def load_pipeline_config(path: Union[str, Path]):
    """Read a pipeline config, returning ``(PipelineConfig, MgNetwork)``.

    A bare network document is accepted as well and gets default options.
    """
    path = Path(path)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(data, dict) and "dgs" in data and "network" not in data:
        data = {"network": data}
    try:
        cfg = PipelineConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None
    if isinstance(cfg.network, str):
        net_path = Path(cfg.network)
        if not net_path.is_absolute():
            net_path = path.parent / net_path
        if not net_path.exists():
            raise ConfigError(f"network: file {net_path} does not exist")
        net = load_network(net_path)
    else:
        net = _build(cfg.network)
    return cfg, net
