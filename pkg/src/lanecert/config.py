"""Run configuration: one validated object shared by every pipeline stage.

A config file is plain JSON with five sections (all optional, defaults fill
the gaps): "vehicle", "controller", "certify", "expert", "train", plus
top-level "scenarios", "seed", "out_dir".  Speeds in the file are km/h for
readability; `VehicleParams` stores m/s.

Every artifact the pipeline writes embeds `config_hash(cfg)` so downstream
commands can refuse mismatched inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .vehicle_model import VehicleParams

KMH = 1.0 / 3.6


@dataclass(frozen=True)
class CertifyConfig:
    """Settings consumed by the certification commands."""

    rho: float = 0.99
    mu_d: float = 1.0
    mu_phi: float = 1.0
    pd_margin: float = 1e-6
    qc_margin: float = 1e-6
    d_max: tuple[float, float] = (0.01, 0.01)
    mu_grid: tuple[float, ...] = ()   # empty: no grid search

    def __post_init__(self):
        if not (0.0 < self.rho < 1.0):
            raise ParameterError(f"decay rate rho must lie in (0, 1), got {self.rho}")
        if self.mu_d <= 0 or self.mu_phi <= 0:
            raise ParameterError("input weights mu_d, mu_phi must be positive")
        if self.pd_margin <= 0 or self.qc_margin <= 0:
            raise ParameterError("certification margins must be positive")
        if len(self.d_max) != 2 or any(v < 0 for v in self.d_max):
            raise ParameterError(f"d_max must be two nonnegative entries, got {self.d_max}")
        if any(g <= 0 for g in self.mu_grid):
            raise ParameterError("mu_grid entries must be positive")


@dataclass(frozen=True)
class ExpertConfig:
    """Preview-LQR expert weights; implementer defaults, recorded here."""

    q_diag: tuple[float, float, float, float] = (1.0, 0.1, 1.0, 0.1)
    r: float = 10.0
    horizon: int = 50

    def __post_init__(self):
        if any(q < 0 for q in self.q_diag):
            raise ParameterError("state weights must be nonnegative")
        if self.r <= 0:
            raise ParameterError(f"input weight r must be positive, got {self.r}")
        if self.horizon < 1:
            raise ParameterError(f"preview horizon must be >= 1, got {self.horizon}")


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 0.05
    epochs: int = 300
    batch_size: int = 4
    truncation: int = 400
    init_scale: float = 0.2

    def __post_init__(self):
        if self.lr < 0:
            raise ParameterError(f"learning rate must be nonnegative, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1 or self.truncation < 1:
            raise ParameterError("epochs, batch_size and truncation must be positive")
        if self.init_scale <= 0:
            raise ParameterError("weight-init scale must be positive")


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline command needs, validated up front."""

    vehicle: VehicleParams = field(default_factory=VehicleParams)
    n_xi: int = 8
    n_phi: int = 8
    activation: str = "tanh"
    certify: CertifyConfig = field(default_factory=CertifyConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    scenarios: tuple[dict, ...] = ()
    seed: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        if self.n_xi < 1 or self.n_phi < 1:
            raise ParameterError("controller sizes n_xi, n_phi must be positive")
        if self.activation not in ("tanh", "relu"):
            raise ParameterError(f"unsupported activation '{self.activation}'")


def config_dict(cfg: RunConfig) -> dict:
    """Canonical plain-dict form (km/h speeds restored for readability)."""
    veh = asdict(cfg.vehicle)
    veh["V_nom_kmh"] = veh.pop("V_nom") * 3.6
    veh["dV_max_kmh"] = veh.pop("dV_max") * 3.6
    return {
        "vehicle": veh,
        "controller": {"n_xi": cfg.n_xi, "n_phi": cfg.n_phi,
                       "activation": cfg.activation},
        "certify": {"rho": cfg.certify.rho, "mu_d": cfg.certify.mu_d,
                    "mu_phi": cfg.certify.mu_phi,
                    "pd_margin": cfg.certify.pd_margin,
                    "qc_margin": cfg.certify.qc_margin,
                    "d_max": list(cfg.certify.d_max),
                    "mu_grid": list(cfg.certify.mu_grid)},
        "expert": {"q_diag": list(cfg.expert.q_diag), "r": cfg.expert.r,
                   "horizon": cfg.expert.horizon},
        "train": {"lr": cfg.train.lr, "epochs": cfg.train.epochs,
                  "batch_size": cfg.train.batch_size,
                  "truncation": cfg.train.truncation,
                  "init_scale": cfg.train.init_scale},
        "scenarios": [dict(s) for s in cfg.scenarios],
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
    }


def canonical_hash(payload: dict) -> str:
    """sha256 of the canonical JSON encoding (sorted keys, repr floats)."""
    text = json.dumps(_plain(payload), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _plain(obj):
    """Recursively reduce to JSON-stable builtins (floats via repr round-trip)."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def config_hash(cfg: RunConfig) -> str:
    return canonical_hash(config_dict(cfg))


def default_config() -> RunConfig:
    return RunConfig()


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ParameterError(f"config section '{name}' must be an object")
    return dict(sec)


def config_from_dict(raw: dict) -> RunConfig:
    try:
        veh = _section(raw, "vehicle")
        if "V_nom_kmh" in veh:
            veh["V_nom"] = float(veh.pop("V_nom_kmh")) * KMH
        if "dV_max_kmh" in veh:
            veh["dV_max"] = float(veh.pop("dV_max_kmh")) * KMH
        ctrl = _section(raw, "controller")
        cert = _section(raw, "certify")
        if "d_max" in cert:
            cert["d_max"] = tuple(float(v) for v in cert["d_max"])
        if "mu_grid" in cert:
            cert["mu_grid"] = tuple(float(v) for v in cert["mu_grid"])
        exp = _section(raw, "expert")
        if "q_diag" in exp:
            exp["q_diag"] = tuple(float(v) for v in exp["q_diag"])
        tr = _section(raw, "train")
        scenarios = raw.get("scenarios", [])
        if not isinstance(scenarios, list):
            raise ParameterError("config 'scenarios' must be a list")
        return RunConfig(
            vehicle=VehicleParams(**veh),
            n_xi=int(ctrl.get("n_xi", 8)),
            n_phi=int(ctrl.get("n_phi", 8)),
            activation=str(ctrl.get("activation", "tanh")),
            certify=CertifyConfig(**cert),
            expert=ExpertConfig(**exp),
            train=TrainSettings(**tr),
            scenarios=tuple(dict(s) for s in scenarios),
            seed=int(raw.get("seed", 0)),
            out_dir=str(raw.get("out_dir", "out")),
        )
    except TypeError as exc:
        raise ParameterError(f"unknown config key: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ParameterError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParameterError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParameterError(f"config file {path} must contain a JSON object")
    return config_from_dict(raw)


def save_config(cfg: RunConfig, path):
    Path(path).write_text(json.dumps(config_dict(cfg), indent=1, sort_keys=True))
