"""Closed-loop time-domain simulation with the true speed-varying plant.

The simulator always steps the physical model rebuilt at the actual speed
V_x(k); the augmented uncertain system is only used by `replay_augmented`,
which exists to demonstrate (and test) that both paths produce the same
trajectories when the speed stays inside the certified band.

Trajectory CSV column order (one row per step k, final row state-only):
    k, x1..x4, xi1..xi{n_xi}, u, phi1, phi2, d1, d2, y1, y2, Vx, kappa
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .closed_loop import assemble, augmented_step, consistent_signals
from .config import canonical_hash
from .errors import (DivergenceError, ParameterError, ShapeError,
                     StaleCertificateError)
from .reach_monitor import eyL_bound, init as monitor_init, step as monitor_step
from .rnn_controller import MATRIX_KEYS, RnnController, loop_transform, rnn_step
from .vehicle_model import VehicleParams, build_nominal_plant, build_uncertain_plant

BLOWUP_LIMIT = 1.0e6
DISTURBANCE_POLICIES = ("none", "bounded-random", "worst-case-corner")


@dataclass(frozen=True)
class Scenario:
    """A complete, self-contained driving situation.

    Speed and curvature are stored per step; `dt` records the sample time the
    profiles were generated for (must match the vehicle config at run time).
    """

    name: str
    Vx: np.ndarray                  # (n,) longitudinal speed [m/s]
    kappa: np.ndarray               # (n,) road curvature [1/m]
    disturbance: str = "none"
    seed: int = 0
    d_max: tuple[float, float] = (0.01, 0.01)
    x0: np.ndarray = field(default_factory=lambda: np.zeros(4))
    dt: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "Vx", np.asarray(self.Vx, dtype=float))
        object.__setattr__(self, "kappa", np.asarray(self.kappa, dtype=float))
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        if self.Vx.ndim != 1 or self.Vx.size == 0:
            raise ShapeError("speed profile must be a nonempty 1-d array")
        if self.kappa.shape != self.Vx.shape:
            raise ShapeError("speed and curvature profiles must have equal length")
        if not (np.all(np.isfinite(self.Vx)) and np.all(np.isfinite(self.kappa))):
            raise ParameterError("speed and curvature profiles must be finite")
        if self.disturbance not in DISTURBANCE_POLICIES:
            raise ParameterError(
                f"unknown disturbance policy '{self.disturbance}'; "
                f"choose one of {DISTURBANCE_POLICIES}")
        if len(self.d_max) != 2 or any(v < 0 for v in self.d_max):
            raise ParameterError(f"d_max must be two nonnegative entries, got {self.d_max}")
        if self.x0.shape != (4,) or not np.all(np.isfinite(self.x0)):
            raise ShapeError("initial state must be a finite 4-vector")
        if self.dt <= 0:
            raise ParameterError(f"sample time must be positive, got {self.dt}")

    @property
    def n_steps(self) -> int:
        return self.Vx.size

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt


def scenario_dict(scn: Scenario) -> dict:
    return {
        "name": scn.name, "dt": scn.dt,
        "Vx": scn.Vx.tolist(), "kappa": scn.kappa.tolist(),
        "disturbance": scn.disturbance, "seed": scn.seed,
        "d_max": list(scn.d_max), "x0": scn.x0.tolist(),
    }


def scenario_hash(scn: Scenario) -> str:
    return canonical_hash(scenario_dict(scn))


def save_scenario(scn: Scenario, path):
    Path(path).write_text(json.dumps(scenario_dict(scn), indent=1, sort_keys=True))


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ParameterError(f"scenario file not found: {path}")
    try:
        raw = json.loads(path.read_text())
        return Scenario(name=raw["name"], Vx=raw["Vx"], kappa=raw["kappa"],
                        disturbance=raw.get("disturbance", "none"),
                        seed=int(raw.get("seed", 0)),
                        d_max=tuple(raw.get("d_max", (0.01, 0.01))),
                        x0=raw.get("x0", np.zeros(4)),
                        dt=float(raw.get("dt", 0.02)))
    except (KeyError, json.JSONDecodeError, TypeError) as exc:
        raise ParameterError(f"cannot read scenario {path}: {exc}") from exc


def controller_hash(rnn: RnnController) -> str:
    payload = {key: getattr(rnn, key).tolist() for key in MATRIX_KEYS}
    payload["activation"] = rnn.activation
    payload["alpha"] = rnn.alpha.tolist()
    payload["beta"] = rnn.beta.tolist()
    return canonical_hash(payload)


# ----------------------------------------------------------------------
# road and speed profile generators (synthetic; the real road data behind
# the original experiments is not public, so these are labeled synthetic)

def straight_road(n: int) -> np.ndarray:
    return np.zeros(int(n))


def constant_radius_road(n: int, kappa: float = 5e-4) -> np.ndarray:
    return np.full(int(n), float(kappa))


def s_curve_road(n: int, kappa_max: float = 8e-4, period: int = 600) -> np.ndarray:
    k = np.arange(int(n))
    return float(kappa_max) * np.sin(2.0 * np.pi * k / float(period))


def clothoid_ramp_road(n: int, kappa_max: float = 1e-3, ramp: int = 300) -> np.ndarray:
    """Curvature grows linearly with arc length, then holds (entry spiral)."""
    k = np.arange(int(n), dtype=float)
    return float(kappa_max) * np.minimum(k / float(ramp), 1.0)


ROAD_BUILDERS = {
    "straight": straight_road,
    "constant_radius": constant_radius_road,
    "s_curve": s_curve_road,
    "clothoid_ramp": clothoid_ramp_road,
}


def constant_speed(n: int, V: float) -> np.ndarray:
    return np.full(int(n), float(V))


def sine_speed(n: int, params: VehicleParams, amp: float = 1.0,
               period: int = 700, phase: float = 0.0) -> np.ndarray:
    """Speed oscillating inside the certified band; amp in [0, 1]."""
    if not (0.0 <= amp <= 1.0):
        raise ParameterError(f"speed amplitude must lie in [0, 1], got {amp}")
    k = np.arange(int(n))
    return params.V_nom + amp * params.dV_max * np.sin(
        2.0 * np.pi * k / float(period) + phase)


def random_speed_profile(n: int, params: VehicleParams, rng) -> np.ndarray:
    """Smooth random speed staying strictly inside the certified band."""
    k = np.arange(int(n))
    a = rng.uniform(0.2, 0.6)
    b = rng.uniform(0.1, 1.0 - a)          # |a sin + b sin| <= a + b <= 1
    p1 = rng.uniform(300.0, 900.0)
    p2 = rng.uniform(150.0, 500.0)
    ph1, ph2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
    wave = a * np.sin(2.0 * np.pi * k / p1 + ph1) + b * np.sin(2.0 * np.pi * k / p2 + ph2)
    return params.V_nom + params.dV_max * wave


def random_road(n: int, rng) -> np.ndarray:
    kind = rng.choice(("straight", "constant_radius", "s_curve", "clothoid_ramp"))
    if kind == "straight":
        return straight_road(n)
    if kind == "constant_radius":
        return constant_radius_road(n, kappa=rng.uniform(2e-4, 1e-3) * rng.choice((-1, 1)))
    if kind == "s_curve":
        return s_curve_road(n, kappa_max=rng.uniform(2e-4, 1e-3),
                            period=int(rng.uniform(300, 900)))
    return clothoid_ramp_road(n, kappa_max=rng.uniform(2e-4, 1e-3) * rng.choice((-1, 1)),
                              ramp=int(rng.uniform(150, 400)))


def random_scenario(params: VehicleParams, rng, n_steps: int = 400,
                    d_max: tuple[float, float] = (0.01, 0.01),
                    disturbance: str = "bounded-random",
                    name: str = "mc") -> Scenario:
    """One admissible randomized realization for Monte-Carlo sweeps."""
    x0 = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 0.1),
                   rng.uniform(-0.02, 0.02), rng.uniform(-0.05, 0.05)])
    return Scenario(name=name, Vx=random_speed_profile(n_steps, params, rng),
                    kappa=random_road(n_steps, rng), disturbance=disturbance,
                    seed=int(rng.integers(0, 2**31 - 1)), d_max=tuple(d_max),
                    x0=x0, dt=params.T)


def scenario_from_spec(spec: dict, params: VehicleParams, seed: int = 0) -> Scenario:
    """Build a Scenario from a config-file entry (road/speed generator names)."""
    spec = dict(spec)
    n = int(spec.get("n_steps", 400))
    road = spec.get("road", "straight")
    if road not in ROAD_BUILDERS:
        raise ParameterError(f"unknown road profile '{road}'; choose one of "
                             f"{tuple(ROAD_BUILDERS)}")
    road_kwargs = {k: spec[k] for k in ("kappa", "kappa_max", "period", "ramp")
                   if k in spec}
    kappa = ROAD_BUILDERS[road](n, **road_kwargs)
    speed = spec.get("speed", "nominal")
    if speed == "nominal":
        Vx = constant_speed(n, params.V_nom)
    elif speed == "sine":
        Vx = sine_speed(n, params, amp=float(spec.get("amp", 0.9)),
                        period=int(spec.get("speed_period", 700)),
                        phase=float(spec.get("phase", 0.0)))
    elif speed == "random":
        Vx = random_speed_profile(n, params, np.random.default_rng(seed))
    else:
        raise ParameterError(f"unknown speed profile '{speed}'")
    return Scenario(name=str(spec.get("name", road)), Vx=Vx, kappa=kappa,
                    disturbance=str(spec.get("disturbance", "none")),
                    seed=seed, d_max=tuple(spec.get("d_max", (0.01, 0.01))),
                    x0=np.asarray(spec.get("x0", np.zeros(4)), dtype=float),
                    dt=params.T)


def phi_from_road(Vx: float, kappa: float, params: VehicleParams) -> np.ndarray:
    """Road-geometry external input [desired yaw rate; look-ahead heading gap].

    The second component uses the heading change over the look-ahead arc at
    locally constant curvature and small angles: kappa * L.  This is the
    simplest estimator consistent with a preview point L metres ahead; swap
    it out here if a better road model is available.
    """
    if not (np.isfinite(Vx) and np.isfinite(kappa)):
        raise ParameterError("speed and curvature must be finite")
    return np.array([Vx * kappa, kappa * params.L])


def disturbance_sequence(policy: str, n: int, d_max, seed: int) -> np.ndarray:
    """Per-step disturbance rows with ||d_k||_2 <= ||d_max||_2."""
    d_max = np.asarray(d_max, dtype=float)
    if policy == "none":
        return np.zeros((n, 2))
    rng = np.random.default_rng(seed)
    if policy == "bounded-random":
        # uniform in the infinity-norm box, then scaled into the 2-norm ball
        raw = rng.uniform(-1.0, 1.0, size=(n, 2)) * d_max
        norms = np.linalg.norm(raw, axis=1)
        cap = np.linalg.norm(d_max)
        scale = np.where(norms > cap, np.where(norms > 0, cap / np.maximum(norms, 1e-300), 1.0), 1.0)
        return raw * scale[:, None]
    if policy == "worst-case-corner":
        # every corner of the box has 2-norm exactly ||d_max||_2
        signs = rng.choice((-1.0, 1.0), size=(n, 2))
        return signs * d_max
    raise ParameterError(f"unknown disturbance policy '{policy}'")


@dataclass(frozen=True)
class Trajectory:
    """Closed-loop run record; x and xi have one more row than the inputs."""

    x: np.ndarray          # (n+1, 4)
    xi: np.ndarray         # (n+1, n_xi)
    u: np.ndarray          # (n,)
    phi: np.ndarray        # (n, 2) road signal (disturbance excluded)
    d: np.ndarray          # (n, 2)
    y: np.ndarray          # (n, 2)
    Vx: np.ndarray         # (n,) speeds actually applied (after any clamping)
    kappa: np.ndarray      # (n,)
    scenario_hash: str = ""
    controller_hash: str = ""

    @property
    def n_steps(self) -> int:
        return self.u.size

    @property
    def e_yL(self) -> np.ndarray:
        return self.x[:, 0]

    def __post_init__(self):
        n = self.u.size
        if self.x.shape[0] != n + 1 or self.xi.shape[0] != n + 1:
            raise ShapeError("state arrays must have one more row than inputs")
        for name in ("phi", "d", "y"):
            if getattr(self, name).shape != (n, 2):
                raise ShapeError(f"trajectory field {name} must have shape ({n}, 2)")
        if self.Vx.shape != (n,) or self.kappa.shape != (n,):
            raise ShapeError("speed and curvature records must have length n")


def simulate(scenario: Scenario, rnn: RnnController, params: VehicleParams,
             clamp_speed: bool = False) -> Trajectory:
    """Roll the true plant at V_x(k) with the controller in feedback.

    The disturbance enters through the same input channel as the road signal
    (the plant's road and disturbance input matrices coincide by design), so
    the plant sees phi_k + d_k.  Raises DivergenceError when any state
    magnitude exceeds 1e6.
    """
    if abs(scenario.dt - params.T) > 1e-12:
        raise ParameterError(
            f"scenario sample time {scenario.dt} does not match vehicle T {params.T}")
    n = scenario.n_steps
    Vx = scenario.Vx.copy()
    lo, hi = params.speed_band
    if clamp_speed:
        clipped = np.clip(Vx, lo, hi)
        if not np.array_equal(clipped, Vx):
            warnings.warn(
                f"scenario '{scenario.name}' leaves the certified speed band "
                f"[{lo:.3f}, {hi:.3f}] m/s; clamping for the certified run",
                stacklevel=2)
        Vx = clipped

    d_seq = disturbance_sequence(scenario.disturbance, n, scenario.d_max,
                                 scenario.seed)
    n_xi = rnn.n_xi
    x = np.zeros((n + 1, 4))
    xi = np.zeros((n + 1, n_xi))
    u = np.zeros(n)
    phi = np.zeros((n, 2))
    y = np.zeros((n, 2))
    x[0] = scenario.x0

    xk = scenario.x0.copy()
    xik = np.zeros(n_xi)
    for k in range(n):
        plant = build_nominal_plant(params, Vx[k])
        yk = plant.C_G @ xk
        xik_next, uk, _, _ = rnn_step(rnn, xik, yk)
        phik = phi_from_road(Vx[k], scenario.kappa[k], params)
        xk = plant.A_G @ xk + plant.B_G1[:, 0] * uk + plant.B_G2 @ (phik + d_seq[k])
        xik = xik_next
        if np.max(np.abs(xk)) > BLOWUP_LIMIT or np.max(np.abs(xik)) > BLOWUP_LIMIT:
            raise DivergenceError(k, f"state magnitude exceeded {BLOWUP_LIMIT:.0e} "
                                     f"at step {k} of scenario '{scenario.name}'")
        y[k], u[k], phi[k] = yk, uk, phik
        x[k + 1], xi[k + 1] = xk, xik

    return Trajectory(x=x, xi=xi, u=u, phi=phi, d=d_seq, y=y, Vx=Vx,
                      kappa=scenario.kappa.copy(),
                      scenario_hash=scenario_hash(scenario),
                      controller_hash=controller_hash(rnn))


def replay_augmented(scenario: Scenario, rnn: RnnController,
                     params: VehicleParams) -> np.ndarray:
    """Replay a scenario through the augmented uncertain interconnection.

    Returns the (n+1, 4 + n_xi) joint state sequence.  Requires the speed
    profile to stay within the certified band (the normalized uncertainty
    must satisfy |Delta| <= 1); used to check equivalence with `simulate`.
    """
    lo, hi = params.speed_band
    if np.any(scenario.Vx < lo - 1e-12) or np.any(scenario.Vx > hi + 1e-12):
        raise ParameterError("augmented replay requires speeds inside the certified band")
    up = build_uncertain_plant(params)
    aug = assemble(up, loop_transform(rnn))
    n = scenario.n_steps
    d_seq = disturbance_sequence(scenario.disturbance, n, scenario.d_max,
                                 scenario.seed)
    zeta = np.concatenate([scenario.x0, np.zeros(rnn.n_xi)])
    out = np.zeros((n + 1, zeta.size))
    out[0] = zeta
    for k in range(n):
        delta = 0.0 if params.dV_max == 0 else (scenario.Vx[k] - params.V_nom) / params.dV_max
        phik = phi_from_road(scenario.Vx[k], scenario.kappa[k], params)
        q, w = consistent_signals(aug, zeta, phik, d_seq[k], delta)
        zeta, _, _ = augmented_step(aug, zeta, phik, q, w, d_seq[k])
        out[k + 1] = zeta
    return out


# ----------------------------------------------------------------------
# trajectory CSV round-trip

def trajectory_to_csv(traj: Trajectory, path):
    n, n_xi = traj.n_steps, traj.xi.shape[1]
    header = (["k"] + [f"x{i+1}" for i in range(4)]
              + [f"xi{i+1}" for i in range(n_xi)]
              + ["u", "phi1", "phi2", "d1", "d2", "y1", "y2", "Vx", "kappa"])
    with open(path, "w", newline="") as fh:
        fh.write(f"# scenario_hash={traj.scenario_hash}\n")
        fh.write(f"# controller_hash={traj.controller_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(n):
            row = ([k] + [repr(v) for v in traj.x[k]]
                   + [repr(v) for v in traj.xi[k]]
                   + [repr(traj.u[k]), repr(traj.phi[k, 0]), repr(traj.phi[k, 1]),
                      repr(traj.d[k, 0]), repr(traj.d[k, 1]),
                      repr(traj.y[k, 0]), repr(traj.y[k, 1]),
                      repr(traj.Vx[k]), repr(traj.kappa[k])])
            writer.writerow(row)
        # terminal state row: inputs left empty
        writer.writerow([n] + [repr(v) for v in traj.x[n]]
                        + [repr(v) for v in traj.xi[n]] + [""] * 9)


def trajectory_from_csv(path) -> Trajectory:
    path = Path(path)
    if not path.exists():
        raise ParameterError(f"trajectory file not found: {path}")
    meta = {"scenario_hash": "", "controller_hash": ""}
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, val = line.lstrip("# ").partition("=")
                if key in meta:
                    meta[key] = val
                continue
            rows.append(next(csv.reader([line])))
    header, body = rows[0], rows[1:]
    n_xi = sum(1 for name in header if name.startswith("xi"))
    n = len(body) - 1
    if n < 1:
        raise ParameterError(f"trajectory {path} has no steps")
    x = np.zeros((n + 1, 4))
    xi = np.zeros((n + 1, n_xi))
    tail = np.zeros((n, 9))
    for i, row in enumerate(body):
        x[i] = [float(v) for v in row[1:5]]
        xi[i] = [float(v) for v in row[5:5 + n_xi]]
        if i < n:
            tail[i] = [float(v) for v in row[5 + n_xi:5 + n_xi + 9]]
    return Trajectory(x=x, xi=xi, u=tail[:, 0], phi=tail[:, 1:3], d=tail[:, 3:5],
                      y=tail[:, 5:7], Vx=tail[:, 7], kappa=tail[:, 8],
                      scenario_hash=meta["scenario_hash"],
                      controller_hash=meta["controller_hash"])


# ----------------------------------------------------------------------
# Monte-Carlo containment harness

@dataclass(frozen=True)
class ContainmentReport:
    n_runs: int
    violations: int
    worst_margin: float         # min over runs of min_k (bound_k - |e_yL(k)|)
    dominance_ok: bool          # sigma_bar >= sigma >= zeta' P zeta throughout
    rows: tuple = ()            # per-run summaries

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.dominance_ok


def containment_report_to_csv(report: ContainmentReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "scenario", "steps", "min_margin",
                         "max_abs_eyL", "max_bound", "violated"])
        for row in report.rows:
            writer.writerow([row["run"], row["scenario"], row["steps"],
                             repr(row["min_margin"]), repr(row["max_abs_eyL"]),
                             repr(row["max_bound"]), int(row["violated"])])
        writer.writerow(["total", "", "", repr(report.worst_margin), "", "",
                         report.violations])


def check_containment(traj: Trajectory, cert, d_max,
                      dominance_tol: float = 1e-9):
    """Replay the bound recursion along one trajectory.

    Returns (min margin, bound array, dominance flag).  The actual-d sigma
    recursion is advanced alongside for the dominance check; deployment uses
    only the d_max-fed upper recursion.
    """
    n = traj.n_steps
    zeta0 = np.concatenate([traj.x[0], traj.xi[0]])
    ms = monitor_init(cert, zeta0, d_max=d_max)
    P = cert.P
    zetas = np.hstack([traj.x, traj.xi])
    vals = np.einsum("ki,ij,kj->k", zetas, P, zetas)
    bounds = np.zeros(n + 1)
    sigmas = np.zeros(n + 1)
    sigma_bars = np.zeros(n + 1)
    for k in range(n + 1):
        bounds[k] = eyL_bound(ms)
        sigmas[k], sigma_bars[k] = ms.sigma, ms.sigma_bar
        if k < n:
            ms = monitor_step(ms, traj.phi[k], d_k=traj.d[k])
    scale = 1.0 + np.abs(sigma_bars)
    dominance = bool(np.all(sigma_bars - sigmas >= -dominance_tol * scale)
                     and np.all(sigmas - vals >= -dominance_tol * scale))
    margins = bounds - np.abs(traj.e_yL)
    return float(margins.min()), bounds, dominance


def monte_carlo_containment(family, cert, n_runs: int, seed: int,
                            rnn: RnnController, params: VehicleParams,
                            config_hash: str = "") -> ContainmentReport:
    """Run randomized admissible realizations and count bound violations.

    `family` is a callable rng -> Scenario producing certification-consistent
    runs (speed inside the band, ||d|| <= ||d_max||).  Refuses certificates
    whose embedded config hash differs from the one supplied.
    """
    if config_hash and cert.config_hash and config_hash != cert.config_hash:
        raise StaleCertificateError(
            "certificate was produced under a different configuration "
            f"(expected {config_hash[:12]}..., certificate has "
            f"{cert.config_hash[:12]}...)")
    rows = []
    violations = 0
    worst = np.inf
    dominance_all = True
    for i in range(int(n_runs)):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        scn = family(rng)
        traj = simulate(scn, rnn, params, clamp_speed=True)
        margin, bounds, dom = check_containment(traj, cert, scn.d_max)
        dominance_all = dominance_all and dom
        violated = margin < 0.0
        violations += int(violated)
        worst = min(worst, margin)
        rows.append({"run": i, "scenario": scn.name, "steps": scn.n_steps,
                     "min_margin": margin,
                     "max_abs_eyL": float(np.max(np.abs(traj.e_yL))),
                     "max_bound": float(bounds.max()), "violated": violated})
    return ContainmentReport(n_runs=int(n_runs), violations=violations,
                             worst_margin=float(worst),
                             dominance_ok=dominance_all, rows=tuple(rows))
