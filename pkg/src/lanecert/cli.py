"""Command-line pipeline: data generation, training, certification,
simulation, monitoring, and report emission.

Exit codes: 0 success, 2 configuration or input-file problem, 3 the
requested guarantee is infeasible, 4 a numerical solver failed, 5 a
containment bound was violated.  Reruns with identical configuration and
seeds produce byte-identical CSV and SVG artifacts.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import certify, datagen_train, report, simulator
from .closed_loop import assemble
from .config import RunConfig, config_hash, load_config, save_config
from .errors import (CertificateError, InfeasibleError, ParameterError,
                     SectorError, ShapeError, SolverFailureError,
                     StaleCertificateError, WeightsFormatError)
from .reach_monitor import run_monitor, monitor_csv
from .rnn_controller import load_weights, loop_transform, random_controller, save_weights
from .vehicle_model import build_uncertain_plant

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_SOLVER = 4
EXIT_VIOLATION = 5

DEFAULT_SCENARIO_SPECS = (
    {"name": "straight_nominal", "road": "straight", "speed": "nominal",
     "n_steps": 600},
    {"name": "left_turn", "road": "constant_radius", "kappa": 5e-4,
     "speed": "sine", "amp": 0.8, "n_steps": 600},
    {"name": "right_turn", "road": "constant_radius", "kappa": -4e-4,
     "speed": "sine", "amp": 0.6, "phase": 1.5, "n_steps": 600},
    {"name": "s_curve_fast", "road": "s_curve", "kappa_max": 8e-4,
     "period": 500, "speed": "sine", "amp": 0.9, "n_steps": 600},
    {"name": "s_curve_slow", "road": "s_curve", "kappa_max": 6e-4,
     "period": 800, "speed": "sine", "amp": 0.5, "phase": 3.0, "n_steps": 600},
    {"name": "clothoid", "road": "clothoid_ramp", "kappa_max": 1e-3,
     "ramp": 300, "speed": "sine", "amp": 0.7, "phase": 4.5, "n_steps": 600},
)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out if args.out else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg: RunConfig) -> int:
    return cfg.seed if args.seed is None else int(args.seed)


def _augmented(cfg: RunConfig, rnn):
    return assemble(build_uncertain_plant(cfg.vehicle), loop_transform(rnn))


def _certify_options(cfg: RunConfig) -> certify.CertifyOptions:
    margins = certify.Margins(pd=cfg.certify.pd_margin,
                              qc=cfg.certify.qc_margin)
    return certify.CertifyOptions(margins=margins)


def _scenario_specs(cfg: RunConfig):
    return cfg.scenarios if cfg.scenarios else DEFAULT_SCENARIO_SPECS


def _build_scenarios(cfg: RunConfig, seed: int):
    return [simulator.scenario_from_spec(spec, cfg.vehicle, seed=seed + i)
            for i, spec in enumerate(_scenario_specs(cfg))]


def _require_reach(cert):
    if not isinstance(cert, certify.ReachCertificate):
        raise CertificateError(
            "this command needs a reachability certificate (kind 'reach'); "
            "got a stability certificate")
    return cert


def _check_binding(cert, cfg: RunConfig):
    expected = config_hash(cfg)
    if cert.config_hash and cert.config_hash != expected:
        raise StaleCertificateError(
            "certificate was produced under a different configuration "
            f"(config hash {cert.config_hash[:12]}... vs {expected[:12]}...)")


def cmd_datagen(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    scenarios = _build_scenarios(cfg, seed)
    Q = np.diag(cfg.expert.q_diag)
    ds = datagen_train.generate_dataset(scenarios, cfg.vehicle, Q,
                                        cfg.expert.r, cfg.expert.horizon, seed)
    datagen_train.dataset_to_csv(ds, out / "dataset.csv")
    scen_dir = out / "scenarios"
    scen_dir.mkdir(exist_ok=True)
    for scn in scenarios:
        simulator.save_scenario(scn, scen_dir / f"{scn.name}.json")
    save_config(cfg, out / "config_echo.json")
    print(f"dataset: {len(ds.episodes)} episodes, "
          f"{ds.n_steps_total} steps -> {out / 'dataset.csv'}")
    if ds.meta["rejected"]:
        print(f"rejected scenarios: {ds.meta['rejected']}")
    print(f"config hash: {config_hash(cfg)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    data_path = Path(args.data) if args.data else out / "dataset.csv"
    ds = datagen_train.dataset_from_csv(data_path)
    tc = datagen_train.TrainConfig(lr=cfg.train.lr, epochs=cfg.train.epochs,
                                   batch_size=cfg.train.batch_size,
                                   truncation=cfg.train.truncation, seed=seed,
                                   init_scale=cfg.train.init_scale)
    if args.weights:
        init = load_weights(args.weights)
    else:
        rng = np.random.default_rng(seed)
        init = random_controller(cfg.n_xi, cfg.n_phi, rng,
                                 scale=cfg.train.init_scale,
                                 activation=cfg.activation)
    trained, losses = datagen_train.train(init, ds, tc)
    save_weights(trained, out / "trained_weights.json")
    datagen_train.loss_curve_to_csv(losses, out / "loss_curve.csv")
    report.loss_figure(out / "loss_curve.csv", out / "loss_curve.svg")
    print(f"training loss: {losses[0]:.6e} -> {min(losses):.6e} "
          f"({len(losses) - 1} epochs)")
    print(f"weights: {out / 'trained_weights.json'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    rnn = load_weights(args.weights)
    aug = _augmented(cfg, rnn)
    opts = _certify_options(cfg)
    chash = config_hash(cfg)
    if args.max_rho:
        # diagnostic sweep: largest feasible decay rate on a 0.005 grid
        found = None
        for rho in np.arange(0.995, 0.499, -0.005):
            try:
                found = certify.verify_stability(aug, float(round(rho, 3)),
                                                 opts, config_hash=chash)
                break
            except (InfeasibleError, SolverFailureError):
                continue
        if found is None:
            raise InfeasibleError("no feasible decay rate on the 0.005 grid")
        certify.save_certificate(found, out / "stability_cert.json")
        print(f"largest feasible rho on 0.005 grid: {found.rho}")
        print(f"Feasible (cond(P) = {found.condP:.6e})")
        print(f"certificate: {out / 'stability_cert.json'}")
        return EXIT_OK
    rho = cfg.certify.rho if args.rho is None else float(args.rho)
    cert = certify.verify_stability(aug, rho, opts, config_hash=chash)
    certify.save_certificate(cert, out / "stability_cert.json")
    print(f"Feasible (rho = {rho}, cond(P) = {cert.condP:.6e})")
    print(f"certificate: {out / 'stability_cert.json'}")
    return EXIT_OK


def cmd_reach(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    rnn = load_weights(args.weights)
    aug = _augmented(cfg, rnn)
    opts = _certify_options(cfg)
    chash = config_hash(cfg)
    rho = cfg.certify.rho if args.rho is None else float(args.rho)
    if args.mu_d is None and args.mu_phi is None and cfg.certify.mu_grid:
        cert = certify.mu_grid_search(aug, rho,
                                      grid=np.asarray(cfg.certify.mu_grid),
                                      opts=opts, config_hash=chash)
    else:
        mu_d = cfg.certify.mu_d if args.mu_d is None else float(args.mu_d)
        mu_phi = cfg.certify.mu_phi if args.mu_phi is None else float(args.mu_phi)
        cert = certify.solve_reach(aug, rho, mu_d, mu_phi, opts,
                                   config_hash=chash)
    certify.save_certificate(cert, out / "reach_cert.json")
    print(f"Optimal (rho = {cert.rho}, mu_d = {cert.mu_d}, "
          f"mu_phi = {cert.mu_phi})")
    print(f"gamma = {cert.gamma:.6e}, error metric = {cert.P_eyL:.6e}")
    print(f"certificate: {out / 'reach_cert.json'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    rnn = load_weights(args.weights)
    scn = simulator.load_scenario(args.scenario)
    if args.seed is not None:
        scn = replace(scn, seed=int(args.seed))
    cert = None
    if args.certified:
        if not args.cert:
            raise ParameterError("--certified requires --cert <reach certificate>")
        cert = _require_reach(certify.load_certificate(args.cert))
        _check_binding(cert, cfg)
    traj = simulator.simulate(scn, rnn, cfg.vehicle,
                              clamp_speed=args.certified)
    simulator.trajectory_to_csv(traj, out / "trajectory.csv")
    code = EXIT_OK
    if cert is not None:
        zeta0 = np.concatenate([traj.x[0], traj.xi[0]])
        sigma, sigma_bar, bound = run_monitor(cert, zeta0, traj.phi,
                                              cfg.certify.d_max, d_seq=traj.d)
        monitor_csv(out / "bound.csv", sigma, sigma_bar, bound,
                    actual_eyL=traj.e_yL)
        margin = float(np.min(bound - np.abs(traj.e_yL)))
        verdict = "CONTAINED" if margin >= 0 else "VIOLATED"
        print(f"containment: {verdict} (min margin {margin:.6e} m)")
        report.trajectory_figure(out / "trajectory.csv", out / "trajectory.svg",
                                 bound_csv=out / "bound.csv")
        if margin < 0:
            code = EXIT_VIOLATION
    else:
        report.trajectory_figure(out / "trajectory.csv", out / "trajectory.svg")
    print(f"trajectory: {out / 'trajectory.csv'} "
          f"(max |e_yL| = {np.max(np.abs(traj.e_yL)):.6e} m)")
    return code


def cmd_monitor(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    cert = _require_reach(certify.load_certificate(args.cert))
    _check_binding(cert, cfg)
    traj = simulator.trajectory_from_csv(args.trajectory)
    lo, hi = cfg.vehicle.speed_band
    if np.any(traj.Vx < lo - 1e-9) or np.any(traj.Vx > hi + 1e-9):
        print(f"warning: trajectory leaves the certified speed band "
              f"[{lo:.3f}, {hi:.3f}] m/s; the bound is not guaranteed",
              file=sys.stderr)
    zeta0 = np.concatenate([traj.x[0], traj.xi[0]])
    sigma, sigma_bar, bound = run_monitor(cert, zeta0, traj.phi,
                                          cfg.certify.d_max,
                                          d_seq=traj.d if args.actual_d else None)
    monitor_csv(out / "bound.csv", sigma, sigma_bar, bound,
                actual_eyL=traj.e_yL)
    margin = float(np.min(bound - np.abs(traj.e_yL)))
    verdict = "CONTAINED" if margin >= 0 else "VIOLATED"
    print(f"containment: {verdict} (min margin {margin:.6e} m)")
    print(f"bounds: {out / 'bound.csv'}")
    return EXIT_OK if margin >= 0 else EXIT_VIOLATION


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else Path("out")
    included = report.aggregate_report(out)
    print(f"report: {out / 'report.svg'} ({len(included)} panels: "
          f"{', '.join(included)})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lanecert",
        description="Certification pipeline for a recurrent lane-keeping "
                    "controller under bounded speed variation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config=True):
        if config:
            p.add_argument("--config", required=True,
                           help="path to the JSON run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None,
                       help="output directory (default from config)")

    p = sub.add_parser("datagen", help="generate expert demonstrations")
    common(p)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="behavior-clone the controller")
    common(p)
    p.add_argument("--data", default=None,
                   help="dataset CSV (default <out>/dataset.csv)")
    p.add_argument("--weights", default=None,
                   help="warm-start weights JSON (default: random init)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="robust stability certification")
    common(p)
    p.add_argument("--weights", required=True, help="controller weights JSON")
    p.add_argument("--rho", type=float, default=None,
                   help="decay rate (default from config)")
    p.add_argument("--max-rho", action="store_true",
                   help="diagnostic: largest feasible rho on a 0.005 grid")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("reach", help="tracking-error reachability bound")
    common(p)
    p.add_argument("--weights", required=True, help="controller weights JSON")
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--mu-d", type=float, default=None, dest="mu_d",
                   help="disturbance energy weight")
    p.add_argument("--mu-phi", type=float, default=None, dest="mu_phi",
                   help="road-signal energy weight")
    p.set_defaults(func=cmd_reach)

    p = sub.add_parser("simulate", help="closed-loop time-domain run")
    common(p)
    p.add_argument("--weights", required=True, help="controller weights JSON")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--certified", action="store_true",
                   help="clamp speed to the certified band and emit bounds")
    p.add_argument("--cert", default=None, help="reach certificate JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("monitor", help="replay a trajectory against a certificate")
    common(p)
    p.add_argument("--cert", required=True, help="reach certificate JSON")
    p.add_argument("--trajectory", required=True, help="trajectory CSV to replay")
    p.add_argument("--actual-d", action="store_true", dest="actual_d",
                   help="feed recorded disturbances into the sigma recursion "
                        "(testing only)")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("report", help="aggregate artifacts into one figure")
    p.add_argument("--out", default=None, help="artifact directory to bundle")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParameterError, ShapeError, SectorError, WeightsFormatError,
            CertificateError, StaleCertificateError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"Infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SolverFailureError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
