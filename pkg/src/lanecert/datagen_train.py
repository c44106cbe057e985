"""Expert demonstration generation and behavior-cloning training.

The expert is an unconstrained preview LQR solved by a time-varying Riccati
recursion with an affine feedforward term for the previewed road signal.  At
desk scale with no active constraints this coincides with the receding-
horizon optimal controller it stands in for, while avoiding a quadratic-
programming dependency.  The expert is privileged: it sees future speeds and
road geometry over its horizon.  The cloned network sees only the current
measurement, which is the whole point of training one.

Gradients for training are hand-derived backpropagation through time over
the recurrence xi+ = A xi + B1 act(p) + B2 y, p = C2 xi + D22 y,
u = C1 xi + D11 act(p) + D12 y, averaged as mean squared error against the
expert inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BoundViolationError, DivergenceError, ParameterError, ShapeError
from .rnn_controller import MATRIX_KEYS, RnnController, rnn_step
from .simulator import (BLOWUP_LIMIT, Scenario, phi_from_road, scenario_hash,
                        simulate)
from .vehicle_model import VehicleParams, build_nominal_plant


@dataclass(frozen=True)
class Episode:
    """One expert demonstration: measurements, road signal, expert inputs."""

    y: np.ndarray          # (n, 2)
    phi: np.ndarray        # (n, 2)
    u: np.ndarray          # (n,)
    name: str = ""
    scenario_hash: str = ""

    def __post_init__(self):
        n = self.u.size
        if self.y.shape != (n, 2) or self.phi.shape != (n, 2):
            raise ShapeError("episode fields must share the same step count")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.phi))
                and np.all(np.isfinite(self.u))):
            raise ParameterError("episode contains non-finite values")

    @property
    def n_steps(self) -> int:
        return self.u.size


@dataclass(frozen=True)
class Dataset:
    episodes: tuple[Episode, ...]
    meta: dict = field(default_factory=dict)

    @property
    def n_steps_total(self) -> int:
        return sum(ep.n_steps for ep in self.episodes)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 300
    batch_size: int = 4
    truncation: int = 400
    seed: int = 0
    init_scale: float = 0.2

    def __post_init__(self):
        if self.lr < 0:
            raise ParameterError(f"learning rate must be nonnegative, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1 or self.truncation < 1:
            raise ParameterError("epochs, batch_size and truncation must be positive")
        if self.init_scale <= 0:
            raise ParameterError("weight-init scale must be positive")


# ----------------------------------------------------------------------
# preview LQR expert

def plant_sequences(params: VehicleParams, Vx_seq):
    """Time-varying plant matrices along a speed slice: (A_seq, B_seq, Bphi_seq)."""
    Vx_seq = np.asarray(Vx_seq, dtype=float)
    m = Vx_seq.size
    A_seq = np.zeros((m, 4, 4))
    B_seq = np.zeros((m, 4))
    Bphi_seq = np.zeros((m, 4, 2))
    for k in range(m):
        plant = build_nominal_plant(params, Vx_seq[k])
        A_seq[k] = plant.A_G
        B_seq[k] = plant.B_G1[:, 0]
        Bphi_seq[k] = plant.B_G2
    return A_seq, B_seq, Bphi_seq


def preview_lqr(A_seq, B_seq, Bphi_seq, phi_seq, Q, R, x0) -> np.ndarray:
    """Optimal input sequence for the previewed finite-horizon problem.

    Minimizes sum_k x_{k+1}' Q x_{k+1} + R u_k^2 subject to
    x_{k+1} = A_k x_k + B_k u_k + Bphi_k phi_k with everything previewed.
    Solved by a backward Riccati recursion carrying an affine term for the
    known phi sequence, then a forward rollout.
    """
    A_seq = np.asarray(A_seq, dtype=float)
    B_seq = np.asarray(B_seq, dtype=float)
    Bphi_seq = np.asarray(Bphi_seq, dtype=float)
    phi_seq = np.atleast_2d(np.asarray(phi_seq, dtype=float))
    Q = np.asarray(Q, dtype=float)
    R = float(R)
    if R <= 0:
        raise ParameterError(f"input weight R must be positive, got {R}")
    N = A_seq.shape[0]
    if not (B_seq.shape[0] == Bphi_seq.shape[0] == phi_seq.shape[0] == N):
        raise ShapeError("preview sequences must share the horizon length")
    x0 = np.asarray(x0, dtype=float)

    gains = np.zeros((N, 4))
    offsets = np.zeros(N)
    S = np.zeros((4, 4))
    s = np.zeros(4)
    for k in range(N - 1, -1, -1):
        A, B, c = A_seq[k], B_seq[k], Bphi_seq[k] @ phi_seq[k]
        W = Q + S
        WB = W @ B
        denom = R + B @ WB
        K = (WB @ A) / denom
        m_k = (B @ (W @ c + s)) / denom
        Acl = A - np.outer(B, K)
        e = c - B * m_k
        S = Acl.T @ W @ Acl + R * np.outer(K, K)
        S = 0.5 * (S + S.T)
        s = Acl.T @ (W @ e + s) + R * m_k * K
        gains[k], offsets[k] = K, m_k

    u = np.zeros(N)
    x = x0.copy()
    for k in range(N):
        u[k] = -gains[k] @ x - offsets[k]
        x = A_seq[k] @ x + B_seq[k] * u[k] + Bphi_seq[k] @ phi_seq[k]
    return u


def expert_rollout(scenario: Scenario, params: VehicleParams, Q, R,
                   horizon: int):
    """Receding-horizon expert: re-solve the previewed problem every step.

    Returns (x_seq, u_seq, y_seq, phi_seq).  The demonstration is
    disturbance-free; robustness enters later through certification, not
    through noisy training data.
    """
    if horizon < 1:
        raise ParameterError(f"preview horizon must be >= 1, got {horizon}")
    n = scenario.n_steps
    phi_all = np.array([phi_from_road(scenario.Vx[k], scenario.kappa[k], params)
                        for k in range(n)])
    A_all, B_all, Bphi_all = plant_sequences(params, scenario.Vx)
    x_seq = np.zeros((n + 1, 4))
    u_seq = np.zeros(n)
    y_seq = np.zeros((n, 2))
    x = scenario.x0.copy()
    x_seq[0] = x
    for k in range(n):
        m = min(horizon, n - k)
        sl = slice(k, k + m)
        u_prev = preview_lqr(A_all[sl], B_all[sl], Bphi_all[sl], phi_all[sl],
                             Q, R, x)
        u_seq[k] = u_prev[0]
        y_seq[k] = build_nominal_plant(params, scenario.Vx[k]).C_G @ x
        x = A_all[k] @ x + B_all[k] * u_seq[k] + Bphi_all[k] @ phi_all[k]
        if np.max(np.abs(x)) > BLOWUP_LIMIT:
            raise DivergenceError(k, f"expert rollout diverged at step {k} "
                                     f"of scenario '{scenario.name}'")
        x_seq[k + 1] = x
    return x_seq, u_seq, y_seq, phi_all


def generate_dataset(scenarios, params: VehicleParams, Q, R, horizon: int,
                     seed: int) -> Dataset:
    """Expert closed-loop rollouts over a scenario list.

    Initial states are jittered per episode from the seed so the cloned
    network sees a neighborhood of the nominal trajectories, not a single
    path.  Divergent rollouts are rejected and recorded in the metadata
    rather than failing the whole dataset.
    """
    episodes = []
    rejected = []
    for idx, scn in enumerate(scenarios):
        lo, hi = params.speed_band
        if np.any(scn.Vx < lo - 1e-9) or np.any(scn.Vx > hi + 1e-9):
            raise BoundViolationError(
                f"scenario '{scn.name}' leaves the certified speed band; "
                "training data must stay within it")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), idx]))
        jitter = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.05, 0.05),
                           rng.uniform(-0.01, 0.01), rng.uniform(-0.02, 0.02)])
        scn_j = replace(scn, x0=scn.x0 + jitter)
        try:
            _, u_seq, y_seq, phi_seq = expert_rollout(scn_j, params, Q, R, horizon)
        except DivergenceError as exc:
            rejected.append({"scenario": scn.name, "step": exc.step,
                             "reason": str(exc)})
            continue
        episodes.append(Episode(y=y_seq, phi=phi_seq, u=u_seq, name=scn.name,
                                scenario_hash=scenario_hash(scn_j)))
    meta = {"q_diag": list(np.diag(np.asarray(Q, dtype=float))), "r": float(R),
            "horizon": int(horizon), "seed": int(seed),
            "n_episodes": len(episodes), "rejected": rejected}
    return Dataset(episodes=tuple(episodes), meta=meta)


def dataset_to_csv(ds: Dataset, path):
    """Columns: episode, k, y1, y2, phi1, phi2, u (metadata in # lines)."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# q_diag={ds.meta.get('q_diag')} r={ds.meta.get('r')} "
                 f"horizon={ds.meta.get('horizon')} seed={ds.meta.get('seed')}\n")
        for i, ep in enumerate(ds.episodes):
            fh.write(f"# episode {i} name={ep.name} hash={ep.scenario_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["episode", "k", "y1", "y2", "phi1", "phi2", "u"])
        for i, ep in enumerate(ds.episodes):
            for k in range(ep.n_steps):
                writer.writerow([i, k, repr(ep.y[k, 0]), repr(ep.y[k, 1]),
                                 repr(ep.phi[k, 0]), repr(ep.phi[k, 1]),
                                 repr(ep.u[k])])


def dataset_from_csv(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise ParameterError(f"dataset file not found: {path}")
    names = {}
    data = {}
    with open(path, newline="") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                parts = line.lstrip("# ").split()
                if parts and parts[0] == "episode":
                    idx = int(parts[1])
                    fields = dict(p.split("=", 1) for p in parts[2:] if "=" in p)
                    names[idx] = (fields.get("name", ""), fields.get("hash", ""))
                continue
            row = next(csv.reader([line]))
            if row[0] == "episode":
                continue
            data.setdefault(int(row[0]), []).append([float(v) for v in row[2:]])
    episodes = []
    for idx in sorted(data):
        arr = np.array(data[idx])
        name, shash = names.get(idx, ("", ""))
        episodes.append(Episode(y=arr[:, 0:2], phi=arr[:, 2:4], u=arr[:, 4],
                                name=name, scenario_hash=shash))
    return Dataset(episodes=tuple(episodes), meta={})


# ----------------------------------------------------------------------
# backpropagation through time

def _act_derivative(rnn: RnnController, p, q):
    if rnn.activation == "tanh":
        return 1.0 - q ** 2
    if rnn.activation == "relu":
        return (p > 0).astype(float)
    raise ParameterError(f"no derivative rule for activation '{rnn.activation}'")


def bptt_gradients(rnn: RnnController, episodes, truncation: int):
    """Exact MSE gradients for all eight weight matrices.

    Loss is the mean of (u - u_expert)^2 over every step of every episode in
    the batch.  Gradient flow through the state is cut at chunk boundaries
    of length `truncation`; with truncation >= episode length the gradients
    are exact for the full recurrence.

    Returns (grads, loss) where grads maps each weight-matrix name to an
    array of matching shape.
    """
    if truncation < 1:
        raise ParameterError(f"truncation must be >= 1, got {truncation}")
    if isinstance(episodes, Episode):
        episodes = [episodes]
    grads = {key: np.zeros_like(getattr(rnn, key)) for key in MATRIX_KEYS}
    total = sum(ep.n_steps for ep in episodes)
    if total == 0:
        return grads, 0.0

    loss = 0.0
    for ep in episodes:
        n = ep.n_steps
        xi = np.zeros((n + 1, rnn.n_xi))
        p = np.zeros((n, rnn.n_phi))
        q = np.zeros((n, rnn.n_phi))
        u = np.zeros(n)
        for k in range(n):
            xi[k + 1], u[k], p[k], q[k] = rnn_step(rnn, xi[k], ep.y[k])
        err = u - ep.u
        loss += float(err @ err)
        dudt = 2.0 * err / total

        for a in range(0, n, truncation):
            b = min(a + truncation, n)
            lam = np.zeros(rnn.n_xi)
            for k in range(b - 1, a - 1, -1):
                yk, xik, qk = ep.y[k], xi[k], q[k]
                dphi = _act_derivative(rnn, p[k], qk)
                du = dudt[k]
                grads["C1"][0] += du * xik
                grads["D11"][0] += du * qk
                grads["D12"][0] += du * yk
                gp = (du * rnn.D11[0] + rnn.B1.T @ lam) * dphi
                grads["A"] += np.outer(lam, xik)
                grads["B1"] += np.outer(lam, qk)
                grads["B2"] += np.outer(lam, yk)
                grads["C2"] += np.outer(gp, xik)
                grads["D22"] += np.outer(gp, yk)
                lam = rnn.A.T @ lam + rnn.C2.T @ gp + du * rnn.C1[0]
    return grads, loss / total


def dataset_loss(rnn: RnnController, episodes) -> float:
    """Mean squared input error without gradient bookkeeping."""
    total = 0
    loss = 0.0
    for ep in episodes:
        xi = np.zeros(rnn.n_xi)
        for k in range(ep.n_steps):
            xi, u, _, _ = rnn_step(rnn, xi, ep.y[k])
            loss += (u - ep.u[k]) ** 2
        total += ep.n_steps
    return loss / total if total else 0.0


def train(rnn: RnnController, dataset: Dataset, cfg: TrainConfig):
    """Full-batch-per-minibatch gradient descent with halve-on-worsen restarts.

    Returns (best controller, loss curve).  The curve records the evaluated
    loss after every epoch; the best-so-far loss is non-increasing by
    construction.  A NaN loss aborts and returns the last good weights.
    """
    episodes = list(dataset.episodes)
    if not episodes:
        raise ParameterError("training dataset has no episodes")
    shortest = min(ep.n_steps for ep in episodes)
    if cfg.truncation > shortest:
        raise ParameterError(
            f"BPTT truncation {cfg.truncation} exceeds the shortest episode "
            f"length {shortest}")

    rng = np.random.default_rng(cfg.seed)
    current = rnn
    best = rnn
    best_loss = dataset_loss(rnn, episodes)
    losses = [best_loss]
    lr = cfg.lr
    for _ in range(cfg.epochs):
        order = rng.permutation(len(episodes))
        for start in range(0, len(episodes), cfg.batch_size):
            batch = [episodes[j] for j in order[start:start + cfg.batch_size]]
            grads, _ = bptt_gradients(current, batch, cfg.truncation)
            updates = {key: getattr(current, key) - lr * grads[key]
                       for key in MATRIX_KEYS}
            current = replace(current, **updates)
        loss = dataset_loss(current, episodes)
        losses.append(loss)
        if not np.isfinite(loss):
            current = best
            break
        if loss < best_loss:
            best, best_loss = current, loss
        else:
            current = best
            lr *= 0.5
            if lr < 1e-12:
                break
    return best, losses


def loss_curve_to_csv(losses, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, v in enumerate(losses):
            writer.writerow([i, repr(float(v))])


def evaluate_imitation(rnn: RnnController, scenario: Scenario,
                       params: VehicleParams, Q, R, horizon: int) -> dict:
    """Closed-loop RMS of the look-ahead offset: cloned network vs expert."""
    x_exp, _, _, _ = expert_rollout(scenario, params, Q, R, horizon)
    traj = simulate(scenario, rnn, params)
    rms_expert = float(np.sqrt(np.mean(x_exp[:, 0] ** 2)))
    rms_rnn = float(np.sqrt(np.mean(traj.e_yL ** 2)))
    ratio = rms_rnn / rms_expert if rms_expert > 0 else np.inf
    return {"rms_rnn": rms_rnn, "rms_expert": rms_expert, "ratio": ratio}
