"""Online tracking-error bound: advance the certified quadratic level set.

Given a reach certificate (decay rate rho, input weights mu_d and mu_phi,
shape matrix P and its first-coordinate Schur reduction P_eyL), the level
sigma_bar evolves from the known road signal and the disturbance BOUND
alone, so it can run on a vehicle without ever seeing the disturbance:

    sigma_bar_{k+1} = rho^2 sigma_bar_k + mu_d ||d_max||^2 + mu_phi ||phi_k||^2

and |e_yL(k)| <= sqrt(sigma_bar_k / P_eyL) is guaranteed for every
admissible speed realization, disturbance and consistent activation.  The
companion recursion sigma fed with the actual disturbance exists for
testing the conservatism ordering only; it is not deployable because d is
unmeasured.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import CertificateError, ShapeError


@dataclass(frozen=True)
class MonitorState:
    """Value object: one step of the bound recursion (immutable)."""

    sigma: float          # level fed with actual disturbances (testing only)
    sigma_bar: float      # deployable level fed with the disturbance bound
    k: int
    rho: float
    mu_d: float
    mu_phi: float
    P: np.ndarray
    P_eyL: float
    d_max: np.ndarray     # 2-vector disturbance bound

    @property
    def n_zeta(self) -> int:
        return self.P.shape[0]


def zeta_from_state(x0, n_xi: int) -> np.ndarray:
    """Joint initial state for deployment: measured x0, controller at rest."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (4,):
        raise ShapeError(f"vehicle state must be a 4-vector, got shape {x0.shape}")
    return np.concatenate([x0, np.zeros(int(n_xi))])


def init(cert, zeta0, d_max=(0.01, 0.01)) -> MonitorState:
    """Start both recursions at the exact level of the initial state."""
    zeta0 = np.asarray(zeta0, dtype=float)
    P = np.asarray(cert.P, dtype=float)
    if zeta0.shape != (P.shape[0],):
        raise ShapeError(f"initial joint state must have dimension {P.shape[0]}, "
                         f"got shape {zeta0.shape}")
    d_max = np.asarray(d_max, dtype=float)
    if d_max.shape != (2,) or np.any(d_max < 0):
        raise ShapeError("d_max must be a nonnegative 2-vector")
    sigma0 = float(zeta0 @ P @ zeta0)
    return MonitorState(sigma=sigma0, sigma_bar=sigma0, k=0, rho=float(cert.rho),
                        mu_d=float(cert.mu_d), mu_phi=float(cert.mu_phi),
                        P=P, P_eyL=float(cert.P_eyL), d_max=d_max)


def step(ms: MonitorState, phi_k, d_k=None) -> MonitorState:
    """Advance one sample.

    sigma_bar always charges the worst-case disturbance energy ||d_max||^2;
    sigma charges the actual ||d_k||^2 when given (else the bound as well).
    """
    phi_k = np.asarray(phi_k, dtype=float)
    if phi_k.shape != (2,):
        raise ShapeError(f"external input must be a 2-vector, got shape {phi_k.shape}")
    rho2 = ms.rho ** 2
    phi_term = ms.mu_phi * float(phi_k @ phi_k)
    dmax_term = ms.mu_d * float(ms.d_max @ ms.d_max)
    if d_k is None:
        d_term = dmax_term
    else:
        d_k = np.asarray(d_k, dtype=float)
        if d_k.shape != (2,):
            raise ShapeError(f"disturbance must be a 2-vector, got shape {d_k.shape}")
        d_term = ms.mu_d * float(d_k @ d_k)
    return replace(ms,
                   sigma=rho2 * ms.sigma + d_term + phi_term,
                   sigma_bar=rho2 * ms.sigma_bar + dmax_term + phi_term,
                   k=ms.k + 1)


def eyL_bound(ms: MonitorState) -> float:
    """Guaranteed |e_yL(k)| ceiling in metres at the current step."""
    if not (ms.P_eyL > 0):
        raise CertificateError(f"certificate error metric must be positive, "
                               f"got {ms.P_eyL}")
    return float(np.sqrt(max(ms.sigma_bar, 0.0) / ms.P_eyL))


def state_bound(ms: MonitorState, index: int) -> float:
    """EXPERIMENTAL: same construction applied to another state coordinate.

    The certified claim covers the look-ahead offset (index 0) only; bounds
    on other coordinates reuse the Schur reduction of P onto coordinate
    `index` and are provided for exploration, not acceptance.
    """
    if not (0 <= index < ms.n_zeta):
        raise ShapeError(f"state index {index} outside 0..{ms.n_zeta - 1}")
    Pinv = np.linalg.inv(ms.P)
    metric = 1.0 / Pinv[index, index]
    if not (metric > 0):
        raise CertificateError("shape matrix is not positive definite")
    return float(np.sqrt(max(ms.sigma_bar, 0.0) / metric))


def run_monitor(cert, zeta0, phi_seq, d_max, d_seq=None):
    """Vector form over a whole run; returns (sigma, sigma_bar, bound) arrays.

    Arrays have length n+1 for n external-input samples: entry k is the
    level BEFORE consuming phi_k, matching state indexing.
    """
    phi_seq = np.atleast_2d(np.asarray(phi_seq, dtype=float))
    n = phi_seq.shape[0]
    ms = init(cert, zeta0, d_max=d_max)
    sigma = np.zeros(n + 1)
    sigma_bar = np.zeros(n + 1)
    bound = np.zeros(n + 1)
    for k in range(n + 1):
        sigma[k], sigma_bar[k], bound[k] = ms.sigma, ms.sigma_bar, eyL_bound(ms)
        if k < n:
            dk = None if d_seq is None else d_seq[k]
            ms = step(ms, phi_seq[k], d_k=dk)
    return sigma, sigma_bar, bound


def monitor_csv(path, sigma, sigma_bar, bound, actual_eyL=None):
    """Per-step record: k, sigma, sigma_bar, bound, actual_eyL."""
    n = len(bound)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "sigma", "sigma_bar", "bound", "actual_eyL"])
        for k in range(n):
            actual = "" if actual_eyL is None or k >= len(actual_eyL) \
                else repr(float(actual_eyL[k]))
            writer.writerow([k, repr(float(sigma[k])), repr(float(sigma_bar[k])),
                             repr(float(bound[k])), actual])
