"""Stability and reachability certification of the augmented closed loop.

The stability condition couples a quadratic Lyapunov decrease at rate rho
with two quadratic constraints: one covering the renormalized activations
through a diagonal multiplier Lambda, one covering the norm-bounded speed
uncertainty through a scaled identity multiplier. The reachability problem
adds disturbance/external-input slack terms (weights mu_d, mu_phi) and a
Schur-complement block that exposes the lateral-offset metric P_eyL, whose
inverse gamma is minimized.

Both problems are assembled as affine LMIs in scalar decision variables and
handed to `sdp_core`; certificates are only issued from verified points.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from . import sdp_core
from .closed_loop import AugmentedSystem
from .errors import (CertificateError, InfeasibleError, ParameterError,
                     SolverFailureError)
from .sdp_core import LmiBlock, ScalarVar, SdpProblem, SolveOptions


@dataclass(frozen=True)
class Margins:
    """Strictness slack turning open cones into closed numerical constraints."""

    pd: float = 1e-6     # on P and lambda2 positivity
    qc: float = 1e-6     # on the two multiplier couplings
    main: float = 0.0    # the headline block inequality is non-strict


@dataclass(frozen=True)
class CertifyOptions:
    margins: Margins = Margins()
    solve: SolveOptions = SolveOptions()
    # auto: closed-form Riccati construction first, SDP solver as fallback.
    # High-gain loops near the certifiable frontier have certificates too
    # ill-conditioned for numerical SDP solvers, but the closed form does
    # not care; both paths end at the same independent verification.
    strategy: str = "auto"  # auto | analytic | sdp


@dataclass(frozen=True)
class StabilityCertificate:
    rho: float
    P: np.ndarray
    Lambda: np.ndarray     # diagonal entries, length n_phi
    M1: np.ndarray
    M2: np.ndarray
    lambda2: float
    condP: float
    margins: Margins = Margins()
    config_hash: str = ""
    detail: str = ""

    @property
    def n_zeta(self) -> int:
        return self.P.shape[0]


@dataclass(frozen=True)
class ReachCertificate(StabilityCertificate):
    mu_d: float = 1.0
    mu_phi: float = 1.0
    gamma: float = float("nan")
    P_eyL: float = float("nan")


# ---------------------------------------------------------------------------
# scalar-variable layout


class _VarTable:
    """Allocates scalar slots for structured matrix variables."""

    def __init__(self):
        self.vars: list[ScalarVar] = []

    def scalar(self, name: str, nonneg: bool = False) -> int:
        self.vars.append(ScalarVar(name, nonneg))
        return len(self.vars) - 1

    def diag(self, name: str, n: int, nonneg: bool = False) -> np.ndarray:
        return np.array([self.scalar(f"{name}[{i}]", nonneg) for i in range(n)])

    def sym(self, name: str, n: int) -> np.ndarray:
        """Index matrix for a symmetric variable; idx[i,j] == idx[j,i]."""
        idx = np.zeros((n, n), dtype=int)
        for i in range(n):
            for j in range(i, n):
                k = self.scalar(f"{name}[{i},{j}]")
                idx[i, j] = idx[j, i] = k
        return idx

    @property
    def n(self) -> int:
        return len(self.vars)


def _sym_value(idx: np.ndarray, x: np.ndarray) -> np.ndarray:
    return x[idx]


def _affine_block(name, eval_fn, n_vars, candidates, margin) -> LmiBlock:
    """Probe an affine matrix map to recover (F0, {F_i}).

    eval_fn must be affine in x; probing unit vectors is then exact.
    """
    F0 = eval_fn(np.zeros(n_vars))
    coeffs = {}
    e = np.zeros(n_vars)
    for i in candidates:
        e[i] = 1.0
        Fi = eval_fn(e) - F0
        e[i] = 0.0
        Fi = 0.5 * (Fi + Fi.T)
        if np.any(Fi):
            coeffs[int(i)] = Fi
    return LmiBlock(name=name, F0=0.5 * (F0 + F0.T), coeffs=coeffs, margin=margin)


@dataclass
class _Layout:
    table: _VarTable
    P: np.ndarray        # sym index matrix
    Lam: np.ndarray      # diag indices
    M1: np.ndarray
    M2: np.ndarray
    lam2: int
    gamma: int | None = None


def _make_layout(aug: AugmentedSystem, with_gamma: bool) -> _Layout:
    d = aug.dims
    t = _VarTable()
    P = t.sym("P", d.n_zeta)
    Lam = t.diag("Lambda", d.n_phi, nonneg=True)
    M1 = t.sym("M1", 2 * d.n_phi)
    M2 = t.sym("M2", 2 * d.n_w)
    lam2 = t.scalar("lambda2", nonneg=True)
    gamma = t.scalar("gamma", nonneg=True) if with_gamma else None
    return _Layout(table=t, P=P, Lam=Lam, M1=M1, M2=M2, lam2=lam2, gamma=gamma)


def _coupling_blocks(lay: _Layout, d, margins: Margins) -> list[LmiBlock]:
    n = lay.table.n
    n_phi, n_w = d.n_phi, d.n_w

    def qc_act(x):
        M1 = _sym_value(lay.M1, x)
        lam = x[lay.Lam]
        shift = np.diag(np.concatenate([lam, -lam]))
        return M1 - shift

    def qc_unc(x):
        M2 = _sym_value(lay.M2, x)
        shift = x[lay.lam2] * np.diag(np.concatenate([np.ones(n_w), -np.ones(n_w)]))
        return M2 - shift

    act_vars = np.concatenate([np.unique(lay.M1), lay.Lam])
    unc_vars = np.concatenate([np.unique(lay.M2), [lay.lam2]])
    return [
        _affine_block("qc_activation", qc_act, n, act_vars, margins.qc),
        _affine_block("qc_uncertainty", qc_unc, n, unc_vars, margins.qc),
        LmiBlock("pos_lambda2", np.zeros((1, 1)),
                 {lay.lam2: np.ones((1, 1))}, margins.qc),
    ]


def _pos_P_block(lay: _Layout, margins: Margins,
                 metric: np.ndarray | None = None) -> LmiBlock:
    """P - pd * W >= 0 with W = I by default.

    In transformed state coordinates zeta' = S zeta the physical floor
    P >= pd * I reads P' >= pd * (S S')^{-1}; enforcing pd * I there
    instead would be wrong by the squared conditioning of S. Callers
    working in transformed coordinates pass that metric explicitly.
    """
    n = lay.table.n
    nz = lay.P.shape[0]
    pd = margins.pd
    shift = None if metric is None else pd * (np.eye(nz) - metric)

    def eval_P(x):
        P = _sym_value(lay.P, x)
        return P if shift is None else P + shift

    return _affine_block("pos_P", eval_P, n, np.unique(lay.P), pd)


def _stability_outer(aug: AugmentedSystem) -> np.ndarray:
    """Rows map the signal stack (zeta, q, w) to (zeta, zeta+, r, s).

    Stability quantifies over the undriven loop, so the external-input
    column is absent; a decrease certificate with that column present
    would be impossible for any plant that reacts to the road at all
    (its quadrant of the product is a positive form with nothing to
    offset it). The input columns return in the reachability problem,
    paid for by the slack weights.
    """
    d = aug.dims
    z = lambda r, c: np.zeros((r, c))
    return np.block([
        [np.eye(d.n_zeta), z(d.n_zeta, d.n_phi), z(d.n_zeta, d.n_w)],
        [aug.calA, aug.calB2, aug.calB3],
        [aug.calC1, aug.calD12, z(2 * d.n_phi, d.n_w)],
        [aug.calC2, aug.calD22, aug.calD23],
    ])


def _reach_outer(aug: AugmentedSystem) -> np.ndarray:
    """Rows map (zeta, phi, q, w, d) to (zeta, zeta+, r, s, d, phi)."""
    d = aug.dims
    z = lambda r, c: np.zeros((r, c))
    return np.block([
        [np.eye(d.n_zeta), z(d.n_zeta, d.n_phi_ext), z(d.n_zeta, d.n_phi),
         z(d.n_zeta, d.n_w), z(d.n_zeta, d.n_d)],
        [aug.calA, aug.calB1, aug.calB2, aug.calB3, aug.calB4],
        [aug.calC1, z(2 * d.n_phi, d.n_phi_ext), aug.calD12,
         z(2 * d.n_phi, d.n_w), z(2 * d.n_phi, d.n_d)],
        [aug.calC2, aug.calD21, aug.calD22, aug.calD23, aug.calD24],
        [z(d.n_d, d.n_zeta), z(d.n_d, d.n_phi_ext), z(d.n_d, d.n_phi),
         z(d.n_d, d.n_w), np.eye(d.n_d)],
        [z(d.n_phi_ext, d.n_zeta), np.eye(d.n_phi_ext), z(d.n_phi_ext, d.n_phi),
         z(d.n_phi_ext, d.n_w), z(d.n_phi_ext, d.n_d)],
    ])


def _main_block_stability(aug, lay, rho, margins) -> LmiBlock:
    d = aug.dims
    O = _stability_outer(aug)
    n = lay.table.n

    def eval_main(x):
        P = _sym_value(lay.P, x)
        M1 = _sym_value(lay.M1, x)
        M2 = _sym_value(lay.M2, x)
        Pi = _blkdiag(-rho**2 * P, P, M1, M2)
        return -(O.T @ Pi @ O)

    cand = np.concatenate([np.unique(lay.P), np.unique(lay.M1), np.unique(lay.M2)])
    return _affine_block("stability_main", eval_main, n, cand, margins.main)


def _main_block_reach(aug, lay, rho, mu_d, mu_phi, margins) -> LmiBlock:
    d = aug.dims
    G = _reach_outer(aug)
    n = lay.table.n

    def eval_main(x):
        P = _sym_value(lay.P, x)
        M1 = _sym_value(lay.M1, x)
        M2 = _sym_value(lay.M2, x)
        Pi = _blkdiag(-rho**2 * P, P, M1, M2,
                      -mu_d * np.eye(d.n_d), -mu_phi * np.eye(d.n_phi_ext))
        return -(G.T @ Pi @ G)

    cand = np.concatenate([np.unique(lay.P), np.unique(lay.M1), np.unique(lay.M2)])
    return _affine_block("reach_main", eval_main, n, cand, margins.main)


def _schur_block(lay: _Layout, n_zeta: int,
                 metric_vec: np.ndarray | None = None) -> LmiBlock:
    """[[P, u], [u', gamma]] >= 0 with u the lateral-offset metric vector.

    For P > 0 this is equivalent to gamma >= u' P^{-1} u; with u the
    first physical basis vector that is gamma >= 1/P_eyL where
    P_eyL = P11 - P21' P22^{-1} P21 is the Schur complement onto the
    lateral offset (the same inequality as the bordered Schur form, up to
    a symmetric permutation). When the surrounding problem is posed in
    transformed state coordinates zeta' = S zeta, passing u = S^{-T} e1
    makes the block speak about the physical offset while every entry
    stays at the transformed problem's scale.
    """
    n = lay.table.n
    m = n_zeta + 1
    if metric_vec is None:
        u = np.zeros(n_zeta)
        u[0] = 1.0
    else:
        u = np.asarray(metric_vec, float).reshape(n_zeta)

    def eval_schur(x):
        M = np.zeros((m, m))
        M[:n_zeta, :n_zeta] = _sym_value(lay.P, x)
        M[:n_zeta, n_zeta] = u
        M[n_zeta, :n_zeta] = u
        M[n_zeta, n_zeta] = x[lay.gamma]
        return M

    cand = np.concatenate([np.unique(lay.P), [lay.gamma]])
    return _affine_block("schur_gamma", eval_schur, n, cand, 0.0)


def _blkdiag(*mats):
    rows = sum(m.shape[0] for m in mats)
    out = np.zeros((rows, rows))
    at = 0
    for m in mats:
        k = m.shape[0]
        out[at:at + k, at:at + k] = m
        at += k
    return out


# ---------------------------------------------------------------------------
# public builders


def build_stability_lmi(aug: AugmentedSystem, rho: float,
                        margins: Margins = Margins()) -> SdpProblem:
    """LMI whose feasibility certifies rho-exponential stability."""
    prob, _ = _build_stability(aug, rho, margins)
    return prob


def _build_stability(aug, rho, margins):
    if not (0.0 < rho <= 1.0):
        raise ParameterError(f"decay rate rho must lie in (0, 1], got {rho}")
    lay = _make_layout(aug, with_gamma=False)
    blocks = [
        _pos_P_block(lay, margins),
        *_coupling_blocks(lay, aug.dims, margins),
        _main_block_stability(aug, lay, rho, margins),
    ]
    prob = SdpProblem(vars=lay.table.vars, blocks=blocks)
    prob.validate()
    return prob, lay


def build_reach_sdp(aug: AugmentedSystem, rho: float, mu_d: float, mu_phi: float,
                    margins: Margins = Margins()) -> SdpProblem:
    """Minimum-gamma SDP whose optimum bounds the lateral-offset ellipsoid."""
    prob, _ = _build_reach(aug, rho, mu_d, mu_phi, margins)
    return prob


def _build_reach(aug, rho, mu_d, mu_phi, margins,
                 pos_metric=None, offset_vec=None):
    if not (0.0 < rho <= 1.0):
        raise ParameterError(f"decay rate rho must lie in (0, 1], got {rho}")
    if not (mu_d > 0 and mu_phi > 0):
        raise ParameterError(
            f"slack weights must be positive, got mu_d={mu_d}, mu_phi={mu_phi}")
    lay = _make_layout(aug, with_gamma=True)
    blocks = [
        _pos_P_block(lay, margins, pos_metric),
        *_coupling_blocks(lay, aug.dims, margins),
        _main_block_reach(aug, lay, rho, mu_d, mu_phi, margins),
        _schur_block(lay, aug.dims.n_zeta, offset_vec),
    ]
    objective = np.zeros(lay.table.n)
    objective[lay.gamma] = 1.0
    prob = SdpProblem(vars=lay.table.vars, blocks=blocks, objective=objective)
    prob.validate()
    return prob, lay


# ---------------------------------------------------------------------------
# solving and extraction


def _nominal_lyapunov_shape(aug: AugmentedSystem, rho: float):
    """Lyapunov matrix of the undriven nominal loop at decay rate rho.

    Returns (P0, radius). P0 solves (A/rho)' P0 (A/rho) - P0 = -I and is
    None when the nominal spectral radius already reaches rho, in which
    case no robust certificate can exist either (the zero perturbation is
    an admissible member of the uncertainty family).
    """
    A0 = aug.calA
    radius = float(np.abs(np.linalg.eigvals(A0)).max())
    if radius >= rho:
        return None, radius
    P0 = solve_discrete_lyapunov((A0 / rho).T, np.eye(A0.shape[0]))
    return 0.5 * (P0 + P0.T), radius


def _state_balanced(aug: AugmentedSystem, P0: np.ndarray):
    """Congruence change of state coordinates zeta' = S zeta with S'S = P0.

    High-gain loops are strongly non-normal: their Lyapunov certificates
    span many orders of magnitude in the raw coordinates even when the
    pole margin is comfortable, and interior-point solvers cannot navigate
    a variable whose entries differ by 1e9. In the transformed coordinates
    the nominal certificate is the identity, so the solver works near unit
    scale. Returns (transformed system, S); map a solution back with
    P = S' P_bal S. Feedthrough matrices and the multiplier variables are
    signal-space objects and do not transform.
    """
    S = np.linalg.cholesky(P0).T
    Sinv = np.linalg.inv(S)
    return replace(
        aug,
        calA=S @ aug.calA @ Sinv,
        calB1=S @ aug.calB1, calB2=S @ aug.calB2,
        calB3=S @ aug.calB3, calB4=S @ aug.calB4,
        calC1=aug.calC1 @ Sinv, calC2=aug.calC2 @ Sinv,
    ), S


def _pull_back(x: np.ndarray, lay: _Layout, S: np.ndarray) -> np.ndarray:
    """Map a balanced-coordinate solution to original state coordinates."""
    x0 = np.array(x, dtype=float)
    x0[lay.P] = S.T @ _sym_value(lay.P, x) @ S
    return x0


def _brl_value_iteration(Ab: np.ndarray, Bb: np.ndarray, Q: np.ndarray,
                         gain2: float | None = None, R: np.ndarray | None = None,
                         S: np.ndarray | None = None, iters: int = 6000,
                         tol: float = 1e-13) -> np.ndarray | None:
    """Minimal solution of the bounded-real Riccati equation by value iteration.

    Iterates the dynamic-programming recursion of the disturbance game

        P <- Q + Ab' P Ab + (Ab' P Bb + S)(R - Bb' P Bb)^-1 (Ab' P Bb + S)'

    from P = 0, where R is the input weight (gain2 * I when only the
    scalar is given) and S the state-input cost coupling produced by
    output feedthrough. The iterates increase monotonically and converge
    exactly when the weighted l2 gain of the channel is below one;
    otherwise the middle inverse loses definiteness and None is returned.
    This is deliberately not scipy's algebraic Riccati solver: the
    indefinite quadratic term makes that routine fail unpredictably,
    while the value recursion is self-diagnosing.
    """
    n, m = Ab.shape[0], Bb.shape[1]
    if R is None:
        R = gain2 * np.eye(m)
    if S is None:
        S = np.zeros((n, m))
    if np.linalg.eigvalsh(0.5 * (R + R.T))[0] <= 0:
        return None
    P = np.zeros((n, n))
    qmax = max(1.0, np.abs(Q).max())
    for _ in range(iters):
        mid = R - Bb.T @ P @ Bb
        if np.linalg.eigvalsh(0.5 * (mid + mid.T))[0] <= 0:
            return None
        G = Ab.T @ P @ Bb + S
        Pn = Q + Ab.T @ P @ Ab + G @ np.linalg.solve(mid, G.T)
        Pn = 0.5 * (Pn + Pn.T)
        if np.abs(Pn).max() > 1e14 * qmax:
            return None  # diverging: the gain condition fails
        if np.abs(Pn - P).max() <= tol * max(1.0, np.abs(Pn).max()):
            return Pn
        P = Pn
    # Monotone and bounded but the tolerance never triggered (float noise
    # at large ||P|| can exceed any fixed relative tol). The caller's
    # verification gate decides whether the iterate is good enough.
    return P


def _analytic_stability_candidate(aug: AugmentedSystem, rho: float,
                                  margins: Margins,
                                  verify_tol: float):
    """Deterministic certificate construction, no semidefinite solver.

    Near the performance frontier the Lyapunov matrix of a certifiable
    loop spans many orders of magnitude, which is exactly where numerical
    SDP solvers give up. This routine instead builds candidate points in
    closed form: the Lyapunov matrix comes from a bounded-real Riccati
    solution treating the uncertainty input (and, at each tested
    activation multiplier lam, the renormalized activation output scaled
    by 1/sqrt(lam)) as disturbances, over a small grid of regularizers
    and gain deflations; the remaining multipliers are closed-form. Every
    candidate must pass the same independent eigenvalue verification as a
    solver point would. Returns (x, problem, layout) for the first
    verified candidate, else None.
    """
    d = aug.dims
    if d.n_w == 0:
        return None
    Ab = aug.calA / rho
    Cv = aug.calC2[:d.n_w, :]
    Cp = aug.calC1[:d.n_phi, :]
    # The construction assumes neither quadratic-constraint output depends
    # directly on the signals it bounds (true for well-posed loops built
    # from this package's controllers). Anything else goes to the solver.
    if (aug.calD23[:d.n_w, :].any() or aug.calD22[:d.n_w, :].any()
            or aug.calD12[:d.n_phi, :].any()):
        return None
    prob, lay = _build_stability(aug, rho, margins)
    qc = max(margins.qc, 1e-9)
    cv2 = max(1.0, np.linalg.norm(Cv, 2) ** 2)
    # When the activation path is live, the Riccati sees the renormalized
    # activation output as a disturbance input scaled by 1/sqrt(lam) and
    # charges lam for the activation-input rows, so each lam needs its own
    # solve; an inert path factors lam out and one solve serves the grid.
    q_active = bool(aug.calB2.any() or Cp.any())
    # The activation corner of the main block needs lam >= 2*qc before it
    # is even sign-correct, so the line search starts just above that.
    lam_grid = [4.0 * qc * 10.0 ** e for e in range(0, 19)]
    # The QC rows enter the main inequality unscaled while the Riccati
    # recursion runs on rho-scaled dynamics, so its cost must be inflated
    # by 1/rho^2 (plus a whisker above the 2*qc strictness bonus) for the
    # fixed point to satisfy the actual matrix inequality rather than a
    # slightly weaker one. The state regularizer c adds c * ||resolvent||^2
    # to the channel gain, and strongly non-normal loops have resolvent
    # norms of 1e5 and more, so the c grid must reach far smaller than any
    # round-off intuition suggests. Zero is a legitimate last resort:
    # observability of the uncertainty output often makes the
    # unregularized solution definite anyway.
    eps1 = 3.0 * qc

    def try_lam(P: np.ndarray, lam: float):
        x = np.zeros(lay.table.n)
        x[lay.P] = P
        x[lay.Lam] = lam * np.ones(d.n_phi)
        x[lay.M1] = (np.diag(np.concatenate([lam * np.ones(d.n_phi),
                                             -lam * np.ones(d.n_phi)]))
                     + 2 * qc * np.eye(2 * d.n_phi))
        x[lay.M2] = (np.diag(np.concatenate([np.ones(d.n_w),
                                             -np.ones(d.n_w)]))
                     + 2 * qc * np.eye(2 * d.n_w))
        x[lay.lam2] = 1.0
        xr = _rescale_to_margins(prob, x)
        if xr is None:
            return None
        if all(r.passed for r in sdp_core.verify(prob, xr, verify_tol)):
            return xr
        return None

    for delta in (0.3, 0.1, 0.03, 0.01, 0.003):
        corner = 1.0 - rho ** 2 * (1.0 - delta)
        for c_rel in (1e-4, 1e-6, 1e-8, 1e-10, 1e-12, 1e-14, 0.0):
            creg = c_rel * cv2 * np.eye(d.n_zeta)
            if not q_active:
                Q = ((1.0 + eps1) * Cv.T @ Cv + creg) / rho ** 2
                P = _brl_value_iteration(Ab, aug.calB3 / rho, Q,
                                         gain2=1.0 - delta)
                if P is None or np.linalg.eigvalsh(P)[0] <= 0:
                    continue
                for lam in lam_grid:
                    xr = try_lam(P, lam)
                    if xr is not None:
                        return xr, prob, lay
            else:
                for lam in lam_grid:
                    if lam * corner <= 2.0 * qc:
                        continue  # activation corner cannot close at this lam
                    Bext = np.hstack([aug.calB2 / np.sqrt(lam), aug.calB3]) / rho
                    Q = ((1.0 + eps1) * Cv.T @ Cv
                         + (lam + 4.0 * qc) * Cp.T @ Cp + creg) / rho ** 2
                    P = _brl_value_iteration(Ab, Bext, Q, gain2=1.0 - delta)
                    if P is None or np.linalg.eigvalsh(P)[0] <= 0:
                        continue
                    xr = try_lam(P, lam)
                    if xr is not None:
                        return xr, prob, lay
    return None


def _analytic_reach_candidate(aug: AugmentedSystem, rho: float,
                              mu_d: float, mu_phi: float, margins: Margins,
                              verify_tol: float):
    """Deterministic reach certificate from a weighted disturbance game.

    With the closed-form multiplier choices the reach inequality is a
    bounded-real condition on the loop driven by (phi, q, w, d): the
    external input, the renormalized activation output, the uncertainty
    return and the disturbance, with input budgets (mu_phi, lam - 2qc,
    lam2 - 2qc, mu_d) and charged outputs built from the activation-input
    and uncertainty-output rows. Each multiplier grid point then yields a
    minimal Lyapunov candidate by value iteration. A state regularizer
    c >= pd rides along in the cost so the candidate clears the
    positivity floor outright: the first iterate already dominates c*I
    and the recursion is monotone. Unlike the stability construction
    there is no free overall scale here (the budgets are pinned), which
    is why the floor must be built in rather than rescaled to.

    Returns (x, problem, layout) for the best verified candidate on the
    grid (largest error metric, hence smallest gamma), else None.
    """
    d = aug.dims
    if d.n_w == 0:
        return None
    if (aug.calD23[:d.n_w, :].any() or aug.calD22[:d.n_w, :].any()
            or aug.calD12[:d.n_phi, :].any()):
        return None  # feedthrough shapes outside the construction: solver only
    prob, lay = _build_reach(aug, rho, mu_d, mu_phi, margins)
    qc = max(margins.qc, 1e-9)
    cbase = max(margins.pd, 1e-9)
    Cp = aug.calC1[:d.n_phi, :]
    Cv = aug.calC2[:d.n_w, :]
    Dv1 = aug.calD21[:d.n_w, :]
    Dv4 = aug.calD24[:d.n_w, :]
    At = aug.calA / rho
    Bt = np.hstack([aug.calB1, aug.calB2, aug.calB3, aug.calB4]) / rho
    q_active = bool(aug.calB2.any() or Cp.any())
    lam_grid = ([4.0 * qc * 10.0 ** e for e in range(0, 19, 2)]
                if q_active else [4.0 * qc])
    n_in = d.n_phi_ext + d.n_phi + d.n_w + d.n_d

    def assemble(P, lam, lam2):
        x = np.zeros(lay.table.n)
        x[lay.P] = P
        x[lay.Lam] = lam * np.ones(d.n_phi)
        x[lay.M1] = np.diag(np.concatenate([(lam + 2 * qc) * np.ones(d.n_phi),
                                            (2 * qc - lam) * np.ones(d.n_phi)]))
        x[lay.lam2] = lam2
        x[lay.M2] = np.diag(np.concatenate([(lam2 + 2 * qc) * np.ones(d.n_w),
                                            (2 * qc - lam2) * np.ones(d.n_w)]))
        x[lay.gamma] = (1.0 + 1e-9) / extract_error_metric(P)
        if all(r.passed for r in sdp_core.verify(prob, x, verify_tol)):
            return x
        return None

    for deflate in (0.0, 0.01):
        for c_mult in (2.0, 1.25, 5.0):
            c = c_mult * cbase
            best = None
            for lam2 in np.geomspace(1e-3, 1e3, 13):
                for lam in lam_grid:
                    budgets = np.concatenate([
                        mu_phi * np.ones(d.n_phi_ext),
                        (lam - 2 * qc) * np.ones(d.n_phi),
                        (lam2 - 2 * qc) * np.ones(d.n_w),
                        mu_d * np.ones(d.n_d)]) * (1.0 - deflate)
                    if budgets.min() <= 0:
                        continue
                    wp, wv = np.sqrt(lam + 4 * qc), np.sqrt(lam2 + 3 * qc)
                    Ctil = np.vstack([wp * Cp, wv * Cv])
                    Dtil = np.vstack([
                        np.zeros((d.n_phi, n_in)),
                        wv * np.hstack([Dv1, np.zeros((d.n_w, d.n_phi + d.n_w)),
                                        Dv4])])
                    Q = (Ctil.T @ Ctil) / rho ** 2 + c * np.eye(d.n_zeta)
                    Sx = (Ctil.T @ Dtil) / rho ** 2
                    R = (np.diag(budgets) - Dtil.T @ Dtil) / rho ** 2
                    P = _brl_value_iteration(At, Bt, Q, R=R, S=Sx, iters=20000)
                    if P is None or np.linalg.eigvalsh(P)[0] < margins.pd:
                        continue
                    pe = extract_error_metric(P)
                    if best is not None and pe <= best[0]:
                        continue
                    x = assemble(P, lam, lam2)
                    if x is not None:
                        best = (pe, x)
            if best is not None:
                return best[1], prob, lay
    return None


def _phase1_problem(prob: SdpProblem, lay: _Layout, cap_mat: np.ndarray,
                    floor: float = 1e-9) -> tuple[SdpProblem, int]:
    """Anchored reformulation of the homogeneous feasibility problem.

    The raw problem is a cone: any feasible point stays feasible under
    positive scaling, which leaves interior-point solvers without a
    well-defined center. Maximizing the margin t of the main block under
    a scale cap P <= cap_mat turns it into a bounded, nondegenerate
    optimization. The cap must be shaped like a plausible solution (for
    example a multiple of the nominal-loop Lyapunov matrix): against a
    round cap like the identity, the attainable margin collapses with
    the conditioning that P is forced to have, and the solver cannot
    separate feasible from infeasible. Fixed strictness margins are
    relaxed to a small floor here; `_rescale_to_margins` restores them
    on the way out.
    """
    n = len(prob.vars)
    t_idx = n
    vars2 = list(prob.vars) + [ScalarVar("feas_margin", nonneg=False)]
    blocks2 = []
    for blk in prob.blocks:
        coeffs = dict(blk.coeffs)
        if blk.name.endswith("_main"):
            coeffs[t_idx] = -np.eye(blk.size)
        blocks2.append(LmiBlock(blk.name, blk.F0, coeffs,
                                margin=min(blk.margin, floor)))
    cap_block = _affine_block(
        "P_cap", lambda xv: cap_mat - _sym_value(lay.P, xv),
        n + 1, np.unique(lay.P), 0.0)
    t_cap = LmiBlock("t_cap", np.array([[1.0]]), {t_idx: -np.ones((1, 1))}, 0.0)
    objective = np.zeros(n + 1)
    objective[t_idx] = -1.0  # maximize the margin
    return SdpProblem(vars=vars2, blocks=blocks2 + [cap_block, t_cap],
                      objective=objective), t_idx


def _rescale_to_margins(prob: SdpProblem, x: np.ndarray) -> np.ndarray | None:
    """Scale a point of the homogeneous cone up until every fixed margin holds.

    Valid because every block of the raw problem has F0 = 0, so the block
    values are linear in the scale. Returns None when some margin block is
    not strictly positive (no scale can fix that).
    """
    s = 1.0
    for blk in prob.blocks:
        if blk.margin <= 0:
            continue
        raw = sdp_core.block_matrix(blk, x) + blk.margin * np.eye(blk.size)
        lam = float(np.linalg.eigvalsh(0.5 * (raw + raw.T))[0])
        if lam <= 0:
            return None
        s = max(s, blk.margin / lam)
    return s * x


def verify_stability(aug: AugmentedSystem, rho: float,
                     opts: CertifyOptions = CertifyOptions(),
                     config_hash: str = "") -> StabilityCertificate:
    """Solve the stability LMI; return a verified certificate or raise.

    Internally solves the anchored max-margin form, rescales the point to
    the requested strictness margins, and re-verifies every block with an
    independent eigenvalue check before issuing the certificate. Raises
    InfeasibleError when no certificate exists (within the scale cap) and
    SolverFailureError when the solver fails numerically.
    """
    if opts.strategy not in ("auto", "analytic", "sdp"):
        raise ParameterError(f"unknown certification strategy {opts.strategy!r}")
    P0, radius = _nominal_lyapunov_shape(aug, rho)
    if P0 is None:
        raise InfeasibleError(
            f"stability LMI infeasible at rho={rho}: the nominal closed loop "
            f"already has spectral radius {radius:.6f} >= rho")
    if opts.strategy in ("auto", "analytic"):
        found = _analytic_stability_candidate(aug, rho, opts.margins,
                                              opts.solve.verify_tol)
        if found is not None:
            x0, _, lay0 = found
            return _extract_stability(x0, lay0, rho, opts.margins, config_hash,
                                      "analytic bounded-real construction")
        if opts.strategy == "analytic":
            raise SolverFailureError(
                "analytic certificate construction found no verifiable point "
                f"at rho={rho} (nominal radius {radius:.6f})")
    bal, S = _state_balanced(aug, P0)
    prob, lay = _build_stability(bal, rho, opts.margins)
    phase1, t_idx = _phase1_problem(prob, lay,
                                    cap_mat=1e3 * np.eye(aug.dims.n_zeta))
    sol = sdp_core.solve(phase1, opts.solve)
    if sol.status == "infeasible":
        # only possible if a cap/margin block is unsatisfiable, not expected
        raise InfeasibleError(f"stability LMI infeasible at rho={rho} ({sol.detail})")
    if sol.x is not None:
        scaled = _rescale_to_margins(prob, sol.x[:len(prob.vars)])
        if scaled is not None:
            # certificate must hold in the coordinates the caller lives in
            x0 = _pull_back(scaled, lay, S)
            prob0, _ = _build_stability(aug, rho, opts.margins)
            reports = sdp_core.verify(prob0, x0, opts.solve.verify_tol)
            if all(r.passed for r in reports):
                return _extract_stability(x0, lay, rho, opts.margins,
                                          config_hash, sol.detail)
        if sol.status == "optimal":
            # The max-margin problem solved but its best point cannot be
            # rescaled into a verifiable certificate: within the solver's
            # resolution the LMI has no strictly feasible point at this rho.
            raise InfeasibleError(
                f"stability LMI infeasible at rho={rho}: no verifiable "
                f"certificate (best attainable main-block margin "
                f"{sol.x[t_idx]:.3e})")
    raise SolverFailureError(f"stability LMI solve failed: {sol.detail}")


def _extract_stability(x, lay, rho, margins, config_hash, detail) -> StabilityCertificate:
    P = _sym_value(lay.P, x)
    eigs = np.linalg.eigvalsh(P)
    condP = float(eigs[-1] / eigs[0])
    return StabilityCertificate(
        rho=rho, P=P, Lambda=x[lay.Lam].copy(), M1=_sym_value(lay.M1, x),
        M2=_sym_value(lay.M2, x), lambda2=float(x[lay.lam2]), condP=condP,
        margins=margins, config_hash=config_hash, detail=detail)


def _extract_reach(x, lay, rho, mu_d, mu_phi, margins, config_hash,
                   detail) -> ReachCertificate:
    base = _extract_stability(x, lay, rho, margins, config_hash, detail)
    P_eyL = extract_error_metric(base.P)
    # gamma is determined by P at the binding optimum; tightening it to the
    # exact Schur value keeps the block feasible (gamma only ever grows) and
    # makes the reported pair arithmetically consistent.
    gamma = float(max(x[lay.gamma], 1.0 / P_eyL))
    return ReachCertificate(
        rho=base.rho, P=base.P, Lambda=base.Lambda, M1=base.M1, M2=base.M2,
        lambda2=base.lambda2, condP=base.condP, margins=base.margins,
        config_hash=config_hash, detail=base.detail,
        mu_d=mu_d, mu_phi=mu_phi, gamma=gamma, P_eyL=P_eyL)


def solve_reach(aug: AugmentedSystem, rho: float, mu_d: float = 1.0,
                mu_phi: float = 1.0, opts: CertifyOptions = CertifyOptions(),
                config_hash: str = "") -> ReachCertificate:
    """Solve the minimum-gamma reachability SDP; return a verified certificate.

    The reach feasible set of a frontier-tight loop sits several orders of
    magnitude away from its stability certificates (the pinned slack
    budgets cap P along the driven directions), so balancing the state by
    the nominal Lyapunov shape is not enough for a solver to converge.
    Instead the problem is solved in coordinates balanced around the
    analytic Riccati candidate whenever one exists; the candidate then
    sits at identity, the solver only has to improve gamma from there,
    and the candidate itself is issued (it is already a verified point)
    when the solver cannot. Every solver answer is re-verified in the
    caller's coordinates before a certificate is returned.
    """
    if opts.strategy not in ("auto", "analytic", "sdp"):
        raise ParameterError(f"unknown certification strategy {opts.strategy!r}")
    P0, radius = _nominal_lyapunov_shape(aug, rho)
    if P0 is None:
        raise InfeasibleError(
            f"reachability SDP infeasible at rho={rho}: the nominal closed "
            f"loop already has spectral radius {radius:.6f} >= rho")
    cand = None
    if opts.strategy in ("auto", "analytic"):
        cand = _analytic_reach_candidate(aug, rho, mu_d, mu_phi, opts.margins,
                                         opts.solve.verify_tol)
        if opts.strategy == "analytic":
            if cand is None:
                raise SolverFailureError(
                    "analytic reach construction found no verifiable point "
                    f"at rho={rho}, mu_d={mu_d}, mu_phi={mu_phi}")
            x_c, _, lay_c = cand
            return _extract_reach(x_c, lay_c, rho, mu_d, mu_phi, opts.margins,
                                  config_hash,
                                  "analytic bounded-real construction")
    if cand is not None:
        x_c, _, lay_c = cand
        shape = _sym_value(lay_c.P, x_c)
    else:
        shape = P0
    bal, S = _state_balanced(aug, shape)
    Sinv = np.linalg.inv(S)
    prob, lay = _build_reach(bal, rho, mu_d, mu_phi, opts.margins,
                             pos_metric=Sinv.T @ Sinv,
                             offset_vec=Sinv[0, :])
    prob0, _ = _build_reach(aug, rho, mu_d, mu_phi, opts.margins)

    def attempt(problem, solve_opts, back):
        sol = sdp_core.solve(problem, solve_opts)
        if sol.status != "optimal" or sol.x is None:
            return None, sol
        xp = _pull_back(back(sol.x), lay, S)
        if all(r.passed for r in sdp_core.verify(prob0, xp, opts.solve.verify_tol)):
            return (xp, sol.detail), sol
        return None, sol

    # Stage 1: the full problem. With a pinned stage still in reserve only
    # the first solver gets a shot (failures should be quick); without a
    # candidate this is the only stage, so the whole chain runs.
    first = (replace(opts.solve, solvers=opts.solve.solvers[:1])
             if cand is not None else opts.solve)
    hit, sol = attempt(prob, first, lambda xv: xv)
    if hit is None and cand is not None:
        # Stage 2: same problem with the multipliers pinned at the analytic
        # candidate. Only P and gamma remain, which removes the variables
        # whose scales the solver chokes on; gamma improves over the
        # candidate through the reshaped P alone.
        mult_idx = np.concatenate([np.unique(lay.Lam), np.unique(lay.M1),
                                   np.unique(lay.M2), [lay.lam2]])
        pins = {int(i): float(x_c[i]) for i in mult_idx}
        pinned, expand = sdp_core.pin_variables(prob, pins)
        hit, sol = attempt(pinned, opts.solve, expand)
    if hit is not None:
        x0, detail = hit
    elif cand is not None:
        x0, _, lay = cand
        detail = ("analytic bounded-real construction (solver declined: "
                  f"{sol.detail or sol.status})")
    elif sol.status == "infeasible":
        raise InfeasibleError(
            f"reachability SDP infeasible at rho={rho}, mu_d={mu_d}, "
            f"mu_phi={mu_phi}")
    else:
        raise SolverFailureError(
            f"reachability SDP solve failed: {sol.detail or sol.status}")
    return _extract_reach(x0, lay, rho, mu_d, mu_phi, opts.margins,
                          config_hash, detail)


def extract_error_metric(P: np.ndarray) -> float:
    """Schur complement of P onto its first coordinate (the lateral offset).

    Satisfies blkdiag(P_eyL, 0) <= P, hence e_yL^2 * P_eyL <= zeta' P zeta.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise CertificateError(f"P must be square, got shape {P.shape}")
    if np.linalg.eigvalsh(P)[0] <= 0:
        raise CertificateError("P must be positive definite")
    rest = P[1:, 1:]
    cross = P[1:, 0]
    value = float(P[0, 0] - cross @ np.linalg.solve(rest, cross))
    return value


def mu_grid_search(aug: AugmentedSystem, rho: float,
                   grid: np.ndarray | None = None,
                   opts: CertifyOptions = CertifyOptions(),
                   config_hash: str = ""):
    """Coarse (mu_d, mu_phi) sweep returning the certificate with smallest gamma.

    The weights enter the sigma recursion as well, so the smallest gamma is
    not always the tightest runtime bound; this helper is a diagnostic.
    """
    if grid is None:
        grid = np.logspace(-2, 2, 5)
    best = None
    for mu_d in grid:
        for mu_phi in grid:
            try:
                cert = solve_reach(aug, rho, float(mu_d), float(mu_phi),
                                   opts, config_hash)
            except (InfeasibleError, SolverFailureError):
                continue
            if best is None or cert.gamma < best.gamma:
                best = cert
    if best is None:
        raise InfeasibleError("no feasible point on the mu grid")
    return best


# ---------------------------------------------------------------------------
# certificate serialization


def certificate_to_dict(cert: StabilityCertificate) -> dict:
    payload = {
        "kind": "reach" if isinstance(cert, ReachCertificate) else "stability",
        "rho": cert.rho,
        "P": cert.P.tolist(),
        "Lambda": cert.Lambda.tolist(),
        "M1": cert.M1.tolist(),
        "M2": cert.M2.tolist(),
        "lambda2": cert.lambda2,
        "condP": cert.condP,
        "margins": {"pd": cert.margins.pd, "qc": cert.margins.qc,
                    "main": cert.margins.main},
        "config_hash": cert.config_hash,
        "detail": cert.detail,
    }
    if isinstance(cert, ReachCertificate):
        payload.update({"mu_d": cert.mu_d, "mu_phi": cert.mu_phi,
                        "gamma": cert.gamma, "P_eyL": cert.P_eyL})
    return payload


def certificate_from_dict(payload: dict) -> StabilityCertificate:
    margins = Margins(**payload["margins"])
    common = dict(
        rho=payload["rho"], P=np.array(payload["P"]),
        Lambda=np.array(payload["Lambda"]), M1=np.array(payload["M1"]),
        M2=np.array(payload["M2"]), lambda2=payload["lambda2"],
        condP=payload["condP"], margins=margins,
        config_hash=payload.get("config_hash", ""),
        detail=payload.get("detail", ""))
    if payload["kind"] == "reach":
        return ReachCertificate(
            mu_d=payload["mu_d"], mu_phi=payload["mu_phi"],
            gamma=payload["gamma"], P_eyL=payload["P_eyL"], **common)
    return StabilityCertificate(**common)


def save_certificate(cert: StabilityCertificate, path):
    Path(path).write_text(json.dumps(certificate_to_dict(cert), indent=1,
                                     sort_keys=True))


def load_certificate(path) -> StabilityCertificate:
    try:
        payload = json.loads(Path(path).read_text())
        return certificate_from_dict(payload)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise CertificateError(f"cannot read certificate {path}: {exc}") from exc
