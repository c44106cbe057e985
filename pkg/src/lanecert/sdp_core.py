"""Small dense semidefinite feasibility/minimization problems.

Problems are affine matrix inequalities in named scalar decision variables:
each constraint block reads  F0 + sum_i x_i F_i >= margin * I.  Solving is
delegated to a conic solver through cvxpy, but a returned point is only ever
reported Feasible/Optimal after `verify` re-evaluates every block from
scratch with an eigendecomposition that shares no code with the solve path.
That gate is the toolkit's trust anchor: a solver hiccup can cost an answer,
never produce a false certificate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cvxpy as cp
import numpy as np

from .errors import ParameterError, ShapeError

MAX_SCALARS = 500
MAX_BLOCK = 100
SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class ScalarVar:
    name: str
    nonneg: bool = False


@dataclass
class LmiBlock:
    """One constraint F0 + sum_i x_i F_i >= margin * I."""

    name: str
    F0: np.ndarray
    coeffs: dict[int, np.ndarray]  # var index -> F_i
    margin: float = 0.0

    @property
    def size(self) -> int:
        return self.F0.shape[0]


@dataclass
class SdpProblem:
    vars: list[ScalarVar]
    blocks: list[LmiBlock]
    objective: np.ndarray | None = None  # minimize objective @ x

    @property
    def n_vars(self) -> int:
        return len(self.vars)

    def validate(self):
        if self.n_vars > MAX_SCALARS:
            raise ParameterError(
                f"{self.n_vars} scalar variables exceeds the desk-scale cap {MAX_SCALARS}")
        names = [v.name for v in self.vars]
        if len(set(names)) != len(names):
            raise ParameterError("variable names must be unique")
        for blk in self.blocks:
            m = blk.F0.shape[0]
            if blk.F0.shape != (m, m):
                raise ShapeError(f"block {blk.name}: F0 must be square")
            if m > MAX_BLOCK:
                raise ParameterError(
                    f"block {blk.name}: size {m} exceeds the desk-scale cap {MAX_BLOCK}")
            if blk.margin < 0:
                raise ParameterError(f"block {blk.name}: margin must be >= 0")
            _check_sym(blk.name + ".F0", blk.F0)
            for idx, Fi in blk.coeffs.items():
                if not (0 <= idx < self.n_vars):
                    raise ParameterError(
                        f"block {blk.name}: coefficient refers to unknown variable {idx}")
                if Fi.shape != (m, m):
                    raise ShapeError(
                        f"block {blk.name}: F_{idx} shape {Fi.shape} != block size {m}")
                _check_sym(f"{blk.name}.F_{idx}", Fi)
        if self.objective is not None and self.objective.shape != (self.n_vars,):
            raise ShapeError("objective must be a vector over all variables")


def _check_sym(name, F):
    if np.max(np.abs(F - F.T), initial=0.0) > SYMMETRY_TOL:
        raise ShapeError(f"{name} is not symmetric within {SYMMETRY_TOL}")


@dataclass(frozen=True)
class SolveOptions:
    solvers: tuple[str, ...] = ("CLARABEL", "SCS")
    verify_tol: float = 1e-7
    max_iters: int = 200_000
    solver_tol: float = 1e-9


@dataclass
class SdpSolution:
    status: str  # optimal | feasible | infeasible | numerical_failure
    x: np.ndarray | None = None
    block_min_eigs: dict[str, float] = field(default_factory=dict)
    objective_value: float | None = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


@dataclass
class BlockReport:
    name: str
    min_eig: float
    passed: bool


def block_matrix(blk: LmiBlock, x: np.ndarray) -> np.ndarray:
    """Re-evaluate F0 + sum_i x_i F_i - margin*I from scratch."""
    M = blk.F0 - blk.margin * np.eye(blk.size)
    for idx, Fi in blk.coeffs.items():
        M = M + x[idx] * Fi
    return M


def pin_variables(prob: SdpProblem, pins: dict[int, float]):
    """Restrict a problem by fixing a subset of variables to constants.

    The pinned columns fold into each block's constant term, so the solver
    sees a strictly smaller and often far better conditioned problem.
    Returns (reduced problem, expand) where expand maps a reduced solution
    vector back to the full variable order. The reduced objective simply
    drops the pinned entries: reported objective values shift by a
    constant, the argmin does not.
    """
    for i, v in pins.items():
        if not 0 <= i < prob.n_vars:
            raise ShapeError(f"pin index {i} outside the variable table")
        if prob.vars[i].nonneg and v < 0:
            raise ParameterError(
                f"variable {prob.vars[i].name} is sign-constrained; "
                f"cannot pin it to {v}")
    keep = [i for i in range(prob.n_vars) if i not in pins]
    new_of = {old: new for new, old in enumerate(keep)}
    blocks = []
    for blk in prob.blocks:
        F0 = blk.F0.copy()
        coeffs = {}
        for idx, Fi in blk.coeffs.items():
            if idx in pins:
                F0 = F0 + pins[idx] * Fi
            else:
                coeffs[new_of[idx]] = Fi
        blocks.append(LmiBlock(blk.name, F0, coeffs, blk.margin))
    objective = prob.objective[keep].copy() if prob.objective is not None else None
    reduced = SdpProblem(vars=[prob.vars[i] for i in keep], blocks=blocks,
                         objective=objective)

    def expand(x_reduced: np.ndarray) -> np.ndarray:
        x = np.zeros(prob.n_vars)
        for old, val in pins.items():
            x[old] = val
        x[keep] = np.asarray(x_reduced, dtype=float)
        return x

    return reduced, expand


def verify(prob: SdpProblem, x, tol: float = 1e-7) -> list[BlockReport]:
    """Independent feasibility check of a candidate point.

    Eigendecomposes every affine combination with numpy; nothing here
    touches the solver. Sign-constrained variables are checked to -tol.
    The eigenvalue tolerance is relative to the block's magnitude (and
    absolute for blocks of at most unit scale): a block whose entries
    reach 1e9 cannot meaningfully be required nonnegative to 1e-7, float
    eigensolves carry more noise than that.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (prob.n_vars,):
        raise ShapeError(f"x must have length {prob.n_vars}, got shape {x.shape}")
    reports = []
    for i, var in enumerate(prob.vars):
        if var.nonneg:
            reports.append(BlockReport(f"sign({var.name})", float(x[i]), x[i] >= -tol))
    for blk in prob.blocks:
        M = block_matrix(blk, x)
        min_eig = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
        scale = max(1.0, float(np.abs(M).max()) if M.size else 0.0)
        reports.append(BlockReport(blk.name, min_eig, min_eig >= -tol * scale))
    return reports


def solve(prob: SdpProblem, opts: SolveOptions = SolveOptions()) -> SdpSolution:
    """Solve the problem and gate the answer behind `verify`.

    Solvers are tried in the fixed order of opts.solvers, so repeated runs
    of the same problem take the same path. An iteration cap or solver
    exception yields status numerical_failure, never a silent Feasible.
    """
    prob.validate()
    n = prob.n_vars

    # Constant blocks are decided outright; the solver never sees them.
    for blk in prob.blocks:
        if not blk.coeffs:
            M = block_matrix(blk, np.zeros(n))
            if np.linalg.eigvalsh(0.5 * (M + M.T))[0] < -opts.verify_tol:
                return SdpSolution(status="infeasible",
                                   detail=f"constant block {blk.name} violated")
    if n == 0:
        reports = verify(prob, np.zeros(0), opts.verify_tol)
        return SdpSolution(
            status="feasible", x=np.zeros(0),
            block_min_eigs={r.name: r.min_eig for r in reports})

    x = cp.Variable(n)
    constraints = []
    for i, var in enumerate(prob.vars):
        if var.nonneg:
            constraints.append(x[i] >= 0)
    for blk in prob.blocks:
        m = blk.size
        if not blk.coeffs:
            continue  # constant block, handled by verify
        idxs = sorted(blk.coeffs)
        base = blk.F0 - blk.margin * np.eye(m)
        # Congruence equilibration: D M D >= 0 iff M >= 0 for diagonal D > 0,
        # so the solver sees balanced data while feasibility is unchanged.
        d = _equilibrate([base] + [blk.coeffs[i] for i in idxs])
        D = np.outer(d, d)
        stack = np.stack([(blk.coeffs[i] * D).reshape(m * m) for i in idxs], axis=0)
        expr_vec = x[idxs] @ stack + (base * D).reshape(m * m)
        expr = cp.reshape(expr_vec, (m, m), order="C")
        constraints.append((expr + expr.T) * 0.5 >> 0)

    objective = cp.Minimize(prob.objective @ x if prob.objective is not None else 0)
    problem = cp.Problem(objective, constraints)

    last_detail = ""
    best_x, best_eig = None, -np.inf
    for solver in opts.solvers:
        try:
            problem.solve(solver=solver, **_solver_args(solver, opts))
        except Exception as exc:  # noqa: BLE001 - solver-side blowups
            last_detail = f"{solver}: {exc}"
            continue
        status = problem.status
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return SdpSolution(status="infeasible", detail=f"{solver}: {status}")
        if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
            return SdpSolution(status="numerical_failure",
                               detail=f"{solver}: objective unbounded")
        if x.value is None:
            last_detail = f"{solver}: no point returned ({status})"
            continue
        xv = np.asarray(x.value, dtype=float).reshape(n)
        reports = verify(prob, xv, opts.verify_tol)
        if all(r.passed for r in reports):
            return SdpSolution(
                status="optimal" if prob.objective is not None else "feasible",
                x=xv,
                block_min_eigs={r.name: r.min_eig for r in reports},
                objective_value=(float(prob.objective @ xv)
                                 if prob.objective is not None else None),
                detail=f"{solver}: {status}")
        worst = min(reports, key=lambda r: r.min_eig)
        if best_x is None or worst.min_eig > best_eig:
            best_x, best_eig = xv, worst.min_eig
        last_detail = (f"{solver}: returned point fails verification "
                       f"({worst.name} min eig {worst.min_eig:.3e})")
    # keep the least-violating point so callers can post-process it
    return SdpSolution(status="numerical_failure", x=best_x, detail=last_detail)


def _equilibrate(mats: list[np.ndarray], iters: int = 8) -> np.ndarray:
    """Ruiz-style diagonal scaling computed jointly over a family of
    symmetric matrices sharing one row/column space. Returns d such that
    diag(d) M diag(d) has row maxima near one for every M in the family.
    """
    d = np.ones(mats[0].shape[0])
    work = [M.copy() for M in mats]
    for _ in range(iters):
        norms = np.abs(np.stack(work)).max(axis=(0, 2))
        norms[norms == 0] = 1.0
        s = 1.0 / np.sqrt(norms)
        for W in work:
            W *= s[:, None]
            W *= s[None, :]
        d *= s
    return d


def _solver_args(solver: str, opts: SolveOptions) -> dict:
    if solver == "CLARABEL":
        # default tolerances (1e-8) are already the target; cap iterations
        return {"max_iter": min(opts.max_iters, 20_000)}
    if solver == "SCS":
        return {"max_iters": min(opts.max_iters, 50_000),
                "eps_abs": opts.solver_tol * 10, "eps_rel": opts.solver_tol * 10}
    return {}


def write_problem(prob: SdpProblem, path):
    """Dump in a sparse text format for external cross-checking.

    Lines: `var <name> <nonneg>`, `objective <i> <c_i>`,
    `block <name> <size> <margin>`, then `entry <block> <term> <i> <j> <value>`
    where term -1 denotes F0 and otherwise indexes a variable.
    """
    lines = ["lanecert-sdp 1"]
    for v in prob.vars:
        lines.append(f"var {v.name} {int(v.nonneg)}")
    if prob.objective is not None:
        for i, c in enumerate(prob.objective):
            if c != 0.0:
                lines.append(f"objective {i} {c!r}")
    for b, blk in enumerate(prob.blocks):
        lines.append(f"block {blk.name} {blk.size} {blk.margin!r}")
        terms = [(-1, blk.F0)] + sorted(blk.coeffs.items())
        for term, F in terms:
            for i, j in zip(*np.nonzero(F)):
                if i <= j:
                    lines.append(f"entry {b} {term} {i} {j} {F[i, j]!r}")
    Path(path).write_text("\n".join(lines) + "\n")
