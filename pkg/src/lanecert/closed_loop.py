"""Augmented closed-loop system: uncertain plant + transformed controller.

State zeta = (x, xi). Inputs per step: external input phi, activation
output q, uncertainty signal w, disturbance d. Outputs r = (p, q) feed the
activation quadratic constraint and s = (v, w) the uncertainty one. All
certification LMIs are expressed on these blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AssemblyError, ShapeError
from .rnn_controller import TransformedRnn, transformed_activation
from .vehicle_model import UncertainPlant


@dataclass(frozen=True)
class SystemDims:
    n_zeta: int
    n_xi: int
    n_phi: int
    n_w: int
    n_phi_ext: int = 2
    n_d: int = 2


@dataclass(frozen=True)
class AugmentedSystem:
    calA: np.ndarray    # n_zeta x n_zeta
    calB1: np.ndarray   # n_zeta x 2
    calB2: np.ndarray   # n_zeta x n_phi
    calB3: np.ndarray   # n_zeta x n_w
    calB4: np.ndarray   # n_zeta x 2
    calC1: np.ndarray   # 2n_phi x n_zeta
    calD12: np.ndarray  # 2n_phi x n_phi
    calC2: np.ndarray   # 2n_w x n_zeta
    calD21: np.ndarray  # 2n_w x 2
    calD22: np.ndarray  # 2n_w x n_phi
    calD23: np.ndarray  # 2n_w x n_w
    calD24: np.ndarray  # 2n_w x 2
    dims: SystemDims
    trnn: TransformedRnn

    def __post_init__(self):
        d = self.dims
        expected = {
            "calA": (d.n_zeta, d.n_zeta),
            "calB1": (d.n_zeta, d.n_phi_ext),
            "calB2": (d.n_zeta, d.n_phi),
            "calB3": (d.n_zeta, d.n_w),
            "calB4": (d.n_zeta, d.n_d),
            "calC1": (2 * d.n_phi, d.n_zeta),
            "calD12": (2 * d.n_phi, d.n_phi),
            "calC2": (2 * d.n_w, d.n_zeta),
            "calD21": (2 * d.n_w, d.n_phi_ext),
            "calD22": (2 * d.n_w, d.n_phi),
            "calD23": (2 * d.n_w, d.n_w),
            "calD24": (2 * d.n_w, d.n_d),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise AssemblyError(
                    f"block {name} must have shape {shape}, got {arr.shape}")

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.calA))))

    def dump_blocks(self) -> str:
        """Human-readable dump of every block, for debugging."""
        lines = []
        for name in ("calA", "calB1", "calB2", "calB3", "calB4", "calC1",
                     "calD12", "calC2", "calD21", "calD22", "calD23", "calD24"):
            lines.append(f"{name} =")
            lines.append(np.array2string(getattr(self, name), precision=6,
                                         suppress_small=True))
        return "\n".join(lines)


def selector_matrices(n: int):
    """Stacking selectors ([I;0], [0;I]) used for both r = (p,q) and s = (v,w)."""
    top = np.vstack([np.eye(n), np.zeros((n, n))])
    bot = np.vstack([np.zeros((n, n)), np.eye(n)])
    return top, bot


def assemble(up: UncertainPlant, trnn: TransformedRnn) -> AugmentedSystem:
    """Build every augmented block from the plant and transformed controller.

    The plant's output matrix C_G doubles as the controller input map
    (the feedback loop closes u through y = C_G x).
    """
    plant, lft = up.plant, up.lft
    n_xi, n_phi = trnn.n_xi, trnn.n_phi
    n_w = lft.n_w
    n_zeta = 4 + n_xi
    if plant.C_G.shape[0] != trnn.B2.shape[1]:
        raise AssemblyError(
            f"plant output width {plant.C_G.shape[0]} does not match "
            f"controller input width {trnn.B2.shape[1]}")

    C_G2 = plant.C_G
    D_rp, D_rq = selector_matrices(n_phi)
    D_sv, D_sw = selector_matrices(n_w)

    calA = np.block([
        [plant.A_G + plant.B_G1 @ trnn.D12 @ C_G2, plant.B_G1 @ trnn.C1],
        [trnn.B2 @ C_G2, trnn.A],
    ])
    calB1 = np.vstack([plant.B_G2, np.zeros((n_xi, 2))])
    calB2 = np.vstack([plant.B_G1 @ trnn.D11, trnn.B1])
    calB3 = np.vstack([lft.B_G3, np.zeros((n_xi, n_w))])
    calB4 = np.vstack([up.B_G4, np.zeros((n_xi, 2))])

    calC1 = np.hstack([D_rp @ trnn.D22 @ C_G2, D_rp @ trnn.C2])
    calD12 = D_rq.copy()

    calC2 = np.hstack([
        D_sv @ (lft.C_G1 + lft.D_G11 @ trnn.D12 @ C_G2),
        D_sv @ lft.D_G11 @ trnn.C1,
    ])
    calD21 = D_sv @ lft.D_G12
    calD22 = D_sv @ lft.D_G11 @ trnn.D11
    calD23 = D_sw.copy()
    calD24 = D_sv @ up.D_G14

    dims = SystemDims(n_zeta=n_zeta, n_xi=n_xi, n_phi=n_phi, n_w=n_w)
    return AugmentedSystem(calA=calA, calB1=calB1, calB2=calB2, calB3=calB3,
                           calB4=calB4, calC1=calC1, calD12=calD12, calC2=calC2,
                           calD21=calD21, calD22=calD22, calD23=calD23,
                           calD24=calD24, dims=dims, trnn=trnn)


def augmented_step(aug: AugmentedSystem, zeta, phi, q, w, d):
    """Linear update of the augmented system; returns (zeta_next, r, s)."""
    d_ = aug.dims
    zeta = _vec("zeta", zeta, d_.n_zeta)
    phi = _vec("phi", phi, d_.n_phi_ext)
    q = _vec("q", q, d_.n_phi)
    w = _vec("w", w, d_.n_w)
    d = _vec("d", d, d_.n_d)
    zeta_next = (aug.calA @ zeta + aug.calB1 @ phi + aug.calB2 @ q
                 + aug.calB3 @ w + aug.calB4 @ d)
    r = aug.calC1 @ zeta + aug.calD12 @ q
    s = aug.calC2 @ zeta + aug.calD21 @ phi + aug.calD22 @ q + aug.calD23 @ w + aug.calD24 @ d
    return zeta_next, r, s


def consistent_signals(aug: AugmentedSystem, zeta, phi, d, Delta: float):
    """Activation- and uncertainty-consistent (q, w) at the current state.

    p is the top half of r and does not depend on q; v is the top half of s
    and does not depend on w. Hence both close without an algebraic loop:
    q = renormalized activation at p, w = Delta * v with |Delta| <= 1.
    """
    d_ = aug.dims
    zeta = _vec("zeta", zeta, d_.n_zeta)
    phi = _vec("phi", phi, d_.n_phi_ext)
    d = _vec("d", d, d_.n_d)
    p = (aug.calC1 @ zeta)[:d_.n_phi]
    q = transformed_activation(aug.trnn, p)
    v = (aug.calC2 @ zeta + aug.calD21 @ phi + aug.calD22 @ q + aug.calD24 @ d)[:d_.n_w]
    w = Delta * v
    return q, w


def _vec(name, value, n):
    arr = np.asarray(value, dtype=float)
    if arr.shape != (n,):
        raise ShapeError(f"{name} must be a length-{n} vector, got shape {arr.shape}")
    return arr
