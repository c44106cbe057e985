"""Discrete-time lateral-dynamics plant and its speed-uncertainty representation.

The nominal plant tracks lane-keeping errors at a look-ahead point:
state x = (e_yL, e_y_dot, e_psi, psi_dot), steering input u = delta, and
road-induced external input phi = (psi_dot_desired, e_psiL - e_psi).
Longitudinal-speed offsets dVx enter three of the matrix entries; they are
factored exactly as a norm-bounded channel w = Delta * v with |Delta| <= 1,
so certification can treat the speed band as a structured uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundViolationError, ParameterError, ShapeError

STATE_LABELS = ("e_yL", "e_y_dot", "e_psi", "psi_dot")
INPUT_LABEL = "delta"
EXTERNAL_LABELS = ("psi_dot_des", "e_psiL_minus_e_psi")

N_W = 3  # width of the uncertainty channel


@dataclass(frozen=True)
class VehicleParams:
    """Physical and discretization parameters of the lateral model.

    Speeds are stored in m/s; the config layer converts from km/h.
    """

    T: float = 0.02          # sample time [s]
    L: float = 10.0          # look-ahead distance [m]
    eps: float = 0.1         # relaxation factor coupling e_y_dot to e_psi
    tau_psi: float = 0.2     # yaw time constant [s]
    l_f: float = 1.4         # CG to front axle [m]
    l_r: float = 1.6         # CG to rear axle [m]
    V_nom: float = 85.0 / 3.6   # nominal longitudinal speed [m/s]
    dV_max: float = 15.0 / 3.6  # speed-offset bound [m/s]

    def __post_init__(self):
        if not (self.T > 0):
            raise ParameterError(f"sample time T must be positive, got {self.T}")
        if not (self.L > 0):
            raise ParameterError(f"look-ahead L must be positive, got {self.L}")
        if not (0.0 <= self.eps <= 1.0):
            raise ParameterError(f"relaxation factor eps must lie in [0, 1], got {self.eps}")
        if not (self.tau_psi > 0):
            raise ParameterError(f"yaw time constant tau_psi must be positive, got {self.tau_psi}")
        if not (self.l_f > 0 and self.l_r > 0):
            raise ParameterError(f"axle distances must be positive, got l_f={self.l_f}, l_r={self.l_r}")
        if not (self.V_nom > 0):
            raise ParameterError(f"nominal speed must be positive, got {self.V_nom}")
        if not (self.dV_max >= 0):
            raise ParameterError(f"speed-offset bound must be nonnegative, got {self.dV_max}")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r

    @property
    def speed_band(self) -> tuple[float, float]:
        """Certified speed interval [V_nom - dV_max, V_nom + dV_max] in m/s."""
        return (self.V_nom - self.dV_max, self.V_nom + self.dV_max)


@dataclass(frozen=True)
class PlantLTI:
    """State-space matrices of the nominal plant at a fixed speed."""

    A_G: np.ndarray   # 4x4
    B_G1: np.ndarray  # 4x1, steering
    B_G2: np.ndarray  # 4x2, road external input
    C_G: np.ndarray   # 2x4, observed (e_yL, e_psi)
    Vx: float

    def __post_init__(self):
        _check_shape("A_G", self.A_G, (4, 4))
        _check_shape("B_G1", self.B_G1, (4, 1))
        _check_shape("B_G2", self.B_G2, (4, 2))
        _check_shape("C_G", self.C_G, (2, 4))
        for name in ("A_G", "B_G1", "B_G2", "C_G"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ParameterError(f"{name} contains non-finite entries")


@dataclass(frozen=True)
class UncertaintyLFT:
    """Constant factor matrices of the speed-offset channel.

    For any |dVx| <= dV_max the matrix perturbation factors exactly as
    [dA_G dB_G1 dB_G2] = Delta * B_G3 [C_G1 D_G11 D_G12] with
    Delta = dVx / dV_max.
    """

    B_G3: np.ndarray   # 4x3
    C_G1: np.ndarray   # 3x4
    D_G11: np.ndarray  # 3x1
    D_G12: np.ndarray  # 3x2
    n_w: int = field(default=N_W)

    def __post_init__(self):
        _check_shape("B_G3", self.B_G3, (4, N_W))
        _check_shape("C_G1", self.C_G1, (N_W, 4))
        _check_shape("D_G11", self.D_G11, (N_W, 1))
        _check_shape("D_G12", self.D_G12, (N_W, 2))


@dataclass(frozen=True)
class UncertainPlant:
    """Nominal plant plus uncertainty and disturbance channels.

    The disturbance d enters exactly like the external input phi, hence
    B_G4 = B_G2 and D_G14 = D_G12.
    """

    plant: PlantLTI
    lft: UncertaintyLFT
    B_G4: np.ndarray   # 4x2
    D_G14: np.ndarray  # 3x2

    def __post_init__(self):
        _check_shape("B_G4", self.B_G4, self.plant.B_G2.shape)
        _check_shape("D_G14", self.D_G14, self.lft.D_G12.shape)


def _check_shape(name, arr, shape):
    if not isinstance(arr, np.ndarray) or arr.shape != tuple(shape):
        got = getattr(arr, "shape", None)
        raise ShapeError(f"{name} must have shape {tuple(shape)}, got {got}")


def build_nominal_plant(params: VehicleParams, Vx: float) -> PlantLTI:
    """Populate the nominal plant matrices at longitudinal speed Vx [m/s]."""
    if not (Vx > 0):
        raise ParameterError(f"speed must be positive, got {Vx}")
    T, L, eps, tau = params.T, params.L, params.eps, params.tau_psi
    wl = params.wheelbase

    A_G = np.array([
        [1.0, T, 0.0, -T * L],
        [0.0, 1.0 - eps, eps * Vx, 0.0],
        [0.0, 0.0, 1.0, -T],
        [0.0, 0.0, 0.0, 1.0 - T / tau],
    ])
    B_G1 = np.array([
        [0.0],
        [-eps * params.l_r / wl * Vx],
        [0.0],
        [T / (wl * tau) * Vx],
    ])
    B_G2 = np.array([
        [T * L, T * Vx],
        [0.0, 0.0],
        [T, 0.0],
        [0.0, 0.0],
    ])
    C_G = np.array([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ])
    return PlantLTI(A_G=A_G, B_G1=B_G1, B_G2=B_G2, C_G=C_G, Vx=Vx)


def build_uncertainty_lft(params: VehicleParams) -> UncertaintyLFT:
    """Constant factor matrices scaled by the speed-offset bound dV_max."""
    T, eps, tau = params.T, params.eps, params.tau_psi
    wl = params.wheelbase
    dv = params.dV_max

    B_G3 = np.array([
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0],
        [0.0, 0.0, 1.0],
    ])
    C_G1 = np.zeros((3, 4))
    C_G1[1, 2] = eps * dv
    D_G11 = np.array([
        [0.0],
        [-eps * params.l_r / wl * dv],
        [T / (wl * tau) * dv],
    ])
    D_G12 = np.zeros((3, 2))
    D_G12[0, 1] = T * dv
    return UncertaintyLFT(B_G3=B_G3, C_G1=C_G1, D_G11=D_G11, D_G12=D_G12)


def build_uncertain_plant(params: VehicleParams, Vx: float | None = None) -> UncertainPlant:
    """Nominal plant at Vx (default V_nom) with uncertainty/disturbance channels."""
    plant = build_nominal_plant(params, params.V_nom if Vx is None else Vx)
    lft = build_uncertainty_lft(params)
    return UncertainPlant(plant=plant, lft=lft,
                          B_G4=plant.B_G2.copy(), D_G14=lft.D_G12.copy())


def delta_matrices(params: VehicleParams, dVx: float):
    """Perturbation matrices (dA_G, dB_G1, dB_G2) for a speed offset dVx.

    Brute-force counterpart of the factored channel; kept independent of
    `build_uncertainty_lft` so it can serve as the oracle in identity tests.
    """
    if abs(dVx) > params.dV_max:
        raise BoundViolationError(
            f"|dVx|={abs(dVx)} exceeds the bound dV_max={params.dV_max}")
    T, eps, tau = params.T, params.eps, params.tau_psi
    wl = params.wheelbase

    dA_G = np.zeros((4, 4))
    dA_G[1, 2] = eps * dVx
    dB_G1 = np.array([
        [0.0],
        [-eps * params.l_r / wl * dVx],
        [0.0],
        [T / (wl * tau) * dVx],
    ])
    dB_G2 = np.zeros((4, 2))
    dB_G2[0, 1] = T * dVx
    return dA_G, dB_G1, dB_G2


def plant_step(up: UncertainPlant, x, u, phi, w, d):
    """One step of the perturbed uncertain plant.

    Returns (x_next, v, y) where v is the uncertainty-channel output and
    y the observed state. The caller supplies w (typically Delta * v of the
    previous evaluation, or any admissible signal).
    """
    x = _vec("x", x, 4)
    phi = _vec("phi", phi, 2)
    w = _vec("w", w, up.lft.n_w)
    d = _vec("d", d, 2)
    u = float(u)

    p, lft = up.plant, up.lft
    x_next = p.A_G @ x + p.B_G1[:, 0] * u + p.B_G2 @ phi + lft.B_G3 @ w + up.B_G4 @ d
    v = lft.C_G1 @ x + lft.D_G11[:, 0] * u + lft.D_G12 @ phi + up.D_G14 @ d
    y = p.C_G @ x
    return x_next, v, y


def _vec(name, value, n):
    arr = np.asarray(value, dtype=float)
    if arr.shape != (n,):
        raise ShapeError(f"{name} must be a length-{n} vector, got shape {arr.shape}")
    return arr
