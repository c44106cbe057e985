"""RNN controller as an LTI core interconnected with sector-bounded activations.

The controller is the feedback interconnection of a linear system

    xi+ = A xi + B1 q + B2 y
    u   = C1 xi + D11 q + D12 y
    p   = C2 xi + D22 y

with q = Phi(p) applied elementwise. Each scalar activation lies in a
sector [alpha_i, beta_i]; a loop transformation renormalizes the sector
to [-1, 1], which the certification layer consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import SectorError, ShapeError, WeightsFormatError

MATRIX_KEYS = ("A", "B1", "B2", "C1", "D11", "D12", "C2", "D22")

ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "tanh": np.tanh,
    "relu": lambda p: np.maximum(p, 0.0),
}

# Global sector bounds: tanh'(0)=1 and tanh(p)/p in (0,1]; relu(p)/p in {0,1}.
_SECTORS = {"tanh": (0.0, 1.0), "relu": (0.0, 1.0)}

N_Y = 2  # controller input width (observed plant outputs)


def sector_bounds(activation: str, n_phi: int):
    """Per-neuron global sector (alpha, beta) vectors for a known activation."""
    if activation not in _SECTORS:
        raise SectorError(
            f"no built-in sector for activation {activation!r}; "
            "supply alpha/beta explicitly")
    lo, hi = _SECTORS[activation]
    return np.full(n_phi, lo), np.full(n_phi, hi)


@dataclass(frozen=True)
class RnnController:
    """LTI core of the controller plus activation sector data."""

    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C1: np.ndarray
    D11: np.ndarray
    D12: np.ndarray
    C2: np.ndarray
    D22: np.ndarray
    activation: str = "tanh"
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    # callable for activation == "custom"; not serialized
    phi: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self):
        n_xi, n_phi = self.A.shape[0], self.C2.shape[0]
        shapes = {
            "A": (n_xi, n_xi), "B1": (n_xi, n_phi), "B2": (n_xi, N_Y),
            "C1": (1, n_xi), "D11": (1, n_phi), "D12": (1, N_Y),
            "C2": (n_phi, n_xi), "D22": (n_phi, N_Y),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if not isinstance(arr, np.ndarray) or arr.shape != shape:
                raise ShapeError(
                    f"{name} must have shape {shape}, got {getattr(arr, 'shape', None)}")
        if self.activation == "custom":
            if self.alpha is None or self.beta is None:
                raise SectorError("custom activation requires explicit alpha and beta")
            if self.phi is None:
                raise SectorError("custom activation requires a callable phi")
        else:
            if self.activation not in ACTIVATIONS:
                raise SectorError(f"unknown activation {self.activation!r}")
            if self.alpha is None or self.beta is None:
                a, b = sector_bounds(self.activation, n_phi)
                object.__setattr__(self, "alpha", a if self.alpha is None else self.alpha)
                object.__setattr__(self, "beta", b if self.beta is None else self.beta)
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        if self.alpha.shape != (n_phi,) or self.beta.shape != (n_phi,):
            raise ShapeError("alpha/beta must be length n_phi vectors")
        if not np.all(self.alpha < self.beta):
            raise SectorError("sector requires alpha[i] < beta[i] for every neuron")

    @property
    def n_xi(self) -> int:
        return self.A.shape[0]

    @property
    def n_phi(self) -> int:
        return self.C2.shape[0]

    def act(self, p: np.ndarray) -> np.ndarray:
        fn = self.phi if self.activation == "custom" else ACTIVATIONS[self.activation]
        return fn(p)


@dataclass(frozen=True)
class TransformedRnn:
    """Loop-transformed controller; activation renormalized to sector [-1, 1].

    K1 = diag((alpha+beta)/2) and K2 = diag((beta-alpha)/2) shift and scale
    the sector; the affine part moves into the LTI core.
    """

    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C1: np.ndarray
    D11: np.ndarray
    D12: np.ndarray
    C2: np.ndarray
    D22: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    source: RnnController

    @property
    def n_xi(self) -> int:
        return self.A.shape[0]

    @property
    def n_phi(self) -> int:
        return self.C2.shape[0]


def loop_transform(rnn: RnnController) -> TransformedRnn:
    """Shift/scale the sector to [-1, 1], absorbing the midpoint gain K1."""
    if not np.all(rnn.beta > rnn.alpha):
        raise SectorError("degenerate sector: beta[i] must exceed alpha[i]")
    K1 = np.diag((rnn.alpha + rnn.beta) / 2.0)
    K2 = np.diag((rnn.beta - rnn.alpha) / 2.0)
    A_t = rnn.A + rnn.B1 @ K1 @ rnn.C2
    B1_t = rnn.B1 @ K2
    B2_t = rnn.B2 + rnn.B1 @ K1 @ rnn.D22
    C1_t = rnn.C1 + rnn.D11 @ K1 @ rnn.C2
    D11_t = rnn.D11 @ K2
    D12_t = rnn.D12 + rnn.D11 @ K1 @ rnn.D22
    return TransformedRnn(A=A_t, B1=B1_t, B2=B2_t, C1=C1_t, D11=D11_t,
                          D12=D12_t, C2=rnn.C2.copy(), D22=rnn.D22.copy(),
                          K1=K1, K2=K2, source=rnn)


def transformed_activation(trnn: TransformedRnn, p: np.ndarray) -> np.ndarray:
    """Renormalized activation: q = K2^{-1} (Phi(p) - K1 p), in sector [-1, 1]."""
    p = np.asarray(p, dtype=float)
    k2 = np.diag(trnn.K2)
    k1 = np.diag(trnn.K1)
    return (trnn.source.act(p) - k1 * p) / k2


def rnn_step(rnn: RnnController, xi: np.ndarray, y: np.ndarray):
    """Evaluate one controller step; returns (xi_next, u, p, q).

    p does not depend on q, so there is no algebraic loop.
    """
    xi = _vec("xi", xi, rnn.n_xi)
    y = _vec("y", y, N_Y)
    p = rnn.C2 @ xi + rnn.D22 @ y
    q = rnn.act(p)
    u = float(rnn.C1 @ xi + rnn.D11 @ q + rnn.D12 @ y)
    xi_next = rnn.A @ xi + rnn.B1 @ q + rnn.B2 @ y
    return xi_next, u, p, q


def transformed_rnn_step(trnn: TransformedRnn, xi: np.ndarray, y: np.ndarray):
    """One step of the transformed interconnection (same trajectories as source)."""
    xi = _vec("xi", xi, trnn.n_xi)
    y = _vec("y", y, N_Y)
    p = trnn.C2 @ xi + trnn.D22 @ y
    q = transformed_activation(trnn, p)
    u = float(trnn.C1 @ xi + trnn.D11 @ q + trnn.D12 @ y)
    xi_next = trnn.A @ xi + trnn.B1 @ q + trnn.B2 @ y
    return xi_next, u, p, q


def save_weights(rnn: RnnController, path):
    """Write weights as JSON; float repr round-trips bit-exactly."""
    payload = {key: getattr(rnn, key).tolist() for key in MATRIX_KEYS}
    payload["activation"] = rnn.activation
    payload["alpha"] = rnn.alpha.tolist()
    payload["beta"] = rnn.beta.tolist()
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_weights(path) -> RnnController:
    """Load a controller saved by `save_weights`; errors name the offending key."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"cannot read weights file {path}: {exc}") from exc
    matrices = {}
    for key in MATRIX_KEYS:
        if key not in payload:
            raise WeightsFormatError(f"weights file missing matrix {key!r}")
        matrices[key] = np.array(payload[key], dtype=float)
        if matrices[key].ndim != 2:
            raise WeightsFormatError(f"matrix {key!r} must be 2-D")
    if "activation" not in payload:
        raise WeightsFormatError("weights file missing 'activation'")
    activation = payload["activation"]
    if activation == "custom":
        raise WeightsFormatError(
            "custom activations cannot be loaded from file; construct programmatically")
    if activation not in ACTIVATIONS:
        raise WeightsFormatError(f"unknown activation {activation!r}")
    alpha = np.array(payload["alpha"], dtype=float) if "alpha" in payload else None
    beta = np.array(payload["beta"], dtype=float) if "beta" in payload else None
    try:
        return RnnController(activation=activation, alpha=alpha, beta=beta, **matrices)
    except ShapeError as exc:
        raise WeightsFormatError(str(exc)) from exc


def random_controller(n_xi: int, n_phi: int, rng: np.random.Generator,
                      scale: float = 0.3, activation: str = "tanh") -> RnnController:
    """Small random controller, handy for tests and as a training start."""
    def m(rows, cols, s=scale):
        return s * rng.standard_normal((rows, cols))
    return RnnController(
        A=m(n_xi, n_xi), B1=m(n_xi, n_phi), B2=m(n_xi, N_Y),
        C1=m(1, n_xi), D11=m(1, n_phi), D12=m(1, N_Y),
        C2=m(n_phi, n_xi), D22=m(n_phi, N_Y), activation=activation)


def _vec(name, value, n):
    arr = np.asarray(value, dtype=float)
    if arr.shape != (n,):
        raise ShapeError(f"{name} must be a length-{n} vector, got shape {arr.shape}")
    return arr
