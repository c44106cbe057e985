"""Certification toolkit for recurrent lane-keeping controllers.

Builds discrete-time lateral-error vehicle models with bounded longitudinal
speed uncertainty, wraps recurrent controllers in a sector-bounded standard
form, certifies closed-loop exponential decay via linear matrix inequalities,
bounds reachable lateral offsets via semidefinite programming, and ships the
simulation, data-generation, and training utilities used to produce a
certifiable controller in the first place.
"""

__version__ = "0.1.0"

from .errors import (AssemblyError, BoundViolationError, CertificateError,
                     DivergenceError, InfeasibleError, LaneCertError,
                     ParameterError, SectorError, ShapeError,
                     SolverFailureError, StaleCertificateError,
                     WeightsFormatError)

__all__ = [
    "AssemblyError", "BoundViolationError", "CertificateError",
    "DivergenceError", "InfeasibleError", "LaneCertError", "ParameterError",
    "SectorError", "ShapeError", "SolverFailureError",
    "StaleCertificateError", "WeightsFormatError", "__version__",
]
