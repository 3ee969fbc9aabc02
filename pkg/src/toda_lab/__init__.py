"""Numerical laboratory for the thermal Toda lattice."""
from .lattice import (
    DomainSpec,
    FlaschkaState,
    IntegrationError,
    IntegratorConfig,
    LatticeError,
    TodaState,
    Trajectory,
    evolve,
    flaschka_from_state,
    state_from_flaschka,
)
from .spectral import (
    EigensolverError,
    LaxMatrix,
    SpectralDecomposition,
    build_lax,
    eig_tridiag,
    eigvals,
)
from .thermal import RngStream, ThermalParams, sample_open, sample_periodic
from .localization import LocalizationAssignment, NoBijection, center_bijection
from .hydro import effective_velocity_solve

__version__ = "0.1.0"

__all__ = [
    "DomainSpec", "FlaschkaState", "IntegrationError", "IntegratorConfig", "LatticeError",
    "TodaState", "Trajectory", "evolve", "flaschka_from_state", "state_from_flaschka",
    "EigensolverError", "LaxMatrix", "SpectralDecomposition", "build_lax", "eig_tridiag",
    "eigvals", "RngStream", "ThermalParams", "sample_open", "sample_periodic",
    "LocalizationAssignment", "NoBijection", "center_bijection", "effective_velocity_solve",
]
