"""Stochastic SEIRS reaction-diffusion simulator on the unit interval or square."""
__version__ = "0.1.0"

from .spectral import DomainGrid, SpectralBasis, build_basis, apply_semigroup  # noqa: E402
from .model import CoefficientSet, compute_thresholds, make_state  # noqa: E402
from .noise import NoiseSpec, RngStream  # noqa: E402
from .integrator import SchemeConfig, simulate_path  # noqa: E402
from .analysis import run_ensemble  # noqa: E402

__all__ = ["DomainGrid", "SpectralBasis", "build_basis", "apply_semigroup", "CoefficientSet",
           "compute_thresholds", "make_state", "NoiseSpec", "RngStream", "SchemeConfig",
           "simulate_path", "run_ensemble", "__version__"]
