"""Gabor noise perturbations and classifier sensitivity measurement."""

from .errors import GaborSenseError
from .harness import SweepConfig, load_dataset, run_sweep
from .metrics import (
    average_evasion,
    average_sensitivity,
    universal_evasion,
    universal_sensitivity,
)
from .noise import AnisotropicNoiseParams, gabor_noise
from .oracle import GaborBankClassifier, build_reference_model, resolve_oracle
from .perturb import (
    PerturbationField,
    apply,
    random_uniform_perturbation,
    read_gnp,
    to_perturbation,
    write_gnp,
)
from .svd import SingularConfig, singular_uap

__version__ = "0.1.0"

__all__ = [
    "AnisotropicNoiseParams",
    "GaborBankClassifier",
    "GaborSenseError",
    "PerturbationField",
    "SingularConfig",
    "SweepConfig",
    "apply",
    "average_evasion",
    "average_sensitivity",
    "build_reference_model",
    "gabor_noise",
    "load_dataset",
    "random_uniform_perturbation",
    "read_gnp",
    "resolve_oracle",
    "run_sweep",
    "singular_uap",
    "to_perturbation",
    "universal_evasion",
    "universal_sensitivity",
    "write_gnp",
    "__version__",
]
