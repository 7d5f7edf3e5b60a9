"""Stability-certified operator inference for quadratic control systems."""

from .models import (
    QuadraticControlSystem,
    SignalSpec,
    BurgersConfig,
    simulate,
    example_one,
    example_two,
    burgers_semidiscrete,
)
from .stability import (
    CertificationError,
    StabilityCertificate,
    certify,
    energy_preserving_check,
    trapping_radius,
    verify_bibs,
)
from .dataprep import SnapshotDataset, PodBasis, pod_fit
from .learn import (
    StableParametrization,
    TrainConfig,
    materialize,
    fit_stable,
    fit_stable_generalized,
    fit_baseline,
)

__version__ = "0.1.0"
