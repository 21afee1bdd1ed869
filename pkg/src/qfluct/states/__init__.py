"""Expectation oracles: product, Gibbs and finitely correlated states."""
from .base import StateFunctional
from .correlations import DecayTable, two_point_decay
from .fcs import (FCSSpec, FCSState, MixingCertificate, TransferOperator, dual_transfer,
                  fcs_expect, fcs_rank_probe, mixing_analysis)
from .gibbs import GibbsState, ThermoResult, gibbs_expect, kms_residual, thermodynamic_expect
from .product import ProductState

__all__ = [
    "StateFunctional", "ProductState", "GibbsState", "FCSSpec", "FCSState", "TransferOperator",
    "MixingCertificate", "DecayTable", "ThermoResult", "gibbs_expect", "thermodynamic_expect",
    "kms_residual", "two_point_decay", "fcs_expect", "dual_transfer", "mixing_analysis",
    "fcs_rank_probe",
]
