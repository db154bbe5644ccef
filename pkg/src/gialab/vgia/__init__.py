"""Verifiable gradient inversion: crafted parallel hyperplanes plus span certificates."""

from .config import AttackConfig, Distribution, FeatureBox
from .isolation import IsolationOutcome, check_isolation, orthonormal_basis, robust_span_test, span_residual
from .params import CraftedModel, craft_parameters, draw_direction, initial_interval
from .recover import (
    EPSILON_STOPPED,
    SPAN_CERTIFIED,
    DegenerateCoefficientError,
    ReconstructionRecord,
    TargetRangeError,
    predicted_beta,
    reconstruct_input,
    recover_target,
)
from .run import AttackResult, RoundTrace, attack_direction, attack_rngs, run_vgia
from .search import Assignment, Interval, Placement, SearchState, SliceRecord, set_hyperplanes
from .slices import DegenerateGainError, compute_slices, observation, rescaled_rows

__all__ = [
    "AttackConfig",
    "AttackResult",
    "Assignment",
    "CraftedModel",
    "DegenerateCoefficientError",
    "DegenerateGainError",
    "Distribution",
    "EPSILON_STOPPED",
    "FeatureBox",
    "Interval",
    "IsolationOutcome",
    "Placement",
    "ReconstructionRecord",
    "RoundTrace",
    "SPAN_CERTIFIED",
    "SearchState",
    "SliceRecord",
    "TargetRangeError",
    "attack_direction",
    "attack_rngs",
    "check_isolation",
    "compute_slices",
    "craft_parameters",
    "draw_direction",
    "initial_interval",
    "observation",
    "orthonormal_basis",
    "predicted_beta",
    "reconstruct_input",
    "recover_target",
    "rescaled_rows",
    "robust_span_test",
    "run_vgia",
    "set_hyperplanes",
    "span_residual",
]
