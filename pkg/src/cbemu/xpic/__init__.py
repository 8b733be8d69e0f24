"""Miniature xPic: 2D electrostatic PIC split into field and particle solvers."""

from .app import (
    ROLE_BOOSTER,
    ROLE_CLUSTER,
    ROLE_MONOLITHIC,
    StepRecord,
    StepTrace,
    compute_energies,
    run_booster_role,
    run_cluster_role,
    run_monolithic,
)
from .state import FieldGrid, Moments, ParticleSet, SimParams, init_state

__all__ = [
    "ROLE_BOOSTER", "ROLE_CLUSTER", "ROLE_MONOLITHIC", "StepRecord", "StepTrace", "compute_energies",
    "run_booster_role", "run_cluster_role", "run_monolithic",
    "FieldGrid", "Moments", "ParticleSet", "SimParams", "init_state",
]
