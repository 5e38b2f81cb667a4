"""Density-flow estimation from noisy snapshots by entropy-regularized NPMLE."""

__version__ = "0.1.0"

from .core import (DensityFlowError, EstimatorConfig, FlowState, ParticleCloud, RngStream, Schedule,
                   SnapshotDataset, default_schedule, validate_flow_state)

__all__ = ["__version__", "DensityFlowError", "EstimatorConfig", "FlowState", "ParticleCloud", "RngStream",
           "Schedule", "SnapshotDataset", "default_schedule", "validate_flow_state"]
