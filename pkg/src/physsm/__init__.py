"""Physics-enhanced state-space sequence modeling for long-term dynamics
forecasting on noisy, irregularly sampled data."""

__version__ = "0.1.0"

from .config import ExperimentConfig
from .data import TrajectorySet, corrupt, generate_dataset
from .specs import build_pendulum_spec, build_sir_spec, get_spec
from .ssm import SSMLayer, SSMStack, discretize_bilinear, hippo_legs
from .unit import PhySSMUnit, apply_knowledge_mask
from .model import PhySSM, build_model

__all__ = [
    "__version__",
    "ExperimentConfig",
    "TrajectorySet",
    "corrupt",
    "generate_dataset",
    "build_pendulum_spec",
    "build_sir_spec",
    "get_spec",
    "SSMLayer",
    "SSMStack",
    "discretize_bilinear",
    "hippo_legs",
    "PhySSMUnit",
    "apply_knowledge_mask",
    "PhySSM",
    "build_model",
]
