"""Simulation harness for batched adaptive experiments."""

from .agents import AGENT_KINDS, AgentConfig, AgentState, act, act_batch, agent_reset, exploit, observe
from .design import DesignSelection, d_optimal_next, run_design_selection
from .environments import (
    EnvironmentSpec,
    Env,
    EpochSchedule,
    MomentTable,
    SiteData,
    augment_arms,
    make_personalization_env,
)
from .harness import load_config, run_benchmark, run_replication
from .linear_model import (
    DesignState,
    FeatureMap,
    GaussianPosterior,
    NoiseModel,
    design_update,
    featurize,
    ols_estimate,
    posterior_reset,
    posterior_sample,
    posterior_update,
    predictive_mean_var,
)

__version__ = "0.1.0"

__all__ = [
    "AGENT_KINDS",
    "AgentConfig",
    "AgentState",
    "DesignSelection",
    "DesignState",
    "Env",
    "EnvironmentSpec",
    "EpochSchedule",
    "FeatureMap",
    "GaussianPosterior",
    "MomentTable",
    "NoiseModel",
    "SiteData",
    "act",
    "act_batch",
    "agent_reset",
    "augment_arms",
    "d_optimal_next",
    "design_update",
    "exploit",
    "featurize",
    "load_config",
    "make_personalization_env",
    "observe",
    "ols_estimate",
    "posterior_reset",
    "posterior_sample",
    "posterior_update",
    "predictive_mean_var",
    "run_benchmark",
    "run_design_selection",
    "run_replication",
]
