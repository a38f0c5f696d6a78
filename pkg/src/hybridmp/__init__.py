"""Simulation, filtering, adjoint analysis and control of diffusions
modulated by a hidden finite-state Markov chain."""

from .adjoint import (
    AdjointPath,
    CompactCoeffs,
    PolyBasis,
    gateaux_derivative,
    hamiltonian,
    hamiltonian_direction_value,
    hamiltonian_v_gradient,
    solve_adjoint_bsde,
    solve_variational,
    stationarity_report,
)
from .errors import (
    ConfigError,
    DomainError,
    HybridMPError,
    NonConvergence,
    NumericalError,
    RegressionError,
)
from .harness import ExperimentConfig, run_suite
from .lq import (
    LQSolution,
    PiecewisePolyPolicy,
    default_spec,
    full_observation_baseline,
    lq_control_formula,
    riccati_backward,
    riccati_cost,
    solve_lq,
)
from .model import (
    FeedbackPolicy,
    GeneratorSpec,
    LQSpec,
    ProblemSpec,
    Regime,
    constant_policy,
    eval_h,
    load_spec,
    spec_from_json,
    spec_to_json,
    validate_spec,
    zero_policy,
)
from .pathsim import (
    CostEstimate,
    PathBundle,
    TimeGrid,
    chain_marginal,
    cost_from_paths,
    estimate_cost,
    simulate_chain,
    simulate_state,
)
from .wonham import (
    CoupledPath,
    FilterFunctional,
    FilterPath,
    InnovationPath,
    apply_generator,
    coupled_forward,
    discrete_bayes_oracle,
    innovation_forward,
    observation_increments,
    run_normalized_filter,
    run_zakai_filter,
    transformed_cost,
    transformed_cost_paths,
)

__version__ = "0.1.0"

__all__ = [
    "AdjointPath", "CompactCoeffs", "ConfigError", "CostEstimate",
    "CoupledPath", "DomainError", "ExperimentConfig", "FeedbackPolicy",
    "FilterFunctional", "FilterPath", "GeneratorSpec", "HybridMPError",
    "InnovationPath", "LQSolution", "LQSpec", "NonConvergence",
    "NumericalError", "PathBundle", "PiecewisePolyPolicy", "PolyBasis",
    "ProblemSpec", "Regime", "RegressionError", "TimeGrid",
    "apply_generator", "chain_marginal", "constant_policy",
    "cost_from_paths", "coupled_forward", "default_spec",
    "discrete_bayes_oracle", "estimate_cost", "eval_h",
    "full_observation_baseline", "gateaux_derivative", "hamiltonian",
    "hamiltonian_direction_value", "hamiltonian_v_gradient",
    "innovation_forward", "load_spec", "lq_control_formula",
    "observation_increments", "riccati_backward", "riccati_cost",
    "run_normalized_filter", "run_suite", "run_zakai_filter",
    "simulate_chain", "simulate_state", "solve_adjoint_bsde", "solve_lq",
    "solve_variational", "spec_from_json", "spec_to_json",
    "stationarity_report", "transformed_cost", "transformed_cost_paths",
    "validate_spec", "zero_policy",
]
