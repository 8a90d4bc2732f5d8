"""Fluid process algebra models, their ODE semantics and (approximate) lumping."""
from .syntax import (
    AtomDefinition,
    Choice,
    Const,
    Diagnostic,
    FepaModel,
    Leaf,
    ModelError,
    Par,
    ParseError,
    Prefix,
    apply_rates,
    format_model,
    is_well_posed,
    load_model,
    parse_model,
    validate,
)
from .semantics import (
    DerivationGraph,
    VectorField,
    apparent_rate,
    atom_apparent_rate,
    component_rate,
    derivation_graph,
    jump_probability,
    vector_field,
)

from .solver import IntegrationError, SolverConfig, Trajectory, integrate, trajectory_distance
from .lumping import (
    LumpingError,
    Partition,
    TuplePartition,
    build_lumped_ode,
    discover_partitions,
    eps_semi_isomorphism,
    semi_isomorphic,
    verify_efl,
    verify_ofl,
)
from .perturbation import approximate_lumping, error_bound, perturbation_report

__version__ = "0.1.0"

__all__ = [
    "AtomDefinition", "Choice", "Const", "Diagnostic", "FepaModel", "Leaf", "ModelError", "Par", "ParseError",
    "Prefix", "apply_rates", "format_model", "is_well_posed", "load_model", "parse_model", "validate",
    "DerivationGraph", "VectorField", "apparent_rate", "atom_apparent_rate", "component_rate", "derivation_graph",
    "jump_probability", "vector_field",
    "IntegrationError", "SolverConfig", "Trajectory", "integrate", "trajectory_distance",
    "LumpingError", "Partition", "TuplePartition", "build_lumped_ode", "discover_partitions",
    "eps_semi_isomorphism", "semi_isomorphic", "verify_efl", "verify_ofl",
    "approximate_lumping", "error_bound", "perturbation_report",
]
