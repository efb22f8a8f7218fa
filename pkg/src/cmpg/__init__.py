"""Independent proximal-point learning in tabular constrained Markov potential games."""

from .game import GameSpec, JointPolicy, exact_value, exact_policy_gradient, validate_spec, visitation

__all__ = ["GameSpec", "JointPolicy", "exact_value", "exact_policy_gradient", "validate_spec", "visitation"]
__version__ = "0.1.0"
