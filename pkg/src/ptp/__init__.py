"""Subgoal planning in a learned latent space plus goal-conditioned offline-to-online RL."""
from .errors import ConfigError, InputError, NumericError, PlanningError, PtpError, StateError

__version__ = "0.1.0"

__all__ = ["ConfigError", "InputError", "NumericError", "PlanningError", "PtpError", "StateError", "__version__"]
