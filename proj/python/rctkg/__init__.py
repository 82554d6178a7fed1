"""Knowledge-gradient allocation for subgroup clinical trials."""

from ._rctkg import (
    ValidationError,
    __version__,
    fresh_state,
    presets,
    prob_effective,
    recommend,
    run_experiment,
    simulate,
)

__all__ = [
    "ValidationError",
    "__version__",
    "fresh_state",
    "presets",
    "prob_effective",
    "recommend",
    "run_experiment",
    "simulate",
]
