"""Self-modifying fast-weight sequence learner for few-shot classification."""

from srwm.autodiff import Tape, Tensor, finite_diff_check, stop_gradient

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "finite_diff_check", "stop_gradient", "__version__"]
