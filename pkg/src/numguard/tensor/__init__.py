"""Array arithmetic, reverse-mode autodiff and the concrete operator set."""

from .autodiff import Tape, Var, grad, leaf, value_of

__all__ = ["Tape", "Var", "grad", "leaf", "value_of"]
