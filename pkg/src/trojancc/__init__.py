"""A toy two-level ML compiler used to study compiler-inserted backdoors."""

from trojancc.tensor import ELEM_KINDS, Tensor

__all__ = ["ELEM_KINDS", "Tensor"]
__version__ = "0.1.0"
