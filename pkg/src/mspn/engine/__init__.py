from . import ops
from .gradcheck import grad_check
from .params import ParamSet, atomic_write_bytes, backward
from .tensor import Tensor, as_tensor, grad

__all__ = ["ops", "grad_check", "ParamSet", "atomic_write_bytes", "backward", "Tensor", "as_tensor", "grad"]
