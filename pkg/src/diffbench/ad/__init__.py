"""Differentiation engines: dual-number forward mode, taped reverse mode, finite differences."""

from diffbench.ad._base import ADValue, primal
from diffbench.ad.fd import fd_directional, fd_steps, grad_fd
from diffbench.ad.forward import Dual, grad_forward
from diffbench.ad.reverse import AdjointBuffer, Tape, Var, grad_reverse, jacobian_reverse, record

__all__ = [
    "ADValue",
    "AdjointBuffer",
    "Dual",
    "Tape",
    "Var",
    "fd_directional",
    "fd_steps",
    "grad_fd",
    "grad_forward",
    "grad_reverse",
    "jacobian_reverse",
    "primal",
    "record",
]
