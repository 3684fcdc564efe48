"""DINGO: a distributed Newton-type method minimising the gradient norm.

Matrix-free optimizer with MINRES-QLP, LSMR and CG sub-problem solvers, a
simulated driver/worker cluster with round accounting, and first/second
order baselines.
"""
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
