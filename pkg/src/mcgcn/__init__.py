"""Multi-task deep graph convolutional networks for calcification clusters."""

from mcgcn.kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
