"""Backend selection for the segment kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is imported. Set ``MCGCN_KERNELS=numpy`` to force the fallback.
"""

import os

if os.environ.get("MCGCN_KERNELS", "").lower() == "numpy":
    from mcgcn import _kernels_py as _impl
else:
    try:
        from mcgcn import _kernels as _impl
    except ImportError:
        from mcgcn import _kernels_py as _impl

BACKEND = _impl.BACKEND
segment_sum = _impl.segment_sum
segment_softmax_forward = _impl.segment_softmax_forward
segment_softmax_backward = _impl.segment_softmax_backward
gather_rows = _impl.gather_rows
