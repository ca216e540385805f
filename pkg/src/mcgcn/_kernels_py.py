"""Pure-numpy segment kernels.

Reference implementations of the scatter/segment primitives used by message
passing. The compiled module ``mcgcn._kernels`` exposes the same functions
with the same signatures; :mod:`mcgcn.kernels` picks one at import time.
"""

import numpy as np

BACKEND = "numpy"


def segment_sum(values, segments, num_segments):
    """Sum rows of ``values`` into ``num_segments`` buckets given by ``segments``."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    out = np.zeros((num_segments,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, segments, values)
    return out


def segment_softmax_forward(values, segments, num_segments, beta):
    """Per-segment, per-channel softmax(beta * v)-weighted sum of ``values``.

    Returns ``(out, weights)``. Segments without members produce zero rows.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    scaled = beta * values
    seg_max = np.full((num_segments, values.shape[1]), -np.inf)
    np.maximum.at(seg_max, segments, scaled)
    e = np.exp(scaled - seg_max[segments])
    denom = segment_sum(e, segments, num_segments)
    weights = e / denom[segments]
    out = segment_sum(weights * values, segments, num_segments)
    return out, weights


def segment_softmax_backward(grad_out, values, weights, out, segments, beta):
    """Adjoint of :func:`segment_softmax_forward` with respect to ``values``."""
    g = grad_out[segments]
    return g * weights * (1.0 + beta * (values - out[segments]))


def gather_rows(x, index):
    return x[index]
