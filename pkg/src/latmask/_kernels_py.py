"""Pure numpy implementations of the framing kernels.

Both functions operate on 2-D row batches; callers reshape leading axes away.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def frame(x, size, hop):
    """Slice rows of ``x`` (N, L) into frames (N, T, size), T = (L - size)//hop + 1."""
    x = np.ascontiguousarray(x)
    n, length = x.shape
    if length < size:
        return np.zeros((n, 0, size), dtype=x.dtype)
    return np.ascontiguousarray(sliding_window_view(x, size, axis=1)[:, ::hop, :])


def overlap_add(frames, hop, length):
    """Adjoint of :func:`frame`: sum frames (N, T, size) back into rows (N, length)."""
    frames = np.ascontiguousarray(frames)
    n, t, size = frames.shape
    out = np.zeros((n, length), dtype=frames.dtype)
    if t == 0:
        return out
    if size % hop == 0:
        # split frames into hop-sized blocks; walking blocks last-to-first adds
        # frames to each output sample in ascending order, like the compiled loop
        r = size // hop
        blocks = np.zeros((n, t + r - 1, hop), dtype=frames.dtype)
        parts = frames.reshape(n, t, r, hop)
        for c in range(r - 1, -1, -1):
            blocks[:, c:c + t] += parts[:, :, c]
        flat = blocks.reshape(n, -1)
        out[:, :flat.shape[1]] = flat[:, :length]
        return out
    span = (t - 1) * hop + 1
    # one strided add per in-frame offset; order fixed for reproducibility
    for k in range(size):
        out[:, k:k + span:hop] += frames[:, :, k]
    return out
