"""Slow reference implementations used by ``mvc3d verify`` and the tests.

Nothing here shares code with the fast paths it checks.
"""

from __future__ import annotations

import numpy as np

LAYER_TABLE_CHANNELS = (64, 128, 256, 256, 512, 512, 512, 512)
LAYER_TABLE_SPATIAL = {"Pool1": 56, "Pool2": 28, "Pool3": 14, "Pool4": 7, "Pool5": 4}


def layer_table_rows(n_views: int, n_classes: int) -> list[tuple[str, tuple[int, ...]]]:
    """Output sizes of the MV-C3D layer table at 112x112 input.

    View extents after Pool2..Pool5 are floor(N/2), floor(N/4), floor(N/8),
    floor(N/16); a zero extent is read as one view.
    """
    N = n_views
    v2, v3, v4, v5 = (max(1, N // d) for d in (2, 4, 8, 16))
    return [
        ("Input", (3, N, 112, 112)),
        ("Conv1", (N, 112, 112, 64)),
        ("Pool1", (N, 56, 56, 64)),
        ("Conv2", (N, 56, 56, 128)),
        ("Pool2", (v2, 28, 28, 128)),
        ("Conv3a", (v2, 28, 28, 256)),
        ("Conv3b", (v2, 28, 28, 256)),
        ("Pool3", (v3, 14, 14, 256)),
        ("Conv4a", (v3, 14, 14, 512)),
        ("Conv4b", (v3, 14, 14, 512)),
        ("Pool4", (v4, 7, 7, 512)),
        ("Conv5a", (v4, 7, 7, 512)),
        ("Conv5b", (v4, 7, 7, 512)),
        ("Pool5", (v5, 4, 4, 512)),
        ("Fc1", (4096,)),
        ("Fc2", (4096,)),
        ("Fc3", (n_classes,)),
        ("Softmax", (n_classes,)),
    ]


def first_mismatch(actual, expected) -> str | None:
    """Name and values of the first differing row, or None when equal."""
    for (an, ashape), (en, eshape) in zip(actual, expected):
        if an != en or tuple(ashape) != tuple(eshape):
            return f"{en}: expected {'x'.join(map(str, eshape))}, got {an} {'x'.join(map(str, ashape))}"
    if len(actual) != len(expected):
        return f"row count {len(actual)} != {len(expected)}"
    return None


def conv3d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded 3D convolution by explicit summation.

    ``x`` is ``[C_in, V, H, W]``, ``w`` is ``[C_out, C_in, v, 3, 3]``.
    """
    c_in, V, H, W = x.shape
    c_out, _, kv, kh, kw = w.shape
    ov, oh, ow = (kv - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
    xl, wl = x.tolist(), w.tolist()
    out = np.zeros((c_out, V, H, W))
    for n in range(c_out):
        for v in range(V):
            for y in range(H):
                for xx in range(W):
                    acc = float(b[n])
                    for m in range(c_in):
                        for dv in range(kv):
                            sv = v + dv - ov
                            if not 0 <= sv < V:
                                continue
                            for dy in range(kh):
                                sy = y + dy - oh
                                if not 0 <= sy < H:
                                    continue
                                for dx in range(kw):
                                    sx = xx + dx - ow
                                    if 0 <= sx < W:
                                        acc += wl[n][m][dv][dy][dx] * xl[m][sv][sy][sx]
                    out[n, v, y, xx] = acc
    return out


def maxpool_direct(x: np.ndarray, kernel, stride, out_shape) -> np.ndarray:
    """Window maxima for ``[C, V, H, W]``; windows are clipped at the border."""
    C = x.shape[0]
    out = np.empty((C,) + tuple(out_shape))
    for c in range(C):
        for i in range(out_shape[0]):
            for j in range(out_shape[1]):
                for k in range(out_shape[2]):
                    win = x[
                        c,
                        i * stride[0] : i * stride[0] + kernel[0],
                        j * stride[1] : j * stride[1] + kernel[1],
                        k * stride[2] : k * stride[2] + kernel[2],
                    ]
                    out[c, i, j, k] = win.max()
    return out
