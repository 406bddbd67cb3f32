"""Float64 operator kernels with a fixed evaluation order.

Every reduction is written as an explicit left-to-right loop of elementwise
numpy operations, so a kernel applied to bitwise-equal inputs returns a
bitwise-equal result regardless of buffer alignment or BLAS threading.
Recomputed values therefore match the originals exactly.

Tensors are treated as ``rows x features``: the last axis is the feature
axis, all leading axes are flattened into rows.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5


def _rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def _sum_rows(x2: np.ndarray) -> np.ndarray:
    acc = x2[0].copy()
    for r in range(1, x2.shape[0]):
        acc += x2[r]
    return acc


def _sum_cols(x2: np.ndarray) -> np.ndarray:
    acc = x2[:, 0].copy()
    for c in range(1, x2.shape[1]):
        acc += x2[:, c]
    return acc


def fc_forward(x, w, b):
    x2 = _rows(x)
    out = np.broadcast_to(b, (x2.shape[0], w.shape[1])).copy()
    for k in range(w.shape[0]):
        out += x2[:, k : k + 1] * w[k]
    return out.reshape(x.shape[:-1] + (w.shape[1],))


def fc_backward(g, x, w, gw, gb):
    """Input gradient; weight and bias gradients are added into ``gw``/``gb``."""
    g2, x2 = _rows(g), _rows(x)
    dx = np.zeros((g2.shape[0], w.shape[0]))
    for j in range(w.shape[1]):
        dx += g2[:, j : j + 1] * w[:, j]
    dw = np.zeros_like(w)
    for r in range(x2.shape[0]):
        dw += np.multiply.outer(x2[r], g2[r])
    gw += dw
    gb += _sum_rows(g2)
    return dx.reshape(x.shape)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid_backward(g, y):
    return g * y * (1.0 - y)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(g, y):
    return g * (y > 0.0)


def _bn_stats(x2):
    n = x2.shape[0]
    mean = _sum_rows(x2) / n
    centered = x2 - mean
    var = _sum_rows(centered * centered) / n
    inv = 1.0 / np.sqrt(var + BN_EPS)
    return centered, inv


def batchnorm(x):
    centered, inv = _bn_stats(_rows(x))
    return (centered * inv).reshape(x.shape)


def batchnorm_backward(g, x):
    x2, g2 = _rows(x), _rows(g)
    n = x2.shape[0]
    centered, inv = _bn_stats(x2)
    xhat = centered * inv
    dx = (inv / n) * (n * g2 - _sum_rows(g2) - xhat * _sum_rows(g2 * xhat))
    return dx.reshape(x.shape)


def _softmax(x2):
    shifted = x2 - np.max(x2, axis=1, keepdims=True)
    e = np.exp(shifted)
    s = _sum_cols(e)
    return shifted, e / s[:, None], s


def softmax_loss(x, label):
    x2 = _rows(x)
    shifted, _, s = _softmax(x2)
    picked = shifted[np.arange(x2.shape[0]), label] - np.log(s[np.arange(x2.shape[0])])
    total = picked[0]
    for r in range(1, picked.shape[0]):
        total = total + picked[r]
    return np.array([-total / x2.shape[0]])


def softmax_loss_backward(x, label):
    x2 = _rows(x)
    _, p, _ = _softmax(x2)
    p[np.arange(x2.shape[0]), label] -= 1.0
    return (p / x2.shape[0]).reshape(x.shape)


def loss_rows(shape) -> tuple[int, int]:
    """(rows, classes) seen by SoftmaxLoss for an input of ``shape``."""
    classes = shape[-1]
    rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
    return rows, classes
