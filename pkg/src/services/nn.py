"""
Layer primitives with hand-written backward passes.

Every forward returns (output, cache); the matching backward takes the
upstream gradient and the cache. Arrays are single samples (no batch axis):
images are [channels, height, width], sequences are [length, features].
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.core.errors import NumericError


def check_finite(values: np.ndarray, layer: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite activation in layer {layer}")
    return values


# --------------------------------------------------------------------------
# Dense
# --------------------------------------------------------------------------


def linear_forward(x, weight, bias):
    return weight @ x + bias, x


def linear_backward(dout, weight, cache):
    x = cache
    return weight.T @ dout, np.outer(dout, x), dout


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def l2_normalize_forward(h, layer: str = "normalize"):
    norm = np.sqrt(np.sum(h * h))
    if not np.isfinite(norm) or norm == 0:
        raise NumericError(f"cannot L2-normalize output of layer {layer} (norm {norm})")
    z = h / norm
    return z, (z, norm)


def l2_normalize_backward(dz, cache):
    z, norm = cache
    return (dz - z * np.dot(z, dz)) / norm


# --------------------------------------------------------------------------
# 2-D convolution over [channels, height, width]
# --------------------------------------------------------------------------


def conv2d_forward(x, weight, bias, stride: int):
    c_out, c_in, k, _ = weight.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    h_out, w_out = windows.shape[1:3]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c_in * k * k)
    out = cols @ weight.reshape(c_out, -1).T + bias
    return out.T.reshape(c_out, h_out, w_out), (x.shape, cols)


def conv2d_backward(dout, weight, cache, stride: int, need_dx: bool = True):
    x_shape, cols = cache
    c_out, c_in, k, _ = weight.shape
    pad = k // 2
    _, h_out, w_out = dout.shape
    d2 = dout.reshape(c_out, -1).T
    dweight = (d2.T @ cols).reshape(weight.shape)
    dbias = d2.sum(axis=0)
    if not need_dx:
        return None, dweight, dbias
    dcols = (d2 @ weight.reshape(c_out, -1)).reshape(h_out, w_out, c_in, k, k)
    _, h, w = x_shape
    dxp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += dcols[
                :, :, :, i, j
            ].transpose(2, 0, 1)
    return dxp[:, pad : pad + h, pad : pad + w], dweight, dbias


# --------------------------------------------------------------------------
# Adaptive max pooling to a fixed grid
# --------------------------------------------------------------------------


def _bins(n: int, out: int) -> list[tuple[int, int]]:
    """Bin i spans [floor(i*n/out), ceil((i+1)*n/out)); bins may overlap."""
    return [(i * n // out, -((-(i + 1) * n) // out)) for i in range(out)]


def adaptive_max_pool_forward(x, out_h: int, out_w: int):
    c, h, w = x.shape
    pooled = np.empty((c, out_h, out_w), dtype=x.dtype)
    rows = np.empty((c, out_h, out_w), dtype=np.intp)
    cols = np.empty((c, out_h, out_w), dtype=np.intp)
    channel = np.arange(c)
    for i, (hs, he) in enumerate(_bins(h, out_h)):
        for j, (ws, we) in enumerate(_bins(w, out_w)):
            region = x[:, hs:he, ws:we].reshape(c, -1)
            flat = region.argmax(axis=1)
            pooled[:, i, j] = region[channel, flat]
            rows[:, i, j] = hs + flat // (we - ws)
            cols[:, i, j] = ws + flat % (we - ws)
    return pooled, (x.shape, rows, cols)


def adaptive_max_pool_backward(dout, cache):
    x_shape, rows, cols = cache
    dx = np.zeros(x_shape, dtype=dout.dtype)
    channel = np.broadcast_to(np.arange(x_shape[0])[:, None, None], dout.shape)
    np.add.at(dx, (channel, rows, cols), dout)
    return dx


# --------------------------------------------------------------------------
# Character sequences [length, features]
# --------------------------------------------------------------------------


def embedding_forward(table, indices):
    return table[indices], indices


def embedding_backward(dout, table_shape, indices, dtype):
    dtable = np.zeros(table_shape, dtype=dtype)
    np.add.at(dtable, indices, dout)
    return dtable


def char_conv_forward(x, weight, bias):
    """Width-3 convolution along the sequence with zero padding, then tanh."""
    length, dim = x.shape
    xp = np.pad(x, ((1, 1), (0, 0)))
    cols = sliding_window_view(xp, 3, axis=0).transpose(0, 2, 1).reshape(length, 3 * dim)
    hidden = np.tanh(cols @ weight.T + bias)
    return hidden, (cols, hidden, dim)


def char_conv_backward(dhidden, weight, cache):
    cols, hidden, dim = cache
    length = hidden.shape[0]
    dpre = dhidden * (1.0 - hidden * hidden)
    dweight = dpre.T @ cols
    dbias = dpre.sum(axis=0)
    dcols = (dpre @ weight).reshape(length, 3, dim)
    dxp = np.zeros((length + 2, dim), dtype=dhidden.dtype)
    for k in range(3):
        dxp[k : k + length] += dcols[:, k, :]
    return dxp[1:-1], dweight, dbias


def rnn_forward(x, input_weight, hidden_weight, bias):
    """Elman tanh recurrence from a zero state; returns every hidden state."""
    length = x.shape[0]
    hidden = np.zeros((length, hidden_weight.shape[0]), dtype=x.dtype)
    previous = np.zeros(hidden_weight.shape[0], dtype=x.dtype)
    for t in range(length):
        previous = np.tanh(input_weight @ x[t] + hidden_weight @ previous + bias)
        hidden[t] = previous
    return hidden, (x, hidden)


def rnn_backward(dhidden, input_weight, hidden_weight, cache):
    x, hidden = cache
    dx = np.zeros_like(x)
    dinput = np.zeros_like(input_weight)
    drecurrent = np.zeros_like(hidden_weight)
    dbias = np.zeros(hidden_weight.shape[0], dtype=x.dtype)
    carry = np.zeros(hidden_weight.shape[0], dtype=x.dtype)
    for t in reversed(range(x.shape[0])):
        dh = dhidden[t] + carry
        dpre = dh * (1.0 - hidden[t] * hidden[t])
        previous = hidden[t - 1] if t > 0 else np.zeros_like(hidden[t])
        dinput += np.outer(dpre, x[t])
        drecurrent += np.outer(dpre, previous)
        dbias += dpre
        dx[t] = input_weight.T @ dpre
        carry = hidden_weight.T @ dpre
    return dx, dinput, drecurrent, dbias


def sequence_max_pool_forward(hidden):
    positions = hidden.argmax(axis=0)
    return hidden[positions, np.arange(hidden.shape[1])], (hidden.shape, positions)


def sequence_max_pool_backward(dout, cache):
    shape, positions = cache
    dhidden = np.zeros(shape, dtype=dout.dtype)
    dhidden[positions, np.arange(shape[1])] = dout
    return dhidden
