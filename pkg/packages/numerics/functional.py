"""Differentiable primitives over ``Tensor``.

Broadcasting is restricted to trailing dimensions: the shape of the smaller
operand must be a suffix of the larger one (or a scalar).
"""

from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from packages.helpers.errors import DimensionError, IndexRangeError, NumericError
from packages.numerics.tensor import Tensor, as_tensor, record


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise DimensionError(f"{op}: dtype mismatch {a.dtype.name} vs {b.dtype.name}")


def _broadcast_shape(a_shape: Tuple[int, ...], b_shape: Tuple[int, ...], op: str) -> Tuple[int, ...]:
    if a_shape == b_shape:
        return a_shape
    longer, shorter = (a_shape, b_shape) if len(a_shape) >= len(b_shape) else (b_shape, a_shape)
    if len(shorter) == 0 or longer[len(longer) - len(shorter):] == shorter:
        return longer
    raise DimensionError(f"{op}: shapes {a_shape} and {b_shape} are not trailing-broadcast compatible")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


def _binary_operands(a, b, op: str) -> Tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    _check_dtypes(a, b, op)
    _broadcast_shape(a.shape, b.shape, op)
    return a, b


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return record("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return record("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return record("mul", a.data * b.data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.dtype.type(factor)

    def backward(g):
        return (g * factor,)

    return record("scale", x.data * factor, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1 - y * y),)

    return record("tanh", y, (x,), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return record("exp", y, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)

    def backward(g):
        return (g * y * (1 - y),)

    return record("sigmoid", y, (x,), backward)


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    y = x.data * s

    def backward(g):
        return (g * (s + x.data * s * (1 - s)),)

    return record("silu", y, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    # logaddexp(0, x) = log(1 + e^x) without overflow for large x
    y = np.logaddexp(x.dtype.type(0), x.data)

    def backward(g):
        return (g * expit(x.data),)

    return record("softplus", y, (x,), backward)


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` are batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    _check_dtypes(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ in {a.shape} and {b.shape}")

    def backward(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        if b.ndim == 2 and grad_b.ndim > 2:
            grad_b = grad_b.sum(axis=tuple(range(grad_b.ndim - 2)))
        return grad_a, grad_b

    return record("matmul", a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight^T (+ bias) with weight stored as [out, in]."""
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g):
        return (g.T,)

    return record("transpose", x.data.T.copy(), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")

    def backward(g):
        return (g.reshape(x.shape),)

    return record("reshape", x.data.reshape(shape), (x,), backward)


def slice_lastdim(x: Tensor, start: int, stop: int) -> Tensor:
    width = x.shape[-1]
    if not 0 <= start < stop <= width:
        raise DimensionError(f"slice [{start}:{stop}] outside last extent {width}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return record("slice", x.data[..., start:stop].copy(), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over the first axis."""
    n = x.shape[0]

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return record("mean_rows", x.data.mean(axis=0), (x,), backward)


def scale_rows(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply row i of a [N, D] tensor by weights[i]."""
    _check_dtypes(x, weights, "scale_rows")
    if x.ndim != 2 or weights.shape != (x.shape[0],):
        raise DimensionError(f"scale_rows: rows of {x.shape} do not match weights {weights.shape}")

    def backward(g):
        return g * weights.data[:, None], (g * x.data).sum(axis=1)

    return record("scale_rows", x.data * weights.data[:, None], (x, weights), backward)


def select_columns(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row column selection: out[i, j] = x[i, idx[i, j]]."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"select_columns: index shape {idx.shape} does not fit {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        bad = idx[(idx < 0) | (idx >= x.shape[1])][0]
        raise IndexRangeError(f"select_columns: column index {bad} outside [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])[:, None]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (np.broadcast_to(rows, idx.shape), idx), g)
        return (full,)

    return record("select_columns", x.data[rows, idx], (x,), backward)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty last dimension")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs last extent {width}")
    _check_dtypes(x, gamma, "layer_norm")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    x_hat = centered * inv_std
    y = x_hat * gamma.data + beta.data

    def backward(g):
        g_hat = g * gamma.data
        grad_x = inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True))
        return grad_x, _reduce_to(g * x_hat, gamma.shape), _reduce_to(g, beta.shape)

    return record("layer_norm", y, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Sequence and indexing primitives
# ---------------------------------------------------------------------------

def depthwise_causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """
    y[t, c] = sum_j kernel[c, j] * x[t - W + 1 + j, c] + bias[c], zero left padding.

    Args:
        x: Sequence [L, C]
        kernel: Per-channel taps [C, W]
        bias: Per-channel bias [C]
    """
    if x.ndim != 2 or kernel.ndim != 2 or kernel.shape[0] != x.shape[1] or bias.shape != (x.shape[1],):
        raise DimensionError(f"conv1d: x {x.shape}, kernel {kernel.shape}, bias {bias.shape} do not fit")
    length, channels = x.shape
    width = kernel.shape[1]
    if width < 1:
        raise DimensionError("conv1d: kernel width must be at least 1")
    padded = np.concatenate([np.zeros((width - 1, channels), dtype=x.dtype), x.data], axis=0)
    y = np.broadcast_to(bias.data, (length, channels)).copy()
    for j in range(width):
        y += padded[j:j + length] * kernel.data[:, j]

    def backward(g):
        grad_padded = np.zeros_like(padded)
        grad_kernel = np.empty_like(kernel.data)
        for j in range(width):
            grad_padded[j:j + length] += g * kernel.data[:, j]
            grad_kernel[:, j] = (g * padded[j:j + length]).sum(axis=0)
        return grad_padded[width - 1:], grad_kernel, g.sum(axis=0)

    return record("causal_conv1d", y, (x, kernel, bias), backward)


def _check_row_indices(idx, n_rows: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    bad = idx[(idx < 0) | (idx >= n_rows)]
    if bad.size:
        raise IndexRangeError(f"row index {int(bad[0])} outside [0, {n_rows})")
    return idx


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = _check_row_indices(idx, x.shape[0])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return record("gather_rows", x.data[idx], (x,), backward)


def scatter_add_rows(dst: Tensor, idx, src: Tensor) -> Tensor:
    """Return a copy of ``dst`` with src[j] added to row idx[j] (duplicates accumulate)."""
    idx = _check_row_indices(idx, dst.shape[0])
    _check_dtypes(dst, src, "scatter_add_rows")
    if src.shape != (len(idx),) + dst.shape[1:]:
        raise DimensionError(f"scatter_add_rows: src {src.shape} does not fit {len(idx)} rows of {dst.shape}")
    out = dst.data.copy()
    np.add.at(out, idx, src.data)

    def backward(g):
        return g, g[idx]

    return record("scatter_add_rows", out, (dst, src), backward)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] for a single [C] logit vector."""
    if logits.ndim != 1:
        raise DimensionError(f"cross_entropy expects [C] logits, got {logits.shape}")
    n_classes = logits.shape[0]
    if not 0 <= int(label) < n_classes:
        raise IndexRangeError(f"label {label} outside [0, {n_classes})")
    label = int(label)
    lse = logsumexp(logits.data)
    loss = np.asarray(lse - logits.data[label], dtype=logits.dtype)

    def backward(g):
        probs = np.exp(logits.data - lse)
        probs[label] -= 1
        return (g * probs,)

    return record("cross_entropy", loss, (logits,), backward)
