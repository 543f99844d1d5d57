"""Sequential selective scan as a single tape primitive.

Recurrence per timestep t, inner channel c and state s:

    h_t[c, s] = exp(delta_t[c] * A[c, s]) * h_{t-1}[c, s] + delta_t[c] * B_t[s] * u_t[c]
    y_t[c]    = sum_s C_t[s] * h_t[c, s] + D[c] * u_t[c]

with h_{-1} = 0. The backward pass walks the sequence in reverse using the
saved states.
"""

import numpy as np

from packages.helpers.errors import ContractError, DimensionError
from packages.numerics.tensor import Tensor, record


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """
    Args:
        u: Inputs [L, Di]
        delta: Positive step sizes [L, Di]
        A: Negative state matrix [Di, N]
        B: Input-dependent input matrix [L, N]
        C: Input-dependent readout [L, N]
        D: Skip weights [Di]

    Returns:
        Tensor: Outputs [L, Di]
    """
    length, inner = u.shape
    n_state = A.shape[1]
    if length == 0:
        raise ContractError("selective scan needs at least one timestep")
    if (delta.shape != (length, inner) or A.shape != (inner, n_state) or B.shape != (length, n_state)
            or C.shape != (length, n_state) or D.shape != (inner,)):
        raise DimensionError(
            f"selective scan shapes u{u.shape} delta{delta.shape} A{A.shape} B{B.shape} C{C.shape} D{D.shape}")

    u_d, dt, a, b, c, d = u.data, delta.data, A.data, B.data, C.data, D.data
    decay = np.exp(dt[:, :, None] * a[None, :, :])          # [L, Di, N]
    drive = (dt * u_d)[:, :, None] * b[:, None, :]           # [L, Di, N]
    states = np.empty((length + 1, inner, n_state), dtype=u_d.dtype)
    states[0] = 0
    y = np.empty((length, inner), dtype=u_d.dtype)
    for t in range(length):
        states[t + 1] = decay[t] * states[t] + drive[t]
        y[t] = states[t + 1] @ c[t] + d * u_d[t]

    def backward(g):
        grad_u = g * d
        grad_delta = np.zeros_like(dt)
        grad_a = np.zeros_like(a)
        grad_b = np.empty_like(b)
        grad_c = np.empty_like(c)
        grad_d = (g * u_d).sum(axis=0)
        carry = np.zeros((inner, n_state), dtype=u_d.dtype)
        for t in range(length - 1, -1, -1):
            h_t = states[t + 1]
            grad_c[t] = g[t] @ h_t
            grad_h = carry + g[t][:, None] * c[t][None, :]
            grad_decay = grad_h * states[t] * decay[t]
            grad_delta[t] += (grad_decay * a).sum(axis=1)
            grad_a += grad_decay * dt[t][:, None]
            grad_drive_cu = grad_h @ b[t]                     # d/d(delta*u) per channel
            grad_delta[t] += grad_drive_cu * u_d[t]
            grad_u[t] += grad_drive_cu * dt[t]
            grad_b[t] = (grad_h * (dt[t] * u_d[t])[:, None]).sum(axis=0)
            carry = grad_h * decay[t]
        return grad_u, grad_delta, grad_a, grad_b, grad_c, grad_d

    return record("selective_scan", y, (u, delta, A, B, C, D), backward)
