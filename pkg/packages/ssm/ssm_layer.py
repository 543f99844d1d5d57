"""Selective state-space (Mamba-style) layer and its residual stack."""

from typing import List

import numpy as np

from packages.helpers.errors import ContractError, DimensionError
from packages.numerics import functional as F
from packages.numerics.module import LayerNorm, Module, constant, uniform_fan_in
from packages.numerics.tensor import Tensor
from packages.ssm.selective_scan import selective_scan

DT_MIN = 1e-3
DT_MAX = 1e-1


class SsmLayer(Module):
    """
    Gated selective SSM block.

    x, z = split(in_proj(seq)); u = silu(conv(x)); delta = softplus(dt_proj(u));
    B, C = B_proj(u), C_proj(u); y = scan(u, delta, A, B, C, D_skip);
    out = out_proj(y * silu(z)). A = -exp(A_log) stays strictly negative.
    """

    def __init__(self, d_model: int, rng: np.random.Generator, d_state: int = 16, d_conv: int = 4,
                 expand: int = 2):
        if min(d_model, d_state, d_conv, expand) < 1:
            raise DimensionError("SSM widths must all be positive")
        self.d_model = d_model
        self.d_inner = expand * d_model
        self.d_state = d_state
        self.d_conv = d_conv
        inner = self.d_inner

        self.in_proj = uniform_fan_in(rng, (2 * inner, d_model), d_model)
        self.conv_kernel = uniform_fan_in(rng, (inner, d_conv), d_conv)
        self.conv_bias = uniform_fan_in(rng, (inner,), d_conv)
        self.dt_proj = uniform_fan_in(rng, (inner, inner), inner)
        dt = np.exp(rng.uniform(np.log(DT_MIN), np.log(DT_MAX), size=inner))
        # inverse softplus so that softplus(dt_bias) == dt
        self.dt_bias = Tensor(dt + np.log(-np.expm1(-dt)), requires_grad=True, dtype=np.float32)
        self.B_proj = uniform_fan_in(rng, (d_state, inner), inner)
        self.C_proj = uniform_fan_in(rng, (d_state, inner), inner)
        self.A_log = Tensor(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (inner, 1))),
                            requires_grad=True, dtype=np.float32)
        self.D_skip = constant((inner,), 1.0)
        self.out_proj = uniform_fan_in(rng, (d_model, inner), inner)

    def __call__(self, seq: Tensor) -> Tensor:
        return ssm_forward(self, seq)


def ssm_forward(p: SsmLayer, seq: Tensor) -> Tensor:
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise ContractError(f"SSM input must be a non-empty [L, D] sequence, got {seq.shape}")
    if seq.shape[1] != p.d_model:
        raise DimensionError(f"SSM width {p.d_model} does not match input {seq.shape}")
    inner = p.d_inner
    xz = F.linear(seq, p.in_proj)
    x = F.slice_lastdim(xz, 0, inner)
    z = F.slice_lastdim(xz, inner, 2 * inner)
    u = F.silu(F.depthwise_causal_conv1d(x, p.conv_kernel, p.conv_bias))
    delta = F.softplus(F.linear(u, p.dt_proj, p.dt_bias))
    B = F.linear(u, p.B_proj)
    C = F.linear(u, p.C_proj)
    A = F.scale(F.exp(p.A_log), -1.0)
    y = selective_scan(u, delta, A, B, C, p.D_skip)
    return F.linear(F.mul(y, F.silu(z)), p.out_proj)


class SsmStack(Module):
    """``depth`` repetitions of h <- h + SSM(LN(h))."""

    def __init__(self, d_model: int, depth: int, rng: np.random.Generator, d_state: int = 16,
                 d_conv: int = 4, expand: int = 2, eps: float = 1e-5):
        self.norms: List[LayerNorm] = [LayerNorm(d_model, eps) for _ in range(depth)]
        self.layers: List[SsmLayer] = [SsmLayer(d_model, rng, d_state, d_conv, expand) for _ in range(depth)]

    def __call__(self, seq: Tensor) -> Tensor:
        return ssm_stack_forward(self, seq)


def ssm_stack_forward(p: SsmStack, seq: Tensor) -> Tensor:
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise ContractError(f"SSM stack input must be a non-empty [L, D] sequence, got {seq.shape}")
    h = seq
    for norm, layer in zip(p.norms, p.layers):
        h = F.add(h, ssm_forward(layer, norm(h)))
    return h
