"""Dynamic experts and expert-wise sparse dispatch."""

import logging
from typing import List

import numpy as np

from packages.experts.routing import RoutingDecision
from packages.helpers.errors import ContractError, DimensionError
from packages.numerics import functional as F
from packages.numerics.module import LayerNorm, Module, uniform_fan_in
from packages.numerics.tensor import Tensor
from packages.ssm.ssm_layer import SsmLayer

logger = logging.getLogger("DynamicExperts")


class MambaExpert(Module):
    """f(x) = x + Mamba(LN(x))"""

    def __init__(self, d_model: int, rng: np.random.Generator, d_state: int = 16, d_conv: int = 4,
                 expand: int = 2, eps: float = 1e-5):
        self.norm = LayerNorm(d_model, eps)
        self.mamba = SsmLayer(d_model, rng, d_state, d_conv, expand)

    def __call__(self, x: Tensor) -> Tensor:
        return F.add(x, self.mamba(self.norm(x)))


class FfnExpert(Module):
    """f(x) = x + W2 silu(W1 LN(x)); the feed-forward expert of the MoE-FFN ablation."""

    def __init__(self, d_model: int, d_hidden: int, rng: np.random.Generator, eps: float = 1e-5):
        self.norm = LayerNorm(d_model, eps)
        self.W1 = uniform_fan_in(rng, (d_hidden, d_model), d_model)
        self.W2 = uniform_fan_in(rng, (d_model, d_hidden), d_hidden)

    def __call__(self, x: Tensor) -> Tensor:
        return F.add(x, F.linear(F.silu(F.linear(self.norm(x), self.W1)), self.W2))


class DynamicExpertBank(Module):
    def __init__(self, experts: List[Module]):
        if not experts:
            raise ContractError("a dynamic expert bank needs at least one expert")
        self.experts = experts

    @property
    def n_experts(self) -> int:
        return len(self.experts)


def sparse_dispatch(bank: DynamicExpertBank, seq: Tensor, rd: RoutingDecision) -> Tensor:
    """
    y_i = sum over selected experts e of alpha_{i,e} * f_e(x_i), evaluated expert-wise.

    Expert e receives every token that selected it, in ascending sequence
    position, as one (possibly non-contiguous) subsequence. Contributions are
    accumulated in expert order so the result does not depend on scheduling.
    """
    if rd.n_tokens != seq.shape[0]:
        raise ContractError(f"routing covers {rd.n_tokens} tokens but the sequence has {seq.shape[0]}")
    if rd.topk_idx.size and rd.topk_idx.max() >= bank.n_experts:
        raise DimensionError(f"routing refers to expert {int(rd.topk_idx.max())} of {bank.n_experts}")

    out = Tensor(np.zeros(seq.shape, dtype=seq.dtype), dtype=seq.dtype)
    for e, expert in enumerate(bank.experts):
        rows, slots = np.nonzero(rd.topk_idx == e)
        if rows.size == 0:
            logger.debug(f"expert {e} received no tokens")
            continue
        # np.nonzero returns rows in ascending order, which preserves scan order
        expert_out = expert(F.gather_rows(seq, rows))
        alpha = _routing_weights(rd.weights, rows, slots)
        out = F.scatter_add_rows(out, rows, F.scale_rows(expert_out, alpha))
    return out


def _routing_weights(weights: Tensor, rows: np.ndarray, slots: np.ndarray) -> Tensor:
    selected = F.select_columns(F.gather_rows(weights, rows), slots[:, None])
    return F.reshape(selected, (rows.size,))
