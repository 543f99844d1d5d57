"""Token gating, top-k routing and load-balancing statistics."""

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from packages.helpers.errors import ContractError, DimensionError
from packages.numerics import functional as F
from packages.numerics.module import Module, uniform_fan_in
from packages.numerics.tensor import Tensor


class GateParams(Module):
    def __init__(self, d_model: int, n_experts: int, rng: np.random.Generator):
        self.W_g = uniform_fan_in(rng, (n_experts, d_model), d_model)
        self.b_g = uniform_fan_in(rng, (n_experts,), d_model)

    @property
    def n_experts(self) -> int:
        return self.W_g.shape[0]


@dataclass
class RoutingDecision:
    topk_idx: np.ndarray      # [N, k] int, best expert first
    weights: Tensor           # [N, k] renormalised softmax over the selected scores
    full_probs: Tensor        # [N, E] softmax over all scores

    @property
    def n_tokens(self) -> int:
        return self.topk_idx.shape[0]

    @property
    def k(self) -> int:
        return self.topk_idx.shape[1]

    def top1(self) -> np.ndarray:
        return self.topk_idx[:, 0]

    def expert_token_counts(self, n_experts: int) -> np.ndarray:
        return np.bincount(self.topk_idx.reshape(-1), minlength=n_experts)


@dataclass
class MoEStats:
    importance: Tensor        # [E], differentiable
    load: np.ndarray          # [E], top-1 fractions, no gradient
    token_count: int


def gate_scores(g: GateParams, seq: Tensor) -> Tensor:
    if seq.ndim != 2 or seq.shape[1] != g.W_g.shape[1]:
        raise DimensionError(f"gate expects [N, {g.W_g.shape[1]}] tokens, got {seq.shape}")
    return F.linear(seq, g.W_g, g.b_g)


def topk_route(scores: Tensor, k: int) -> RoutingDecision:
    """
    Select the k highest-scoring experts per token (ties go to the lower index)
    and renormalise their scores with a softmax.
    """
    n_experts = scores.shape[-1]
    if not 1 <= k <= n_experts:
        raise ContractError(f"top-k needs 1 <= k <= {n_experts}, got k={k}")
    # stable sort of negated scores keeps lower indices first among equal scores
    topk_idx = np.argsort(-scores.data, axis=1, kind="stable")[:, :k]
    weights = F.softmax_lastdim(F.select_columns(scores, topk_idx))
    return RoutingDecision(topk_idx=topk_idx, weights=weights, full_probs=F.softmax_lastdim(scores))


def routing_stats(rd: RoutingDecision) -> MoEStats:
    n_tokens, n_experts = rd.full_probs.shape
    load = np.bincount(rd.top1(), minlength=n_experts).astype(rd.full_probs.dtype) / n_tokens
    return MoEStats(importance=F.mean_rows(rd.full_probs), load=load, token_count=n_tokens)


def load_balance_loss(stats: Sequence[MoEStats], n_experts: int) -> Tensor:
    """Mean over layers of E * <importance, load>; gradient flows through importance only."""
    if not stats:
        raise ContractError("load balance loss needs at least one layer of routing statistics")
    total = None
    for layer_stats in stats:
        if layer_stats.importance.shape != (n_experts,):
            raise DimensionError(f"importance has shape {layer_stats.importance.shape}, expected ({n_experts},)")
        load = Tensor(layer_stats.load, dtype=layer_stats.importance.dtype)
        layer_loss = F.scale(F.sum_all(F.mul(layer_stats.importance, load)), float(n_experts))
        total = layer_loss if total is None else F.add(total, layer_loss)
    return F.scale(total, 1.0 / len(stats))


def average_stats(stats: List[MoEStats]) -> np.ndarray:
    """Layer-averaged (importance, load) as a [2, E] array for reporting."""
    importance = np.mean([s.importance.data for s in stats], axis=0)
    load = np.mean([s.load for s in stats], axis=0)
    return np.stack([importance, load])
