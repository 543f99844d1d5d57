"""The assembled multiple-instance classifier.

Pipeline for one bag: embed every token; encode resolution-ordered tokens with
the static resolution experts; reorder into region-nested scan order; apply
``l_dyn`` MoE-Mamba blocks; attention-pool and classify.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import MODEL_VARIANTS
from packages.data_storage.bag_io import Bag
from packages.experts.dynamic_experts import DynamicExpertBank, FfnExpert, MambaExpert, sparse_dispatch
from packages.experts.routing import GateParams, MoEStats, RoutingDecision, gate_scores, routing_stats, topk_route
from packages.experts.static_experts import StaticExpertBank, static_encode
from packages.helpers.errors import ContractError, DimensionError
from packages.hierarchy.scan_order import REGION_NESTED, region_nested_scan, resolution_ordered_scan
from packages.model.model_config import ModelConfig
from packages.numerics import functional as F
from packages.numerics.module import LayerNorm, Linear, Module, uniform_fan_in
from packages.numerics.tensor import Tensor
from packages.ssm.ssm_layer import SsmLayer, ssm_forward

logger = logging.getLogger("MoEMambaMIL")


class AttentionPool(Module):
    """a_i = softmax_i(w^T tanh(V h_i)), z = sum_i a_i h_i"""

    def __init__(self, d_model: int, d_attn: int, rng: np.random.Generator):
        self.V = uniform_fan_in(rng, (d_attn, d_model), d_model)
        self.w = uniform_fan_in(rng, (d_attn,), d_attn)


def attention_pool(pool: AttentionPool, seq: Tensor) -> Tuple[Tensor, Tensor]:
    n_tokens, d_model = seq.shape
    if n_tokens < 1:
        raise ContractError("attention pooling needs at least one token")
    hidden = F.tanh(F.linear(seq, pool.V))
    scores = F.reshape(F.matmul(hidden, F.reshape(pool.w, (pool.w.shape[0], 1))), (n_tokens,))
    a = F.softmax_lastdim(scores)
    z = F.reshape(F.matmul(F.reshape(a, (1, n_tokens)), seq), (d_model,))
    return z, a


class MoEMambaBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.top_k = cfg.effective_top_k
        n_experts = cfg.effective_experts
        self.backbone_norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.backbone = SsmLayer(cfg.d_model, rng, cfg.d_state, cfg.d_conv, cfg.expand)
        self.moe_norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.gate = GateParams(cfg.d_model, n_experts, rng)
        if cfg.variant == "moeffn":
            experts = [FfnExpert(cfg.d_model, cfg.d_hidden, rng, cfg.layer_norm_eps) for _ in range(n_experts)]
        else:
            experts = [MambaExpert(cfg.d_model, rng, cfg.d_state, cfg.d_conv, cfg.expand, cfg.layer_norm_eps)
                       for _ in range(n_experts)]
        self.experts = DynamicExpertBank(experts)

    def forward_with_routing(self, seq: Tensor) -> Tuple[Tensor, MoEStats, RoutingDecision]:
        h = F.add(seq, ssm_forward(self.backbone, self.backbone_norm(seq)))
        normed = self.moe_norm(h)
        rd = topk_route(gate_scores(self.gate, normed), self.top_k)
        out = F.add(h, sparse_dispatch(self.experts, normed, rd))
        return out, routing_stats(rd), rd


def moe_mamba_block(block: MoEMambaBlock, seq: Tensor) -> Tuple[Tensor, MoEStats]:
    """h' = h + Mamba(LN(h)); h'' = h' + SparseMoE(LN(h'))"""
    out, stats, _ = block.forward_with_routing(seq)
    return out, stats


class MoEMambaMILModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.embed = Linear(cfg.d_in, cfg.d_model, rng)
        self.static_bank: Optional[StaticExpertBank] = None
        if cfg.variant != "wo_r":
            self.static_bank = StaticExpertBank(cfg.d_model, cfg.n_levels, cfg.l_static, rng,
                                                cfg.d_state, cfg.d_conv, cfg.expand, cfg.layer_norm_eps)
        self.blocks: List[MoEMambaBlock] = [MoEMambaBlock(cfg, rng) for _ in range(cfg.l_dyn)]
        self.attn = AttentionPool(cfg.d_model, cfg.d_attn, rng)
        self.classifier = Linear(cfg.d_model, cfg.n_classes, rng)

    def __call__(self, bag: Bag) -> "ForwardOutput":
        return forward(self, bag)


@dataclass
class RoutingSummary:
    topk_idx: np.ndarray
    weights: np.ndarray
    expert_counts: np.ndarray


@dataclass
class ForwardOutput:
    logits: Tensor
    probs: np.ndarray
    attention: np.ndarray                         # per token, bag record order
    token_levels: np.ndarray
    per_level_attention: Dict[int, np.ndarray] = field(default_factory=dict)
    moe_stats: List[MoEStats] = field(default_factory=list)
    routing: List[RoutingSummary] = field(default_factory=list)

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.probs))


def build_variant(cfg: ModelConfig) -> MoEMambaMILModel:
    """Full, WO_R (no resolution-aware stage), WO_MoE (single expert) or MoEFFN (FFN experts)."""
    if cfg.variant not in MODEL_VARIANTS:
        raise ContractError(f"unknown model variant '{cfg.variant}'")
    model = MoEMambaMILModel(cfg)
    logger.info(f"Built {cfg.variant} model with {model.num_parameters()} parameters")
    return model


def forward(m: MoEMambaMILModel, bag: Bag) -> ForwardOutput:
    cfg = m.config
    if not bag.records:
        raise ContractError(f"bag {bag.slide_id} is empty")
    features = bag.features()
    if features.shape[1] != cfg.d_in:
        raise DimensionError(f"bag {bag.slide_id} has feature width {features.shape[1]}, model expects {cfg.d_in}")

    hierarchy = bag.hierarchy()
    nested = region_nested_scan(hierarchy)
    by_level = resolution_ordered_scan(hierarchy)
    embedded = m.embed(Tensor(features, dtype=m.dtype))

    if m.static_bank is not None:
        encoded = static_encode(m.static_bank, F.gather_rows(embedded, by_level.order), by_level.level_of)
        if cfg.scan_scheme == REGION_NESTED:
            position = {token: pos for pos, token in enumerate(by_level.order)}
            scan = nested
            seq = F.gather_rows(encoded, [position[token] for token in nested.order])
        else:
            scan = by_level
            seq = encoded
    else:
        scan = nested if cfg.scan_scheme == REGION_NESTED else by_level
        seq = F.gather_rows(embedded, scan.order)

    stats, routing = [], []
    for block in m.blocks:
        seq, block_stats, rd = block.forward_with_routing(seq)
        stats.append(block_stats)
        routing.append(RoutingSummary(topk_idx=rd.topk_idx, weights=rd.weights.data.copy(),
                                      expert_counts=rd.expert_token_counts(block.experts.n_experts)))

    z, a = attention_pool(m.attn, seq)
    logits = F.reshape(m.classifier(F.reshape(z, (1, cfg.d_model))), (cfg.n_classes,))
    probs = F.softmax_lastdim(Tensor(logits.data, dtype=logits.dtype)).data

    n_tokens = len(bag.records)
    attention = np.empty(n_tokens, dtype=np.float64)
    attention[np.asarray(scan.order)] = a.data
    levels = np.array([record.level for record in bag.records])
    per_level = {}
    for level in np.unique(levels):
        values = attention[levels == level]
        per_level[int(level)] = values / values.sum()
    return ForwardOutput(logits=logits, probs=probs, attention=attention, token_levels=levels,
                         per_level_attention=per_level, moe_stats=stats, routing=routing)


def expected_parameter_count(cfg: ModelConfig) -> int:
    """
    Closed-form parameter count.

    ssm  = 2*Di*D + Di*W + Di + Di*Di + Di + 2*Di*N + Di*N + Di + D*Di   (Di = expand*D)
    ln   = 2*D
    expert = ln + ssm            (Mamba)  |  ln + 2*D*H   (FFN)
    block  = ln + ssm + ln + E*D + E + E*expert
    total  = D_in*D + D + [R*L_static*(ln + ssm)] + L_dyn*block + D_attn*D + D_attn + C*D + C
    The static term is absent for WO_R; WO_MoE uses E = 1.
    """
    d, di, n, w = cfg.d_model, cfg.expand * cfg.d_model, cfg.d_state, cfg.d_conv
    ssm = 2 * di * d + di * w + di + di * di + di + 2 * di * n + di * n + di + d * di
    ln = 2 * d
    e = cfg.effective_experts
    expert = ln + (2 * d * cfg.d_hidden if cfg.variant == "moeffn" else ssm)
    block = ln + ssm + ln + e * d + e + e * expert
    total = cfg.d_in * d + d + cfg.l_dyn * block + cfg.d_attn * d + cfg.d_attn + cfg.n_classes * d + cfg.n_classes
    if cfg.variant != "wo_r":
        total += cfg.n_levels * cfg.l_static * (ln + ssm)
    return total
