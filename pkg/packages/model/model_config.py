from dataclasses import asdict, dataclass, fields
from typing import Any, Dict

from config import (
    DEFAULT_ATTENTION_DIM, DEFAULT_BALANCE_WEIGHT, DEFAULT_CONV_WIDTH, DEFAULT_DYNAMIC_DEPTH,
    DEFAULT_EXPAND, DEFAULT_FFN_HIDDEN_DIM, DEFAULT_HIDDEN_DIM, DEFAULT_INPUT_DIM,
    DEFAULT_LAYER_NORM_EPS, DEFAULT_NUM_CLASSES, DEFAULT_NUM_EXPERTS, DEFAULT_NUM_LEVELS,
    DEFAULT_SEED, DEFAULT_STATE_DIM, DEFAULT_STATIC_DEPTH, DEFAULT_TOP_K, MODEL_VARIANTS,
    SCAN_SCHEMES,
)
from packages.helpers.errors import ConfigError


def strict_from_dict(cls, values: Dict[str, Any], section: str):
    """Build a config dataclass, rejecting keys it does not declare."""
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {', '.join(unknown)}")
    return cls(**values)


@dataclass
class ModelConfig:
    d_in: int = DEFAULT_INPUT_DIM
    d_model: int = DEFAULT_HIDDEN_DIM
    n_classes: int = DEFAULT_NUM_CLASSES
    n_levels: int = DEFAULT_NUM_LEVELS
    n_experts: int = DEFAULT_NUM_EXPERTS
    top_k: int = DEFAULT_TOP_K
    l_static: int = DEFAULT_STATIC_DEPTH
    l_dyn: int = DEFAULT_DYNAMIC_DEPTH
    d_state: int = DEFAULT_STATE_DIM
    d_conv: int = DEFAULT_CONV_WIDTH
    expand: int = DEFAULT_EXPAND
    d_hidden: int = DEFAULT_FFN_HIDDEN_DIM
    d_attn: int = DEFAULT_ATTENTION_DIM
    lambda_balance: float = DEFAULT_BALANCE_WEIGHT
    variant: str = "full"
    scan_scheme: str = "region_nested"
    layer_norm_eps: float = DEFAULT_LAYER_NORM_EPS
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        self.variant = self.variant.replace("-", "_").lower()
        if self.variant not in MODEL_VARIANTS:
            raise ConfigError(f"unknown model variant '{self.variant}'; expected one of {MODEL_VARIANTS}")
        if self.scan_scheme not in SCAN_SCHEMES:
            raise ConfigError(f"unknown scan scheme '{self.scan_scheme}'; expected one of {SCAN_SCHEMES}")
        widths = {name: getattr(self, name) for name in
                  ("d_in", "d_model", "n_classes", "n_levels", "n_experts", "d_state", "d_conv",
                   "expand", "d_hidden", "d_attn")}
        for name, value in widths.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.l_dyn < 1:
            raise ConfigError(f"l_dyn must be at least 1, got {self.l_dyn}")
        if self.l_static < 0:
            raise ConfigError(f"l_static must be non-negative, got {self.l_static}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k must lie in [1, {self.n_experts}], got {self.top_k}")
        if self.lambda_balance < 0:
            raise ConfigError(f"lambda_balance must be non-negative, got {self.lambda_balance}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ModelConfig":
        return strict_from_dict(cls, values, "model")

    @property
    def effective_experts(self) -> int:
        return 1 if self.variant == "wo_moe" else self.n_experts

    @property
    def effective_top_k(self) -> int:
        return 1 if self.variant == "wo_moe" else self.top_k
