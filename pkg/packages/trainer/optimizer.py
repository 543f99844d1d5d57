"""Adam with bias correction over named parameters."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Tuple

import numpy as np

from packages.helpers.errors import DimensionError, NumericError
from packages.numerics.tensor import Tensor
from packages.trainer.train_config import TrainConfig

logger = logging.getLogger("Optimizer")


@dataclass
class OptimizerState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def init_state(params: Iterable[Tuple[str, Tensor]]) -> OptimizerState:
    state = OptimizerState()
    for name, p in params:
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params: Dict[str, Tensor], st: OptimizerState, cfg: TrainConfig) -> OptimizerState:
    """
    One Adam update in place. Missing gradients count as zero.

    Raises:
        NumericError: A gradient holds NaN or Inf (the message names the parameter)
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            logger.error(f"Non-finite gradient in parameter {name}")
            raise NumericError(f"non-finite gradient in parameter {name}")

    st.step += 1
    beta1, beta2 = cfg.betas
    correction1 = 1.0 - beta1 ** st.step
    correction2 = 1.0 - beta2 ** st.step
    for name, p in params.items():
        if name not in st.m:
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        if st.m[name].shape != p.shape:
            raise DimensionError(f"optimizer state of {name} has shape {st.m[name].shape}, parameter {p.shape}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        st.m[name] = (beta1 * st.m[name] + (1.0 - beta1) * g).astype(p.dtype)
        st.v[name] = (beta2 * st.v[name] + (1.0 - beta2) * g * g).astype(p.dtype)
        m_hat = st.m[name] / correction1
        v_hat = st.v[name] / correction2
        p.data = (p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype)
    return st
