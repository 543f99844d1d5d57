import logging
from typing import List, Sequence

import numpy as np

from packages.helpers.errors import ContractError, DimensionError
from packages.numerics import functional as F
from packages.numerics.module import Module
from packages.numerics.tensor import Tensor
from packages.ssm.ssm_layer import SsmStack

logger = logging.getLogger("StaticExperts")


class StaticExpertBank(Module):
    """One SSM stack per resolution level; expert r only ever sees level-r tokens."""

    def __init__(self, d_model: int, n_levels: int, depth: int, rng: np.random.Generator,
                 d_state: int = 16, d_conv: int = 4, expand: int = 2, eps: float = 1e-5):
        self.experts: List[SsmStack] = [
            SsmStack(d_model, depth, rng, d_state, d_conv, expand, eps) for _ in range(n_levels)
        ]

    @property
    def n_levels(self) -> int:
        return len(self.experts)


def static_encode(bank: StaticExpertBank, seq: Tensor, levels: Sequence[int]) -> Tensor:
    """
    Hard-assign tokens to their resolution expert.

    For each level r, the tokens with that level are gathered in sequence order,
    encoded by expert r as one subsequence and scattered back to their positions.
    """
    levels = np.asarray(levels, dtype=np.int64)
    if seq.ndim != 2 or levels.shape != (seq.shape[0],):
        raise DimensionError(f"{len(levels)} level tags for a sequence of shape {seq.shape}")
    bad = levels[(levels < 1) | (levels > bank.n_levels)]
    if bad.size:
        raise ContractError(f"resolution level {int(bad[0])} outside [1, {bank.n_levels}]")

    out = Tensor(np.zeros(seq.shape, dtype=seq.dtype), dtype=seq.dtype)
    for r, expert in enumerate(bank.experts, start=1):
        idx = np.flatnonzero(levels == r)
        if idx.size == 0:
            continue
        logger.debug(f"static expert {r}: {idx.size} tokens")
        encoded = expert(F.gather_rows(seq, idx))
        out = F.scatter_add_rows(out, idx, encoded)
    return out
