"""
Synthetic multi-resolution bags with planted class signals.

Every class owns two unit directions: one added to level-2 tokens and one
added to finest-level tokens, both inside a random subset of root regions.
Decoy regions carry one of the two components of another class, so a single
level or the bag mean is not enough to tell the classes apart.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

from config import (
    DEFAULT_DECOY_FRACTION, DEFAULT_NOISE_SIGMA, DEFAULT_SEED, DEFAULT_SIGNAL_FRACTION,
    DEFAULT_SIGNAL_STRENGTH, DEFAULT_SLIDES_PER_CLASS, DEFAULT_SPLIT_RATIOS, DEFAULT_SYNTHETIC_CLASSES,
    DEFAULT_SYNTHETIC_FANOUTS, DEFAULT_SYNTHETIC_INPUT_DIM, DEFAULT_SYNTHETIC_ROOTS,
)
from packages.data_storage.bag_io import Bag, BagRecord
from packages.helpers.errors import ConfigError
from packages.model.model_config import strict_from_dict

logger = logging.getLogger("SyntheticData")


@dataclass
class SyntheticSpec:
    n_classes: int = DEFAULT_SYNTHETIC_CLASSES
    slides_per_class: int = DEFAULT_SLIDES_PER_CLASS
    n_roots: int = DEFAULT_SYNTHETIC_ROOTS
    fanouts: Tuple[int, ...] = DEFAULT_SYNTHETIC_FANOUTS
    d_in: int = DEFAULT_SYNTHETIC_INPUT_DIM
    signal_strength: float = DEFAULT_SIGNAL_STRENGTH
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    signal_fraction: float = DEFAULT_SIGNAL_FRACTION
    decoy_fraction: float = DEFAULT_DECOY_FRACTION
    split_ratios: Tuple[float, float, float] = DEFAULT_SPLIT_RATIOS
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        self.fanouts = tuple(int(f) for f in self.fanouts)
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        for name in ("n_classes", "slides_per_class", "n_roots", "d_in"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if any(f < 1 for f in self.fanouts):
            raise ConfigError(f"fan-outs must be positive, got {self.fanouts}")
        if not 0 < self.signal_fraction <= 1:
            raise ConfigError(f"signal_fraction must lie in (0, 1], got {self.signal_fraction}")
        if not 0 <= self.decoy_fraction <= 1 - self.signal_fraction + 1e-12:
            raise ConfigError(f"decoy_fraction must lie in [0, 1 - signal_fraction], got {self.decoy_fraction}")
        if self.signal_strength < 0 or self.noise_sigma < 0:
            raise ConfigError("signal_strength and noise_sigma must be non-negative")

    @property
    def n_levels(self) -> int:
        return 1 + len(self.fanouts)

    @property
    def tokens_per_bag(self) -> int:
        total, width = 0, self.n_roots
        for fanout in (1, *self.fanouts):
            width *= fanout
            total += width
        return total

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values["fanouts"] = list(self.fanouts)
        values["split_ratios"] = list(self.split_ratios)
        return values

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "SyntheticSpec":
        return strict_from_dict(cls, values, "synthetic")


@dataclass
class _Region:
    components: Dict[int, np.ndarray] = field(default_factory=dict)   # level -> added vector


def _signal_levels(n_levels: int) -> Tuple[int, int]:
    return min(2, n_levels), n_levels


def synthetic_directions(spec: SyntheticSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Unit signal directions ([C, D_in] for the level-2 component, [C, D_in]
    for the finest-level component). Orthonormal when 2C <= D_in.
    """
    direction_seed, _ = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.default_rng(direction_seed)
    raw = rng.standard_normal((spec.d_in, 2 * spec.n_classes))
    if 2 * spec.n_classes <= spec.d_in:
        q, _ = np.linalg.qr(raw)
        directions = q.T
    else:
        directions = raw.T / np.linalg.norm(raw.T, axis=1, keepdims=True)
    return directions[:spec.n_classes].copy(), directions[spec.n_classes:].copy()


def _child_coord(parent: Tuple[int, int], index: int, fanout: int) -> Tuple[int, int]:
    side = math.ceil(math.sqrt(fanout))
    return parent[0] * side + index // side, parent[1] * side + index % side


def _regions(spec: SyntheticSpec, label: int, mid: np.ndarray, fine: np.ndarray,
             rng: np.random.Generator) -> List[_Region]:
    mid_level, fine_level = _signal_levels(spec.n_levels)
    n_signal = max(1, int(round(spec.signal_fraction * spec.n_roots)))
    n_decoy = int(round(spec.decoy_fraction * spec.n_roots)) if spec.n_classes > 1 else 0
    n_decoy = min(n_decoy, spec.n_roots - n_signal)

    roots = rng.permutation(spec.n_roots)
    regions = [_Region() for _ in range(spec.n_roots)]
    for r in roots[:n_signal]:
        regions[r].components[mid_level] = regions[r].components.get(mid_level, 0) + mid[label]
        regions[r].components[fine_level] = regions[r].components.get(fine_level, 0) + fine[label]
    for r in roots[n_signal:n_signal + n_decoy]:
        other = (label + 1 + int(rng.integers(spec.n_classes - 1))) % spec.n_classes
        if rng.random() < 0.5:
            regions[r].components[mid_level] = mid[other]
        else:
            regions[r].components[fine_level] = fine[other]
    return regions


def _generate_bag(spec: SyntheticSpec, slide_id: str, label: int, mid: np.ndarray, fine: np.ndarray,
                  rng: np.random.Generator) -> Bag:
    regions = _regions(spec, label, mid, fine, rng)
    grid = math.ceil(math.sqrt(spec.n_roots))
    records: List[BagRecord] = []

    def emit(level: int, path: Tuple[int, ...], coord: Tuple[int, int], region: _Region) -> None:
        features = spec.noise_sigma * rng.standard_normal(spec.d_in)
        if level in region.components:
            features = features + spec.signal_strength * region.components[level]
        records.append(BagRecord(level=level, path=path, coord=coord, features=features.astype(np.float32)))
        if level <= len(spec.fanouts):
            fanout = spec.fanouts[level - 1]
            for j in range(fanout):
                emit(level + 1, path + (j + 1,), _child_coord(coord, j, fanout), region)

    for i in range(spec.n_roots):
        emit(1, (i + 1,), (i // grid, i % grid), regions[i])
    return Bag(slide_id=slide_id, label=label, n_levels=spec.n_levels, records=records)


def generate_synthetic(spec: SyntheticSpec) -> List[Bag]:
    """Class-major list of bags; identical output for identical specs."""
    mid, fine = synthetic_directions(spec)
    _, bag_seed = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.default_rng(bag_seed)
    bags = []
    for label in range(spec.n_classes):
        for i in range(spec.slides_per_class):
            bags.append(_generate_bag(spec, f"syn_c{label}_{i:03d}", label, mid, fine, rng))
    logger.info(f"Generated {len(bags)} synthetic bags: {spec.n_classes} classes, "
                f"{spec.tokens_per_bag} tokens per bag, R={spec.n_levels}")
    return bags
