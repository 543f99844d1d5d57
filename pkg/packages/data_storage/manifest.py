import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from packages.data_storage.bag_io import Bag, read_bag
from packages.helpers.errors import BagFormatError, ContractError, DataIOError

logger = logging.getLogger("Manifest")

SPLITS = ("train", "val", "test")
COLUMNS = ["slide_id", "path", "label", "split"]


@dataclass
class ManifestEntry:
    slide_id: str
    path: str
    label: int
    split: str


@dataclass
class Manifest:
    """Slides with their bag files, labels and fixed split; paths are relative to ``root``."""

    entries: List[ManifestEntry] = field(default_factory=list)
    root: str = "."

    def __post_init__(self):
        seen = set()
        for entry in self.entries:
            if entry.slide_id in seen:
                raise ContractError(f"duplicate slide id {entry.slide_id} in manifest")
            if entry.split not in SPLITS:
                raise ContractError(f"slide {entry.slide_id} has unknown split '{entry.split}'")
            seen.add(entry.slide_id)

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> List[ManifestEntry]:
        if name not in SPLITS:
            raise ContractError(f"unknown split '{name}', expected one of {SPLITS}")
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> str:
        return entry.path if os.path.isabs(entry.path) else os.path.join(self.root, entry.path)

    def label_counts(self) -> pd.DataFrame:
        """Slides per (label, split) as a label x split table."""
        df = self.to_frame()
        return df.pivot_table(index="label", columns="split", values="slide_id", aggfunc="count", fill_value=0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(e) for e in self.entries], columns=COLUMNS)

    def to_csv(self, path: str) -> None:
        try:
            self.to_frame().to_csv(path, index=False)
        except OSError as e:
            logger.error(f"Could not write manifest {path}: {e}")
            raise DataIOError(f"could not write manifest {path}: {e}") from e
        logger.info(f"Manifest with {len(self.entries)} slides saved to {path}")

    @classmethod
    def from_csv(cls, path: str) -> "Manifest":
        try:
            df = pd.read_csv(path, dtype={"slide_id": str, "path": str, "split": str})
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            logger.error(f"Could not read manifest {path}: {e}")
            raise DataIOError(f"could not read manifest {path}: {e}") from e
        if list(df.columns) != COLUMNS:
            raise DataIOError(f"manifest {path} has columns {list(df.columns)}, expected {COLUMNS}")
        labels = _checked_labels(df, path)
        entries = [ManifestEntry(slide_id=row.slide_id, path=row.path, label=label, split=row.split)
                   for row, label in zip(df.itertuples(index=False), labels)]
        return cls(entries=entries, root=os.path.dirname(os.path.abspath(path)))


def _checked_labels(df: pd.DataFrame, path: str) -> List[int]:
    """Non-negative integer labels; a blank cell or a non-integer value is a data error naming its CSV line."""
    blank = df[["slide_id", "path", "split"]].isna().any(axis=1)
    if blank.any():
        raise DataIOError(f"manifest {path} line {int(np.flatnonzero(blank)[0]) + 2} has an empty field")
    labels = pd.to_numeric(df["label"], errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(labels) | (labels < 0) | (labels != np.round(labels))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataIOError(f"manifest {path} line {row + 2} has label {df['label'].iloc[row]!r}, "
                          f"expected a non-negative integer")
    return [int(v) for v in labels]


def split_manifest(bags: Sequence[Bag], ratios: Sequence[float], seed: int,
                   paths: Optional[Dict[str, str]] = None, root: str = ".") -> Manifest:
    """
    Stratified train/val/test assignment.

    Within each label the slides are shuffled with the seeded generator and cut
    at round(cumulative ratio * count).

    Raises:
        ContractError: Ratios not summing to 1, or a label with fewer slides
            than non-empty split parts
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (len(SPLITS),) or np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ContractError(f"split ratios must be three non-negative values summing to 1, got {ratios.tolist()}")
    parts = int(np.count_nonzero(ratios))
    rng = np.random.default_rng(seed)

    assignment: Dict[str, str] = {}
    for label in sorted({b.label for b in bags}):
        ids = [b.slide_id for b in bags if b.label == label]
        if len(ids) < parts:
            raise ContractError(f"label {label} has {len(ids)} slides, fewer than the {parts} split parts")
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        bounds = [0] + [int(round(c * len(ids))) for c in np.cumsum(ratios)]
        bounds[-1] = len(ids)
        for name, start, stop in zip(SPLITS, bounds[:-1], bounds[1:]):
            for slide_id in shuffled[start:stop]:
                assignment[slide_id] = name

    paths = paths or {}
    entries = [ManifestEntry(slide_id=b.slide_id, path=paths.get(b.slide_id, f"{b.slide_id}.mbag"),
                             label=int(b.label), split=assignment[b.slide_id]) for b in bags]
    return Manifest(entries=entries, root=root)


def load_split_bags(manifest: Manifest, split: str) -> List[Bag]:
    bags = []
    for entry in manifest.split(split):
        path = manifest.resolve(entry)
        if not os.path.exists(path):
            logger.error(f"Bag file of slide {entry.slide_id} is missing: {path}")
            raise DataIOError(f"bag file of slide {entry.slide_id} is missing: {path}")
        try:
            bag = read_bag(path)
        except (DataIOError, BagFormatError) as e:
            raise type(e)(f"slide {entry.slide_id}: {e}") from e
        if bag.label != entry.label:
            logger.warning(f"Slide {entry.slide_id}: bag label {bag.label} differs from manifest label {entry.label}")
        bags.append(bag)
    logger.debug(f"Loaded {len(bags)} {split} bags")
    return bags
