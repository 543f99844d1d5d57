"""Per-level attention heatmaps: PGM grids, an SVG overlay and a CSV of raw weights."""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Tuple

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from PIL import Image

from packages.data_storage.bag_io import Bag
from packages.helpers.errors import ContractError, DataIOError
from packages.model.moe_mamba_mil import ForwardOutput

logger = logging.getLogger("Heatmap")

CONSTANT_LEVEL_VALUE = 0.5
SINGLE_TOKEN_VALUE = 1.0
MAX_GRID_CELLS = 1 << 22


@dataclass
class LevelGrid:
    level: int
    grid: np.ndarray                 # NaN marks cells without a patch
    origin: Tuple[int, int]          # (row, col) of grid[0, 0]
    row_coords: np.ndarray           # patch row of each grid row
    col_coords: np.ndarray
    vmin: float                      # raw attention range before normalisation
    vmax: float


@dataclass
class HeatmapBundle:
    slide_id: str
    levels: Dict[int, LevelGrid] = field(default_factory=dict)


def normalise_level(values: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; one token maps to 1.0, several equal values to 0.5."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 1:
        return np.full(1, SINGLE_TOKEN_VALUE)
    low, high = values.min(), values.max()
    if high == low:
        return np.full(values.shape, CONSTANT_LEVEL_VALUE)
    return (values - low) / (high - low)


def _grid_axis(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Every coordinate from the smallest to the largest present, and each value's index in it."""
    low = int(values.min())
    return np.arange(low, int(values.max()) + 1), values - low


def build_heatmap(bag: Bag, out: ForwardOutput) -> HeatmapBundle:
    """
    Per-level grids spanning the patch coordinates of each level.

    A level whose bounding box exceeds ``MAX_GRID_CELLS`` keeps only the rows
    and columns that hold a patch.
    """
    if len(out.attention) != len(bag.records):
        raise ContractError(f"attention for {len(out.attention)} tokens, bag {bag.slide_id} has {len(bag.records)}")
    bundle = HeatmapBundle(slide_id=bag.slide_id)
    coords = np.array([r.coord for r in bag.records], dtype=np.int64).reshape(-1, 2)
    for level, level_attention in sorted(out.per_level_attention.items()):
        tokens = np.flatnonzero(out.token_levels == level)
        level_coords = coords[tokens]
        (row_coords, rows), (col_coords, cols) = _grid_axis(level_coords[:, 0]), _grid_axis(level_coords[:, 1])
        if len(row_coords) * len(col_coords) > MAX_GRID_CELLS:
            logger.warning(f"Level {level} of {bag.slide_id} spans a sparse coordinate range; "
                           f"rows and columns without patches are dropped")
            row_coords, rows = np.unique(level_coords[:, 0], return_inverse=True)
            col_coords, cols = np.unique(level_coords[:, 1], return_inverse=True)
        grid = np.full((len(row_coords), len(col_coords)), np.nan)
        grid[rows, cols] = normalise_level(level_attention)
        raw = out.attention[tokens]
        bundle.levels[level] = LevelGrid(level=level, grid=grid, origin=(int(row_coords[0]), int(col_coords[0])),
                                         row_coords=row_coords, col_coords=col_coords,
                                         vmin=float(raw.min()), vmax=float(raw.max()))
    return bundle


def pgm_pixels(grid: np.ndarray) -> np.ndarray:
    """Absent cells 0, present cells 1 + round(254 * v)."""
    pixels = np.zeros(grid.shape, dtype=np.uint8)
    present = ~np.isnan(grid)
    pixels[present] = 1 + np.rint(254 * grid[present]).astype(np.uint8)
    return pixels


def write_pgm(level_grid: LevelGrid, path: str) -> None:
    try:
        Image.fromarray(pgm_pixels(level_grid.grid)).save(path, format="PPM")
    except OSError as e:
        logger.error(f"Could not write {path}: {e}")
        raise DataIOError(f"could not write {path}: {e}") from e


def write_svg(bundle: HeatmapBundle, path: str) -> None:
    levels = sorted(bundle.levels)
    fig, axes = plt.subplots(1, len(levels), figsize=(4 * len(levels), 4), squeeze=False)
    cmap = plt.get_cmap("bwr").copy()
    cmap.set_bad("lightgrey")
    image = None
    for ax, level in zip(axes[0], levels):
        grid = bundle.levels[level].grid
        image = ax.imshow(np.ma.masked_invalid(grid), cmap=cmap, vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_title(f"Level {level}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(image, ax=axes[0].tolist(), shrink=0.8, label="attention (per-level min-max)")
    fig.suptitle(bundle.slide_id)
    try:
        fig.savefig(path, format="svg")
    except OSError as e:
        logger.error(f"Could not write {path}: {e}")
        raise DataIOError(f"could not write {path}: {e}") from e
    finally:
        plt.close(fig)


def attention_frame(bag: Bag, out: ForwardOutput) -> pd.DataFrame:
    return pd.DataFrame({
        "token": np.arange(len(bag.records)),
        "level": [r.level for r in bag.records],
        "path": [".".join(str(p) for p in r.path) for r in bag.records],
        "row": [r.coord[0] for r in bag.records],
        "col": [r.coord[1] for r in bag.records],
        "attention": out.attention,
    })


def export_heatmaps(bag: Bag, out: ForwardOutput, outdir: str) -> HeatmapBundle:
    os.makedirs(outdir, exist_ok=True)
    bundle = build_heatmap(bag, out)
    for level, level_grid in bundle.levels.items():
        write_pgm(level_grid, os.path.join(outdir, f"level_{level}.pgm"))
    write_svg(bundle, os.path.join(outdir, "attention.svg"))
    csv_path = os.path.join(outdir, "attention.csv")
    try:
        attention_frame(bag, out).to_csv(csv_path, index=False, float_format="%.17g")
    except OSError as e:
        logger.error(f"Could not write {csv_path}: {e}")
        raise DataIOError(f"could not write {csv_path}: {e}") from e
    logger.info(f"Heatmaps for {bag.slide_id} written to {outdir}")
    return bundle
