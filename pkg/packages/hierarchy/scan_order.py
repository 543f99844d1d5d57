"""Serialisations of a patch hierarchy into one token sequence."""

from dataclasses import dataclass
from typing import List, Tuple

from packages.helpers.errors import ContractError
from packages.hierarchy.patch_hierarchy import PatchHierarchy, PatchNode

REGION_NESTED = "region_nested"
RESOLUTION_ORDERED = "resolution_ordered"


@dataclass
class ScanOrder:
    order: List[int]
    level_of: List[int]
    region_of: List[int]
    scheme: str
    nodes: List[PatchNode]

    def __len__(self) -> int:
        return len(self.order)


def _from_nodes(nodes: List[PatchNode], scheme: str) -> ScanOrder:
    return ScanOrder(
        order=[n.token_id for n in nodes],
        level_of=[n.level for n in nodes],
        region_of=[n.root_index for n in nodes],
        scheme=scheme,
        nodes=nodes,
    )


def expand_node(h: PatchHierarchy, node: PatchNode) -> List[PatchNode]:
    """The node followed by the expansion of each child, children in ascending index."""
    out = []
    stack = [node]
    while stack:
        current = stack.pop()
        out.append(current)
        stack.extend(reversed(h.children_of(current)))
    return out


def region_nested_scan(h: PatchHierarchy) -> ScanOrder:
    nodes = []
    for root in h.roots:
        nodes.extend(expand_node(h, root))
    return _from_nodes(nodes, REGION_NESTED)


def resolution_ordered_scan(h: PatchHierarchy) -> ScanOrder:
    """All level-1 tokens, then level 2, ...; raster order within a level, ties by path."""
    nodes = sorted(h.nodes.values(), key=lambda n: (n.level, n.coord[0], n.coord[1], n.path))
    return _from_nodes(nodes, RESOLUTION_ORDERED)


def region_segments(s: ScanOrder) -> List[Tuple[int, int, int]]:
    """Half-open (root_index, start, end) spans of a region-nested order."""
    if s.scheme != REGION_NESTED:
        raise ContractError(f"region segments are only defined for {REGION_NESTED} scans, got {s.scheme}")
    segments = []
    start = 0
    for pos in range(1, len(s.region_of) + 1):
        if pos == len(s.region_of) or s.region_of[pos] != s.region_of[start]:
            segments.append((s.region_of[start], start, pos))
            start = pos
    return segments


def check_region_contiguity(region_of: List[int]) -> bool:
    """True when every region id occupies exactly one contiguous span."""
    closed = set()
    previous = None
    for region in region_of:
        if region != previous:
            if region in closed:
                return False
            if previous is not None:
                closed.add(previous)
            previous = region
    return True


def format_scan(s: ScanOrder) -> str:
    """One line per position: ``pos level path coord token_id region``."""
    lines = []
    for pos, node in enumerate(s.nodes):
        path = ".".join(str(p) for p in node.path)
        lines.append(f"{pos} {node.level} {path} {node.coord[0]},{node.coord[1]} {node.token_id} {node.root_index}")
    return "\n".join(lines)


def parse_scan_text(text: str) -> List[Tuple[int, int, Tuple[int, ...], Tuple[int, int], int, int]]:
    """Inverse of ``format_scan`` for one section."""
    rows = []
    for line in text.strip().splitlines():
        pos, level, path, coord, token_id, region = line.split()
        row, col = coord.split(",")
        rows.append((int(pos), int(level), tuple(int(p) for p in path.split(".")),
                     (int(row), int(col)), int(token_id), int(region)))
    return rows
