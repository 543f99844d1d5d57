"""Multi-resolution patch tree: level-1 regions recursively containing finer patches."""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Tuple

from packages.helpers.errors import StructureError

Path = Tuple[int, ...]
Coord = Tuple[int, int]


@dataclass(frozen=True)
class PatchNode:
    level: int
    path: Path
    coord: Coord
    token_id: int

    @property
    def root_index(self) -> int:
        return self.path[0]

    @property
    def child_index(self) -> int:
        return self.path[-1]


@dataclass
class PatchHierarchy:
    n_levels: int
    roots: List[PatchNode]
    children: Dict[Path, List[PatchNode]] = field(default_factory=dict)
    nodes: Dict[Path, PatchNode] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.nodes)

    def children_of(self, node: PatchNode) -> List[PatchNode]:
        return self.children.get(node.path, [])

    def by_token(self) -> Dict[int, PatchNode]:
        return {node.token_id: node for node in self.nodes.values()}


def build_hierarchy(records: Iterable[Tuple[int, Path, Coord, int]], n_levels: int) -> PatchHierarchy:
    """
    Validate patch records and link them into a tree.

    Args:
        records: (level, path, coord, token_id) per patch; level 1 is coarsest
        n_levels: Number of resolution levels R

    Returns:
        PatchHierarchy: Roots in ascending root index, children in ascending child index

    Raises:
        StructureError: Bad level, path/level mismatch, duplicates or orphan nodes
    """
    if n_levels < 1:
        raise StructureError(f"number of levels must be positive, got {n_levels}")
    nodes: Dict[Path, PatchNode] = {}
    token_ids = set()
    for level, path, coord, token_id in records:
        path = tuple(int(p) for p in path)
        if not 1 <= level <= n_levels:
            raise StructureError(f"patch {path} has level {level} outside [1, {n_levels}]")
        if len(path) != level:
            raise StructureError(f"patch {path} has level {level} but path length {len(path)}")
        if path in nodes:
            raise StructureError(f"duplicate patch path {path}")
        if token_id in token_ids:
            raise StructureError(f"duplicate token id {token_id} at path {path}")
        token_ids.add(token_id)
        nodes[path] = PatchNode(level=int(level), path=path, coord=(int(coord[0]), int(coord[1])),
                                token_id=int(token_id))

    roots = []
    children: Dict[Path, List[PatchNode]] = {}
    for path, node in nodes.items():
        if node.level == 1:
            roots.append(node)
            continue
        parent = path[:-1]
        if parent not in nodes:
            raise StructureError(f"orphan patch {path}: parent {parent} is missing")
        children.setdefault(parent, []).append(node)

    roots.sort(key=lambda n: n.path)
    for siblings in children.values():
        siblings.sort(key=lambda n: n.child_index)
    return PatchHierarchy(n_levels=n_levels, roots=roots, children=children, nodes=nodes)
