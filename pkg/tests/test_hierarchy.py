import numpy as np
import pytest

from packages.helpers.errors import ContractError, StructureError
from packages.hierarchy.patch_hierarchy import build_hierarchy
from packages.hierarchy.scan_order import (
    check_region_contiguity, expand_node, format_scan, parse_scan_text, region_nested_scan, region_segments,
    resolution_ordered_scan,
)
from tests.helpers import hierarchy_input, random_tree_records

NESTED_PATHS = [(1,), (1, 1), (1, 1, 1), (1, 1, 2), (1, 2), (1, 2, 1), (1, 2, 2),
                (2,), (2, 1), (2, 1, 1), (2, 1, 2), (2, 2), (2, 2, 1), (2, 2, 2)]


@pytest.fixture
def hierarchy():
    return build_hierarchy(hierarchy_input(), 3)


class TestBuildHierarchy:
    def test_flat(self):
        h = build_hierarchy([(1, (2,), (0, 1), 0), (1, (1,), (0, 0), 1)], 1)
        assert [n.path for n in h.roots] == [(1,), (2,)]
        assert h.children == {}

    def test_two_by_two_by_two(self, hierarchy):
        assert len(hierarchy) == 14
        assert len(hierarchy.roots) == 2
        assert [c.path for c in hierarchy.children_of(hierarchy.roots[0])] == [(1, 1), (1, 2)]

    def test_orphan_names_path(self):
        records = [(1, (1,), (0, 0), 0), (3, (1, 2, 1), (0, 1), 1)]
        with pytest.raises(StructureError, match=r"\(1, 2, 1\)"):
            build_hierarchy(records, 3)

    @pytest.mark.parametrize("records,n_levels", [
        ([(1, (1,), (0, 0), 0), (1, (1,), (0, 1), 1)], 1),     # duplicate path
        ([(2, (1, 1), (0, 0), 0)], 1),                          # level above R
        ([(1, (1, 1), (0, 0), 0)], 2),                          # path length != level
    ])
    def test_malformed_records(self, records, n_levels):
        with pytest.raises(StructureError):
            build_hierarchy(records, n_levels)

    def test_children_sorted_regardless_of_record_order(self):
        h = build_hierarchy(list(reversed(hierarchy_input())), 3)
        assert [n.path for n in region_nested_scan(h).nodes] == NESTED_PATHS


class TestScans:
    def test_region_nested_pattern(self, hierarchy):
        scan = region_nested_scan(hierarchy)
        assert [n.path for n in scan.nodes] == NESTED_PATHS
        assert scan.region_of == [1] * 7 + [2] * 7

    def test_resolution_ordered_groups_levels(self, hierarchy):
        scan = resolution_ordered_scan(hierarchy)
        assert scan.level_of == [1] * 2 + [2] * 4 + [3] * 8
        assert sorted(scan.order) == list(range(14))

    def test_single_level_scans_agree(self):
        h = build_hierarchy(hierarchy_input(fanouts=(), n_roots=4), 1)
        assert region_nested_scan(h).order == resolution_ordered_scan(h).order
        assert region_nested_scan(h).order == [0, 1, 2, 3]

    def test_segments(self, hierarchy):
        assert region_segments(region_nested_scan(hierarchy)) == [(1, 0, 7), (2, 7, 14)]
        single = build_hierarchy(hierarchy_input(n_roots=1), 3)
        assert region_segments(region_nested_scan(single)) == [(1, 0, 7)]
        with pytest.raises(ContractError):
            region_segments(resolution_ordered_scan(hierarchy))

    def test_expand_node_is_subtree_scan(self, hierarchy):
        child = hierarchy.children_of(hierarchy.roots[1])[0]
        assert [n.path for n in expand_node(hierarchy, child)] == [(2, 1), (2, 1, 1), (2, 1, 2)]

    def test_format_and_parse(self, hierarchy):
        scan = region_nested_scan(hierarchy)
        text = format_scan(scan)
        assert len(text.splitlines()) == 14
        rows = parse_scan_text(text)
        assert [r[2] for r in rows] == NESTED_PATHS
        assert [r[4] for r in rows] == scan.order
        assert check_region_contiguity([r[5] for r in rows])

    def test_contiguity_checker(self):
        assert check_region_contiguity([1, 1, 2, 2, 3])
        assert not check_region_contiguity([1, 2, 1])


@pytest.mark.parametrize("seed", range(10))
def test_random_hierarchy_scan_properties(seed):
    rng = np.random.default_rng(1234 + seed)
    for trial in range(100):
        records, n_levels = random_tree_records(rng)
        h = build_hierarchy(records, n_levels)
        nested = region_nested_scan(h)
        by_level = resolution_ordered_scan(h)
        n = len(records)
        assert sorted(nested.order) == list(range(n))
        assert sorted(by_level.order) == list(range(n))
        assert check_region_contiguity(nested.region_of)
        assert all(a <= b for a, b in zip(by_level.level_of, by_level.level_of[1:]))

        # every node precedes a contiguous block holding exactly its descendants
        position = {node.path: pos for pos, node in enumerate(nested.nodes)}
        for node in (nested.nodes if trial < 20 else h.roots):
            depth = len(node.path)
            block = sorted(position[p] for p in h.nodes if p[:depth] == node.path)
            start = position[node.path]
            assert block == list(range(start, start + len(block)))

        segments = region_segments(nested)
        assert segments[0][1] == 0
        assert segments[-1][2] == n
        for (_, _, end), (_, start, _) in zip(segments, segments[1:]):
            assert end == start
        for pos, node in enumerate(nested.nodes):
            assert nested.level_of[pos] == node.level
            assert nested.region_of[pos] == node.path[0]
