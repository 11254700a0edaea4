"""Hierarchical binary space partition over the occupied voxels.

The tree has ``3 * depth`` binary levels; the split axis cycles x, y, z from
the root down (level ``l`` splits on x when ``l % 3 == 0``).  Nodes at each
level are identified by their Morton-key prefix and stored in level-major
arrays, so siblings are adjacent and every node's points form a contiguous
range of the Morton-sorted cloud.  Only occupied children exist.

Blocks are the nodes at the target level; they carry the latents.  A block at
level ``L`` spans ``2^a x 2^b x 2^c`` voxels where ``a, b, c`` count the
remaining x/y/z splits below ``L``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pcio import VoxelizedPointCloud, morton_keys

__all__ = ["PartitionTree", "LevelLink", "build_tree", "block_of", "path_to_root"]


@dataclass(frozen=True)
class LevelLink:
    """Parent/child wiring between consecutive levels.

    ``branching`` lists parents with two occupied children (their left/right
    child indices and weights are aligned arrays); ``single_*`` list the
    pass-through chains.  Children of one parent are adjacent because both
    levels are prefix-sorted.
    """

    child_parent: np.ndarray  # (n_child,) parent index per child
    branching: np.ndarray  # (n_branch,) parent indices with two children
    left_child: np.ndarray  # (n_branch,)
    right_child: np.ndarray  # (n_branch,)
    w_left: np.ndarray  # (n_branch,) float64
    w_right: np.ndarray  # (n_branch,)
    single_parent: np.ndarray  # (n_single,)
    single_child: np.ndarray  # (n_single,)


@dataclass(frozen=True)
class PartitionTree:
    depth: int
    target_level: int
    point_count: int
    prefixes: list  # per level 0..L: (n_l,) int64 sorted Morton prefixes
    weights: list  # per level 0..L: (n_l,) int64 point counts
    starts: list  # per level 0..L: (n_l,) int64 start index into sorted points
    links: list  # per level 0..L-1: LevelLink
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def depth_binary(self) -> int:
        return 3 * self.depth

    @property
    def num_blocks(self) -> int:
        return self.prefixes[self.target_level].shape[0]

    @property
    def num_coefficients(self) -> int:
        """Root DC row plus one delta per branching node."""
        return 1 + sum(link.branching.shape[0] for link in self.links)

    def block_ranges(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-block [start, end) ranges into the Morton-sorted point array."""
        s = self.starts[self.target_level]
        e = np.empty_like(s)
        e[:-1] = s[1:]
        e[-1] = self.point_count
        return s, e

    def point_block(self) -> np.ndarray:
        """Block index of each point, in Morton point order."""
        s, e = self.block_ranges()
        return np.repeat(np.arange(self.num_blocks), e - s)

    def delta_levels(self) -> np.ndarray:
        """Level label of each delta coefficient row (canonical order).

        Deltas live at the child level: the delta produced when splitting a
        level-``l`` parent is labeled ``l + 1``.  Rows are level-major from the
        root down, Morton-ordered within a level.
        """
        counts = [link.branching.shape[0] for link in self.links]
        return np.repeat(np.arange(1, self.target_level + 1), counts)

    def axis_splits_below(self) -> tuple[int, int, int]:
        """Remaining x/y/z splits below the target level."""
        L = self.target_level
        a = self.depth - (L + 2) // 3
        b = self.depth - (L + 1) // 3
        c = self.depth - L // 3
        return a, b, c

    def block_side(self) -> np.ndarray:
        a, b, c = self.axis_splits_below()
        return np.array([1 << a, 1 << b, 1 << c], dtype=np.int64)

    def local_coords(self, positions: np.ndarray) -> np.ndarray:
        """Map voxel positions to in-block coordinates in [0, 1]^3.

        Corner-anchored with half-voxel centering: the voxel offset inside its
        block, plus 0.5, divided by the block side length per axis.
        """
        side = self.block_side()
        offset = np.asarray(positions, dtype=np.int64) % side
        return (offset + 0.5) / side


def build_tree(cloud: VoxelizedPointCloud, target_level: int) -> PartitionTree:
    if len(cloud) == 0:
        raise ValueError("cannot build a partition tree over an empty cloud")
    if not 0 <= target_level <= 3 * cloud.depth:
        raise ValueError(f"target_level must be in [0, {3 * cloud.depth}], got {target_level}")
    keys = morton_keys(cloud.positions, cloud.depth)
    n = keys.shape[0]
    nbits = 3 * cloud.depth

    prefixes, weights, starts = [], [], []
    for level in range(target_level + 1):
        pref = keys >> (nbits - level)
        first = np.empty(0, dtype=np.int64)
        if n:
            boundary = np.flatnonzero(np.diff(pref)) + 1
            first = np.concatenate(([0], boundary))
        prefixes.append(pref[first])
        starts.append(first)
        counts = np.diff(np.concatenate((first, [n])))
        weights.append(counts)

    links = []
    for level in range(target_level):
        parent_of_child = prefixes[level + 1] >> 1
        child_parent = np.searchsorted(prefixes[level], parent_of_child)
        n_parent = prefixes[level].shape[0]
        nchildren = np.bincount(child_parent, minlength=n_parent)
        branching = np.flatnonzero(nchildren == 2)
        first_child = np.searchsorted(child_parent, np.arange(n_parent))
        left = first_child[branching]
        right = left + 1
        single = np.flatnonzero(nchildren == 1)
        links.append(
            LevelLink(
                child_parent=child_parent,
                branching=branching,
                left_child=left,
                right_child=right,
                w_left=weights[level + 1][left].astype(np.float64),
                w_right=weights[level + 1][right].astype(np.float64),
                single_parent=single,
                single_child=first_child[single],
            )
        )

    return PartitionTree(
        depth=cloud.depth,
        target_level=target_level,
        point_count=n,
        prefixes=prefixes,
        weights=weights,
        starts=starts,
        links=links,
    )


def block_of(tree: PartitionTree, position) -> int | None:
    """Target-level block containing ``position``, or None if unoccupied."""
    pos = np.asarray(position, dtype=np.int64).reshape(1, 3)
    if pos.min() < 0 or pos.max() >= (1 << tree.depth):
        raise ValueError("position outside the voxel grid")
    key = morton_keys(pos, tree.depth)[0]
    pref = key >> (3 * tree.depth - tree.target_level)
    level = tree.prefixes[tree.target_level]
    i = int(np.searchsorted(level, pref))
    if i < level.shape[0] and level[i] == pref:
        return i
    return None


def path_to_root(tree: PartitionTree, block: int):
    """Root-to-leaf path of a block: (level, node, is_right_child, sibling weight).

    ``is_right_child`` is False at the root; sibling weight is None on levels
    entered through a single-child parent.
    """
    if not 0 <= block < tree.num_blocks:
        raise ValueError(f"invalid block id {block}")
    steps = []
    node = block
    for level in range(tree.target_level, 0, -1):
        link = tree.links[level - 1]
        parent = int(link.child_parent[node])
        is_right = bool(tree.prefixes[level][node] & 1)
        sibling = None
        pos = np.searchsorted(link.branching, parent)
        if pos < link.branching.shape[0] and link.branching[pos] == parent:
            sib_node = link.left_child[pos] if is_right else link.right_child[pos]
            sibling = int(tree.weights[level][sib_node])
        steps.append((level, node, is_right, sibling))
        node = parent
    steps.append((0, 0, False, None))
    return steps[::-1]
