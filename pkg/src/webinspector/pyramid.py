"""Multi-scale averaging of sequential chunk bags.

Sixteen leaf bags are averaged pairwise into 8, then 4, 2 and 1 node,
giving 31 nodes ordered leaves first and root last.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np


@dataclass
class Pyramid:
    nodes: np.ndarray  # (..., n_nodes, dims)
    level_offsets: List[int]

    @property
    def n_leaves(self) -> int:
        return self.level_offsets[1] if len(self.level_offsets) > 1 else 1

    @property
    def leaves(self) -> np.ndarray:
        return self.nodes[..., : self.n_leaves, :]

    @property
    def root(self) -> np.ndarray:
        return self.nodes[..., -1, :]

    def level(self, i: int) -> np.ndarray:
        start = self.level_offsets[i]
        stop = self.level_offsets[i + 1] if i + 1 < len(self.level_offsets) else self.nodes.shape[-2]
        return self.nodes[..., start:stop, :]


def level_offsets(n_leaves: int) -> List[int]:
    if n_leaves < 1 or n_leaves & (n_leaves - 1):
        raise ValueError(f"leaf count must be a power of two, got {n_leaves}")
    offsets, start, width = [], 0, n_leaves
    while width >= 1:
        offsets.append(start)
        start += width
        width //= 2
    return offsets


def n_nodes(n_leaves: int) -> int:
    return 2 * n_leaves - 1


def pyramid_nodes(leaves: np.ndarray) -> np.ndarray:
    """Stack leaves and all coarser averaged levels along axis -2.

    Works on a single document ``(n_leaves, dims)`` or a batch
    ``(batch, n_leaves, dims)``.
    """
    leaves = np.asarray(leaves)
    level_offsets(leaves.shape[-2])  # validates
    levels = [leaves]
    cur = leaves
    while cur.shape[-2] > 1:
        cur = 0.5 * (cur[..., 0::2, :] + cur[..., 1::2, :])
        levels.append(cur)
    return np.concatenate(levels, axis=-2)


def build_pyramid(bags) -> Pyramid:
    """Build the pyramid from a ``ChunkedBags`` or a raw leaf array."""
    leaves = getattr(bags, "counts", bags)
    leaves = np.asarray(leaves)
    return Pyramid(pyramid_nodes(leaves), level_offsets(leaves.shape[-2]))
