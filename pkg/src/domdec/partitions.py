"""Basic and composite partitions of the X grid for domain decomposition.

The X grid is tiled into s^d pixel blocks (the basic partition). Two
composite partitions group 2^d adjacent blocks each: partition A starts
its windows at even block coordinates, partition B is shifted by one
block along every axis and padded at the boundary with empty virtual
blocks so that all composite windows share one shape. Each composite
partition is further split into 2^d staggered batches by block-lattice
parity, so no two cells in a batch touch.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from itertools import product

import numpy as np

from .measures import Box, Grid, GridMeasure

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BasicPartition:
    """Disjoint s^d node blocks covering the positive-mass nodes of X.

    Zero-mass nodes belong to no cell (cell_of_node holds -1); blocks
    whose nodes are all zero-mass are dropped entirely.
    """

    grid: Grid
    s: int
    cell_of_node: np.ndarray  # flat node index -> cell id, -1 where mu = 0
    nodes_of_cell: list  # flat indices of the positive-mass nodes per cell
    cell_boxes: list  # node-index window of each cell
    lattice_dims: tuple  # block-lattice shape, before dropping
    lattice_to_cell: np.ndarray  # block position -> cell id, -1 if dropped
    positions: np.ndarray  # (n_cells, d) block-lattice coordinate per cell
    masses: np.ndarray  # mu mass per cell, all positive

    @property
    def n_cells(self) -> int:
        return len(self.nodes_of_cell)

    @property
    def ndim(self) -> int:
        return len(self.lattice_dims)


@dataclass(frozen=True)
class CompositePartition:
    """Grouping of basic cells into 2^d-block composite cells.

    Member slots are row-major over the 2-per-axis window; slots that
    fall outside the block lattice (or on a dropped block) hold virtual
    padding ids >= n_basic, which carry no nodes and no mass.
    """

    label: str  # "A" or "B"
    cells: list  # member basic-cell ids per composite cell, padding included
    boxes: list  # node-index window per composite cell, one common shape
    positions: list  # composite-lattice coordinate per composite cell
    batches: list  # staggered groups of composite-cell indices
    n_basic: int

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def real_members(self, j: int) -> list:
        return [i for i in self.cells[j] if i < self.n_basic]


def build_basic_partition(mu: GridMeasure, s: int) -> BasicPartition:
    """Tile the grid of mu into s^d blocks, dropping zero-mass blocks."""
    grid = mu.grid
    dims = grid.dims
    if s < 1 or any(n % s for n in dims):
        raise ValueError(f"cell size {s} must divide the grid dims {dims}")
    lat = tuple(n // s for n in dims)
    mass = mu.mass
    flat_index = np.arange(mass.size).reshape(dims)
    lattice_to_cell = np.full(lat, -1, dtype=np.int64)
    nodes, boxes, masses, positions = [], [], [], []
    dropped = 0
    for pos in product(*(range(n) for n in lat)):
        sl = tuple(slice(p * s, (p + 1) * s) for p in pos)
        block = mass[sl]
        keep = block > 0
        if not keep.any():
            dropped += 1
            continue
        lattice_to_cell[pos] = len(nodes)
        nodes.append(flat_index[sl][keep].ravel())
        boxes.append(tuple((p * s, s) for p in pos))
        masses.append(float(block.sum()))
        positions.append(pos)
    if dropped:
        logger.warning("dropped %d of %d zero-mass basic cells", dropped, dropped + len(nodes))
    if not nodes:
        raise ValueError("no basic cell has positive mass")
    cell_of_node = np.full(mass.size, -1, dtype=np.int64)
    for cid, idx in enumerate(nodes):
        cell_of_node[idx] = cid
    return BasicPartition(
        grid=grid,
        s=s,
        cell_of_node=cell_of_node,
        nodes_of_cell=nodes,
        cell_boxes=boxes,
        lattice_dims=lat,
        lattice_to_cell=lattice_to_cell,
        positions=np.array(positions, dtype=np.int64).reshape(len(nodes), len(dims)),
        masses=np.asarray(masses),
    )


def _assemble_composite(basic: BasicPartition, starts_per_axis: list, label: str) -> CompositePartition:
    s = basic.s
    lat = basic.lattice_dims
    d = len(lat)
    next_pad = basic.n_cells
    cells, boxes, positions = [], [], []
    for cpos in product(*(range(len(st)) for st in starts_per_axis)):
        starts = tuple(starts_per_axis[k][cpos[k]] for k in range(d))
        members = []
        n_real = 0
        for offs in product(range(2), repeat=d):
            bpos = tuple(st + o for st, o in zip(starts, offs))
            cid = -1
            if all(0 <= p < n for p, n in zip(bpos, lat)):
                cid = int(basic.lattice_to_cell[bpos])
            if cid < 0:
                members.append(next_pad)
                next_pad += 1
            else:
                members.append(cid)
                n_real += 1
        if n_real == 0:
            continue
        cells.append(members)
        boxes.append(tuple((st * s, 2 * s) for st in starts))
        positions.append(cpos)
    part = CompositePartition(
        label=label, cells=cells, boxes=boxes, positions=positions, batches=[], n_basic=basic.n_cells
    )
    return CompositePartition(
        label=label,
        cells=cells,
        boxes=boxes,
        positions=positions,
        batches=build_staggered_batches(part, d),
        n_basic=basic.n_cells,
    )


def build_composite_partitions(basic: BasicPartition) -> tuple:
    """Group basic cells into the two staggered composite partitions A and B."""
    lat = basic.lattice_dims
    if any(n < 2 for n in lat):
        warnings.warn(
            "fewer than 2 basic cells along an axis; partitions degenerate to one global cell",
            stacklevel=2,
        )
        members = list(range(basic.n_cells))
        box = basic.grid.full_box()
        parts = []
        for label in ("A", "B"):
            parts.append(
                CompositePartition(
                    label=label,
                    cells=[members],
                    boxes=[box],
                    positions=[(0,) * len(lat)],
                    batches=[[0]],
                    n_basic=basic.n_cells,
                )
            )
        return parts[0], parts[1]
    starts_a = [list(range(0, n, 2)) for n in lat]
    starts_b = [list(range(-1, n, 2)) for n in lat]
    return (
        _assemble_composite(basic, starts_a, "A"),
        _assemble_composite(basic, starts_b, "B"),
    )


def build_staggered_batches(part: CompositePartition, ndim: int) -> list:
    """Split composite cells into 2^d batches by lattice parity.

    Cells in one batch never share an edge in the composite-cell
    lattice, so their subproblems touch disjoint dual variables.
    """
    groups = [[] for _ in range(2**ndim)]
    for j, pos in enumerate(part.positions):
        key = 0
        for k in range(ndim):
            key |= (pos[k] & 1) << k
        groups[key].append(j)
    return [g for g in groups if g]
