"""Basic blocks, composite A/B groupings, and staggered batches."""

import logging
from itertools import product

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from domdec.measures import Grid, GridMeasure
from domdec.partitions import (
    BasicPartition,
    CompositePartition,
    build_basic_partition,
    build_composite_partitions,
    build_staggered_batches,
)


def make_measure(dims, mass=None):
    grid = Grid(dims=tuple(dims), dx=1.0 / max(dims), origin=(0.0,) * len(dims))
    if mass is None:
        mass = np.ones(dims)
    return GridMeasure(grid, np.asarray(mass, dtype=float))


def enumerate_windows(lat_dims, shifted):
    """Independent enumeration of composite windows over a block lattice.

    Returns one (start, n_inside) pair per window that contains at least
    one lattice position; `shifted` picks odd window starts from -1.
    """
    d = len(lat_dims)
    axis_starts = [
        list(range(-1, n, 2)) if shifted else list(range(0, n, 2)) for n in lat_dims
    ]
    out = []
    for starts in product(*axis_starts):
        inside = 0
        for offs in product(range(2), repeat=d):
            pos = tuple(s + o for s, o in zip(starts, offs))
            if all(0 <= p < n for p, n in zip(pos, lat_dims)):
                inside += 1
        if inside:
            out.append((starts, inside))
    return out


class TestBasicPartition:
    def test_1d_singletons(self):
        part = build_basic_partition(make_measure((32,)), s=1)
        assert part.n_cells == 32
        assert [list(n) for n in part.nodes_of_cell] == [[k] for k in range(32)]
        assert part.lattice_dims == (32,)

    def test_2d_8x8_s4(self):
        part = build_basic_partition(make_measure((8, 8)), s=4)
        assert part.n_cells == 4
        assert all(len(n) == 16 for n in part.nodes_of_cell)

    def test_2d_256_s4(self):
        part = build_basic_partition(make_measure((256, 256)), s=4)
        assert part.n_cells == 4096
        assert all(len(n) == 16 for n in part.nodes_of_cell)

    def test_row_major_enumeration(self):
        part = build_basic_partition(make_measure((4, 4)), s=2)
        assert part.cell_boxes == [
            ((0, 2), (0, 2)),
            ((0, 2), (2, 2)),
            ((2, 2), (0, 2)),
            ((2, 2), (2, 2)),
        ]

    def test_non_divisor_raises(self):
        with pytest.raises(ValueError):
            build_basic_partition(make_measure((10,)), s=4)

    def test_zero_block_dropped_with_diagnostic(self, caplog):
        mass = np.ones((8, 8))
        mass[0:4, 4:8] = 0.0
        with caplog.at_level(logging.WARNING, logger="domdec.partitions"):
            part = build_basic_partition(make_measure((8, 8), mass), s=4)
        assert part.n_cells == 3
        assert part.lattice_to_cell[0, 1] == -1
        assert "dropped 1" in caplog.text

    def test_zero_nodes_left_out_of_cells(self):
        mass = np.ones(8)
        mass[3] = 0.0
        part = build_basic_partition(make_measure((8,), mass), s=2)
        assert part.cell_of_node[3] == -1
        assert list(part.nodes_of_cell[1]) == [2]

    def test_all_zero_raises(self):
        with pytest.raises(ValueError):
            build_basic_partition(make_measure((4,), np.zeros(4)), s=2)

    @settings(max_examples=30, deadline=None)
    @given(
        seed=st.integers(0, 2**31),
        shape=st.sampled_from([(8,), (16,), (4, 6), (8, 8)]),
        s=st.sampled_from([1, 2]),
    )
    def test_disjoint_cover_of_positive_nodes(self, seed, shape, s):
        rng = np.random.default_rng(seed)
        mass = rng.uniform(0, 1, shape) * (rng.uniform(0, 1, shape) > 0.4)
        assume(mass.any())
        part = build_basic_partition(make_measure(shape, mass), s=s)
        seen = np.concatenate([np.asarray(n) for n in part.nodes_of_cell])
        assert len(seen) == len(set(seen.tolist()))
        np.testing.assert_array_equal(np.sort(seen), np.flatnonzero(mass.ravel() > 0))
        assert (part.masses > 0).all()


class TestCompositePartitions:
    def test_1d_32_counts(self):
        basic = build_basic_partition(make_measure((32,)), s=1)
        a, b = build_composite_partitions(basic)
        assert a.n_cells == 16
        assert all(len(a.real_members(j)) == 2 for j in range(16))
        assert b.n_cells == 17
        real_counts = [len(b.real_members(j)) for j in range(17)]
        assert real_counts == [1] + [2] * 15 + [1]

    def test_2d_4x4_counts(self):
        basic = build_basic_partition(make_measure((8, 8)), s=2)
        assert basic.lattice_dims == (4, 4)
        a, b = build_composite_partitions(basic)
        assert a.n_cells == 4
        assert b.n_cells == 9

    def test_2d_4x4_matches_window_oracle(self):
        basic = build_basic_partition(make_measure((8, 8)), s=2)
        _, b = build_composite_partitions(basic)
        oracle = enumerate_windows((4, 4), shifted=True)
        assert b.n_cells == len(oracle)
        for j, (starts, inside) in enumerate(oracle):
            assert len(b.real_members(j)) == inside
            assert b.boxes[j] == tuple((st * 2, 4) for st in starts)

    def test_2d_2x2_counts(self):
        basic = build_basic_partition(make_measure((4, 4)), s=2)
        a, b = build_composite_partitions(basic)
        assert a.n_cells == 1
        assert len(a.real_members(0)) == 4
        assert b.n_cells == 4
        assert all(len(b.real_members(j)) == 1 for j in range(4))

    def test_each_basic_cell_in_exactly_one_composite(self):
        basic = build_basic_partition(make_measure((8, 8)), s=2)
        for part in build_composite_partitions(basic):
            members = [i for j in range(part.n_cells) for i in part.real_members(j)]
            assert sorted(members) == list(range(basic.n_cells))

    def test_padding_ids_are_virtual(self):
        basic = build_basic_partition(make_measure((4, 4)), s=2)
        _, b = build_composite_partitions(basic)
        pads = [i for j in range(b.n_cells) for i in b.cells[j] if i >= b.n_basic]
        assert len(pads) == 4 * 3
        assert len(set(pads)) == len(pads)

    def test_uniform_window_shape_and_shifted_start(self):
        basic = build_basic_partition(make_measure((32,)), s=1)
        a, b = build_composite_partitions(basic)
        assert all(box == ((2 * j, 2),) for j, box in enumerate(a.boxes))
        assert b.boxes[0] == ((-1, 2),)
        assert all(ext == 2 for box in b.boxes for _, ext in box)

    def test_dropped_block_becomes_padding(self):
        mass = np.ones(8)
        mass[2:4] = 0.0
        basic = build_basic_partition(make_measure((8,), mass), s=2)
        assert basic.n_cells == 3
        a, _ = build_composite_partitions(basic)
        assert a.n_cells == 2
        assert len(a.real_members(0)) == 1

    def test_single_cell_degenerates_with_warning(self):
        basic = build_basic_partition(make_measure((4,)), s=4)
        with pytest.warns(UserWarning, match="degenerate"):
            a, b = build_composite_partitions(basic)
        for part in (a, b):
            assert part.n_cells == 1
            assert part.real_members(0) == [0]
            assert part.batches == [[0]]


class TestStaggeredBatches:
    def test_1d_16_cells_two_batches(self):
        basic = build_basic_partition(make_measure((32,)), s=1)
        a, _ = build_composite_partitions(basic)
        assert len(a.batches) == 2
        assert sorted(map(len, a.batches)) == [8, 8]
        assert a.batches[0] == list(range(0, 16, 2))

    def test_2d_4x4_composite_four_batches(self):
        basic = build_basic_partition(make_measure((16, 16)), s=2)
        a, _ = build_composite_partitions(basic)
        assert a.n_cells == 16
        assert len(a.batches) == 4
        assert all(len(g) == 4 for g in a.batches)

    def test_batches_cover_and_disjoint(self):
        basic = build_basic_partition(make_measure((8, 8)), s=2)
        for part in build_composite_partitions(basic):
            flat = [j for g in part.batches for j in g]
            assert sorted(flat) == list(range(part.n_cells))

    @settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(0, 2**31),
        lat=st.sampled_from([(5,), (8,), (3, 4), (4, 4), (5, 7)]),
        drop=st.floats(0.0, 0.5),
    )
    def test_no_adjacent_cells_within_a_batch(self, seed, lat, drop):
        rng = np.random.default_rng(seed)
        mask = rng.uniform(0, 1, lat) > drop
        assume(mask.any())
        mass = np.kron(mask.astype(float), np.ones((2,) * len(lat)))
        basic = build_basic_partition(make_measure(mass.shape, mass), s=2)
        for part in build_composite_partitions(basic):
            for g in part.batches:
                for u in range(len(g)):
                    for v in range(u + 1, len(g)):
                        pu, pv = part.positions[g[u]], part.positions[g[v]]
                        dist = sum(abs(x - y) for x, y in zip(pu, pv))
                        assert dist != 1

    def test_recomputed_batches_match_stored(self):
        basic = build_basic_partition(make_measure((8, 8)), s=2)
        a, b = build_composite_partitions(basic)
        assert build_staggered_batches(a, 2) == a.batches
        assert build_staggered_batches(b, 2) == b.batches
