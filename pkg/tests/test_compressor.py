import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from c2gnet.compressor import (
    PRIORITY_TABLE,
    BatchStats,
    Disposition,
    bin_objects,
    compress,
    compress_batch,
    compress_detailed,
    estimate_grid_spacing,
    priority_shift,
    round_half_away,
    sector,
)
from c2gnet.core import ObjectImage
from c2gnet.errors import EmptyBatch, MixedChannelCounts, NonPositiveDensity
from c2gnet.synth import SynthSpec, generate

from oracles import brute_force_priority_shift, check_compression_invariants, neighbour_order, octant


def make_image(coords, w, h, p=2, rng=None):
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    rng = rng or np.random.default_rng(0)
    return ObjectImage(coords, rng.uniform(0.1, 1.0, (len(coords), p)), w, h, id="t")


class TestGridSpacing:
    def test_single_image(self):
        assert estimate_grid_spacing([1 / 100]) == 5.0

    def test_paper_aggregate_density(self):
        d = estimate_grid_spacing([4149 / 338688])
        assert d == pytest.approx(0.5 * math.sqrt(338688 / 4149))
        assert d == pytest.approx(4.5175, abs=5e-4)
        assert estimate_grid_spacing([4149 / 338688], round_to_int=True) == 5.0

    def test_mean_of_roots(self):
        assert abs(estimate_grid_spacing(BatchStats((1 / 64, 1 / 144))) - 5.0) < 1e-12

    def test_errors(self):
        with pytest.raises(EmptyBatch):
            estimate_grid_spacing([])
        with pytest.raises(NonPositiveDensity):
            estimate_grid_spacing([0.01, 0.0])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(1e-4, 10.0), min_size=1, max_size=8), st.floats(1.001, 10.0))
    def test_monotone(self, densities, factor):
        assert estimate_grid_spacing([r * factor for r in densities]) < estimate_grid_spacing(densities)


class TestBinning:
    def test_half_up(self):
        assert round_half_away(1.5) == 2 and round_half_away(2.5) == 3 and round_half_away(0.48) == 0
        binned = bin_objects(make_image([(7.5, 2.4)], 20, 20), 5.0)
        assert binned == {(2, 0): [0]}

    def test_origin(self):
        for d in (0.5, 3.0, 7.0):
            assert bin_objects(make_image([(0, 0)], 20, 20), d) == {(0, 0): [0]}

    def test_conflict_example(self):
        binned = bin_objects(make_image([(12.0, 12.0), (11.0, 11.0)], 30, 30), 5.0)
        assert binned == {(2, 2): [0, 1]}
        assert math.dist((12, 12), (11, 11)) < 5 * math.sqrt(2)

    def test_rounds_rather_than_truncates(self):
        # 13 / 5 = 2.6 goes to node 3, so this pair does not conflict
        binned = bin_objects(make_image([(12.0, 12.0), (13.0, 13.0)], 30, 30), 5.0)
        assert binned == {(2, 2): [0], (3, 3): [1]}

    def test_far_edge_clamped(self):
        # y = 503 rounds to node 101 but the 504 um extent has 101 grid lines
        binned = bin_objects(make_image([(1.0, 503.0)], 672, 504), 5.0)
        assert binned == {(0, 100): [0]}

    def test_every_object_once(self):
        rng = np.random.default_rng(3)
        img = make_image(rng.uniform(0, 40, (300, 2)), 40, 40)
        binned = bin_objects(img, 5.0)
        assert sorted(i for v in binned.values() for i in v) == list(range(300))


# atan2 loses the sign of the angle offset for components below ~1e-16
OFFSET = st.one_of(st.just(0.0), st.floats(1e-6, 3), st.floats(-3, -1e-6))


class TestPriorityTable:
    def test_matches_angular_ordering(self):
        for o in range(8):
            assert list(PRIORITY_TABLE[o]) == neighbour_order(o)

    def test_each_row_is_permutation(self):
        for row in PRIORITY_TABLE:
            assert sorted(row) == sorted({(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)} - {(0, 0)})

    @settings(max_examples=500, deadline=None)
    @given(OFFSET, OFFSET)
    def test_sector_matches_atan2(self, dx, dy):
        # atan2 rounding cannot resolve offsets a few ulps off a diagonal
        assume(abs(dx) == abs(dy) or abs(abs(dx) - abs(dy)) > 1e-9)
        assert sector(dx, dy) == octant(dx, dy)

    def test_sector_boundaries(self):
        assert [sector(1, 0), sector(1, 1), sector(0, 1), sector(-1, 1)] == [0, 1, 2, 3]
        assert [sector(-1, 0), sector(-1, -1), sector(0, -1), sector(1, -1)] == [4, 5, 6, 7]
        assert sector(0, 0) == 0

    def test_first_choice_is_nearest_neighbour(self):
        # inside a node's cell the axis neighbour of the sector is always nearest
        rng = np.random.default_rng(0)
        for dx, dy in rng.uniform(-0.5, 0.5, (2000, 2)):
            dists = {o: math.dist((dx, dy), o) for o in PRIORITY_TABLE[0]}
            assert dists[PRIORITY_TABLE[sector(dx, dy)][0]] == pytest.approx(min(dists.values()))


class TestPriorityShift:
    def run(self, coords, w, h, d=5.0):
        img = make_image(coords, w, h)
        res = compress_detailed(img, d)
        return res.assignments

    def test_two_objects_sector0(self):
        a = self.run([(10.2, 10.1), (11.5, 10.5)], 30, 30)
        assert a[0].disposition is Disposition.KEPT and a[0].node == (2, 2)
        assert a[1].disposition is Disposition.SHIFTED and a[1].node == (3, 2)

    def test_two_objects_sector1(self):
        a = self.run([(10.5, 12.0), (10.1, 9.9)], 30, 30)
        assert a[1].node == (2, 2)
        assert a[0].node == (2, 3)  # N

    def test_two_objects_sector3_and_5(self):
        a = self.run([(10.0, 10.0), (8.0, 11.0), (9.0, 8.0)], 30, 30)
        assert a[1].node == (1, 2)  # W
        assert a[2].node == (2, 1)  # sector 5 (225-270): S

    def test_preferred_taken_falls_through(self):
        # E neighbour (3,2) already occupied -> next in sector 0 row is NE
        a = self.run([(10.0, 10.0), (11.5, 10.5), (15.0, 10.0)], 30, 30)
        assert a[2].node == (3, 2) and a[2].disposition is Disposition.KEPT
        assert a[1].node == (3, 3)

    def test_full_neighbourhood_deletes(self):
        ring = [(5 + 5 * ox, 5 + 5 * oy) for ox in (-1, 0, 1) for oy in (-1, 0, 1) if (ox, oy) != (0, 0)]
        rng = np.random.default_rng(0)
        center = 5 + rng.uniform(-2, 2, (10, 2))
        a = self.run(ring + center.tolist(), 15, 15)
        disp = [x.disposition for x in a[8:]]
        assert disp.count(Disposition.KEPT) == 1
        assert disp.count(Disposition.DELETED) == 9

    def test_boundary_node_has_fewer_neighbours(self):
        a = self.run([(0.1, 0.1), (0.5, 0.2), (0.2, 0.5), (0.4, 0.4), (1.0, 1.0)], 30, 30)
        nodes = [x.node for x in a if x.node is not None]
        assert len(nodes) == len(set(nodes)) == 4
        assert sum(x.disposition is Disposition.DELETED for x in a) == 1

    def test_distance_tie_goes_to_lower_index(self):
        a = self.run([(11.0, 10.0), (9.0, 10.0)], 30, 30)
        assert a[0].disposition is Disposition.KEPT
        assert a[1].node == (1, 2)


@pytest.mark.parametrize("seed", range(40))
def test_oracle_equivalence_6x6(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 201))
    img = make_image(rng.uniform(0, 30, (n, 2)), 30, 30, rng=rng)
    res = compress_detailed(img, 5.0)
    disp, nodes = brute_force_priority_shift(img.coords, 5.0, 6, 6)
    assert [x.disposition.value for x in res.assignments] == disp
    assert [x.node for x in res.assignments] == nodes
    check_compression_invariants(img, res, 5.0)


def test_priority_shift_direct_call():
    img = make_image([(10.2, 10.1), (11.5, 10.5)], 30, 30)
    out = priority_shift(bin_objects(img, 5.0), img.coords, (6, 6), 5.0)
    assert [x.disposition for x in out] == [Disposition.KEPT, Disposition.SHIFTED]


class TestCompress:
    def test_paper_plane(self):
        img = make_image([(1, 1)], 672, 504, p=6)
        assert compress(img, 5.0).spec.shape == (135, 101, 6)

    def test_fig2_region(self):
        img = make_image([(1, 1), (49.9, 49.9)], 50, 50, p=6)
        out = compress(img, 5.0)
        assert (out.spec.kx, out.spec.ky) == (10, 10)
        assert (100 * 100) / (out.spec.kx * out.spec.ky) == 100

    def test_empty(self):
        img = ObjectImage(np.zeros((0, 2)), np.zeros((0, 6)), 50.0, 50.0)
        out = compress(img, 5.0)
        assert not out.data.any() and not out.occupancy.any()
        assert out.meta["kept"] == 0 and out.meta["deleted"] == 0

    def test_meta_counts(self):
        rng = np.random.default_rng(9)
        img = make_image(rng.uniform(0, 40, (150, 2)), 40, 40)
        out = compress(img, 5.0)
        assert out.meta["kept"] == out.n_occupied == 150 - out.meta["deleted"]


class TestBatch:
    def images(self, n=3, seed=0):
        spec = SynthSpec(width_um=100, height_um=80)
        return generate(spec, n, seed)

    def test_batch_of_one(self):
        img = self.images(1)[0]
        out, rep = compress_batch([img])
        d = estimate_grid_spacing([img.density])
        assert rep.d_um == d and rep.d_estimated
        assert out[0].equals(compress(img, d))

    def test_identical_images(self):
        img = self.images(1)[0]
        out, _ = compress_batch([img, img, img], d_override=4.0)
        assert out[0].equals(out[1]) and out[1].equals(out[2])

    def test_override(self):
        out, rep = compress_batch(self.images(2), d_override=6.0)
        assert rep.d_um == 6.0 and not rep.d_estimated
        assert all(o.spec.d_um == 6.0 for o in out)
        t = rep.totals()
        assert t["kept"] + t["deleted"] == t["objects_in"]

    def test_parallel_matches_serial(self):
        imgs = self.images(2)
        a, _ = compress_batch(imgs, jobs=1)
        b, _ = compress_batch(imgs, jobs=2)
        assert all(x.equals(y) for x, y in zip(a, b))

    def test_mixed_channels(self):
        a = make_image([(1, 1)], 10, 10, p=2)
        b = make_image([(1, 1)], 10, 10, p=3)
        with pytest.raises(MixedChannelCounts):
            compress_batch([a, b])

    def test_deletion_budget_at_estimated_spacing(self):
        for seed in range(3):
            imgs = generate(SynthSpec(), 2, seed)
            _, rep = compress_batch(imgs)
            t = rep.totals()
            assert t["deleted"] / t["objects_in"] < 0.05
