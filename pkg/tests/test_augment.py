from __future__ import annotations

import numpy as np
import pytest

from sparseseg.augment import (
    GlobalAugRanges,
    MixPolicy,
    frustummix,
    lasermix,
    polarmix_scene,
    random_global_aug,
    sample_global_transform,
)
from sparseseg.errors import InvalidInputError, InvalidSectorError, MissingLabelsError
from sparseseg.pointcloud import PointCloud, inclination

from conftest import random_cloud


def rows(*clouds):
    """Sorted (x, y, z, intensity, label) rows of the union of clouds."""
    stacked = np.vstack([
        np.column_stack([c.positions, c.intensity, c.labels]) for c in clouds if len(c)
    ] or [np.zeros((0, 5))])
    return stacked[np.lexsort(stacked.T[::-1])]


def at_azimuth(phis, r=5.0, z=0.0, label=0):
    phis = np.asarray(phis, dtype=float)
    pos = np.column_stack([r * np.cos(phis), r * np.sin(phis), np.full(phis.size, z)])
    return PointCloud(pos, np.zeros(phis.size), np.full(phis.size, label))


def operators(seed):
    return {
        "lasermix-inc": lambda a, b: lasermix(a, b, "inclination", (2, 3, 4, 5), seed),
        "lasermix-az": lambda a, b: lasermix(a, b, "azimuth", 4, seed),
        "frustummix": lambda a, b: frustummix(a, b, "inclination", (2, 3, 4, 5, 6), seed),
        "polarmix": lambda a, b: polarmix_scene(a, b, None, np.pi / 2, seed),
    }


class TestMixProperties:
    @pytest.mark.parametrize("seed", range(10))
    def test_conservation_disjointness_labels(self, seed):
        rng = np.random.default_rng(seed)
        a = random_cloud(rng, int(rng.integers(0, 200)), labeled=True)
        b = random_cloud(rng, int(rng.integers(0, 200)), labeled=True)
        for name, op in operators(seed).items():
            res = op(a, b)
            assert len(res.mixed_a) + len(res.mixed_b) == len(a) + len(b), name
            np.testing.assert_array_equal(rows(res.mixed_a, res.mixed_b), rows(a, b))
            # every source point is used exactly once across both outputs
            used = np.vstack([res.sources_a, res.sources_b])
            assert len({tuple(r) for r in used}) == len(used) == len(a) + len(b)
            for out, src in ((res.mixed_a, res.sources_a), (res.mixed_b, res.sources_b)):
                for k, (cid, row) in enumerate(src):
                    origin = (a, b)[cid]
                    assert out.labels[k] == origin.labels[row]
                    np.testing.assert_array_equal(out.positions[k], origin.positions[row])

    @pytest.mark.parametrize("name", ["lasermix-inc", "lasermix-az", "frustummix", "polarmix"])
    def test_deterministic(self, name, rng):
        a, b = random_cloud(rng, 150, labeled=True), random_cloud(rng, 150, labeled=True)
        r1, r2 = operators(7)[name](a, b), operators(7)[name](a, b)
        assert r1.mixed_a.positions.tobytes() == r2.mixed_a.positions.tobytes()
        assert r1.mixed_b.labels.tobytes() == r2.mixed_b.labels.tobytes()

    def test_unlabeled_rejected(self, rng):
        a = random_cloud(rng, 10, labeled=True)
        b = random_cloud(rng, 10, labeled=False)
        for op in operators(0).values():
            with pytest.raises(MissingLabelsError):
                op(a, b)


class TestLaserMix:
    def test_self_mix(self, rng):
        a = random_cloud(rng, 100, labeled=True)
        res = lasermix(a, a, num_bands=4)
        np.testing.assert_array_equal(rows(res.mixed_a), rows(a))
        np.testing.assert_array_equal(rows(res.mixed_b), rows(a))

    def test_two_bands_split_by_cloud(self):
        # a sits low (band 0), b sits high (band 1)
        a = PointCloud(np.array([[10.0, 0, -3.0], [10.0, 1, -2.5]]), np.zeros(2), np.array([0, 0]))
        b = PointCloud(np.array([[10.0, 0, 3.0], [10.0, 1, 2.5]]), np.zeros(2), np.array([1, 1]))
        res = lasermix(a, b, "inclination", 2)
        assert len(res.mixed_a) == 4 and len(res.mixed_b) == 0

    def test_band_edges_from_union_range(self, rng):
        a, b = random_cloud(rng, 50, labeled=True), random_cloud(rng, 50, labeled=True)
        res = lasermix(a, b, "inclination", 3)
        both = np.concatenate([inclination(a.positions), inclination(b.positions)])
        np.testing.assert_allclose(res.partition.boundaries[[0, -1]], [both.min(), both.max()])
        assert res.partition.count == 3

    def test_boundary_goes_to_higher_band(self):
        # azimuth edges for 4 bands: -pi, -pi/2, 0, pi/2, pi; phi = 0 is band 2 (even -> from a)
        a = at_azimuth([0.0], label=1)
        b = at_azimuth([0.0], label=2)
        res = lasermix(a, b, "azimuth", 4)
        assert res.mixed_a.labels.tolist() == [1]
        a = at_azimuth([-np.pi / 2], label=1)
        res = lasermix(a, at_azimuth([-np.pi / 2], label=2), "azimuth", 4)
        assert res.mixed_a.labels.tolist() == [2]  # band 1 is odd -> from b

    def test_band_count_validation(self, rng):
        a = random_cloud(rng, 5, labeled=True)
        with pytest.raises(InvalidInputError):
            lasermix(a, a, num_bands=1)


class TestFrustumMix:
    def test_matches_lasermix_with_fixed_count(self, rng):
        a, b = random_cloud(rng, 120, labeled=True), random_cloud(rng, 120, labeled=True)
        f, l = frustummix(a, b, "inclination", 4), lasermix(a, b, "inclination", 4)
        np.testing.assert_array_equal(f.sources_a, l.sources_a)
        np.testing.assert_array_equal(f.partition.boundaries, l.partition.boundaries)

    def test_randomized_count_recorded_and_reproducible(self, rng):
        a, b = random_cloud(rng, 60, labeled=True), random_cloud(rng, 60, labeled=True)
        counts = {frustummix(a, b, num_regions=(2, 3, 4, 5, 6), seed=s).partition.count for s in range(40)}
        assert counts == {2, 3, 4, 5, 6}
        assert frustummix(a, b, seed=9).partition.count == frustummix(a, b, seed=9).partition.count


class TestPolarMix:
    def test_seam_crossing_sector(self):
        eps = 1e-6
        # sector [3pi/4, 5pi/4) straddles the +-pi seam
        a = at_azimuth([np.pi - eps, -np.pi + eps, 0.0], label=1)
        b = at_azimuth([np.pi - eps, -np.pi + eps, 0.0], label=2)
        res = polarmix_scene(a, b, 3 * np.pi / 4, np.pi / 2)
        # inside points come from b, the outside point from a
        assert sorted(res.mixed_a.labels.tolist()) == [1, 2, 2]
        assert sorted(res.mixed_b.labels.tolist()) == [1, 1, 2]

    def test_sector_without_points(self):
        a = at_azimuth([0.1, 0.2], label=1)
        b = at_azimuth([0.3], label=2)
        res = polarmix_scene(a, b, np.pi / 2, np.pi / 4)
        np.testing.assert_array_equal(rows(res.mixed_a), rows(a))
        np.testing.assert_array_equal(rows(res.mixed_b), rows(b))

    def test_near_full_width_swaps_everything(self, rng):
        a, b = random_cloud(rng, 80, labeled=True), random_cloud(rng, 80, labeled=True)
        res = polarmix_scene(a, b, -np.pi, 2 * np.pi - 1e-12)
        np.testing.assert_array_equal(rows(res.mixed_a), rows(b))

    @pytest.mark.parametrize("width", [0.0, -1.0, 2 * np.pi, 7.0])
    def test_invalid_width(self, rng, width):
        a = random_cloud(rng, 5, labeled=True)
        with pytest.raises(InvalidSectorError):
            polarmix_scene(a, a, 0.0, width)


class TestGlobalAug:
    def test_identity_ranges(self, rng):
        c = random_cloud(rng, 50, labeled=True)
        out = random_global_aug(c, GlobalAugRanges.identity(), seed=3)
        np.testing.assert_array_equal(out.positions, c.positions)
        np.testing.assert_array_equal(out.labels, c.labels)

    def test_reproducible(self, rng):
        c = random_cloud(rng, 50, labeled=True)
        a, b = random_global_aug(c, seed=11), random_global_aug(c, seed=11)
        assert a.positions.tobytes() == b.positions.tobytes()

    def test_labels_and_intensity_pass_through(self, rng):
        c = random_cloud(rng, 50, labeled=True)
        out = random_global_aug(c, seed=2)
        np.testing.assert_array_equal(out.labels, c.labels)
        np.testing.assert_array_equal(out.intensity, c.intensity)

    def test_sampled_ranges(self):
        rng = np.random.default_rng(0)
        ranges = GlobalAugRanges()
        draws = [sample_global_transform(ranges, rng) for _ in range(1000)]
        scales = np.array([t.scale for t in draws])
        assert scales.min() >= 0.95 and scales.max() <= 1.05
        yaws = np.array([t.yaw for t in draws])
        assert yaws.min() >= -np.pi and yaws.max() < np.pi
        trans = np.array([t.translation for t in draws])
        assert np.abs(trans).max() <= 0.1
        flips = np.array([t.flip_x for t in draws])
        assert 0.4 < flips.mean() < 0.6


class TestMixPolicy:
    def test_picks_both_operators(self, rng):
        a, b = random_cloud(rng, 40, labeled=True), random_cloud(rng, 40, labeled=True)
        policy = MixPolicy()
        gen = np.random.default_rng(1)
        ops = {policy.apply(a, b, gen).partition.operator for _ in range(30)}
        assert ops == {"lasermix", "polarmix"}

    def test_probability_zero(self, rng):
        a = random_cloud(rng, 10, labeled=True)
        assert MixPolicy(prob=0.0).apply(a, a, np.random.default_rng(0)) is None

    def test_unknown_operator(self):
        with pytest.raises(InvalidInputError):
            MixPolicy(operators=("cutmix",))
