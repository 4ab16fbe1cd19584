"""The four dataflows against two independent references.

``loop_reference`` is a per-output Python loop over a coordinate dict; the dense
oracle is itself checked against hand convolutions before it is trusted.
"""

from __future__ import annotations

import numpy as np
import pytest

from sparseseg.errors import InconsistentMapError, InvalidSpecError
from sparseseg.ingest import SynthSceneConfig, synth_scene
from sparseseg.rasterize import VoxelizationConfig, voxelize
from sparseseg.sparse import (
    DATAFLOWS,
    KERNELS,
    ConvSpec,
    DenseGrid,
    SparseTensor,
    build_kernel_map,
    compare_with_oracle,
    conv_dense_oracle,
    conv_fetch_on_demand,
    conv_gather_scatter,
    conv_grouped_symmetric,
    conv_implicit_sorted,
    densify,
    enumerate_offsets,
    output_coords,
    relative_error,
    run_dataflow,
)
from sparseseg.sparse.dataflows import padded_macs
from sparseseg.sparse.kmap import NeighborBitmask, build_bitmasks

from conftest import random_coords, random_instance


def loop_reference(x: SparseTensor, spec: ConvSpec) -> np.ndarray:
    """out[i] = sum over delta of x[s * out_i + delta] @ W[delta], one output at a time."""
    feats = {tuple(c): f for c, f in zip(x.coords.tolist(), x.features.astype(np.float64))}
    out_coords = output_coords(x.coords, spec)
    offs = enumerate_offsets(spec.kernel_size, spec.ndim).offsets
    out = np.zeros((len(out_coords), spec.c_out))
    for i, c in enumerate(out_coords):
        for k, d in enumerate(offs):
            f = feats.get(tuple(spec.stride * c + d))
            if f is not None:
                out[i] += f @ spec.weights[k]
    return out


def run(name, x, spec, kmap):
    return run_dataflow(name, x, spec, kmap)[0]


class TestDenseOracle:
    def test_identity_kernel(self, rng):
        grid = DenseGrid(rng.standard_normal((4, 5, 6, 3)), np.zeros(3, dtype=np.int64))
        spec = ConvSpec(1, 3, 1, np.eye(3)[None])
        out = conv_dense_oracle(grid, spec)
        np.testing.assert_array_equal(out.values, grid.values)

    def test_one_dimensional_hand_example(self):
        a, b, c = 2.0, 3.0, 5.0
        grid = DenseGrid(np.array([[0.0], [1.0], [0.0]]), np.array([0]))
        spec = ConvSpec(3, 1, 1, np.array([a, b, c]).reshape(3, 1, 1))
        out = conv_dense_oracle(grid, spec)
        # out[i] = a*x[i-1] + b*x[i] + c*x[i+1]; x = [0,1,0] at cells 0..2
        assert out.at(np.array([[1]]))[0, 0] == b
        assert out.at(np.array([[0]]))[0, 0] == c
        assert out.at(np.array([[2]]))[0, 0] == a

    def test_linearity(self, rng):
        grid = DenseGrid(rng.standard_normal((5, 5, 5, 2)), np.array([-2, 0, 1]))
        spec = ConvSpec(3, 3, 2, rng.standard_normal((27, 2, 3)))
        scaled = DenseGrid(2.5 * grid.values, grid.origin)
        np.testing.assert_allclose(
            conv_dense_oracle(scaled, spec).values, 2.5 * conv_dense_oracle(grid, spec).values, atol=1e-12
        )

    @pytest.mark.parametrize("seed", range(10))
    def test_agrees_with_loop_reference(self, seed):
        rng = np.random.default_rng(seed)
        x, spec, _ = random_instance(rng, grid=7, nnz=40)
        ref = loop_reference(x, spec)
        oracle = conv_dense_oracle(densify(x), spec)
        np.testing.assert_allclose(oracle.at(output_coords(x.coords, spec)), ref, atol=1e-10)


class TestDataflowsAgainstOracle:
    @pytest.mark.parametrize("name", DATAFLOWS)
    @pytest.mark.parametrize("seed", range(15))
    def test_random_instances(self, name, seed):
        rng = np.random.default_rng(1000 + seed)
        x, spec, kmap = random_instance(rng)
        out = run(name, x, spec, kmap)
        oracle = conv_dense_oracle(densify(x), spec)
        assert compare_with_oracle(out, oracle) <= 1e-5

    @pytest.mark.parametrize("name", DATAFLOWS)
    def test_matches_loop_reference(self, name, rng):
        for _ in range(5):
            x, spec, kmap = random_instance(rng, grid=6, nnz=30)
            np.testing.assert_allclose(run(name, x, spec, kmap).features, loop_reference(x, spec), atol=1e-10)

    @pytest.mark.parametrize("name", DATAFLOWS)
    def test_two_dimensional(self, name, rng):
        x, spec, kmap = random_instance(rng, grid=10, nnz=50, ndim=2, kernel_size=3, stride=1)
        np.testing.assert_allclose(run(name, x, spec, kmap).features, loop_reference(x, spec), atol=1e-10)


class TestDataflowContracts:
    def test_k1_identity(self, rng):
        c = random_coords(rng, 8, 30)
        x = SparseTensor(c, rng.standard_normal((len(c), 4)))
        spec = ConvSpec(1, 3, 1, np.eye(4)[None], True)
        km = build_kernel_map(c, c, spec)
        for name in DATAFLOWS:
            np.testing.assert_array_equal(run(name, x, spec, km).features, x.features)

    def test_zero_features(self, rng):
        x, spec, km = random_instance(rng, c_in=3)
        x = x.replace_features(np.zeros_like(x.features))
        for name in DATAFLOWS:
            assert not run(name, x, spec, km).features.any()

    def test_empty_tensor(self):
        x = SparseTensor(np.zeros((0, 3), dtype=np.int64), np.zeros((0, 2)))
        spec = ConvSpec(3, 3, 1, np.ones((27, 2, 2)), True)
        km = build_kernel_map(x.coords, x.coords, spec)
        for name in DATAFLOWS:
            out = run(name, x, spec, km)
            assert len(out) == 0 and out.features.shape == (0, 2)

    def test_single_neighbor_exact(self, rng):
        x = SparseTensor(np.array([[0, 0, 0]]), rng.standard_normal((1, 3)))
        spec = ConvSpec(3, 3, 1, rng.standard_normal((27, 3, 2)), True)
        km = build_kernel_map(x.coords, x.coords, spec)
        expected = x.features @ spec.weights[13]
        assert np.array_equal(conv_fetch_on_demand(x, spec, km).features, expected)
        assert np.array_equal(conv_gather_scatter(x, spec, km).features, expected)

    def test_channel_mismatch(self, rng):
        x, spec, km = random_instance(rng, c_in=3)
        bad = x.replace_features(np.zeros((len(x), 2)))
        for name in DATAFLOWS:
            with pytest.raises(InvalidSpecError):
                run(name, bad, spec, km)

    def test_map_for_other_tensor(self, rng):
        x, spec, km = random_instance(rng, grid=8, nnz=20, c_in=2)
        other = SparseTensor(random_coords(rng, 8, 25), np.zeros((25, 2)))
        if len(other) != len(x):
            with pytest.raises(InconsistentMapError):
                run("gather_scatter", other, spec, km)

    def test_unknown_dataflow(self, rng):
        x, spec, km = random_instance(rng)
        with pytest.raises(InvalidSpecError):
            run_dataflow("nope", x, spec, km)

    def test_output_dtype_follows_input(self, rng):
        x, spec, km = random_instance(rng, dtype=np.float32)
        for name in DATAFLOWS:
            assert run(name, x, spec, km).features.dtype == np.float32

    def test_stride_multiplies(self, rng):
        x, spec, km = random_instance(rng, stride=2)
        assert run("gather_scatter", x, spec, km).stride == 2


class TestGroupedSymmetric:
    def test_group_count_k3(self, rng):
        x, spec, km = random_instance(rng, kernel_size=3, stride=1, submanifold=True)
        _, stats = conv_grouped_symmetric(x, spec, km)
        assert stats["groups"] == 14 and stats["fallback"] is False

    def test_stride_two_falls_back(self, rng):
        x, spec, km = random_instance(rng, kernel_size=3, stride=2)
        out, stats = conv_grouped_symmetric(x, spec, km)
        assert stats["fallback"] is True
        assert compare_with_oracle(out, conv_dense_oracle(densify(x), spec)) <= 1e-5

    def test_even_kernel_falls_back(self, rng):
        x, spec, km = random_instance(rng, kernel_size=2, stride=1)
        assert conv_grouped_symmetric(x, spec, km)[1]["fallback"] is True


class TestImplicitSorted:
    def test_group_size_validation(self, rng):
        x, spec, km = random_instance(rng)
        with pytest.raises(InvalidSpecError):
            conv_implicit_sorted(x, spec, km, group_size=0)

    def test_uniform_masks_have_no_padding(self, rng):
        # isolated points under a submanifold kernel: every mask is the center bit
        c = np.array([[4 * i, 0, 0] for i in range(50)])
        x = SparseTensor(c, rng.standard_normal((50, 3)))
        spec = ConvSpec(3, 3, 1, rng.standard_normal((27, 3, 2)), True)
        _, stats = conv_implicit_sorted(x, spec, build_kernel_map(c, c, spec), group_size=8)
        assert stats["padded_macs_sorted"] == stats["macs"]

    @pytest.mark.parametrize("group_size", [1, 3, 32, 1000])
    def test_group_sizes_agree(self, rng, group_size):
        x, spec, km = random_instance(rng, grid=10, nnz=300)
        out, _ = conv_implicit_sorted(x, spec, km, group_size=group_size)
        np.testing.assert_allclose(out.features, loop_reference(x, spec), atol=1e-10)

    def test_padded_macs_hand_count(self):
        c = np.array([[0, 0, 0], [1, 0, 0], [5, 5, 5]])
        spec = ConvSpec(3, 3, 1, np.zeros((27, 2, 3)), True)
        km = build_kernel_map(c, c, spec)
        bits = build_bitmasks(km, 3, 3, 3)
        # masks: row0 {center, +x}, row1 {center, -x}, row2 {center}
        # identity order, groups of 2: [0,1] union 3 bits -> 2*3; [2] -> 1*1
        assert padded_macs(bits, np.arange(3), 2, 2, 3) == (2 * 3 + 1 * 1) * 6
        # group size 1 is exact
        assert padded_macs(bits, np.arange(3), 1, 2, 3) == km.total_pairs * 6

    def test_sorted_never_worse_on_scene_workloads(self):
        for seed in range(10):
            cloud = synth_scene(SynthSceneConfig(seed=seed))
            coords, _ = voxelize(cloud, VoxelizationConfig(cell_size=(0.2, 0.2, 0.2)))
            spec = ConvSpec(3, 3, 1, np.ones((27, 1, 1)), True)
            x = SparseTensor(coords, np.ones((len(coords), 1)))
            _, stats = conv_implicit_sorted(x, spec, build_kernel_map(coords, coords, spec), group_size=32)
            assert stats["macs"] <= stats["padded_macs_sorted"] <= stats["padded_macs_unsorted"]

    def test_sorting_is_not_universally_better(self):
        # masks 001, 011, 010, 010 with groups of two:
        #   identity [001, 011] -> 2 * 2, [010, 010] -> 2 * 1: total 6
        #   sorted   [011, 010] -> 2 * 2, [010, 001] -> 2 * 2: total 8
        bits = NeighborBitmask(np.array([[1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 1, 0]], dtype=bool))
        assert bits.sort_order().tolist() == [1, 2, 3, 0]
        assert padded_macs(bits, np.arange(4), 2, 1, 1) == 6
        assert padded_macs(bits, bits.sort_order(), 2, 1, 1) == 8

    def test_padded_bounds_on_random_instances(self, rng):
        for _ in range(20):
            x, spec, km = random_instance(rng)
            _, stats = conv_implicit_sorted(x, spec, km, group_size=32)
            assert stats["padded_macs_sorted"] >= stats["macs"]
            assert stats["padded_macs_unsorted"] >= stats["macs"]


class TestAlgebra:
    @pytest.mark.parametrize("name", DATAFLOWS)
    def test_linearity(self, name, rng):
        for _ in range(5):
            x, spec, km = random_instance(rng)
            y = x.replace_features(rng.standard_normal(x.features.shape))
            a, b = 1.7, -0.4
            mixed = x.replace_features(a * x.features + b * y.features)
            lhs = run(name, mixed, spec, km).features
            rhs = a * run(name, x, spec, km).features + b * run(name, y, spec, km).features
            assert np.abs(lhs - rhs).max(initial=0) <= 1e-9 * max(1.0, np.abs(rhs).max(initial=0))

    @pytest.mark.parametrize("name", DATAFLOWS)
    def test_bit_deterministic(self, name, rng):
        x, spec, km = random_instance(rng, grid=12, nnz=400)
        first = run(name, x, spec, km).features
        for _ in range(3):
            assert run(name, x, spec, km).features.tobytes() == first.tobytes()

    @pytest.mark.parametrize("name", ["gather_scatter", "fetch_on_demand"])
    def test_threads_do_not_change_result(self, name, rng):
        x, spec, km = random_instance(rng, grid=12, nnz=400)
        single = KERNELS[name](x.features, spec.weights, km)[0]
        if name == "fetch_on_demand":
            multi = KERNELS[name](x.features, spec.weights, km, threads=3, block=16)[0]
        else:
            multi = KERNELS[name](x.features, spec.weights, km, threads=3)[0]
        assert single.tobytes() == multi.tobytes()

    def test_cross_dataflow_agreement(self, rng):
        x, spec, km = random_instance(rng, grid=16, nnz=512, c_in=8, c_out=8)
        ref = run("gather_scatter", x, spec, km).features
        for name in DATAFLOWS[1:]:
            assert relative_error(run(name, x, spec, km).features, ref) <= 1e-5
