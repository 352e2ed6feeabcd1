import numpy as np
import pytest

from leadlag.data import MtsFrame
from leadlag.hierarchy import (
    HierarchyConfig,
    HierarchyError,
    ScaleHierarchy,
    build_hierarchy,
    build_similarity_graph,
    cluster_scale,
    coarsen,
    dtw_distance,
    export_hierarchy,
    hierarchy_from_assignments,
    patchify,
    unpatchify,
)


def dtw_enumeration_oracle(a, b):
    """Minimum path cost over every monotone warping path (exhaustive)."""
    L = len(a)
    best = [np.inf]

    def walk(i, j, acc):
        acc = acc + (a[i] - b[j]) ** 2
        if acc >= best[0]:
            return
        if i == L - 1 and j == L - 1:
            best[0] = acc
            return
        if i + 1 < L and j + 1 < L:
            walk(i + 1, j + 1, acc)
        if i + 1 < L:
            walk(i + 1, j, acc)
        if j + 1 < L:
            walk(i, j + 1, acc)

    walk(0, 0, 0.0)
    return best[0]


class TestDtw:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=32)
        assert dtw_distance(x, x, band=32) == 0.0

    def test_four_point_instance_matches_enumeration(self):
        a = np.array([0.0, 0.0, 1.0, 0.0])
        b = np.array([0.0, 1.0, 0.0, 0.0])
        expect = dtw_enumeration_oracle(a, b)
        assert expect == 0.0  # frozen: warping absorbs the unit shift entirely
        assert dtw_distance(a, b, band=4) == pytest.approx(expect, abs=1e-15)

    def test_random_instances_match_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a = rng.normal(size=6)
            b = rng.normal(size=6)
            assert dtw_distance(a, b, band=6) == pytest.approx(
                dtw_enumeration_oracle(a, b), rel=1e-12)

    def test_band_zero_is_squared_euclidean(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=16), rng.normal(size=16)
        assert dtw_distance(a, b, band=0) == pytest.approx(np.sum((a - b) ** 2))

    def test_relaxation_only_helps_on_shift(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=40)
        shifted = np.roll(x, 1)
        assert dtw_distance(x, shifted, band=40) <= dtw_distance(x, shifted, band=0)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=20), rng.normal(size=20)
        assert dtw_distance(a, b, band=5) == pytest.approx(dtw_distance(b, a, band=5))

    def test_length_mismatch(self):
        with pytest.raises(HierarchyError, match="lengths differ"):
            dtw_distance(np.zeros(3), np.zeros(4), band=2)


class TestSimilarityGraph:
    def test_identical_pair_connected(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=64)
        series = np.stack([x, x, rng.normal(size=64) * 4 + 9])
        graph = build_similarity_graph(series, band=64, quantile_q=0.5)
        assert graph[0, 1] == 1 and graph[1, 0] == 1

    def test_tiny_quantile_gives_identity(self):
        rng = np.random.default_rng(6)
        series = rng.normal(size=(4, 32)) * np.array([[1], [5], [25], [125]])
        graph = build_similarity_graph(series, band=32, quantile_q=1e-9)
        assert np.array_equal(graph, np.eye(4))

    def test_planted_two_blocks_recovered(self):
        rng = np.random.default_rng(7)
        base_a, base_b = rng.normal(size=128), rng.normal(size=128)
        series = np.stack([
            base_a + 0.1 * rng.normal(size=128),
            base_a + 0.1 * rng.normal(size=128),
            base_a + 0.1 * rng.normal(size=128),
            base_b + 0.1 * rng.normal(size=128),
            base_b + 0.1 * rng.normal(size=128),
            base_b + 0.1 * rng.normal(size=128),
        ])
        graph = build_similarity_graph(series, band=16, quantile_q=0.4)
        blocks = np.zeros((6, 6))
        blocks[:3, :3] = 1
        blocks[3:, 3:] = 1
        # block-diagonal dominance: all within-block pairs beat cross-block
        assert np.all(graph[:3, :3] == 1)
        assert np.all(graph[3:, 3:] == 1)
        assert np.sum(graph[:3, 3:]) == 0

    def test_too_few_variates(self):
        with pytest.raises(HierarchyError):
            build_similarity_graph(np.zeros((1, 8)), band=4, quantile_q=0.3)


class TestClustering:
    def test_two_cliques_separated(self):
        graph = np.zeros((6, 6))
        graph[:3, :3] = 1
        graph[3:, 3:] = 1
        assign = cluster_scale(2, graph, "spectral", seed=0)
        labels = assign.argmax(axis=1)
        assert len(set(labels[:3])) == 1
        assert len(set(labels[3:])) == 1
        assert labels[0] != labels[3]

    def test_single_group_degenerate(self):
        graph = np.eye(5)
        assign = cluster_scale(1, graph, "spectral", seed=0)
        assert np.array_equal(assign, np.ones((5, 1)))

    @pytest.mark.parametrize("algo", ["spectral", "kmeans", "hierarchical"])
    def test_planted_partition_agreement(self, algo):
        hits = 0
        trials = 20
        for seed in range(trials):
            rng = np.random.default_rng(1000 + seed)
            truth = np.repeat(np.arange(3), 4)
            graph = np.zeros((12, 12))
            for i in range(12):
                for j in range(i + 1, 12):
                    p = 0.9 if truth[i] == truth[j] else 0.1
                    graph[i, j] = graph[j, i] = float(rng.random() < p)
            np.fill_diagonal(graph, 1.0)
            assign = cluster_scale(3, graph, algo, seed=seed)
            labels = assign.argmax(axis=1)
            best = 0
            from itertools import permutations
            for perm in permutations(range(3)):
                mapped = np.array([perm[t] for t in truth])
                best = max(best, int(np.sum(mapped == labels)))
            hits += best / 12.0
        assert hits / trials >= 0.9

    def test_row_stochastic_binary_and_no_empty_groups(self):
        rng = np.random.default_rng(9)
        graph = (rng.random((10, 10)) < 0.4).astype(float)
        graph = np.maximum(graph, graph.T)
        np.fill_diagonal(graph, 1.0)
        for algo in ("spectral", "kmeans", "hierarchical"):
            assign = cluster_scale(4, graph, algo, seed=3)
            assert np.all(assign.sum(axis=1) == 1)
            assert np.all((assign == 0) | (assign == 1))
            assert np.all(assign.sum(axis=0) >= 1)

    def test_determinism(self):
        rng = np.random.default_rng(10)
        graph = (rng.random((9, 9)) < 0.5).astype(float)
        graph = np.maximum(graph, graph.T)
        a = cluster_scale(3, graph, "spectral", seed=11)
        b = cluster_scale(3, graph, "spectral", seed=11)
        assert np.array_equal(a, b)

    def test_too_many_groups_rejected(self):
        with pytest.raises(HierarchyError):
            cluster_scale(5, np.eye(5), "spectral", seed=0)


class TestCoarsen:
    def test_identity_assignment(self):
        rng = np.random.default_rng(11)
        d = rng.random((4, 4))
        x = rng.random((4, 12))
        d2, x2 = coarsen(np.eye(4), d, x)
        assert np.array_equal(d2, d)
        assert np.array_equal(x2, x)

    def test_merged_rows_sum(self):
        x = np.array([[1.0, 2.0], [10.0, 20.0], [100.0, 200.0]])
        assign = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        _, x2 = coarsen(assign, np.eye(3), x)
        assert np.array_equal(x2[0], [11.0, 22.0])
        assert np.array_equal(x2[1], [100.0, 200.0])

    def test_mean_aggregate(self):
        x = np.array([[2.0], [4.0], [9.0]])
        assign = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        _, x2 = coarsen(assign, np.eye(3), x, aggregate="mean")
        assert np.array_equal(x2, [[3.0], [9.0]])

    def test_random_matches_dense_products(self):
        rng = np.random.default_rng(12)
        d = rng.random((6, 6))
        x = rng.random((6, 8))
        labels = rng.integers(0, 2, size=6)
        labels[:2] = [0, 1]
        assign = np.zeros((6, 2))
        assign[np.arange(6), labels] = 1.0
        d2, x2 = coarsen(assign, d, x)
        assert np.max(np.abs(d2 - assign.T @ d @ assign)) < 1e-12
        assert np.max(np.abs(x2 - assign.T @ x)) < 1e-12


class TestPatchify:
    def test_roundtrip(self):
        rng = np.random.default_rng(13)
        x = rng.random((3, 8))
        patched = patchify(x, 4)
        assert patched.shape == (3, 2, 4)
        assert np.array_equal(unpatchify(patched), x)

    def test_96_over_12(self):
        x = np.zeros((2, 96))
        assert patchify(x, 12).shape == (2, 8, 12)

    def test_whole_series_patch(self):
        x = np.arange(6.0).reshape(1, 6)
        patched = patchify(x, 6)
        assert patched.shape == (1, 1, 6)
        assert np.array_equal(patched[0, 0], x[0])

    def test_non_divisor_rejected(self):
        with pytest.raises(HierarchyError):
            patchify(np.zeros((1, 10)), 3)


def _toy_frame(n=6, t=200, seed=14):
    rng = np.random.default_rng(seed)
    base_a, base_b = rng.normal(size=t), rng.normal(size=t)
    rows = [base_a + 0.2 * rng.normal(size=t) for _ in range(n // 2)]
    rows += [base_b + 0.2 * rng.normal(size=t) for _ in range(n - n // 2)]
    return MtsFrame(np.stack(rows), [f"v{i}" for i in range(n)])


class TestBuildHierarchy:
    def test_single_scale(self):
        frame = _toy_frame()
        config = HierarchyConfig([6], [4], window_len=16)
        h = build_hierarchy(frame, config)
        assert h.n_scales == 1
        assert h.assignments == []

    def test_two_scale_shapes(self):
        frame = _toy_frame()
        config = HierarchyConfig([6, 2], [4, 8], window_len=16, seed=1)
        h = build_hierarchy(frame, config)
        assert h.group_counts == [6, 2]
        assert h.patch_counts == [4, 2]
        assert h.series[1].shape == (2, 200)

    def test_direct_assign_is_literal_product(self):
        rng = np.random.default_rng(15)
        s1 = np.zeros((8, 4))
        s1[np.arange(8), rng.integers(0, 4, 8)] = 1
        s1[:4, :] = 0
        s1[np.arange(4), np.arange(4)] = 1
        s2 = np.zeros((4, 2))
        s2[np.arange(4), rng.integers(0, 2, 4)] = 1
        s2[0, :] = [1, 0]
        s2[1, :] = [0, 1]
        h = hierarchy_from_assignments(rng.normal(size=(8, 40)), [s1, s2],
                                       [4, 8, 20], window_len=40)
        assert np.array_equal(h.direct_assign[1], s1 @ s2)
        assert np.all((h.direct_assign[1] == 0) | (h.direct_assign[1] == 1))

    def test_group_sum_conserves_totals(self):
        frame = _toy_frame()
        config = HierarchyConfig([6, 2], [4, 8], window_len=16, seed=2)
        h = build_hierarchy(frame, config)
        assert np.max(np.abs(h.series[1].sum(axis=0) - h.series[0].sum(axis=0))) < 1e-9

    def test_decreasing_patch_len_rejected(self):
        frame = _toy_frame()
        with pytest.raises(HierarchyError, match="non-decreasing"):
            build_hierarchy(frame, HierarchyConfig([6, 2], [8, 4], window_len=16))

    def test_export_lists_membership(self):
        frame = _toy_frame()
        config = HierarchyConfig([6, 2], [4, 8], window_len=16, seed=3)
        h = build_hierarchy(frame, config)
        text = export_hierarchy(h, frame.variate_names)
        assert "scale 0 groups=6 patch_len=4 patch_count=4" in text
        assert "scale 1 groups=2 patch_len=8 patch_count=2" in text
        assert text.count("variate") == 12
