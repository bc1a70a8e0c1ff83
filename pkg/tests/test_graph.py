"""Graph containers, derived operators, positional encodings, and the
synthetic generators."""

import warnings

import numpy as np
import pytest
from scipy import stats

from dft.errors import ContractError
from dft.graph import (
    Graph,
    drop_edge,
    laplacian_positional_encoding,
    normalized_operators,
    ppmi_matrix,
    random_graph,
    sbm_generate,
)


def path_graph(n, feat_dim=1):
    edges = [(i, i + 1) for i in range(n - 1)]
    return Graph(n, edges, np.zeros((n, feat_dim)))


def complete_graph(n):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    return Graph(n, edges, np.zeros((n, 1)))


class TestGraphInvariants:
    def test_rejects_out_of_range_edges(self):
        with pytest.raises(ContractError, match="endpoint"):
            Graph(3, [(0, 5)], np.zeros((3, 1)))

    def test_rejects_self_loops(self):
        with pytest.raises(ContractError, match="self-loop"):
            Graph(3, [(1, 1)], np.zeros((3, 1)))

    def test_deduplicates_and_canonicalizes(self):
        g = Graph(3, [(2, 0), (0, 2), (1, 0)], np.zeros((3, 1)))
        np.testing.assert_array_equal(g.edges, [[0, 1], [0, 2]])

    def test_rejects_labels_out_of_range(self):
        with pytest.raises(ContractError, match=r"\[0, 2\)"):
            Graph(2, [], np.zeros((2, 1)), labels=[0, 2], num_classes=2)


class TestNormalizedOperators:
    def test_isolated_node(self):
        g = Graph(1, [], np.zeros((1, 1)))
        ops = normalized_operators(g)
        np.testing.assert_array_equal(ops.a_norm.data, [[1.0]])
        np.testing.assert_array_equal(ops.laplacian.data, [[0.0]])

    def test_two_nodes_one_edge(self):
        """(D+I)^{-1/2}(A+I)(D+I)^{-1/2} with D+I = 2I gives all entries 1/2."""
        g = Graph(2, [(0, 1)], np.zeros((2, 1)))
        ops = normalized_operators(g)
        np.testing.assert_allclose(ops.a_norm.data, 0.5 * np.ones((2, 2)),
                                   atol=1e-15)

    def test_laplacian_annihilates_sqrt_degree_vector(self):
        """The Laplacian's kernel is spanned by sqrt(deg + 1)."""
        g = sbm_generate([6, 6], 0.8, 0.3, np.zeros((2, 2)), 1.0, rng=3)
        ops = normalized_operators(g)
        v = np.sqrt(g.degrees() + 1.0)
        np.testing.assert_allclose(ops.laplacian.data @ v, 0.0, atol=1e-12)

    def test_symmetry_and_spectrum(self):
        g = sbm_generate([5, 7], 0.7, 0.2, np.zeros((2, 2)), 1.0, rng=4)
        ops = normalized_operators(g)
        assert np.abs(ops.a_norm.data - ops.a_norm.data.T).max() < 1e-12
        assert np.abs(ops.laplacian.data - ops.laplacian.data.T).max() < 1e-12
        eigs = np.linalg.eigvalsh(ops.laplacian.data)
        assert eigs.min() > -1e-10 and eigs.max() < 2 + 1e-10

    def test_laplacian_is_identity_minus_a_norm(self):
        g = path_graph(5)
        ops = normalized_operators(g)
        np.testing.assert_array_equal(ops.laplacian.data,
                                      np.eye(5) - ops.a_norm.data)


class TestPpmi:
    def test_edgeless_graph_gives_zero_matrix(self):
        g = Graph(4, [], np.zeros((4, 1)))
        out = ppmi_matrix(g, walk_len=5, walks_per_node=3, window=2, rng=0)
        np.testing.assert_array_equal(out.data, np.zeros((4, 4)))

    def test_complete_graph_off_diagonals_symmetric(self):
        """K3 walks visit all pairs symmetrically: off-diagonal PPMI equal
        within sampling tolerance."""
        g = complete_graph(3)
        out = ppmi_matrix(g, walk_len=60, walks_per_node=60, window=3,
                          rng=5).data
        off = out[~np.eye(3, dtype=bool)]
        assert off.std() / off.mean() < 0.05

    def test_path_graph_window_one_never_pairs_endpoints(self):
        """On 0-1-2 with window 1, consecutive walk nodes are graph-adjacent,
        so the pair (0, 2) can never co-occur (enumeration of length-2
        windows: every step is an edge, and (0,2) is not an edge)."""
        g = path_graph(3)
        out = ppmi_matrix(g, walk_len=30, walks_per_node=50, window=1, rng=6)
        assert out.data[0, 2] == 0.0
        assert out.data[2, 0] == 0.0

    def test_output_nonnegative_and_symmetric(self):
        g = sbm_generate([8, 8], 0.6, 0.2, np.zeros((2, 2)), 1.0, rng=7)
        out = ppmi_matrix(g, rng=8).data
        assert out.min() >= 0.0
        np.testing.assert_array_equal(out, out.T)

    def test_window_precondition(self):
        with pytest.raises(ContractError, match="walk_len >= window"):
            ppmi_matrix(path_graph(3), walk_len=2, walks_per_node=1, window=5)

    def test_deterministic_given_seed(self):
        g = sbm_generate([6, 6], 0.5, 0.1, np.zeros((2, 2)), 1.0, rng=9)
        a = ppmi_matrix(g, rng=11).data
        b = ppmi_matrix(g, rng=11).data
        np.testing.assert_array_equal(a, b)


class TestPositionalEncoding:
    def test_path_graph_fiedler_vector(self):
        """P3's smallest non-trivial eigenvector is antisymmetric about the
        center: (1, 0, -1)/sqrt(2) with eigenvalue 1/2 (hand-derived from
        the 3x3 normalized Laplacian)."""
        g = path_graph(3)
        pe = laplacian_positional_encoding(g, k=1).data
        expected = np.array([[1.0 / np.sqrt(2)], [0.0], [-1.0 / np.sqrt(2)]])
        np.testing.assert_allclose(pe, expected, atol=1e-12)
        lap = normalized_operators(g).laplacian.data
        np.testing.assert_allclose(lap @ pe[:, 0], 0.5 * pe[:, 0], atol=1e-12)

    def test_complete_graph_degenerate_spectrum(self):
        """K4's non-trivial eigenvalues coincide by symmetry."""
        g = complete_graph(4)
        lap = normalized_operators(g).laplacian.data
        vals = np.sort(np.linalg.eigvalsh(lap))
        assert abs(vals[1] - vals[2]) < 1e-9

    def test_columns_unit_norm_and_eigen_residual(self):
        g = sbm_generate([10, 10], 0.7, 0.3, np.zeros((2, 2)), 1.0, rng=12)
        lap = normalized_operators(g).laplacian.data
        pe = laplacian_positional_encoding(g, k=3).data
        np.testing.assert_allclose(np.linalg.norm(pe, axis=0), 1.0, atol=1e-10)
        vals = np.sort(np.linalg.eigvalsh(lap))
        for j in range(3):
            resid = lap @ pe[:, j] - vals[1 + j] * pe[:, j]
            assert np.abs(resid).max() < 1e-8

    def test_sign_convention_first_nonzero_positive(self):
        g = sbm_generate([9, 9], 0.6, 0.2, np.zeros((2, 2)), 1.0, rng=13)
        pe = laplacian_positional_encoding(g, k=2).data
        for j in range(pe.shape[1]):
            nz = pe[np.abs(pe[:, j]) > 1e-12, j]
            assert nz[0] > 0

    def test_disconnected_graph_warns_and_skips(self):
        g = Graph(4, [(0, 1), (2, 3)], np.zeros((4, 1)))  # two components
        with pytest.warns(UserWarning, match="near-zero"):
            pe = laplacian_positional_encoding(g, k=1)
        assert pe.data.shape == (4, 1)

    def test_k_must_be_less_than_n(self):
        with pytest.raises(ContractError, match="k < n"):
            laplacian_positional_encoding(path_graph(3), k=3)


class TestSbm:
    def test_disjoint_cliques(self):
        g = sbm_generate([3, 4], 1.0, 0.0, np.zeros((2, 2)), 1.0, rng=0)
        adj = g.adjacency()
        assert (adj[:3, :3] + np.eye(3) == 1).all()
        assert (adj[3:, 3:] + np.eye(4) == 1).all()
        assert (adj[:3, 3:] == 0).all()

    def test_zero_feat_std_duplicates_class_means(self):
        means = np.array([[1.0, 2.0], [3.0, 4.0]])
        g = sbm_generate([3, 3], 0.5, 0.1, means, 0.0, rng=1)
        np.testing.assert_array_equal(g.features.data[:3], np.tile(means[0], (3, 1)))
        np.testing.assert_array_equal(g.features.data[3:], np.tile(means[1], (3, 1)))

    def test_labels_are_block_indices(self):
        g = sbm_generate([2, 3, 1], 0.5, 0.5, np.zeros((3, 2)), 1.0, rng=2)
        np.testing.assert_array_equal(g.labels, [0, 0, 1, 1, 1, 2])
        assert g.num_classes == 3

    def test_equal_probabilities_give_uniform_density(self):
        """With p_in = p_out the within/between split of edges follows the
        pair-count proportions: aggregated chi-square over 20 seeds stays
        below the 99th percentile of chi2(20)."""
        sizes = [25, 25]
        n_within = 2 * (25 * 24 // 2)
        n_between = 25 * 25
        total_pairs = n_within + n_between
        stat = 0.0
        for seed in range(20):
            g = sbm_generate(sizes, 0.3, 0.3, np.zeros((2, 2)), 1.0, rng=seed)
            same = g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]
            observed = np.array([same.sum(), (~same).sum()], dtype=float)
            expected = observed.sum() * np.array(
                [n_within / total_pairs, n_between / total_pairs])
            stat += float(((observed - expected) ** 2 / expected).sum())
        assert stat < stats.chi2.ppf(0.99, df=20)

    def test_fixed_seed_is_bit_reproducible(self):
        a = sbm_generate([5, 5], 0.4, 0.1, np.zeros((2, 3)), 1.0, rng=77)
        b = sbm_generate([5, 5], 0.4, 0.1, np.zeros((2, 3)), 1.0, rng=77)
        assert a == b

    def test_probability_ordering_enforced(self):
        with pytest.raises(ContractError, match="p_out <= p_in"):
            sbm_generate([2, 2], 0.1, 0.5, np.zeros((2, 2)), 1.0, rng=0)


class TestDropEdge:
    def test_rate_zero_is_identity(self):
        g = sbm_generate([6, 6], 0.5, 0.2, np.zeros((2, 2)), 1.0, rng=3)
        out = drop_edge(g, 0.0, rng=4)
        np.testing.assert_array_equal(out.edges, g.edges)

    def test_removal_count_is_binomial(self):
        """Total removals over 100 seeds within 3 sigma of Binomial mean."""
        g = sbm_generate([20, 20], 0.5, 0.3, np.zeros((2, 2)), 1.0, rng=5)
        rate = 0.3
        trials = 100
        removed = sum(g.num_edges - drop_edge(g, rate, rng=seed).num_edges
                      for seed in range(trials))
        mean = trials * g.num_edges * rate
        sigma = np.sqrt(trials * g.num_edges * rate * (1 - rate))
        assert abs(removed - mean) <= 3 * sigma

    def test_features_and_labels_untouched(self):
        g = sbm_generate([5, 5], 0.6, 0.2, np.ones((2, 3)), 1.0, rng=6)
        out = drop_edge(g, 0.5, rng=7)
        assert out.features is g.features
        np.testing.assert_array_equal(out.labels, g.labels)


class TestRandomGraph:
    def test_deterministic_and_in_range(self):
        a = random_graph(10, 0.3, rng=1)
        b = random_graph(10, 0.3, rng=1)
        np.testing.assert_array_equal(a.edges, b.edges)
        if a.num_edges:
            assert a.edges.max() < 10
