"""Tests for adjacency parsing, CAR structure matrices, precisions and sampling."""

import numpy as np
import pytest

from dlnmlps.spatial import (
    AdjacencyGraph,
    SpatialPrior,
    constraint_basis,
    grid_graph,
    load_adjacency,
    logdet_G,
    precision,
    sample_spatial_effect,
    structure_matrix,
)

PATH3 = "J 3\n1 2\n2 1\n2 3\n3 2\n"


def path_struct():
    return structure_matrix(load_adjacency(PATH3))


class TestLoadAdjacency:
    def test_path_graph_degrees(self):
        g = load_adjacency(PATH3)
        np.testing.assert_array_equal(g.degrees, [1, 2, 1])

    def test_empty_edge_list_warns(self):
        with pytest.warns(UserWarning, match="isolated"):
            g = load_adjacency("J 4\n")
        np.testing.assert_array_equal(g.degrees, [0, 0, 0, 0])

    def test_duplicate_edges_idempotent(self):
        g = load_adjacency("J 3\n1 2\n1 2\n2 1\n2 3\n")
        np.testing.assert_array_equal(g.degrees, [1, 2, 1])

    def test_one_directional_closure_warns(self):
        with pytest.warns(UserWarning, match="one direction"):
            g = load_adjacency("J 2\n1 2\n")
        np.testing.assert_array_equal(g.degrees, [1, 1])

    def test_self_loop_rejected(self):
        with pytest.raises(ValueError, match="self-loop"):
            load_adjacency("J 3\n1 1\n")

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            load_adjacency("J 3\n1 4\n")

    def test_missing_header_rejected(self):
        with pytest.raises(ValueError, match="header"):
            load_adjacency("1 2\n")

    def test_comments_ignored(self):
        g = load_adjacency("# comment\nJ 2\n1 2  # pair\n")
        assert g.n_edges == 1


class TestStructureMatrix:
    def test_path3_matrix(self):
        Lam = path_struct().Lambda.toarray()
        np.testing.assert_array_equal(Lam, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])

    def test_row_sums_vanish(self):
        s = structure_matrix(grid_graph(4))
        np.testing.assert_allclose(s.Lambda @ np.ones(16), 0.0, atol=1e-12)

    def test_four_cycle_spectrum(self):
        g = load_adjacency("J 4\n1 2\n2 3\n3 4\n4 1\n")
        vals = structure_matrix(g).eigenvalues
        np.testing.assert_allclose(np.sort(vals), [0, 2, 2, 4], atol=1e-10)

    def test_components_counted(self):
        with pytest.warns(UserWarning, match="isolated"):
            g = load_adjacency("J 5\n1 2\n2 1\n3 4\n4 3\n")  # unit 5 isolated
        s = structure_matrix(g)
        assert s.n_components == 3


class TestPrecision:
    def test_independent(self):
        G = precision(SpatialPrior("independent"), path_struct(), tau=2.0).toarray()
        np.testing.assert_array_equal(G, 2.0 * np.eye(3))

    def test_leroux_rho_zero_reduces_to_independent(self):
        s = path_struct()
        G = precision(SpatialPrior("leroux"), s, tau=3.0, rho=0.0).toarray()
        np.testing.assert_allclose(G, 3.0 * np.eye(3))

    def test_leroux_path3_half(self):
        G = precision(SpatialPrior("leroux"), path_struct(), tau=1.0, rho=0.5).toarray()
        np.testing.assert_allclose(G, [[1, -0.5, 0], [-0.5, 1.5, -0.5], [0, -0.5, 1]])

    def test_convolution_blocks(self):
        s = path_struct()
        G = precision(SpatialPrior("convolution"), s, tau1=2.0, tau2=3.0).toarray()
        assert G.shape == (6, 6)
        np.testing.assert_array_equal(G[:3, :3], 2.0 * np.eye(3))
        np.testing.assert_array_equal(G[3:, 3:], 3.0 * s.Lambda.toarray())
        np.testing.assert_array_equal(G[:3, 3:], 0.0)

    def test_inactive_hyper_rejected(self):
        with pytest.raises(ValueError, match="not active"):
            precision(SpatialPrior("independent"), path_struct(), tau=1.0, rho=0.5)

    def test_rho_out_of_range(self):
        with pytest.raises(ValueError, match="rho"):
            precision(SpatialPrior("leroux"), path_struct(), tau=1.0, rho=1.0)

    def test_symmetry_everywhere(self):
        s = structure_matrix(grid_graph(3))
        cases = [
            precision(SpatialPrior("independent"), s, tau=0.7),
            precision(SpatialPrior("icar"), s, tau=1.3),
            precision(SpatialPrior("leroux"), s, tau=2.0, rho=0.9),
            precision(SpatialPrior("convolution"), s, tau1=0.5, tau2=1.5),
        ]
        for G in cases:
            dense = G.toarray()
            np.testing.assert_array_equal(dense, dense.T)

    def test_icar_nullspace_per_component(self):
        g = load_adjacency("J 5\n1 2\n2 1\n2 3\n3 2\n4 5\n5 4\n")
        s = structure_matrix(g)
        G = precision(SpatialPrior("icar"), s, tau=2.5).toarray()
        for idx in ([0, 1, 2], [3, 4]):
            ind = np.zeros(5)
            ind[idx] = 1.0
            np.testing.assert_allclose(G @ ind, 0.0, atol=1e-12)


def cofactor_det3(M):
    """3x3 determinant by cofactor expansion along the first row."""
    return (
        M[0, 0] * (M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1])
        - M[0, 1] * (M[1, 0] * M[2, 2] - M[1, 2] * M[2, 0])
        + M[0, 2] * (M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0])
    )


class TestLogdetG:
    def test_independent(self):
        assert logdet_G(SpatialPrior("independent"), path_struct(), tau=np.e) == pytest.approx(5.0 * 0 + 3.0)

    def test_leroux_rho_zero(self):
        assert logdet_G(SpatialPrior("leroux"), path_struct(), tau=1.0, rho=0.0) == pytest.approx(0.0, abs=1e-12)

    def test_leroux_path3_matches_cofactor_oracle(self):
        s = path_struct()
        G = precision(SpatialPrior("leroux"), s, tau=1.0, rho=0.5).toarray()
        oracle = np.log(cofactor_det3(G))
        got = logdet_G(SpatialPrior("leroux"), s, tau=1.0, rho=0.5)
        assert got == pytest.approx(oracle, abs=1e-12)

    def test_icar_pseudo_det_matches_eigen_oracle(self):
        rng = np.random.default_rng(23)
        for J in (5, 12, 30):
            lines = [f"J {J}"]
            for j in range(1, J):
                lines.append(f"{j} {j + 1}")
                lines.append(f"{j + 1} {j}")
            extra = rng.integers(1, J + 1, size=(J // 2, 2))
            for a, b in extra:
                if a != b:
                    lines.append(f"{a} {b}")
                    lines.append(f"{b} {a}")
            s = structure_matrix(load_adjacency("\n".join(lines) + "\n"))
            tau = 1.7
            vals = np.linalg.eigvalsh(s.Lambda.toarray())
            nonzero = vals[vals > 1e-9 * vals.max()]
            oracle = nonzero.size * np.log(tau) + np.sum(np.log(nonzero))
            got = logdet_G(SpatialPrior("icar"), s, tau=tau)
            assert got == pytest.approx(oracle, abs=1e-9)

    def test_convolution_sums_blocks(self):
        s = path_struct()
        got = logdet_G(SpatialPrior("convolution"), s, tau1=2.0, tau2=3.0)
        expected = logdet_G(SpatialPrior("independent"), s, tau=2.0) + logdet_G(
            SpatialPrior("icar"), s, tau=3.0
        )
        assert got == pytest.approx(expected, abs=1e-12)

    def test_leroux_continuity_and_icar_limit(self):
        s = structure_matrix(grid_graph(4))
        tau = 1.4
        # Continuity: vanishing perturbations move the value by vanishing
        # amounts everywhere on [0, 0.999].
        h = 1e-7
        for rho in (0.0, 0.3, 0.7, 0.95, 0.999):
            a = logdet_G(SpatialPrior("leroux"), s, tau=tau, rho=rho)
            b = logdet_G(SpatialPrior("leroux"), s, tau=tau, rho=rho + h)
            assert abs(a - b) < 1e-3
        rho = 0.999
        leroux = logdet_G(SpatialPrior("leroux"), s, tau=tau, rho=rho)
        # As rho -> 1 the leroux determinant approaches the generalized
        # ICAR determinant plus the vanishing-eigenvalue contribution.
        icar_like = logdet_G(SpatialPrior("icar"), s, tau=tau) + np.log(tau) + np.log(1 - rho)
        assert leroux == pytest.approx(icar_like, rel=0.05)


class TestSampling:
    def test_independent_variance(self):
        prior = SpatialPrior("independent")
        s = structure_matrix(grid_graph(3))
        draws = sample_spatial_effect(prior, s, tau=1.0, seed=0, size=4000)
        var = draws.var()
        assert abs(var - 1.0) < 3.0 / np.sqrt(4000)

    def test_leroux_rho_zero_matches_independent_seed(self):
        s = path_struct()
        a = sample_spatial_effect(SpatialPrior("independent"), s, tau=2.0, seed=42)
        b = sample_spatial_effect(SpatialPrior("leroux"), s, tau=2.0, rho=0.0, seed=42)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_leroux_positive_morans_i(self):
        side = 10
        g = grid_graph(side)
        s = structure_matrix(g)
        W = np.zeros((s.J, s.J))
        for j, nbrs in enumerate(g.neighbors):
            W[j, list(nbrs)] = 1.0
        prior = SpatialPrior("leroux")
        positive = 0
        for seed in range(100):
            u = sample_spatial_effect(prior, s, tau=2.0, rho=0.95, seed=seed)
            z = u - u.mean()
            moran = (s.J / W.sum()) * (z @ W @ z) / (z @ z)
            positive += moran > 0
        assert positive == 100

    def test_unsupported_prior(self):
        with pytest.raises(ValueError, match="not supported"):
            sample_spatial_effect(SpatialPrior("icar"), path_struct(), tau=1.0, seed=1)

    def test_deterministic(self):
        s = path_struct()
        a = sample_spatial_effect(SpatialPrior("leroux"), s, tau=1.0, rho=0.5, seed=9)
        b = sample_spatial_effect(SpatialPrior("leroux"), s, tau=1.0, rho=0.5, seed=9)
        np.testing.assert_array_equal(a, b)


class TestConstraintBasis:
    def test_orthonormal_and_sum_zero(self):
        g = load_adjacency("J 5\n1 2\n2 1\n2 3\n3 2\n4 5\n5 4\n")
        s = structure_matrix(g)
        T = constraint_basis(s)
        assert T.shape == (5, 5 - s.n_components)
        np.testing.assert_allclose(T.T @ T, np.eye(T.shape[1]), atol=1e-12)
        labels = s.component_labels()
        for comp in range(labels.max() + 1):
            ind = (labels == comp).astype(float)
            np.testing.assert_allclose(ind @ T, 0.0, atol=1e-12)
