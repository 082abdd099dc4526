"""Aggregation: NetVLAD against an independent loop-based oracle, mean
pooling against plain arithmetic, plus the order and norm invariants."""

import numpy as np
import pytest
from conftest import netvlad_oracle, numeric_grad, rel_err

import expertfuse.tensor as T
from expertfuse._kernels import backend_name, reference
from expertfuse.aggregate import NetVladParams, init_netvlad, mean_pool, netvlad
from expertfuse.exceptions import EmptySequence, ShapeMismatch


def random_vlad(rng, dim, clusters, ghosts):
    return NetVladParams(
        clusters=T.tensor(rng.standard_normal((clusters, dim))),
        assign_w=T.tensor(rng.standard_normal((dim, clusters + ghosts))),
        assign_b=T.tensor(rng.standard_normal(clusters + ghosts) * 0.3),
        ghosts=ghosts,
    )


class TestNetVlad:
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        rows = int(rng.integers(1, 8))
        dim = int(rng.integers(2, 6))
        clusters = int(rng.integers(1, 5))
        ghosts = int(rng.integers(0, 3))
        p = random_vlad(rng, dim, clusters, ghosts)
        x = rng.standard_normal((rows, dim))
        got = netvlad(T.tensor(x), p).data
        want = netvlad_oracle(x, p.clusters.data, p.assign_w.data, p.assign_b.data, ghosts)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_single_cluster_closed_form(self):
        """K=1, G=0: every row fully assigned, output is the normalized
        total residual sum(x_t) - T * c."""
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 4))
        c = rng.standard_normal((1, 4))
        p = NetVladParams(T.tensor(c), T.tensor(rng.standard_normal((4, 1))),
                          T.tensor(rng.standard_normal(1)), ghosts=0)
        got = netvlad(T.tensor(x), p).data
        residual = x.sum(axis=0) - 5 * c[0]
        np.testing.assert_allclose(got, residual / np.linalg.norm(residual), atol=1e-12)

    def test_output_has_unit_norm(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            p = random_vlad(rng, 5, 4, 1)
            x = rng.standard_normal((int(rng.integers(1, 10)), 5))
            out = netvlad(T.tensor(x), p).data
            assert abs(np.linalg.norm(out) - 1.0) < 1e-12

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(5)
        p = random_vlad(rng, 4, 3, 1)
        x = rng.standard_normal((7, 4))
        base = netvlad(T.tensor(x), p).data
        for _ in range(5):
            perm = rng.permutation(7)
            np.testing.assert_allclose(netvlad(T.tensor(x[perm]), p).data, base, atol=1e-12)

    def test_single_row_sequence(self):
        rng = np.random.default_rng(6)
        p = random_vlad(rng, 4, 2, 1)
        out = netvlad(T.tensor(rng.standard_normal((1, 4))), p).data
        assert out.shape == (8,)
        assert np.isfinite(out).all()

    def test_output_dim_is_clusters_times_dim(self):
        rng = np.random.default_rng(7)
        p = random_vlad(rng, 5, 3, 2)
        out = netvlad(T.tensor(rng.standard_normal((4, 5))), p)
        assert out.shape == (15,)
        assert p.output_dim == 15

    def test_heavily_biased_ghost_matches_ghostless(self):
        """A ghost column with strongly negative bias takes no mass, so the
        output agrees with the same head without the ghost."""
        rng = np.random.default_rng(8)
        dim, k = 4, 3
        clusters = rng.standard_normal((k, dim))
        w_real = rng.standard_normal((dim, k))
        b_real = rng.standard_normal(k)
        w_ghost = np.concatenate([w_real, np.zeros((dim, 1))], axis=1)
        b_ghost = np.concatenate([b_real, [-1e3]])
        x = rng.standard_normal((6, dim))
        without = netvlad(T.tensor(x), NetVladParams(
            T.tensor(clusters), T.tensor(w_real), T.tensor(b_real), 0)).data
        with_ghost = netvlad(T.tensor(x), NetVladParams(
            T.tensor(clusters), T.tensor(w_ghost), T.tensor(b_ghost), 1)).data
        np.testing.assert_allclose(with_ghost, without, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((5, 3))
        arrays = {
            "clusters": rng.standard_normal((2, 3)),
            "assign_w": rng.standard_normal((3, 3)),
            "assign_b": rng.standard_normal(3) * 0.2,
            "x": x,
        }
        readout = rng.standard_normal(6)

        def loss_from(tensors):
            p = NetVladParams(tensors["clusters"], tensors["assign_w"],
                              tensors["assign_b"], ghosts=1)
            return T.sum_all(T.hadamard(netvlad(tensors["x"], p), T.tensor(readout)))

        leaves = {k: T.parameter(v) for k, v in arrays.items()}
        T.backward(loss_from(leaves))
        for name, base in arrays.items():
            def value(a, _n=name):
                consts = {k: T.tensor(v) for k, v in arrays.items()}
                consts[_n] = T.tensor(a)
                return float(loss_from(consts).data)

            assert rel_err(leaves[name].grad, numeric_grad(value, base)) < 1e-6, name

    def test_shape_validation(self):
        rng = np.random.default_rng(10)
        p = random_vlad(rng, 4, 2, 1)
        with pytest.raises(EmptySequence):
            netvlad(T.tensor(np.zeros((0, 4))), p)
        with pytest.raises(ShapeMismatch):
            netvlad(T.tensor(np.zeros((3, 5))), p)


class TestNetVladInit:
    def test_centroid_tied_assignment(self):
        """Weights start at twice each anchor, bias at minus its square norm."""
        rng = np.random.default_rng(11)
        arrays = init_netvlad(rng, dim=6, clusters=4, ghosts=2)
        assert arrays["clusters"].shape == (4, 6)
        assert arrays["assign_w"].shape == (6, 6)
        assert arrays["assign_b"].shape == (6,)
        for k in range(4):
            np.testing.assert_allclose(arrays["assign_w"][:, k], 2 * arrays["clusters"][k])
            np.testing.assert_allclose(
                arrays["assign_b"][k], -(arrays["clusters"][k] ** 2).sum()
            )

    def test_initial_assignment_prefers_own_centroid(self):
        """Feeding a centroid as input puts the argmax logit on its column."""
        rng = np.random.default_rng(12)
        arrays = init_netvlad(rng, dim=8, clusters=5, ghosts=0)
        for k in range(5):
            logits = arrays["clusters"][k] @ arrays["assign_w"] + arrays["assign_b"]
            assert int(np.argmax(logits)) == k

    def test_centroid_scale(self):
        """Anchors are standard normal over sqrt(d); their norms concentrate
        near 1 for large d."""
        rng = np.random.default_rng(13)
        arrays = init_netvlad(rng, dim=4096, clusters=8, ghosts=0)
        norms = np.linalg.norm(arrays["clusters"], axis=1)
        assert np.all(np.abs(norms - 1.0) < 0.2)


class TestMeanPool:
    def test_matches_arithmetic(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((6, 3))
        want = x.sum(axis=0) / 6.0
        np.testing.assert_allclose(mean_pool(T.tensor(x)).data, want, atol=1e-15)

    def test_constant_sequence_is_identity(self):
        row = np.array([1.5, -2.0, 0.25])
        x = np.tile(row, (9, 1))
        np.testing.assert_allclose(mean_pool(T.tensor(x)).data, row, atol=1e-15)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((8, 5))
        base = mean_pool(T.tensor(x)).data
        perm = rng.permutation(8)
        np.testing.assert_allclose(mean_pool(T.tensor(x[perm])).data, base, atol=1e-12)

    def test_rejects_empty(self):
        with pytest.raises(EmptySequence):
            mean_pool(T.tensor(np.zeros((0, 3))))


class TestBackendContract:
    def test_selected_backend_is_reported(self):
        assert backend_name() in ("compiled", "pure")

    def test_reference_backend_agrees_with_selected(self):
        """Whatever backend import picked, it must match the numpy reference."""
        rng = np.random.default_rng(16)
        x = rng.standard_normal((6, 4))
        clusters = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 4))
        b = rng.standard_normal(4)
        p = NetVladParams(T.tensor(clusters), T.tensor(w), T.tensor(b), ghosts=1)
        got = netvlad(T.tensor(x), p).data
        want, _ = reference.vlad_forward(x, clusters, w, b, 1e-12)
        np.testing.assert_allclose(got, want, atol=1e-12)
