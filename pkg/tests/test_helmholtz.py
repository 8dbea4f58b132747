import numpy as np
import pytest
import scipy.sparse as sp

from conftest import rng_complex
from extfwi.helmholtz import (FactorizationCache, SingularOperatorError, assemble,
                              attenuation_profile, counter, factorize, model_key, point_source,
                              solve)
from extfwi.greens import greens_check
from extfwi.mesh import Grid, Model


def homogeneous(grid, m=0.25):
    return Model(np.full(grid.n, m), 0.1, 0.4)


class TestAssemble:
    def test_constants_in_null_space_at_zero_frequency(self):
        g = Grid(7, 6, 0.1, 0.2, 2)
        op = assemble(g, homogeneous(g), 0.0)
        np.testing.assert_allclose(op.matrix @ np.ones(g.n), 0.0, atol=1e-9)

    def test_mass_term_on_constants(self):
        g = Grid(8, 8, 0.1, 0.1, 2)
        omega = 2 * np.pi * 3
        op = assemble(g, homogeneous(g), omega)
        expected = omega**2 * 0.25 * (1 + 1j * op.attenuation)
        np.testing.assert_allclose(op.matrix @ np.ones(g.n), expected, rtol=1e-12)

    def test_five_point_stencil(self):
        h = 0.1
        g = Grid(5, 5, h, h)
        op = assemble(g, homogeneous(g), 0.0)
        row = op.matrix.getrow(g.index(2, 2)).toarray().ravel()
        expected = np.zeros(g.n)
        expected[g.index(2, 2)] = -4
        for ix, iz in [(1, 2), (3, 2), (2, 1), (2, 3)]:
            expected[g.index(ix, iz)] = 1
        np.testing.assert_allclose(row, expected / h**2, rtol=1e-12)

    def test_size_mismatch(self):
        g = Grid(5, 5, 0.1, 0.1)
        with pytest.raises(ValueError):
            assemble(g, Model(np.full(24, 0.25), 0.1, 0.4), 1.0)

    def test_complex_symmetric_without_sponge(self):
        g = Grid(6, 5, 0.1, 0.12)
        rng = np.random.default_rng(0)
        m = Model(rng.uniform(0.1, 0.4, g.n), 0.1, 0.4)
        a = assemble(g, m, 10.0).matrix
        assert abs(a - a.T).max() == 0

    def test_attenuation_profile(self):
        g = Grid(20, 12, 0.1, 0.1, 4)
        gamma = attenuation_profile(g, 2.0)
        assert np.all(gamma >= 0)
        assert np.all(gamma[g.interior_mask()] == 0)
        col = gamma.reshape(g.shape)[10]
        assert np.all(np.diff(col[:5]) < 0)
        assert col[0] == pytest.approx(2.0)


class TestSolve:
    @pytest.fixture
    def fact(self):
        g = Grid(12, 9, 0.05, 0.05, 2)
        rng = np.random.default_rng(1)
        m = Model(rng.uniform(0.1, 0.4, g.n), 0.1, 0.4)
        op = assemble(g, m, 2 * np.pi * 4)
        return op, factorize(op)

    def test_inverse_consistency(self, fact):
        op, f = fact
        x = rng_complex(np.random.default_rng(2), op.grid.n, 3)
        np.testing.assert_allclose(solve(f, op.matrix @ x), x, rtol=1e-10, atol=1e-10)

    def test_residual(self, fact):
        op, f = fact
        b = rng_complex(np.random.default_rng(3), op.grid.n)
        x = solve(f, b)
        assert np.linalg.norm(op.matrix @ x - b) <= 1e-10 * np.linalg.norm(b)

    def test_linear_and_deterministic(self, fact):
        _, f = fact
        b = rng_complex(np.random.default_rng(4), f.n, 2)
        x = solve(f, b)
        np.testing.assert_array_equal(solve(f, 2 * b), 2 * x)
        np.testing.assert_array_equal(solve(f, b), x)

    def test_zero_rhs(self, fact):
        _, f = fact
        assert not np.any(solve(f, np.zeros((f.n, 2))))

    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_identity(self, fact, seed):
        _, f = fact
        rng = np.random.default_rng(seed)
        b, c = rng_complex(rng, f.n), rng_complex(rng, f.n)
        lhs = np.vdot(c, solve(f, b))
        rhs = np.vdot(solve(f, c, adjoint=True), b)
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)

    def test_band_permutation_for_tall_grid(self):
        g = Grid(6, 11, 0.05, 0.05, 1)
        op = assemble(g, homogeneous(g), 12.0)
        f = factorize(op)
        assert f.perm is not None and f.bandwidth == 6
        b = rng_complex(np.random.default_rng(0), g.n)
        np.testing.assert_allclose(op.matrix @ solve(f, b), b, atol=1e-9)
        dense = np.linalg.solve(op.matrix.toarray().conj().T, b)
        np.testing.assert_allclose(solve(f, b, adjoint=True), dense, rtol=1e-9)

    def test_shape_mismatch(self, fact):
        _, f = fact
        with pytest.raises(ValueError):
            solve(f, np.ones(f.n + 1))

    def test_counter(self, fact):
        _, f = fact
        counter.reset()
        solve(f, np.ones((f.n, 4)))
        solve(f, np.ones(f.n), adjoint=True)
        assert counter.forward_solves == 5

    def test_singular_names_frequency(self, monkeypatch):
        g = Grid(5, 5, 0.1, 0.1)
        op = assemble(g, homogeneous(g), 2 * np.pi * 3)
        from extfwi import helmholtz

        def zero_pivot(ab, kl, ku, overwrite_ab=0):
            return ab, np.zeros(ab.shape[1], dtype=np.int32), 7

        monkeypatch.setattr(helmholtz.lapack, "zgbtrf", zero_pivot)
        with pytest.raises(SingularOperatorError, match="3 Hz"):
            factorize(op)


class TestCache:
    def test_reuse_and_prune(self):
        g = Grid(8, 8, 0.05, 0.05, 2)
        cache = FactorizationCache(g)
        m1, m2 = homogeneous(g, 0.25), homogeneous(g, 0.2)
        counter.reset()
        f = cache.get(m1, 10.0)
        assert cache.get(m1, 10.0) is f
        cache.get(m2, 10.0)
        assert counter.factorizations == 2 and len(cache) == 2
        cache.prune(m2)
        assert len(cache) == 1
        cache.get(m2, 10.0)
        assert counter.factorizations == 2
        assert f.version == model_key(m1)

    def test_backstop_evicts_least_recent(self):
        g = Grid(6, 6, 0.05, 0.05, 1)
        cache = FactorizationCache(g, max_versions=2)
        ms = [homogeneous(g, v) for v in (0.2, 0.25, 0.3)]
        for m in ms:
            cache.get(m, 5.0)
        assert len(cache) == 2


class TestPointSource:
    def test_scaled_delta(self):
        g = Grid(5, 4, 0.1, 0.2)
        q = point_source(g, 2, 1)
        assert np.count_nonzero(q) == 1
        assert q[g.index(2, 1)] == pytest.approx(1 / 0.02)


class TestGreens:
    def test_accuracy_and_refinement(self):
        coarse, fine = greens_check(15.0)
        assert coarse.error <= 0.05
        assert fine.error < coarse.error
