import numpy as np
import pytest

from conftest import rng_complex, small_setup, taylor_slope
from extfwi.helmholtz import counter, solve
from extfwi.mesh import Model
from extfwi.objective import DIFFUSION, SPLINE, Regularizer, reg_value_grad_hess
from extfwi.sensitivity import (StaleFieldsError, compute_fields, data_misfit, gradient,
                                gn_hessian_apply, jacobian_adjoint_apply, jacobian_apply)


def all_data(problem):
    return {j: problem.observed.data[j] for j in problem.all_frequencies()}


def fields(problem, model):
    return compute_fields(problem, model, problem.q, all_data(problem),
                          problem.all_frequencies())


def interior_direction(problem, seed, scale=0.05):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(problem.grid.n) * scale
    v[~problem.grid.interior_mask()] = 0
    return v


def wide(model):
    return Model(model.values, 0.01, 2.0)


class TestJacobian:
    def test_zero_and_linear(self, small):
        problem, _, m0 = small
        store = fields(problem, m0)
        assert not np.any(jacobian_apply(problem, m0, store, 0, np.zeros(problem.grid.n)))
        v = interior_direction(problem, 0)
        np.testing.assert_array_equal(jacobian_apply(problem, m0, store, 0, 2 * v),
                                      2 * jacobian_apply(problem, m0, store, 0, v))
        w = np.zeros((problem.receivers.n_receivers, 3), complex)
        assert not np.any(jacobian_adjoint_apply(problem, m0, store, 0, w))

    def test_taylor(self, small):
        problem, _, m0 = small
        m0 = wide(m0)
        store = fields(problem, m0)
        v = interior_direction(problem, 1)
        jv = jacobian_apply(problem, m0, store, 1, v)

        def forward(values):
            m = Model(values, 0.01, 2.0)
            return problem.receivers.sample(solve(problem.factor(m, 1), problem.q))

        f0 = forward(m0.values)
        hs = [1e-2, 1e-3, 1e-4, 1e-5]
        rem = [np.linalg.norm(forward(m0.values + h * v) - f0 - h * jv) for h in hs]
        slope = np.polyfit(np.log(hs), np.log(rem), 1)[0]
        assert 1.9 <= slope <= 2.1

    @pytest.mark.parametrize("seed", range(3))
    def test_dot(self, small, seed):
        problem, _, m0 = small
        store = fields(problem, m0)
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(problem.grid.n)
        w = rng_complex(rng, problem.receivers.n_receivers, 3)
        lhs = np.vdot(w, jacobian_apply(problem, m0, store, 0, v)).real
        rhs = v @ jacobian_adjoint_apply(problem, m0, store, 0, w)
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)

    def test_dense_fd(self):
        problem, _, m0 = small_setup(nx=10, nz=8, sponge=2, n_s=1, n_r=1, freqs=(3.0,))
        m0 = wide(m0)
        store = fields(problem, m0)
        eps = 1e-6

        def forward(values):
            m = Model(values, 0.01, 2.0)
            return problem.receivers.sample(solve(problem.factor(m, 0), problem.q))[0, 0]

        cols = []
        for i in range(problem.grid.n):
            e = np.zeros(problem.grid.n)
            e[i] = 1
            cols.append((forward(m0.values + eps * e) - forward(m0.values - eps * e)) / (2 * eps))
            fd = cols[-1]
            jv = jacobian_apply(problem, m0, store, 0, e)[0, 0]
            assert abs(jv - fd) <= 1e-5 * max(abs(fd), 1e-3 * abs(cols[0]) + 1e-12)

    def test_stale_store(self, small):
        problem, _, m0 = small
        store = fields(problem, m0)
        other = m0.replace(m0.values * 1.01)
        with pytest.raises(StaleFieldsError):
            jacobian_apply(problem, other, store, 0, np.zeros(problem.grid.n))

    def test_solve_counts(self, small):
        problem, _, m0 = small
        store = fields(problem, m0)
        problem.factor(m0, 0)
        counter.reset()
        gn_hessian_apply(problem, m0, store, interior_direction(problem, 0))
        assert counter.forward_solves == 2 * 3 * 2
        counter.reset()
        gradient(problem, m0, store)
        assert counter.forward_solves == 3 * 2


def objective(problem, sources, data, scale, reg):
    def phi(values):
        m = Model(values, 0.01, 2.0)
        store = compute_fields(problem, m, sources, data, problem.all_frequencies(), scale)
        val = data_misfit(problem, store)
        if reg is not None:
            val += reg.alpha * reg_value_grad_hess(problem.grid, m, reg)[0]
        return val
    return phi


@pytest.fixture
def variants(small):
    problem, _, m0 = small
    rng = np.random.default_rng(7)
    z = rng_complex(rng, problem.grid.n, 2) @ rng_complex(rng, 2, 3) * 0.5
    x = rng.choice([-1.0, 1.0], size=(3, 2))
    d = all_data(problem)
    return problem, wide(m0), {
        "reduced": (problem.q, d, 1.0),
        "extended": (problem.q + z, d, 1.0),
        "simultaneous": ((problem.q + z) @ x, {j: v @ x for j, v in d.items()}, 0.5),
    }


class TestGradient:
    @pytest.mark.parametrize("variant", ["reduced", "extended", "simultaneous"])
    def test_taylor_full_objective(self, variants, variant):
        problem, m0, table = variants
        sources, data, scale = table[variant]
        reg = Regularizer(SPLINE, 10.0, m0.values * 0.9)
        store = compute_fields(problem, m0, sources, data, problem.all_frequencies(), scale)
        g, _ = gradient(problem, m0, store, reg)
        v = interior_direction(problem, 3)
        slope, _ = taylor_slope(objective(problem, sources, data, scale, reg), g @ v,
                                m0.values, v)
        assert 1.9 <= slope <= 2.1

    def test_zero_at_truth(self):
        problem, truth, _ = small_setup()
        g, misfit = gradient(problem, truth, fields(problem, truth))
        assert misfit == 0 and not np.any(g)

    def test_linear_in_alpha(self, small):
        problem, _, m0 = small
        store = fields(problem, m0)
        ref = m0.values * 0.95
        g = {a: gradient(problem, m0, store, Regularizer(DIFFUSION, a, ref))[0] for a in (0, 1, 2)}
        diff = g[2] - g[0]
        # exact up to the rounding of adding alpha * grad R to the data gradient
        np.testing.assert_allclose(diff, 2 * (g[1] - g[0]), rtol=0,
                                   atol=1e-12 * np.abs(g[0]).max())

    def test_sponge_zeroed(self, small):
        problem, _, m0 = small
        g, _ = gradient(problem, m0, fields(problem, m0))
        assert not np.any(g[~problem.grid.interior_mask()])
        assert np.any(g[problem.grid.interior_mask()])


class TestHessian:
    def test_symmetric_psd(self, small):
        problem, _, m0 = small
        store = fields(problem, m0)
        reg = Regularizer(SPLINE, 3.0, m0.values)
        rng = np.random.default_rng(0)
        v, w = rng.standard_normal(problem.grid.n), rng.standard_normal(problem.grid.n)
        hv = gn_hessian_apply(problem, m0, store, v, reg)
        hw = gn_hessian_apply(problem, m0, store, w, reg)
        assert hv @ w == pytest.approx(v @ hw, rel=1e-10)
        assert hv @ v >= -1e-10 * (v @ v)

    def test_matches_jacobian(self, small):
        problem, _, m0 = small
        store = fields(problem, m0)
        v = interior_direction(problem, 5)
        expected = np.zeros(problem.grid.n)
        for j in range(2):
            jv = jacobian_apply(problem, m0, store, j, v)
            expected += jacobian_adjoint_apply(problem, m0, store, j,
                                               2 * jv / problem.observed.sigma2[j])
        expected[~problem.grid.interior_mask()] = 0
        np.testing.assert_allclose(gn_hessian_apply(problem, m0, store, v), expected, rtol=1e-12)

    def test_regularizer_dominates(self, small):
        problem, _, m0 = small
        store = fields(problem, m0)
        reg = Regularizer(SPLINE, 1e8, m0.values)
        v = interior_direction(problem, 6)
        hv = gn_hessian_apply(problem, m0, store, v, reg)
        rv = reg.alpha * (reg.gram(problem.grid) @ v)
        rv[~problem.grid.interior_mask()] = 0
        assert np.linalg.norm(hv - rv) <= 0.01 * np.linalg.norm(rv)
