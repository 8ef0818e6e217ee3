import numpy as np
import pytest

from cmfa import model as mdl
from cmfa.data import FAMILY_BINOMIAL, FAMILY_COUNT, FAMILY_NORMAL, PanelDataset
from cmfa.errors import NumericalError

from helpers import make_dataset, make_state, richardson_grad, tamed_config


@pytest.fixture
def small():
    rng = np.random.default_rng(11)
    data = make_dataset(rng, N=5, T=7, D1=2, D2=1, D3=1, P=2)
    config = tamed_config(max_factors=3)
    state = make_state(data, config, rng)
    return data, config, state


class TestLinearPredictor:
    def test_zero_parameters(self, small):
        data, config, state = small
        state.loadings[:] = 0.0
        state.eta1[:] = 0.0
        assert mdl.linear_predictor(state, data, FAMILY_NORMAL, 0, 0, 0) == 0.0

    def test_dot_product(self, small):
        data, config, state = small
        state.loadings[1, :] = [1.0, 2.0, 0.0]
        state.f_factors[3, 0, :] = [3.0, -1.0, 0.0]
        state.eta1[0, :] = 0.0
        assert mdl.linear_predictor(state, data, FAMILY_NORMAL, 1, 3, 0) == pytest.approx(1.0)

    def test_with_covariate(self, small):
        data, config, state = small
        state.loadings[2, :] = [1.0, 0.0, 0.0]
        state.g_factors[4, 0, :] = [5.0, 9.0, 0.0]
        state.eta2[0, :] = [2.0, 0.0]
        data.x[2, 4, :] = [0.5, 0.0]
        assert mdl.linear_predictor(state, data, FAMILY_BINOMIAL, 2, 4, 0) == pytest.approx(6.0)

    def test_index_errors(self, small):
        data, config, state = small
        with pytest.raises(IndexError):
            mdl.linear_predictor(state, data, FAMILY_NORMAL, data.N, 0, 0)
        with pytest.raises(IndexError):
            mdl.linear_predictor(state, data, FAMILY_COUNT, 0, 0, data.D3)


class TestLogLikelihood:
    def test_empty_dataset(self):
        e = np.empty((0, 3, 0))
        ei = np.empty((0, 3, 0), dtype=np.int64)
        data = PanelDataset(y=np.empty((0, 3, 1)), k=ei, n=ei, z=ei, w=e,
                            x=np.empty((0, 3, 0)), last_untreated=np.empty(0, dtype=np.int64),
                            unit_labels=[])
        config = tamed_config(max_factors=2)
        state = make_state(data, config, np.random.default_rng(0))
        assert mdl.log_likelihood(state, data) == 0.0

    def test_single_normal_cell_at_mode(self):
        data = PanelDataset(
            y=np.zeros((1, 2, 1)), k=np.zeros((1, 2, 0), dtype=int),
            n=np.zeros((1, 2, 0), dtype=int), z=np.zeros((1, 2, 0), dtype=int),
            w=np.zeros((1, 2, 0)), x=np.zeros((1, 2, 0)),
            last_untreated=[1], unit_labels=["a"])
        config = tamed_config(max_factors=1)
        state = make_state(data, config, np.random.default_rng(0))
        state.loadings[:] = 0.0
        state.noise_var[:] = 1.0
        assert mdl.log_likelihood(state, data) == pytest.approx(-0.5 * np.log(2 * np.pi))

    def test_single_binomial_cell(self):
        data = PanelDataset(
            y=np.zeros((1, 2, 0)), k=[[[3], [0]]], n=[[[10], [0]]],
            z=np.zeros((1, 2, 0), dtype=int), w=np.zeros((1, 2, 0)),
            x=np.zeros((1, 2, 0)), last_untreated=[1], unit_labels=["a"])
        config = tamed_config(max_factors=1)
        state = make_state(data, config, np.random.default_rng(0))
        state.loadings[:] = 0.0  # predictor 0 -> p = 1/2
        from scipy.special import comb
        expected = np.log(comb(10, 3)) + 10 * np.log(0.5)
        assert mdl.log_likelihood(state, data) == pytest.approx(expected)

    def test_decomposes_into_cells(self, small):
        data, config, state = small
        total = mdl.log_likelihood(state, data)
        cells = (mdl.loglik_normal_cells(state, data).sum()
                 + mdl.loglik_binomial_cells(state, data).sum()
                 + mdl.loglik_count_cells(state, data).sum())
        assert total == pytest.approx(cells, rel=1e-10)
        one = mdl.log_likelihood_cell(state, data, FAMILY_NORMAL, 1, 2, 0)
        assert one == pytest.approx(mdl.loglik_normal_cells(state, data)[1, 2, 0])

    def test_rotation_invariance(self, small):
        data, config, state = small
        base = mdl.log_likelihood(state, data)
        rng = np.random.default_rng(5)
        perm = rng.permutation(config.max_factors)
        signs = rng.choice([-1.0, 1.0], size=config.max_factors)
        Q = np.zeros((config.max_factors, config.max_factors))
        Q[np.arange(config.max_factors), perm] = signs
        rotated = state.copy()
        rotated.loadings = state.loadings @ Q
        rotated.f_factors = state.f_factors @ Q
        rotated.g_factors = state.g_factors @ Q
        rotated.h_factors = state.h_factors @ Q
        assert mdl.log_likelihood(rotated, data) == pytest.approx(base, rel=1e-12)

    def test_masked_cells_are_inert(self, small):
        data, config, state = small
        base = mdl.log_likelihood(state, data)
        g0, h0 = mdl.lambda_grad_neghess(state, data)
        # poison every unobserved / post-intervention cell
        pre, bin_valid, cnt_valid = data.masks()
        data.y[~pre, :] = 1e6
        data.k[~bin_valid] = 0
        data.z[~cnt_valid] = 10**6
        assert mdl.log_likelihood(state, data) == base
        g1, h1 = mdl.lambda_grad_neghess(state, data)
        np.testing.assert_array_equal(g0, g1)
        np.testing.assert_array_equal(h0, h1)

    def test_nonfinite_raises_with_coordinates(self, small):
        data, config, state = small
        state.noise_var[2, 0] = np.inf
        state.noise_var[2, 0] = np.nan
        with pytest.raises(NumericalError, match="unit=2"):
            mdl.log_likelihood(state, data)


class TestGradients:
    def _fd_check(self, value, target, grad, rtol=1e-5):
        fd = richardson_grad(target, value)
        scale = np.maximum(np.abs(fd), 1e-3)
        assert np.max(np.abs(grad - fd) / scale) < rtol

    def test_lambda_gradient_fd(self, small):
        data, config, state = small
        rng = np.random.default_rng(21)
        for trial in range(10):
            st = make_state(data, config, rng)
            g, _ = mdl.lambda_grad_neghess(st, data)
            i = trial % data.N

            def target(row, i=i, st=st):
                lam = st.loadings.copy()
                lam[i] = row
                return mdl.lambda_targets(st, data, loadings=lam)[i]

            self._fd_check(st.loadings[i], target, g[i])

    def test_h_gradient_fd(self, small):
        data, config, state = small
        rng = np.random.default_rng(22)
        for trial in range(6):
            st = make_state(data, config, rng)
            g, _ = mdl.h_grad_neghess(st, data)
            t, d = trial % data.T, 0

            def target(vec, t=t, d=d, st=st):
                fac = st.h_factors.copy()
                fac[t, d] = vec
                return mdl.h_targets(st, data, factors=fac)[t, d]

            self._fd_check(st.h_factors[t, d], target, g[t, d])

    def test_eta3_gradient_fd(self, small):
        data, config, state = small
        rng = np.random.default_rng(23)
        for _ in range(6):
            st = make_state(data, config, rng)
            g, _ = mdl.eta3_grad_neghess(st, data)

            def target(vec, st=st):
                co = st.eta3.copy()
                co[0] = vec
                return mdl.eta3_targets(st, data, coefs=co)[0]

            self._fd_check(st.eta3[0], target, g[0])

    def test_normal_only_neghess_closed_form(self):
        rng = np.random.default_rng(31)
        data = make_dataset(rng, N=3, T=6, D1=2, D2=0, D3=0, P=0)
        config = tamed_config(max_factors=2)
        state = make_state(data, config, rng)
        _, H = mdl.lambda_grad_neghess(state, data)
        pre, _, _ = data.masks()
        for i in range(data.N):
            expected = np.diag(state.loading_precision()[i]).astype(float)
            for d in range(data.D1):
                f = state.f_factors[pre[i], d, :]
                expected += f.T @ f / state.noise_var[i, d]
            np.testing.assert_allclose(H[i], expected, rtol=1e-12)

    def test_h_neghess_closed_form(self, small):
        data, config, state = small
        _, H = mdl.h_grad_neghess(state, data)
        rate = mdl.count_poisson_rate(state, data)
        var = mdl.factor_var_slice(state, data, FAMILY_COUNT)
        t, d = 3, 0
        expected = np.diag(1.0 / var[d]).astype(float)
        for i in range(data.N):
            expected += rate[i, t, d] * np.outer(state.loadings[i], state.loadings[i])
        np.testing.assert_allclose(H[t, d], expected, rtol=1e-12)

    def test_prior_only_gradient_when_no_data(self):
        rng = np.random.default_rng(32)
        data = make_dataset(rng, N=3, T=5, D1=0, D2=1, D3=1, P=0, with_missing=False)
        data.n[:] = 0
        data.k[:] = 0
        data.w[:] = 0.0
        data.z[:] = 0
        data._masks = None
        config = tamed_config(max_factors=2)
        state = make_state(data, config, rng)
        state.pg_aux[:] = 0.0
        state.crt_aux[:] = 0
        g, H = mdl.lambda_grad_neghess(state, data)
        prec = state.loading_precision()
        np.testing.assert_allclose(g, -prec * state.loadings, rtol=1e-12)
        for i in range(data.N):
            np.testing.assert_allclose(H[i], np.diag(prec[i]), rtol=1e-12)

    def test_spec_wrappers(self, small):
        data, config, state = small
        g, H = mdl.grad_hess_lambda(state, data, 1)
        assert g.shape == (config.max_factors,)
        np.linalg.cholesky(H)  # positive definite after regularization
        g, H = mdl.grad_hess_h(state, data, 2, 0)
        np.linalg.cholesky(H)
        g, H = mdl.grad_hess_eta3(state, data, 0)
        np.linalg.cholesky(H)


class TestRegularize:
    def test_jitter_recovers_near_singular(self):
        mats = np.array([[[1.0, 1.0], [1.0, 1.0]]])  # singular
        out, chols, fb = mdl.regularize_neghess(mats, prior_diag=np.ones((1, 2)))
        np.linalg.cholesky(out[0])

    def test_fallback_to_prior(self):
        mats = np.array([[[-5.0, 0.0], [0.0, -7.0]]])  # hopeless
        out, chols, fb = mdl.regularize_neghess(mats, prior_diag=np.full((1, 2), 4.0))
        assert fb[0]
        np.testing.assert_allclose(out[0], np.diag([4.0, 4.0]))
