"""Shared fixture builders for the test suite.

States built here are moderate-scale (no heavy prior tails) so that
finite-difference and moment comparisons are well conditioned.
"""

import numpy as np

from cmfa.data import PanelDataset
from cmfa.model import FitConfig, LatentState


def make_dataset(rng, N=5, T=7, D1=1, D2=1, D3=1, P=0, n_treated=2,
                 with_missing=True):
    """Random small panel with plausible magnitudes and n <= 25 trials."""
    y = rng.normal(0.0, 2.0, size=(N, T, D1))
    n = rng.integers(4, 26, size=(N, T, D2))
    if with_missing and D2:
        drop = rng.random((N, T, D2)) < 0.12
        n = np.where(drop, 0, n)
    k = rng.binomial(n, rng.uniform(0.25, 0.75, size=(N, T, D2)))
    w = rng.uniform(0.5, 3.0, size=(N, T, D3))
    if with_missing and D3:
        w = np.where(rng.random((N, T, D3)) < 0.12, 0.0, w)
    z = rng.poisson(np.maximum(w, 1e-12) * 3.0) * (w > 0)
    x = rng.normal(0.0, 1.0, size=(N, T, P))
    last = np.full(N, T, dtype=np.int64)
    if n_treated:
        treated = rng.choice(N, size=n_treated, replace=False)
        last[treated] = rng.integers(3, T, size=n_treated)
    return PanelDataset(
        y=y, k=k, n=n, z=z, w=w, x=x, last_untreated=last,
        unit_labels=[f"u{i:03d}" for i in range(N)],
    )


def make_state(data, config, rng, scale=0.6):
    """Moderate random state consistent with all invariants."""
    N, T, J = data.N, data.T, config.max_factors
    D1, D2, D3, D, P = data.D1, data.D2, data.D3, data.D, data.P
    anchor = rng.integers(0, max(D, 1), size=J)
    factor_var = rng.uniform(0.2, 1.0, size=(J, D))
    if D:
        factor_var[np.arange(J), anchor] = 1.0
    k_xi = 1 if config.pooled_dispersion else N
    phi = rng.uniform(0.3, 0.9, size=(N, J))
    state = LatentState(
        loadings=rng.normal(0, scale, size=(N, J)),
        f_factors=rng.normal(0, scale, size=(T, D1, J)),
        g_factors=rng.normal(0, scale, size=(T, D2, J)),
        h_factors=rng.normal(0, scale, size=(T, D3, J)),
        eta1=rng.normal(0, 0.3, size=(D1, P)),
        eta2=rng.normal(0, 0.3, size=(D2, P)),
        eta3=rng.normal(0, 0.3, size=(D3, P)),
        noise_var=rng.uniform(0.5, 3.0, size=(N, D1)),
        dispersion=rng.uniform(0.5, 3.0, size=(k_xi, D3)),
        disp_rate=2.0,
        phi=phi,
        phi_rate=rng.uniform(0.5, 2.0, size=(N, J)),
        zeta=rng.uniform(0.3, 0.7, size=J),
        zeta_rate=rng.uniform(0.5, 2.0, size=J),
        rho=0.5,
        rho_rate=1.0,
        factor_var=factor_var,
        anchor=anchor,
        pg_aux=np.zeros((N, T, D2)),
        crt_aux=np.zeros((N, T, D3), dtype=np.int64),
        lambda_step=np.full(N, 0.5),
        h_step=np.full((T, D3), 0.5),
        eta3_step=np.full(D3, 0.5),
        xi_step=np.ones((k_xi, D3)),
    )
    # valid augmentations
    _, bin_valid, cnt_valid = data.masks()
    state.pg_aux = np.where(bin_valid, rng.uniform(0.5, 4.0, size=(N, T, D2)) * data.n / 4.0, 0.0)
    state.crt_aux = np.where(cnt_valid & (data.z > 0),
                             np.maximum(1, (data.z * rng.uniform(0.2, 0.8, size=data.z.shape)).astype(np.int64)),
                             0)
    return state


def richardson_grad(f, x, h=1e-5):
    """Central finite differences with one Richardson extrapolation step."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        step = h * max(1.0, abs(x[idx]))

        def d(hh):
            xp = x.copy(); xp[idx] += hh
            xm = x.copy(); xm[idx] -= hh
            return (f(xp) - f(xm)) / (2 * hh)

        g[idx] = (4.0 * d(step / 2) - d(step)) / 3.0
        it.iternext()
    return g


def tamed_config(**kw):
    """Config with light-tailed shrinkage shapes for well-posed moment checks."""
    defaults = dict(max_factors=3, iterations=100, thin=10, burn_in_draws=2,
                    tpb_shapes=(3.0,) * 6, nu=0.5, a_xi=5.0, c_xi=1.0, seed=0)
    defaults.update(kw)
    return FitConfig(**defaults)
