"""Latent state, linear predictors, likelihoods and their derivatives.

The three outcome families share a loadings matrix; each family has its own
time-varying factors and regression coefficients.  Only pre-intervention
cells (t <= T_i) ever contribute to likelihood values or derivatives, and
cells encoded as unobserved (zero trials / zero offset) contribute exactly
nothing.

The binomial blocks are handled through their Polya-Gamma augmented quadratic
form and the count blocks through their latent-count Poisson form, which is
what makes every gradient and Hessian below closed-form.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields

import numpy as np
from scipy.special import gammaln

from .data import FAMILY_BINOMIAL, FAMILY_COUNT, FAMILY_NORMAL, PanelDataset
from .errors import NumericalError, ValidationError

SIGMA2_MAX = 100.0         # uniform prior upper bound for noise variances
COEF_PRIOR_VAR = 100.0     # N(0, 10^2) prior variance for regression coefficients
JITTER_BASE = 1e-8
JITTER_RETRIES = 3


@dataclass
class FitConfig:
    """MCMC settings. ``iterations`` must be divisible by ``thin`` and
    ``burn_in_draws`` (discarded snapshots) must be below iterations/thin."""

    max_factors: int = 25
    iterations: int = 100_000
    thin: int = 50
    burn_in_draws: int = 500
    nu: float = 0.1
    tpb_shapes: tuple = (0.5, 0.5, 0.5, 0.5, 0.5, 0.5)  # a..f for the loadings hierarchy
    a_xi: float = 5.0
    c_xi: float = 1.0
    pooled_dispersion: bool = False
    chains: int = 1
    seed: int = 0
    smmala_accept_target: float = 0.574
    barker_accept_target: float = 0.40
    sigma2_step: float = 0.5
    checkpoint_every: int = 5000

    def __post_init__(self):
        if self.max_factors < 1:
            raise ValidationError("max_factors must be >= 1")
        if self.iterations < 1 or self.thin < 1 or self.iterations % self.thin != 0:
            raise ValidationError("iterations must be a positive multiple of thin")
        if not (0 <= self.burn_in_draws < self.iterations // self.thin):
            raise ValidationError("burn_in_draws must be below iterations/thin")
        if len(self.tpb_shapes) != 6 or any(s <= 0 for s in self.tpb_shapes):
            raise ValidationError("tpb_shapes must be six positive reals")
        if self.nu <= 0 or self.a_xi <= 0 or self.c_xi <= 0:
            raise ValidationError("nu, a_xi, c_xi must be positive")
        if self.chains < 1:
            raise ValidationError("chains must be >= 1")

    @property
    def burn_in_iterations(self) -> int:
        return self.burn_in_draws * self.thin

    @property
    def retained_draws(self) -> int:
        return self.iterations // self.thin - self.burn_in_draws


@dataclass
class LatentState:
    """One full MCMC state.

    Shapes (J = max_factors): loadings (N,J); factors (T,D1,J)/(T,D2,J)/
    (T,D3,J); coefs (D*,P); noise_var (N,D1); dispersion (K,D3) with K = N or
    1 when pooled; factor_var (J,D) with factor_var[j, anchor[j]] == 1;
    shrinkage chains live on (0,1) with their gamma-expansion rate variables
    alongside; pg_aux/crt_aux hold the per-cell augmentations.
    """

    loadings: np.ndarray
    f_factors: np.ndarray
    g_factors: np.ndarray
    h_factors: np.ndarray
    eta1: np.ndarray
    eta2: np.ndarray
    eta3: np.ndarray
    noise_var: np.ndarray
    dispersion: np.ndarray
    disp_rate: float                  # hierarchical rate shared by dispersions
    phi: np.ndarray                   # elementwise shrinkage, (N,J) in (0,1)
    phi_rate: np.ndarray              # gamma-expansion rate above phi, (N,J)
    zeta: np.ndarray                  # per-column shrinkage, (J,) in (0,1)
    zeta_rate: np.ndarray             # (J,)
    rho: float                        # global shrinkage in (0,1)
    rho_rate: float
    factor_var: np.ndarray            # (J,D) prior variances, anchor column pinned at 1
    anchor: np.ndarray                # (J,) flat outcome index most affected per loading
    pg_aux: np.ndarray                # (N,T,D2) Polya-Gamma latents
    crt_aux: np.ndarray               # (N,T,D3) latent table counts
    lambda_step: np.ndarray           # (N,) SMMALA step sizes
    h_step: np.ndarray                # (T,D3)
    eta3_step: np.ndarray             # (D3,)
    xi_step: np.ndarray               # (K,D3) Barker step sizes

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[1]

    def loading_precision(self) -> np.ndarray:
        """Prior precision of each loading element: phi/(1-phi)."""
        return self.phi / (1.0 - self.phi)

    def copy(self) -> "LatentState":
        kw = {}
        for f in dc_fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v.copy() if isinstance(v, np.ndarray) else v
        return LatentState(**kw)

    def validate(self, data: PanelDataset, config: FitConfig):
        J = self.n_factors
        checks = [
            (self.loadings.shape == (data.N, J), "loadings shape"),
            (self.f_factors.shape == (data.T, data.D1, J), "f factors shape"),
            (self.g_factors.shape == (data.T, data.D2, J), "g factors shape"),
            (self.h_factors.shape == (data.T, data.D3, J), "h factors shape"),
            (np.all((self.phi > 0) & (self.phi < 1)), "phi in (0,1)"),
            (np.all((self.zeta > 0) & (self.zeta < 1)), "zeta in (0,1)"),
            (0.0 < self.rho < 1.0, "rho in (0,1)"),
            (np.all((self.noise_var > 0) & (self.noise_var <= SIGMA2_MAX)), "noise_var in (0,100]"),
            (np.all(self.dispersion > 0), "dispersion positive"),
            (np.all((self.factor_var > 0) & (self.factor_var <= 1.0)), "factor_var in (0,1]"),
            (np.all(self.factor_var[np.arange(J), self.anchor] == 1.0), "anchor variance pinned"),
            (np.all(self.pg_aux >= 0), "pg_aux nonnegative"),
        ]
        _, bin_valid, _ = data.masks()
        checks.append((np.all((self.pg_aux > 0) == bin_valid), "pg_aux positive iff observed"))
        for ok, what in checks:
            if not ok:
                raise NumericalError(f"state invariant violated: {what}")
        for name in ("loadings", "f_factors", "g_factors", "h_factors",
                     "eta1", "eta2", "eta3", "noise_var", "dispersion"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                idx = np.argwhere(~np.isfinite(arr))[0]
                raise NumericalError(f"non-finite value in {name} at {tuple(idx)}")


def flat_outcome_index(data: PanelDataset, family: int, d: int) -> int:
    """Position of outcome (family, d) in the concatenated outcome axis."""
    if family == FAMILY_NORMAL:
        return d
    if family == FAMILY_BINOMIAL:
        return data.D1 + d
    if family == FAMILY_COUNT:
        return data.D1 + data.D2 + d
    raise ValidationError(f"unknown family {family}")


def factor_var_slice(state: LatentState, data: PanelDataset, family: int) -> np.ndarray:
    """Factor prior variances for one family, shaped (D_family, J)."""
    if family == FAMILY_NORMAL:
        return state.factor_var[:, :data.D1].T
    if family == FAMILY_BINOMIAL:
        return state.factor_var[:, data.D1:data.D1 + data.D2].T
    return state.factor_var[:, data.D1 + data.D2:].T


# ---------------------------------------------------------------------------
# Linear predictors
# ---------------------------------------------------------------------------

def predictor_normal(state, data, loadings=None, factors=None):
    lam = state.loadings if loadings is None else loadings
    fac = state.f_factors if factors is None else factors
    mu = np.einsum("ij,tdj->itd", lam, fac)
    if data.P:
        mu = mu + np.einsum("itp,dp->itd", data.x, state.eta1)
    return mu


def predictor_binomial(state, data, loadings=None, factors=None, coefs=None):
    lam = state.loadings if loadings is None else loadings
    fac = state.g_factors if factors is None else factors
    psi = np.einsum("ij,tdj->itd", lam, fac)
    if data.P:
        psi = psi + np.einsum("itp,dp->itd", data.x, state.eta2 if coefs is None else coefs)
    return psi


def predictor_count(state, data, loadings=None, factors=None, coefs=None):
    lam = state.loadings if loadings is None else loadings
    fac = state.h_factors if factors is None else factors
    psi = np.einsum("ij,tdj->itd", lam, fac)
    if data.P:
        psi = psi + np.einsum("itp,dp->itd", data.x, state.eta3 if coefs is None else coefs)
    return psi


def linear_predictor(state, data, family, i, t, d):
    """Single-cell linear predictor (0-based indices)."""
    if not (0 <= i < data.N and 0 <= t < data.T):
        raise IndexError("unit or time index out of range")
    lam = state.loadings[i]
    if family == FAMILY_NORMAL:
        if not 0 <= d < data.D1:
            raise IndexError("outcome index out of range")
        base = lam @ state.f_factors[t, d]
        coef = state.eta1[d] if data.P else 0.0
    elif family == FAMILY_BINOMIAL:
        if not 0 <= d < data.D2:
            raise IndexError("outcome index out of range")
        base = lam @ state.g_factors[t, d]
        coef = state.eta2[d] if data.P else 0.0
    elif family == FAMILY_COUNT:
        if not 0 <= d < data.D3:
            raise IndexError("outcome index out of range")
        base = lam @ state.h_factors[t, d]
        coef = state.eta3[d] if data.P else 0.0
    else:
        raise ValidationError(f"unknown family {family}")
    if data.P:
        base = base + coef @ data.x[i, t]
    return float(base)


# ---------------------------------------------------------------------------
# Log-likelihoods (exact, pre-intervention cells only)
# ---------------------------------------------------------------------------

def _dispersion_full(state, data):
    """Dispersion broadcast to (N, D3) whether pooled or per-unit."""
    return np.broadcast_to(state.dispersion, (data.N, data.D3))


def loglik_normal_cells(state, data):
    pre, _, _ = data.masks()
    mu = predictor_normal(state, data)
    var = state.noise_var[:, None, :]
    ll = -0.5 * (np.log(2 * np.pi * var) + (data.y - mu) ** 2 / var)
    return np.where(pre[:, :, None], ll, 0.0)


def loglik_binomial_cells(state, data):
    _, bin_valid, _ = data.masks()
    psi = predictor_binomial(state, data)
    ll = (
        gammaln(data.n + 1.0) - gammaln(data.k + 1.0) - gammaln(data.n - data.k + 1.0)
        + data.k * psi - data.n * np.logaddexp(0.0, psi)
    )
    return np.where(bin_valid, ll, 0.0)


def loglik_count_cells(state, data):
    _, _, cnt_valid = data.masks()
    xi = _dispersion_full(state, data)[:, None, :]
    q = np.exp(predictor_count(state, data))
    mean = data.w * q
    a = np.where(cnt_valid, mean / xi, 1.0)
    log1pxi = np.log1p(xi)
    ll = (
        gammaln(data.z + a) - gammaln(a) - gammaln(data.z + 1.0)
        - a * log1pxi + data.z * (np.log(xi) - log1pxi)
    )
    return np.where(cnt_valid, ll, 0.0)


def log_likelihood(state, data) -> float:
    """Total exact log-likelihood over pre-intervention observed cells."""
    total = 0.0
    for name, cells in (("normal", loglik_normal_cells(state, data)),
                        ("binomial", loglik_binomial_cells(state, data)),
                        ("negbin", loglik_count_cells(state, data))):
        if cells.size and not np.all(np.isfinite(cells)):
            i, t, d = np.argwhere(~np.isfinite(cells))[0]
            raise NumericalError(f"non-finite {name} log-likelihood at unit={i} time={t} outcome={d}")
        total += cells.sum()
    return float(total)


def log_likelihood_cell(state, data, family, i, t, d) -> float:
    cells = {FAMILY_NORMAL: loglik_normal_cells, FAMILY_BINOMIAL: loglik_binomial_cells,
             FAMILY_COUNT: loglik_count_cells}[family](state, data)
    return float(cells[i, t, d])


# ---------------------------------------------------------------------------
# Augmented conditionals: values, gradients, negative Hessians
# ---------------------------------------------------------------------------

def count_poisson_rate(state, data, loadings=None, factors=None, coefs=None):
    """Poisson-form rate (w/xi) exp(psi) log(1+xi), zero at unobserved cells."""
    _, _, cnt_valid = data.masks()
    xi = _dispersion_full(state, data)[:, None, :]
    psi = predictor_count(state, data, loadings=loadings, factors=factors, coefs=coefs)
    rate = data.w / xi * np.exp(psi) * np.log1p(xi)
    return np.where(cnt_valid, rate, 0.0)


def _stack_outer(factors):
    """(T,D,J) factor array -> (T*D, J*J) matrix of flattened outer products."""
    T, D, J = factors.shape
    flat = factors.reshape(T * D, J)
    return (flat[:, :, None] * flat[:, None, :]).reshape(T * D, J * J), flat


def lambda_value_grad_neghess(state, data, loadings=None):
    """Augmented log full-conditional of each unit's loadings row, with its
    gradient and negative Hessian, evaluated in one pass.

    Normal cells enter exactly, binomial cells through the PG quadratic with
    pseudo-response (k - n/2)/omega, count cells through the latent-count
    Poisson form; plus the N(0, diag(1/phi - 1)) prior.  Constants that do
    not depend on the loadings are dropped.
    """
    lam = state.loadings if loadings is None else loadings
    pre, bin_valid, cnt_valid = data.masks()
    N, J = lam.shape
    val = np.zeros(N)
    grad = np.zeros((N, J))
    neghess = np.zeros((N, J, J))
    if data.D1:
        mu = predictor_normal(state, data, loadings=lam)
        inv_var = pre[:, :, None] / state.noise_var[:, None, :]       # (N,T,D1)
        resid = np.where(pre[:, :, None], data.y - mu, 0.0)
        val += -0.5 * (resid**2 * inv_var).sum(axis=(1, 2))
        outer, flat = _stack_outer(state.f_factors)
        grad += (resid * inv_var).reshape(N, -1) @ flat
        neghess += (inv_var.reshape(N, -1) @ outer).reshape(N, J, J)
    if data.D2:
        psi = predictor_binomial(state, data, loadings=lam)
        kappa = np.where(bin_valid, data.k - 0.5 * data.n, 0.0)
        omega = np.where(bin_valid, state.pg_aux, 0.0)
        val += (kappa * psi - 0.5 * omega * psi**2).reshape(N, -1).sum(axis=1)
        outer, flat = _stack_outer(state.g_factors)
        grad += (kappa - omega * psi).reshape(N, -1) @ flat
        neghess += (omega.reshape(N, -1) @ outer).reshape(N, J, J)
    if data.D3:
        psi = predictor_count(state, data, loadings=lam)
        xi = _dispersion_full(state, data)[:, None, :]
        rate = np.where(cnt_valid, data.w / xi * np.exp(psi) * np.log1p(xi), 0.0)
        tables = np.where(cnt_valid, state.crt_aux, 0)
        val += (tables * np.where(cnt_valid, psi, 0.0) - rate).sum(axis=(1, 2))
        outer, flat = _stack_outer(state.h_factors)
        grad += (tables - rate).reshape(N, -1) @ flat
        neghess += (rate.reshape(N, -1) @ outer).reshape(N, J, J)
    prec = state.loading_precision()
    val -= 0.5 * np.einsum("ij,ij,ij->i", lam, lam, prec)
    grad -= prec * lam
    idx = np.arange(J)
    neghess[:, idx, idx] += prec
    return val, grad, neghess


def lambda_targets(state, data, loadings=None):
    return lambda_value_grad_neghess(state, data, loadings)[0]


def lambda_grad_neghess(state, data, loadings=None):
    """Gradient (N,J) and negative Hessian (N,J,J) of ``lambda_targets``."""
    _, grad, neghess = lambda_value_grad_neghess(state, data, loadings)
    return grad, neghess


def h_value_grad_neghess(state, data, factors=None):
    """Log full-conditional of each count-factor vector (T,D3) with its
    gradient (T,D3,J) and negative Hessian (T,D3,J,J)."""
    fac = state.h_factors if factors is None else factors
    _, _, cnt_valid = data.masks()
    T, D3, J = fac.shape
    psi = predictor_count(state, data, factors=fac)
    xi = _dispersion_full(state, data)[:, None, :]
    rate = np.where(cnt_valid, data.w / xi * np.exp(psi) * np.log1p(xi), 0.0)
    tables = np.where(cnt_valid, state.crt_aux, 0)
    val = (tables * np.where(cnt_valid, psi, 0.0) - rate).sum(axis=0)   # (T,D3)
    var = factor_var_slice(state, data, FAMILY_COUNT)                    # (D3,J)
    val -= 0.5 * ((fac**2) / var[None, :, :]).sum(axis=2)

    lam = state.loadings                                                 # (N,J)
    score = (tables - rate).reshape(data.N, -1)                          # (N,TD)
    grad = (score.T @ lam).reshape(T, D3, J)
    lhs = lam.T[None, :, :] * rate.reshape(data.N, -1).T[:, None, :]     # (TD,J,N)
    neghess = (lhs @ lam).reshape(T, D3, J, J)
    grad -= fac / var[None, :, :]
    idx = np.arange(J)
    neghess[:, :, idx, idx] += 1.0 / var[None, :, :]
    return val, grad, neghess


def h_targets(state, data, factors=None):
    return h_value_grad_neghess(state, data, factors)[0]


def h_grad_neghess(state, data, factors=None):
    _, grad, neghess = h_value_grad_neghess(state, data, factors)
    return grad, neghess


def eta3_value_grad_neghess(state, data, coefs=None):
    """Log full-conditional of each count-outcome coefficient vector (D3,)
    with gradient (D3,P) and negative Hessian (D3,P,P)."""
    co = state.eta3 if coefs is None else coefs
    _, _, cnt_valid = data.masks()
    psi = predictor_count(state, data, coefs=co)
    xi = _dispersion_full(state, data)[:, None, :]
    rate = np.where(cnt_valid, data.w / xi * np.exp(psi) * np.log1p(xi), 0.0)
    tables = np.where(cnt_valid, state.crt_aux, 0)
    val = (tables * np.where(cnt_valid, psi, 0.0) - rate).sum(axis=(0, 1))
    val -= 0.5 * (co**2).sum(axis=1) / COEF_PRIOR_VAR
    score = tables - rate
    grad = np.einsum("itd,itp->dp", score, data.x)
    neghess = np.einsum("itd,itp,itq->dpq", rate, data.x, data.x)
    grad -= co / COEF_PRIOR_VAR
    P = co.shape[1]
    idx = np.arange(P)
    neghess[:, idx, idx] += 1.0 / COEF_PRIOR_VAR
    return val, grad, neghess


def eta3_targets(state, data, coefs=None):
    return eta3_value_grad_neghess(state, data, coefs)[0]


def eta3_grad_neghess(state, data, coefs=None):
    _, grad, neghess = eta3_value_grad_neghess(state, data, coefs)
    return grad, neghess


# spec-shaped single-entity wrappers ----------------------------------------

def grad_hess_lambda(state, data, i):
    g, h = lambda_grad_neghess(state, data)
    mats, _, _ = regularize_neghess(h[i:i + 1], state.loading_precision()[i:i + 1])
    return g[i], mats[0]


def grad_hess_h(state, data, t, d):
    g, h = h_grad_neghess(state, data)
    var = factor_var_slice(state, data, FAMILY_COUNT)
    mats, _, _ = regularize_neghess(h[t, d][None], prior_diag=(1.0 / var[d])[None])
    return g[t, d], mats[0]


def grad_hess_eta3(state, data, d):
    g, h = eta3_grad_neghess(state, data)
    mats, _, _ = regularize_neghess(h[d][None], prior_diag=np.full((1, data.P), 1.0 / COEF_PRIOR_VAR))
    return g[d], mats[0]


# ---------------------------------------------------------------------------
# Hessian regularization
# ---------------------------------------------------------------------------

def regularize_neghess(neghess, prior_prec=None, prior_diag=None):
    """Batched Cholesky with jitter; non-PD blocks fall back to the prior.

    Parameters
    ----------
    neghess : (B, J, J)
    prior_prec : (B, J) elementwise prior precisions used for the fallback,
        alternative spelling ``prior_diag``.

    Returns
    -------
    (mats, chols, fallback_mask) : regularized matrices, their Cholesky
    factors, and which blocks hit the prior fallback.
    """
    if prior_diag is not None:
        prior_prec = prior_diag
    mats = np.array(neghess, copy=True)
    B, J, _ = mats.shape
    chols = np.empty_like(mats)
    fallback = np.zeros(B, dtype=bool)
    todo = np.arange(B)
    jitter_scale = JITTER_BASE * (1.0 + np.abs(mats[:, np.arange(J), np.arange(J)]).max(axis=1))
    attempt = 0
    while todo.size:
        try:
            chols[todo] = np.linalg.cholesky(mats[todo])
            break
        except np.linalg.LinAlgError:
            pass
        # isolate failing slices
        ok = []
        for b in todo:
            try:
                chols[b] = np.linalg.cholesky(mats[b])
                ok.append(b)
            except np.linalg.LinAlgError:
                continue
        todo = np.setdiff1d(todo, np.array(ok, dtype=int))
        if not todo.size:
            break
        if attempt >= JITTER_RETRIES:
            for b in todo:
                diag = prior_prec[b] if prior_prec is not None else np.ones(J)
                mats[b] = np.diag(np.maximum(diag, JITTER_BASE))
                chols[b] = np.linalg.cholesky(mats[b])
                fallback[b] = True
            break
        bump = jitter_scale[todo] * (2.0**attempt)
        mats[todo.reshape(-1, 1), np.arange(J), np.arange(J)] += bump[:, None]
        attempt += 1
    return mats, chols, fallback
