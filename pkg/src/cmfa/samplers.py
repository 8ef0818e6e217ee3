"""Block Gibbs sweep and chain runner.

One sweep updates, in fixed order: the two augmentation layers, the
conjugate normal blocks (continuous factors, binomial factors, regression
coefficients), the three manifold-Langevin blocks (count factors, count
coefficients, loadings), the noise variances, the dispersions with their
hierarchical rate, the loadings-shrinkage chain, and finally the
anchor-outcome indicators with their factor variances.

Augmentations are refreshed at the top of every sweep, so downstream blocks
always see current Polya-Gamma and latent-count values.  The ``fault``
argument seeds deliberately broken variants of five blocks; it exists solely
so the joint-distribution self-test can prove it detects real bugs and must
stay None in production.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaincc, gammainccinv, gammaln

from . import model as mdl
from .data import FAMILY_BINOMIAL, FAMILY_COUNT, FAMILY_NORMAL, PanelDataset
from .distributions import log_gammaincc, sample_polya_gamma
from .errors import NumericalError, ValidationError
from .model import FitConfig, LatentState
from .rng import RngStream, as_generator

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CMFA1"
FACTOR_VAR_FLOOR = 1e-12
FAULTS = (
    "wrong_variance",      # continuous-factor draw with doubled covariance
    "dropped_prior",       # loadings acceptance ratio without the prior term
    "stale_augmentation",  # Polya-Gamma latents never refreshed
    "flipped_gradient",    # count-factor forward drift negated
    "unscaled_proposal",   # loadings proposal loses the metric scaling
)


# ---------------------------------------------------------------------------
# Initialization and prior simulation
# ---------------------------------------------------------------------------

def init_state(data: PanelDataset, config: FitConfig, rng) -> LatentState:
    """Dispersed but stable starting state; augmentations drawn exactly."""
    if np.any(data.last_untreated < 2):
        raise ValidationError("every unit needs at least 2 pre-intervention periods")
    gen = as_generator(rng)
    N, T, J = data.N, data.T, config.max_factors
    D1, D2, D3, D, P = data.D1, data.D2, data.D3, data.D, data.P

    anchor = gen.integers(0, D, size=J) if D else np.zeros(J, dtype=np.int64)
    factor_var = np.full((J, D), 0.5)
    factor_var[np.arange(J), anchor] = 1.0

    pre, _, _ = data.masks()
    noise_var = np.ones((N, D1))
    for d in range(D1):
        for i in range(N):
            noise_var[i, d] = np.clip(np.var(data.y[i, pre[i], d]), 0.01, mdl.SIGMA2_MAX)

    k_xi = 1 if config.pooled_dispersion else N
    fv = factor_var.T  # (D,J)
    state = LatentState(
        loadings=gen.standard_normal((N, J)),
        f_factors=gen.standard_normal((T, D1, J)) * np.sqrt(fv[None, :D1, :]),
        g_factors=gen.standard_normal((T, D2, J)) * np.sqrt(fv[None, D1:D1 + D2, :]),
        h_factors=gen.standard_normal((T, D3, J)) * np.sqrt(fv[None, D1 + D2:, :]),
        eta1=np.zeros((D1, P)),
        eta2=np.zeros((D2, P)),
        eta3=np.zeros((D3, P)),
        noise_var=noise_var,
        dispersion=np.full((k_xi, D3), config.c_xi),
        disp_rate=config.a_xi / config.c_xi,
        phi=np.full((N, J), 0.5),
        phi_rate=np.ones((N, J)),
        zeta=np.full(J, 0.5),
        zeta_rate=np.ones(J),
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
    update_omega(state, data, gen)
    update_crt(state, data, gen)
    return state


def draw_state_from_prior(data: PanelDataset, config: FitConfig, rng,
                          with_augmentation: bool = True) -> LatentState:
    """Exact draw of all parameters from the prior (augmentations conditioned)."""
    gen = as_generator(rng)
    N, T, J = data.N, data.T, config.max_factors
    D1, D2, D3, D, P = data.D1, data.D2, data.D3, data.D, data.P
    a_l, b_l, c_l, d_l, e_l, f_l = config.tpb_shapes

    rho_rate = gen.gamma(e_l, config.nu)           # rate 1/nu == scale nu
    rho_psi = gen.gamma(f_l, 1.0 / rho_rate)
    zeta_rate = gen.gamma(c_l, 1.0 / rho_psi, size=J)
    zeta_tau = gen.gamma(d_l, 1.0 / zeta_rate)
    phi_rate = gen.gamma(a_l, 1.0 / zeta_tau, size=(N, J))
    phi_theta = gen.gamma(b_l, 1.0 / phi_rate)
    loadings = gen.standard_normal((N, J)) / np.sqrt(phi_theta)

    anchor = gen.integers(0, D, size=J) if D else np.zeros(J, dtype=np.int64)
    factor_var = gen.uniform(0.0, 1.0, size=(J, D))
    factor_var = np.clip(factor_var, FACTOR_VAR_FLOOR, 1.0)
    factor_var[np.arange(J), anchor] = 1.0
    fv = factor_var.T

    disp_rate = gen.gamma(config.a_xi, 1.0 / config.c_xi)
    k_xi = 1 if config.pooled_dispersion else N
    state = LatentState(
        loadings=loadings,
        f_factors=gen.standard_normal((T, D1, J)) * np.sqrt(fv[None, :D1, :]),
        g_factors=gen.standard_normal((T, D2, J)) * np.sqrt(fv[None, D1:D1 + D2, :]),
        h_factors=gen.standard_normal((T, D3, J)) * np.sqrt(fv[None, D1 + D2:, :]),
        eta1=gen.normal(0.0, np.sqrt(mdl.COEF_PRIOR_VAR), size=(D1, P)),
        eta2=gen.normal(0.0, np.sqrt(mdl.COEF_PRIOR_VAR), size=(D2, P)),
        eta3=gen.normal(0.0, np.sqrt(mdl.COEF_PRIOR_VAR), size=(D3, P)),
        noise_var=gen.uniform(0.0, mdl.SIGMA2_MAX, size=(N, D1)) + 1e-12,
        dispersion=gen.gamma(config.a_xi, 1.0 / disp_rate, size=(k_xi, D3)),
        disp_rate=disp_rate,
        phi=phi_theta / (1.0 + phi_theta),
        phi_rate=phi_rate,
        zeta=zeta_tau / (1.0 + zeta_tau),
        zeta_rate=zeta_rate,
        rho=rho_psi / (1.0 + rho_psi),
        rho_rate=rho_rate,
        factor_var=factor_var,
        anchor=anchor,
        pg_aux=np.zeros((N, T, D2)),
        crt_aux=np.zeros((N, T, D3), dtype=np.int64),
        lambda_step=np.full(N, 0.5),
        h_step=np.full((T, D3), 0.5),
        eta3_step=np.full(D3, 0.5),
        xi_step=np.ones((k_xi, D3)),
    )
    if with_augmentation:
        update_omega(state, data, gen)
        update_crt(state, data, gen)
    return state


def draw_outcomes(state: LatentState, data: PanelDataset, rng):
    """Redraw (y, k, z) from the observation model in place (design fixed)."""
    gen = as_generator(rng)
    if data.D1:
        mu = mdl.predictor_normal(state, data)
        data.y[...] = gen.normal(mu, np.sqrt(state.noise_var[:, None, :]))
    if data.D2:
        p = expit(mdl.predictor_binomial(state, data))
        data.k[...] = gen.binomial(data.n, p)
    if data.D3:
        q = np.exp(mdl.predictor_count(state, data))
        xi = np.broadcast_to(state.dispersion, (data.N, data.D3))[:, None, :]
        mean = data.w * q
        if np.any(np.where(data.w > 0, mean, 0.0) > 1e12):
            i, t, d = np.argwhere((data.w > 0) & (mean > 1e12))[0]
            raise NumericalError(f"count mean overflow at unit={i} time={t} outcome={d}")
        shape = np.where(data.w > 0, mean / xi, 1.0)
        lam = gen.gamma(shape, xi)
        data.z[...] = np.where(data.w > 0, gen.poisson(lam), 0)


# ---------------------------------------------------------------------------
# Augmentation blocks
# ---------------------------------------------------------------------------

def update_omega(state, data, rng, fault=None):
    if not data.D2:
        return
    if fault == "stale_augmentation" and state.pg_aux.any():
        return
    _, bin_valid, _ = data.masks()
    psi = mdl.predictor_binomial(state, data)
    flat = bin_valid.reshape(-1)
    psi_flat = psi.reshape(-1)[flat]
    if not np.all(np.isfinite(psi_flat)):
        i, t, d = np.argwhere(bin_valid & ~np.isfinite(psi))[0]
        raise NumericalError(f"non-finite binomial predictor at unit={i} time={t} outcome={d}")
    draws = sample_polya_gamma(data.n.reshape(-1)[flat], psi_flat, rng)
    out = np.zeros(flat.shape)
    out[flat] = draws
    state.pg_aux = out.reshape(bin_valid.shape)


def _crt_layout(data):
    """Fixed per-dataset scatter layout for the latent-count draws.

    Rebuilt only when the count values change (the joint-distribution test
    redraws them; ordinary fits never do).
    """
    _, _, cnt_valid = data.masks()
    cached = getattr(data, "_crt_cache", None)
    if cached is not None and np.array_equal(cached["z"], data.z):
        return cached
    flat = cnt_valid.reshape(-1) & (data.z.reshape(-1) > 0)
    pos = np.flatnonzero(flat)
    reps = data.z.reshape(-1)[pos]
    total = int(reps.sum())
    offsets = np.repeat(np.cumsum(reps) - reps, reps)
    table = np.arange(total, dtype=np.int64) - offsets  # l-1 within each cell
    seg = np.repeat(np.arange(reps.size), reps)
    cached = {"z": data.z.copy(), "pos": pos, "reps": reps, "total": total,
              "table": table, "seg": seg}
    data._crt_cache = cached
    return cached


def update_crt(state, data, rng):
    if not data.D3:
        return
    gen = as_generator(rng)
    _, _, cnt_valid = data.masks()
    xi = np.broadcast_to(state.dispersion, (data.N, data.D3))[:, None, :]
    q = np.exp(mdl.predictor_count(state, data))
    r = data.w * q / xi
    if not np.all(np.isfinite(np.where(cnt_valid, r, 1.0))):
        i, t, d = np.argwhere(cnt_valid & ~np.isfinite(r))[0]
        raise NumericalError(f"non-finite count rate at unit={i} time={t} outcome={d}")
    lay = _crt_layout(data)
    out = np.zeros(data.z.size, dtype=np.int64)
    if lay["total"]:
        rr = np.repeat(r.reshape(-1)[lay["pos"]], lay["reps"])
        hits = gen.random(lay["total"]) * (rr + lay["table"]) < rr
        out[lay["pos"]] = np.bincount(lay["seg"][hits], minlength=lay["reps"].size)
    state.crt_aux = out.reshape(cnt_valid.shape)


# ---------------------------------------------------------------------------
# Conjugate multivariate-normal blocks
# ---------------------------------------------------------------------------

def _draw_mvn_from_precision(prec, b, prior_diag, rng, cov_scale=1.0):
    """Draw N(prec^-1 b, cov_scale * prec^-1) for a batch of precision matrices."""
    gen = as_generator(rng)
    B, J = b.shape
    mats, chols, _ = mdl.regularize_neghess(prec, prior_diag)
    mean = np.linalg.solve(mats, b[:, :, None])[:, :, 0]
    z = gen.standard_normal((B, J))
    dev = np.linalg.solve(np.transpose(chols, (0, 2, 1)), z[:, :, None])[:, :, 0]
    return mean + np.sqrt(cov_scale) * dev


def _weighted_precision(lam, weights, N, T, D, J):
    """sum_i w[i,t,d] lam_i lam_i^T as (T,D,J,J), via batched matmul."""
    lhs = lam.T[None, :, :] * weights.reshape(N, T * D).T[:, None, :]  # (TD,J,N)
    return (lhs @ lam).reshape(T, D, J, J)


def update_f(state, data, rng, fault=None):
    if not data.D1:
        return
    pre, _, _ = data.masks()
    lam = state.loadings
    N, T, D1, J = data.N, data.T, data.D1, state.n_factors
    wts = pre[:, :, None] / state.noise_var[:, None, :]              # (N,T,D1)
    resid = data.y - (np.einsum("itp,dp->itd", data.x, state.eta1) if data.P else 0.0)
    prec = _weighted_precision(lam, wts, N, T, D1, J)
    b = ((wts * resid).reshape(N, -1).T @ lam).reshape(T, D1, J)
    var = mdl.factor_var_slice(state, data, FAMILY_NORMAL)           # (D1,J)
    idx = np.arange(J)
    prec[:, :, idx, idx] += 1.0 / var[None, :, :]
    prior_diag = np.broadcast_to(1.0 / var[None, :, :], b.shape).reshape(-1, J)
    scale = 2.0 if fault == "wrong_variance" else 1.0
    draws = _draw_mvn_from_precision(prec.reshape(-1, J, J), b.reshape(-1, J),
                                     prior_diag, rng, cov_scale=scale)
    state.f_factors = draws.reshape(T, D1, J)


def update_g(state, data, rng):
    if not data.D2:
        return
    _, bin_valid, _ = data.masks()
    lam = state.loadings
    N, T, D2, J = data.N, data.T, data.D2, state.n_factors
    omega = np.where(bin_valid, state.pg_aux, 0.0)
    kappa = np.where(bin_valid, data.k - 0.5 * data.n, 0.0)
    offset = np.einsum("itp,dp->itd", data.x, state.eta2) if data.P else 0.0
    prec = _weighted_precision(lam, omega, N, T, D2, J)
    b = ((kappa - omega * offset).reshape(N, -1).T @ lam).reshape(T, D2, J)
    var = mdl.factor_var_slice(state, data, FAMILY_BINOMIAL)
    idx = np.arange(J)
    prec[:, :, idx, idx] += 1.0 / var[None, :, :]
    prior_diag = np.broadcast_to(1.0 / var[None, :, :], b.shape).reshape(-1, J)
    draws = _draw_mvn_from_precision(prec.reshape(-1, J, J), b.reshape(-1, J), prior_diag, rng)
    state.g_factors = draws.reshape(T, D2, J)


def update_eta1(state, data, rng):
    if not data.D1 or not data.P:
        return
    pre, _, _ = data.masks()
    wts = pre[:, :, None] / state.noise_var[:, None, :]
    resid = data.y - np.einsum("ij,tdj->itd", state.loadings, state.f_factors)
    prec = np.einsum("itd,itp,itq->dpq", wts, data.x, data.x)
    b = np.einsum("itd,itp->dp", wts * resid, data.x)
    P = data.P
    idx = np.arange(P)
    prec[:, idx, idx] += 1.0 / mdl.COEF_PRIOR_VAR
    prior_diag = np.full((data.D1, P), 1.0 / mdl.COEF_PRIOR_VAR)
    state.eta1 = _draw_mvn_from_precision(prec, b, prior_diag, rng)


def update_eta2(state, data, rng):
    if not data.D2 or not data.P:
        return
    _, bin_valid, _ = data.masks()
    omega = np.where(bin_valid, state.pg_aux, 0.0)
    kappa = np.where(bin_valid, data.k - 0.5 * data.n, 0.0)
    base = np.einsum("ij,tdj->itd", state.loadings, state.g_factors)
    prec = np.einsum("itd,itp,itq->dpq", omega, data.x, data.x)
    b = np.einsum("itd,itp->dp", kappa - omega * base, data.x)
    P = data.P
    idx = np.arange(P)
    prec[:, idx, idx] += 1.0 / mdl.COEF_PRIOR_VAR
    prior_diag = np.full((data.D2, P), 1.0 / mdl.COEF_PRIOR_VAR)
    state.eta2 = _draw_mvn_from_precision(prec, b, prior_diag, rng)


# ---------------------------------------------------------------------------
# Manifold-Langevin blocks
# ---------------------------------------------------------------------------

def _smmala_step(values, steps, fused_fn, prior_diag, rng, fault=None):
    """One batched SMMALA accept/reject step.

    Proposal N(x + (e^2/2) G^-1 grad, e^2 G^-1) with G the regularized
    negative Hessian at the current point; the reverse density uses G
    recomputed at the proposal.  ``fused_fn`` returns (target, gradient,
    negative Hessian) in one pass.  Returns (new_values, accepted,
    acceptance probabilities).
    """
    gen = as_generator(rng)
    B, dim = values.shape
    t0, g0, H0 = fused_fn(values)
    if fault == "flipped_gradient":
        g0 = -g0
    _, L0, _ = mdl.regularize_neghess(H0, prior_diag)
    nat0 = _cho_solve(L0, g0)
    mean_fwd = values + 0.5 * steps[:, None] ** 2 * nat0
    z = gen.standard_normal((B, dim))
    if fault == "unscaled_proposal":
        prop = mean_fwd + steps[:, None] * z
    else:
        prop = mean_fwd + steps[:, None] * _solve_upper(L0, z)

    t1, g1, H1 = fused_fn(prop)
    _, L1, _ = mdl.regularize_neghess(H1, prior_diag)
    nat1 = _cho_solve(L1, g1)
    mean_rev = prop + 0.5 * steps[:, None] ** 2 * nat1

    log_q_fwd = _smmala_logq(prop, mean_fwd, L0, steps)
    log_q_rev = _smmala_logq(values, mean_rev, L1, steps)
    with np.errstate(invalid="ignore", over="ignore"):
        log_alpha = (t1 - t0) + (log_q_rev - log_q_fwd)
    bad = ~np.isfinite(log_alpha)
    if bad.any():
        logger.debug("rejecting %d non-finite manifold-Langevin proposals", int(bad.sum()))
    log_alpha = np.where(bad, -np.inf, log_alpha)
    accept = np.log(gen.random(B)) < log_alpha
    new = np.where(accept[:, None], prop, values)
    return new, accept, np.exp(np.minimum(log_alpha, 0.0))


def _cho_solve(chols, vecs):
    return np.linalg.solve(chols @ np.transpose(chols, (0, 2, 1)), vecs[:, :, None])[:, :, 0]


def _solve_upper(chols, z):
    return np.linalg.solve(np.transpose(chols, (0, 2, 1)), z[:, :, None])[:, :, 0]


def _smmala_logq(x, mean, chol, steps):
    # N(x; mean, e^2 (L L^T)^-1) up to the shared dimension constant
    diff = x - mean
    lt_diff = np.einsum("bji,bj->bi", chol, diff)
    quad = (lt_diff**2).sum(axis=1) / steps**2
    logdet_prec = 2.0 * np.log(np.einsum("bii->bi", chol)).sum(axis=1)
    dim = x.shape[1]
    return 0.5 * logdet_prec - dim * np.log(steps) - 0.5 * quad


def _adapt_log_step(steps, accept_prob, target, it):
    gamma = (it + 1.0) ** -0.6
    return np.exp(np.log(steps) + gamma * (accept_prob - target))


def update_h(state, data, config, rng, adapt=False, it=0, fault=None):
    if not data.D3:
        return
    J = state.n_factors
    var = mdl.factor_var_slice(state, data, FAMILY_COUNT)  # (D3,J)
    shape = (data.T, data.D3)
    prior_diag = np.broadcast_to(1.0 / var[None, :, :], shape + (J,)).reshape(-1, J)

    def fused(v):
        t, g, H = mdl.h_value_grad_neghess(state, data, factors=v.reshape(shape + (J,)))
        return t.reshape(-1), g.reshape(-1, J), H.reshape(-1, J, J)

    vals = state.h_factors.reshape(-1, J)
    steps = state.h_step.reshape(-1)
    new, accept, aprob = _smmala_step(vals, steps, fused, prior_diag, rng,
                                      fault=fault if fault == "flipped_gradient" else None)
    state.h_factors = new.reshape(shape + (J,))
    if adapt:
        state.h_step = _adapt_log_step(steps, aprob, config.smmala_accept_target, it).reshape(shape)
    return accept


def update_eta3(state, data, config, rng, adapt=False, it=0):
    if not data.D3 or not data.P:
        return
    prior_diag = np.full((data.D3, data.P), 1.0 / mdl.COEF_PRIOR_VAR)

    def fused(v):
        return mdl.eta3_value_grad_neghess(state, data, coefs=v)

    new, accept, aprob = _smmala_step(state.eta3, state.eta3_step, fused, prior_diag, rng)
    state.eta3 = new
    if adapt:
        state.eta3_step = _adapt_log_step(state.eta3_step, aprob, config.smmala_accept_target, it)
    return accept


def update_lambda(state, data, config, rng, adapt=False, it=0, fault=None):
    prior_prec = state.loading_precision()

    def fused(v):
        t, g, H = mdl.lambda_value_grad_neghess(state, data, loadings=v)
        if fault == "dropped_prior":
            t = t + 0.5 * np.einsum("ij,ij,ij->i", v, v, prior_prec)
        return t, g, H

    new, accept, aprob = _smmala_step(
        state.loadings, state.lambda_step, fused, prior_prec, rng,
        fault=fault if fault == "unscaled_proposal" else None)
    state.loadings = new
    if adapt:
        state.lambda_step = _adapt_log_step(state.lambda_step, aprob, config.smmala_accept_target, it)
    return accept


# ---------------------------------------------------------------------------
# Scalar Metropolis blocks
# ---------------------------------------------------------------------------

def update_sigma2(state, data, config, rng):
    if not data.D1:
        return
    gen = as_generator(rng)
    pre, _, _ = data.masks()
    mu = mdl.predictor_normal(state, data)
    sq = np.where(pre[:, :, None], (data.y - mu) ** 2, 0.0).sum(axis=1)  # (N,D1)
    n_obs = pre.sum(axis=1).astype(float)[:, None]

    cur = state.noise_var
    prop = cur * np.exp(config.sigma2_step * gen.standard_normal(cur.shape))

    def logpost(v):
        return -0.5 * n_obs * np.log(v) - 0.5 * sq / v + np.log(v)  # walk on log scale

    with np.errstate(over="ignore"):
        log_alpha = logpost(prop) - logpost(cur)
    log_alpha = np.where(prop <= mdl.SIGMA2_MAX, log_alpha, -np.inf)
    accept = np.log(gen.random(cur.shape)) < log_alpha
    state.noise_var = np.where(accept, prop, cur)
    return accept


def _xi_suffstats(state, data):
    """Per-dispersion sums over observed pre cells: counts, latent tables, w*q."""
    _, _, cnt_valid = data.masks()
    q = np.exp(mdl.predictor_count(state, data))
    wq = np.where(cnt_valid, data.w * q, 0.0)
    z = np.where(cnt_valid, data.z, 0)
    L = np.where(cnt_valid, state.crt_aux, 0)
    if state.dispersion.shape[0] == 1:  # pooled
        return (z.sum(axis=(0, 1))[None, :], L.sum(axis=(0, 1))[None, :], wq.sum(axis=(0, 1))[None, :])
    return z.sum(axis=1), L.sum(axis=1), wq.sum(axis=1)


def _xi_logpost_grad(theta, sz, sl, swq, a_xi, disp_rate):
    """Augmented log conditional of log-dispersion and its gradient.

    l(t) = (a + Sz - SL) t - b e^t - Sz log(1+e^t) - Swq e^-t log(1+e^t)
    (Gamma prior plus latent-count likelihood, Jacobian included).
    """
    et = np.exp(theta)
    log1pet = np.logaddexp(0.0, theta)
    sig = expit(theta)
    val = (a_xi + sz - sl) * theta - disp_rate * et - sz * log1pet - swq * np.exp(-theta) * log1pet
    grad = (a_xi + sz - sl) - disp_rate * et - sz * sig + swq * np.exp(-theta) * log1pet - swq * expit(-theta)
    return val, grad


def update_xi(state, data, config, rng, adapt=False, it=0):
    if not data.D3:
        return
    gen = as_generator(rng)
    sz, sl, swq = _xi_suffstats(state, data)
    theta = np.log(state.dispersion)
    val0, grad0 = _xi_logpost_grad(theta, sz, sl, swq, config.a_xi, state.disp_rate)

    # Barker proposal: symmetric innovation, gradient-directed sign
    z = state.xi_step * gen.standard_normal(theta.shape)
    flip = gen.random(theta.shape) < expit(z * grad0)
    d = np.where(flip, z, -z)
    prop = theta + d
    val1, grad1 = _xi_logpost_grad(prop, sz, sl, swq, config.a_xi, state.disp_rate)
    log_alpha = (val1 - val0
                 - np.logaddexp(0.0, d * grad1)
                 + np.logaddexp(0.0, -d * grad0))
    accept = np.log(gen.random(theta.shape)) < log_alpha
    state.dispersion = np.where(accept, np.exp(prop), state.dispersion)
    if adapt:
        aprob = np.exp(np.minimum(log_alpha, 0.0))
        state.xi_step = _adapt_log_step(state.xi_step, aprob, config.barker_accept_target, it)

    # hierarchical rate: conjugate gamma
    k = state.dispersion.size
    state.disp_rate = float(gen.gamma(config.a_xi * (1 + k),
                                      1.0 / (config.c_xi + state.dispersion.sum())))
    return accept


# ---------------------------------------------------------------------------
# Shrinkage chain (gamma expansion of the three-level TPB hierarchy)
# ---------------------------------------------------------------------------

def update_shrinkage(state, config, rng):
    """Gibbs pass over the expanded loadings-shrinkage hierarchy.

    Each (0,1)-valued variable x is carried as its odds-precision pair:
    x = t/(1+t) with t gamma given the rate one level up.  All conditionals
    are gamma; the (0,1) fields are recomputed from the updated odds.
    """
    gen = as_generator(rng)
    a_l, b_l, c_l, d_l, e_l, f_l = config.tpb_shapes
    N, J = state.loadings.shape

    theta = gen.gamma(b_l + 0.5, 1.0 / (state.phi_rate + 0.5 * state.loadings**2))
    theta = np.clip(theta, 1e-300, None)
    zeta_odds = state.zeta / (1.0 - state.zeta)
    phi_rate = gen.gamma(a_l + b_l, 1.0 / (zeta_odds[None, :] + theta))
    zeta_tau = gen.gamma(d_l + N * a_l, 1.0 / (state.zeta_rate + phi_rate.sum(axis=0)))
    rho_odds = state.rho / (1.0 - state.rho)
    zeta_rate = gen.gamma(c_l + d_l, 1.0 / (rho_odds + zeta_tau))
    rho_psi = gen.gamma(f_l + J * c_l, 1.0 / (state.rho_rate + zeta_rate.sum()))
    rho_rate = gen.gamma(e_l + f_l, 1.0 / (1.0 / config.nu + rho_psi))

    state.phi = theta / (1.0 + theta)
    state.phi_rate = phi_rate
    state.zeta = zeta_tau / (1.0 + zeta_tau)
    state.zeta_rate = zeta_rate
    state.rho = float(rho_psi / (1.0 + rho_psi))
    state.rho_rate = float(rho_rate)
    # keep the open-interval invariant under floating-point saturation
    np.clip(state.phi, 1e-300, 1.0 - 1e-16, out=state.phi)
    np.clip(state.zeta, 1e-300, 1.0 - 1e-16, out=state.zeta)
    state.rho = min(max(state.rho, 1e-300), 1.0 - 1e-16)


# ---------------------------------------------------------------------------
# Anchor outcomes and factor variances
# ---------------------------------------------------------------------------

def _log_variance_integral(ssq, T):
    """log of int_0^1 N(u; 0, v I_T) dv at sum-of-squares ssq (length-T column).

    Equals (2 pi)^(-T/2) (s/2)^(1-T/2) Gamma(T/2-1) Q(T/2-1, s/2); verified
    against quadrature in the tests.
    """
    s = np.maximum(np.asarray(ssq, dtype=float), 1e-300)
    a = T / 2.0 - 1.0
    return (-T / 2.0 * np.log(2.0 * np.pi) + (1.0 - T / 2.0) * np.log(s / 2.0)
            + gammaln(a) + log_gammaincc(a, s / 2.0))


def update_anchors_and_factor_vars(state, data, rng):
    """Draw each loading's most-affected outcome, then its factor variances.

    The anchor indicator is drawn with the variances integrated out (uniform
    on (0,1] for the non-anchored outcomes, pinned at 1 for the anchored
    one); afterwards the non-anchored variances come from their truncated
    inverse-gamma conditionals.
    """
    if data.D == 0:
        return
    gen = as_generator(rng)
    T, J, D = data.T, state.n_factors, data.D
    if T < 3:
        raise ValidationError("factor-variance conditionals need T >= 3")
    all_factors = np.concatenate([state.f_factors, state.g_factors, state.h_factors], axis=1)
    ssq = np.einsum("tlj,tlj->jl", all_factors, all_factors)  # (J,D)

    if D == 1:
        state.anchor = np.zeros(J, dtype=np.int64)
        state.factor_var = np.ones((J, 1))
        return

    logw = -0.5 * ssq - _log_variance_integral(ssq, T)  # (J,D), common terms dropped
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    u = gen.random((J, 1))
    anchor = (np.cumsum(w, axis=1) < u).sum(axis=1)
    anchor = np.minimum(anchor, D - 1)

    fv = np.ones((J, D))
    shape = T / 2.0 - 1.0
    off = np.ones((J, D), dtype=bool)
    off[np.arange(J), anchor] = False
    scales = np.maximum(0.5 * ssq[off], 1e-300)
    mass = gammaincc(shape, scales)  # truncated region mass, upper bound 1
    draws = np.ones(scales.shape)
    ok = mass >= 1e-300  # below this the conditional sits at the bound
    u = gen.random(scales.shape)
    if ok.any():
        draws[ok] = np.minimum(scales[ok] / gammainccinv(shape, u[ok] * mass[ok]), 1.0)
    fv[off] = np.clip(draws, FACTOR_VAR_FLOOR, 1.0)
    state.anchor = anchor
    state.factor_var = fv


# ---------------------------------------------------------------------------
# Sweep and chain runner
# ---------------------------------------------------------------------------

def gibbs_sweep(state, data, config, rng, adapt=False, it=0, fault=None, accum=None):
    """One full sweep over all blocks, in the fixed order. Mutates state."""
    gen = as_generator(rng)
    if fault is not None and fault not in FAULTS:
        raise ValidationError(f"unknown fault {fault!r}")
    stats = {}
    try:
        update_omega(state, data, gen, fault=fault)
        update_crt(state, data, gen)
        update_f(state, data, gen, fault=fault)
        update_g(state, data, gen)
        update_eta1(state, data, gen)
        update_eta2(state, data, gen)
        stats["h"] = update_h(state, data, config, gen, adapt=adapt, it=it, fault=fault)
        stats["eta3"] = update_eta3(state, data, config, gen, adapt=adapt, it=it)
        stats["lambda"] = update_lambda(state, data, config, gen, adapt=adapt, it=it, fault=fault)
        stats["sigma2"] = update_sigma2(state, data, config, gen)
        stats["xi"] = update_xi(state, data, config, gen, adapt=adapt, it=it)
        update_shrinkage(state, config, gen)
        update_anchors_and_factor_vars(state, data, gen)
    except NumericalError as err:
        raise NumericalError(f"iteration {it}: {err}") from err
    if accum is not None:
        for name, acc in stats.items():
            if acc is not None:
                tot = accum.setdefault(name, [0, 0])
                tot[0] += int(np.sum(acc))
                tot[1] += int(np.size(acc))
    return state


@dataclass
class PosteriorDraws:
    """Thinned retained snapshots of one chain plus bookkeeping."""

    loadings: np.ndarray      # (L,N,J)
    f_factors: np.ndarray     # (L,T,D1,J)
    g_factors: np.ndarray     # (L,T,D2,J)
    h_factors: np.ndarray     # (L,T,D3,J)
    eta1: np.ndarray
    eta2: np.ndarray
    eta3: np.ndarray
    noise_var: np.ndarray     # (L,N,D1)
    dispersion: np.ndarray    # (L,K,D3)
    factor_var: np.ndarray    # (L,J,D)
    anchor: np.ndarray        # (L,J)
    acceptance: dict = field(default_factory=dict)
    config: FitConfig | None = None
    seed: int = 0
    chain_id: int = 0
    step_sizes: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.loadings.shape[0]


def _snapshot_fields():
    return ("loadings", "f_factors", "g_factors", "h_factors", "eta1", "eta2",
            "eta3", "noise_var", "dispersion", "factor_var", "anchor")


def run_chain(data: PanelDataset, config: FitConfig, rng: RngStream | None = None,
              chain_id: int = 0, checkpoint_path=None, resume_from=None,
              progress=None) -> PosteriorDraws:
    """Burn-in with step tuning, then sampling; returns the retained draws.

    ``checkpoint_path`` writes a recoverable snapshot (state, rng position,
    retained draws so far) every ``config.checkpoint_every`` iterations;
    ``resume_from`` continues bit-identically from such a snapshot.
    """
    if rng is None:
        rng = RngStream(config.seed, (chain_id,))
    gen = as_generator(rng)
    n_snap = config.retained_draws
    J = config.max_factors

    if resume_from is not None:
        state, start_it, kept, partial, accum = read_checkpoint(resume_from, gen)
    else:
        state = init_state(data, config, gen)
        start_it, kept, partial, accum = 0, 0, None, {}

    def alloc(*shape):
        return np.empty((n_snap,) + shape)

    draws = PosteriorDraws(
        loadings=alloc(data.N, J),
        f_factors=alloc(data.T, data.D1, J),
        g_factors=alloc(data.T, data.D2, J),
        h_factors=alloc(data.T, data.D3, J),
        eta1=alloc(data.D1, data.P),
        eta2=alloc(data.D2, data.P),
        eta3=alloc(data.D3, data.P),
        noise_var=alloc(data.N, data.D1),
        dispersion=alloc(state.dispersion.shape[0], data.D3),
        factor_var=alloc(J, data.D),
        anchor=np.empty((n_snap, J), dtype=np.int64),
        config=config,
        seed=config.seed,
        chain_id=chain_id,
    )
    if partial is not None:
        for name in _snapshot_fields():
            getattr(draws, name)[:kept] = partial[name][:kept]

    burn_iters = config.burn_in_iterations
    for it in range(start_it + 1, config.iterations + 1):
        adapt = it <= burn_iters
        gibbs_sweep(state, data, config, gen, adapt=adapt, it=it,
                    accum=None if adapt else accum)
        if it % config.thin == 0 and it > burn_iters:
            for name in _snapshot_fields():
                getattr(draws, name)[kept] = getattr(state, name)
            kept += 1
        if checkpoint_path is not None and it % config.checkpoint_every == 0:
            write_checkpoint(checkpoint_path, state, it, gen, kept, draws, accum)
        if progress is not None and it % max(1, config.iterations // 20) == 0:
            progress(it, config.iterations)
    assert kept == n_snap
    draws.acceptance = {k: v[0] / v[1] for k, v in accum.items() if v[1]}
    draws.step_sizes = {
        "lambda": state.lambda_step.copy(),
        "h": state.h_step.copy(),
        "xi": state.xi_step.copy(),
    }
    return draws


def run_chains(data: PanelDataset, config: FitConfig) -> list[PosteriorDraws]:
    """Independent replicate chains with distinct stream ids."""
    return [run_chain(data, config, RngStream(config.seed, (c,)), chain_id=c)
            for c in range(config.chains)]


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def write_checkpoint(path, state: LatentState, iteration: int, gen=None,
                     kept: int = 0, draws: PosteriorDraws | None = None,
                     accum: dict | None = None):
    """Versioned binary snapshot: magic bytes, then an npz payload."""
    from dataclasses import fields as dc_fields

    arrays = {}
    meta = {"iteration": iteration, "kept": kept, "scalars": {},
            "accum": {k: list(v) for k, v in (accum or {}).items()}}
    for f in dc_fields(state):
        v = getattr(state, f.name)
        if isinstance(v, np.ndarray):
            arrays["state__" + f.name] = v
        else:
            meta["scalars"][f.name] = float(v)
    if gen is not None:
        meta["rng_state"] = gen.bit_generator.state
    if draws is not None and kept > 0:
        for name in _snapshot_fields():
            arrays["draws__" + name] = getattr(draws, name)[:kept]
    buf = io.BytesIO()
    np.savez(buf, __meta__=json.dumps(meta), **arrays)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(buf.getvalue())


def read_checkpoint(path, gen=None):
    """Returns (state, iteration, kept, partial_draws, accum); restores rng."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path}: not a checkpoint file (bad magic)")
        payload = np.load(io.BytesIO(fh.read()), allow_pickle=False)
    meta = json.loads(str(payload["__meta__"]))
    kw = {k.removeprefix("state__"): payload[k] for k in payload.files
          if k.startswith("state__")}
    kw["crt_aux"] = kw["crt_aux"].astype(np.int64)
    kw["anchor"] = kw["anchor"].astype(np.int64)
    kw.update(meta["scalars"])
    state = LatentState(**kw)
    partial = {k.removeprefix("draws__"): payload[k] for k in payload.files
               if k.startswith("draws__")} or None
    if gen is not None and "rng_state" in meta:
        st = meta["rng_state"]
        st["state"] = {k: int(v) for k, v in st["state"].items()}
        gen.bit_generator.state = st
    accum = {k: list(map(int, v)) for k, v in meta.get("accum", {}).items()}
    return state, int(meta["iteration"]), int(meta["kept"]), partial, accum
