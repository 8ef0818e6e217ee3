"""Samplers and densities for the nonstandard distributions the model needs.

Five families only: Polya-Gamma, Chinese-restaurant-table counts, the
three-parameter beta, the mean/dispersion negative binomial, and the
upper-truncated inverse gamma.  Everything here is pure given its random
stream and safe to call concurrently with distinct streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaincc, gammainccinv, gammaln, ndtr

from .rng import as_generator

# PG(b, c) with integer b above this count uses the moment-matched normal
# approximation; at or below it the draw is an exact sum of PG(1, c) draws.
PG_EXACT_MAX_COUNT = 30

# CRT counts beyond this are refused rather than approximated.
CRT_MAX_COUNT = 10**6

_TRUNC = 0.64  # body/tail split point of the Jacobi proposal


class TruncationMassError(FloatingPointError):
    """Raised when a truncated distribution's target region has mass < 1e-300."""


@dataclass(frozen=True)
class TpbParams:
    """Shape/scale triple of a three-parameter beta distribution.

    The density on (0, 1) is

        G(a+b)/(G(a)G(b)) * c^b * x^(b-1) * (1-x)^(a-1) * (1+(c-1)x)^(-a-b)

    with a, b, c all positive.
    """

    a: float
    b: float
    c: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and self.c > 0):
            raise ValueError(f"TpbParams must be positive, got {self}")


# ---------------------------------------------------------------------------
# Polya-Gamma
# ---------------------------------------------------------------------------

def pg_mean(b, c):
    """E[PG(b, c)] = (b / 2c) tanh(c / 2), with the c -> 0 limit b / 4."""
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    small = np.abs(c) < 1e-4
    cs = np.where(small, 1.0, c)
    exact = b / (2.0 * cs) * np.tanh(cs / 2.0)
    series = b / 4.0 * (1.0 - c * c / 12.0)
    return np.where(small, series, exact)


def pg_var(b, c):
    """Var[PG(b, c)] = b (2 tanh(c/2) - c sech^2(c/2)) / (4 c^3)."""
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    small = np.abs(c) < 1e-2
    cs = np.where(small, 1.0, c)
    ch = np.cosh(np.minimum(np.abs(cs) / 2.0, 350.0))
    exact = b * (2.0 * np.tanh(cs / 2.0) - cs / ch**2) / (4.0 * cs**3)
    series = b * (1.0 / 24.0 - c * c / 120.0)
    return np.where(small, series, exact)


def _pigauss(x, z):
    # P(InverseGaussian(mu=1/z, lambda=1) <= x), z >= 0
    rx = 1.0 / np.sqrt(x)
    return ndtr(rx * (x * z - 1.0)) + np.exp(np.minimum(2.0 * z, 700.0)) * ndtr(-rx * (x * z + 1.0))


def _mass_texpon(z):
    # probability that the Jacobi proposal draws from the exponential tail
    fz = np.pi**2 / 8.0 + z * z / 2.0
    b = (_TRUNC * z - 1.0) / np.sqrt(_TRUNC)
    a = -(_TRUNC * z + 1.0) / np.sqrt(_TRUNC)
    x0 = np.log(fz) + fz * _TRUNC
    with np.errstate(divide="ignore"):
        xb = x0 - z + np.log(ndtr(b))
        xa = x0 + z + np.log(ndtr(a))
    log_qdivp = np.logaddexp(xb, xa) + np.log(4.0 / np.pi)
    return expit(-log_qdivp)


def _rtigauss(z, rng):
    """Vectorized draw from InverseGaussian(1/z, 1) truncated to (0, TRUNC]."""
    z = np.asarray(z, dtype=float)
    out = np.empty(z.shape)
    small = z < 1.0 / _TRUNC  # mode beyond the truncation point

    idx = np.flatnonzero(small)
    while idx.size:
        zz = z[idx]
        e1 = rng.exponential(size=idx.size)
        e2 = rng.exponential(size=idx.size)
        ok = e1 * e1 <= 2.0 * e2 / _TRUNC
        x = _TRUNC / (1.0 + _TRUNC * e1) ** 2
        acc = ok & (rng.random(idx.size) <= np.exp(-0.5 * zz * zz * x))
        out[idx[acc]] = x[acc]
        idx = idx[~acc]

    idx = np.flatnonzero(~small)
    while idx.size:
        mu = 1.0 / z[idx]
        y = rng.standard_normal(idx.size) ** 2
        x = mu + 0.5 * mu * mu * y - 0.5 * mu * np.sqrt(4.0 * mu * y + (mu * y) ** 2)
        flip = rng.random(idx.size) > mu / (mu + x)
        x = np.where(flip, mu * mu / x, x)
        acc = x <= _TRUNC
        out[idx[acc]] = x[acc]
        idx = idx[~acc]
    return out


def _jacobi_coef(n, x):
    # n-th alternating series coefficient of the Jacobi density at x
    npl = n + 0.5
    small = x <= _TRUNC
    with np.errstate(divide="ignore", over="ignore"):
        body = np.pi * npl * (2.0 / (np.pi * x)) ** 1.5 * np.exp(-2.0 * npl * npl / x)
        tail = np.pi * npl * np.exp(-npl * npl * np.pi**2 * x / 2.0)
    return np.where(small, body, tail)


def _pg1(c, rng):
    """Exact PG(1, c) draws, elementwise over c (Devroye-type rejection)."""
    z = np.abs(np.asarray(c, dtype=float)) / 2.0
    fz = np.pi**2 / 8.0 + z * z / 2.0
    p_tail = _mass_texpon(z)

    out = np.empty(z.shape)
    idx = np.flatnonzero(np.ones(z.shape, dtype=bool))
    guard = 0
    while idx.size:
        guard += 1
        if guard > 10_000:
            raise FloatingPointError("PG(1, c) rejection sampler failed to terminate")
        zz = z[idx]
        tail = rng.random(idx.size) < p_tail[idx]
        x = np.empty(idx.size)
        if tail.any():
            x[tail] = _TRUNC + rng.exponential(size=int(tail.sum())) / fz[idx][tail]
        if (~tail).any():
            x[~tail] = _rtigauss(zz[~tail], rng)

        # alternating-series accept/reject on the Jacobi density
        s = _jacobi_coef(0, x)
        y = rng.random(idx.size) * s
        undecided = np.ones(idx.size, dtype=bool)
        accepted = np.zeros(idx.size, dtype=bool)
        n = 0
        while undecided.any():
            n += 1
            if n > 1000:
                raise FloatingPointError("PG(1, c) series evaluation failed to converge")
            u = np.flatnonzero(undecided)
            s[u] += _jacobi_coef(n, x[u]) * (1.0 if n % 2 == 0 else -1.0)
            if n % 2 == 1:
                dec = y[u] <= s[u]
                accepted[u[dec]] = True
            else:
                dec = y[u] > s[u]
            undecided[u[dec]] = False
        out[idx[accepted]] = x[accepted] / 4.0
        idx = idx[~accepted]
    return out


def sample_polya_gamma(b, c, rng):
    """Draw PG(b, c) elementwise.

    Parameters
    ----------
    b : int array-like
        Nonnegative trial counts.  b = 0 yields exactly 0 (point mass).
    c : float array-like
        Tilting parameter, any finite real.
    rng : RngStream or numpy Generator

    Counts up to ``PG_EXACT_MAX_COUNT`` are drawn exactly as sums of PG(1, c);
    larger counts use a moment-matched normal truncated to the positive axis,
    whose error is negligible at those counts relative to posterior spread.
    """
    gen = as_generator(rng)
    b = np.asarray(b)
    c = np.asarray(c, dtype=float)
    b, c = np.broadcast_arrays(b, c)
    if b.ndim == 0:
        return float(sample_polya_gamma(b[None], c[None], gen)[0])
    if np.any(b < 0):
        raise ValueError("PG count b must be nonnegative")
    if not np.all(np.isfinite(c)):
        raise ValueError("PG tilt c must be finite")

    out = np.zeros(b.shape)
    flat_b = b.reshape(-1)
    flat_c = c.reshape(-1)
    flat_out = out.reshape(-1)

    exact = (flat_b > 0) & (flat_b <= PG_EXACT_MAX_COUNT)
    if exact.any():
        reps = flat_b[exact].astype(np.int64)
        cc = np.repeat(flat_c[exact], reps)
        draws = _pg1(cc, gen)
        seg = np.repeat(np.arange(reps.size), reps)
        flat_out[exact] = np.bincount(seg, weights=draws, minlength=reps.size)

    approx = flat_b > PG_EXACT_MAX_COUNT
    if approx.any():
        m = pg_mean(flat_b[approx], flat_c[approx])
        s = np.sqrt(pg_var(flat_b[approx], flat_c[approx]))
        draws = gen.normal(m, s)
        bad = draws <= 0.0
        while bad.any():
            draws[bad] = gen.normal(m[bad], s[bad])
            bad = draws <= 0.0
        flat_out[approx] = draws
    return out


# ---------------------------------------------------------------------------
# Chinese-restaurant-table counts
# ---------------------------------------------------------------------------

def sample_crt(z, r, rng):
    """Draw L = sum_{l=1..z} Bernoulli(r / (r + l - 1)) elementwise.

    z must be a nonnegative count (<= ``CRT_MAX_COUNT``) and r > 0.  L = 0
    iff z = 0, and the first Bernoulli always succeeds, so L >= 1 when z >= 1.
    """
    gen = as_generator(rng)
    z = np.asarray(z)
    r = np.asarray(r, dtype=float)
    z, r = np.broadcast_arrays(z, r)
    scalar = z.ndim == 0
    z = np.atleast_1d(z).astype(np.int64)
    r = np.atleast_1d(r)
    if np.any(z < 0):
        raise ValueError("CRT count z must be nonnegative")
    if np.any(z > CRT_MAX_COUNT):
        raise ValueError(f"CRT count exceeds supported maximum {CRT_MAX_COUNT}")
    if np.any(r <= 0) or not np.all(np.isfinite(r)):
        raise ValueError("CRT concentration r must be positive and finite")

    out = np.zeros(z.shape, dtype=np.int64)
    flat_z = z.reshape(-1)
    flat_r = r.reshape(-1)
    pos = np.flatnonzero(flat_z > 0)
    if pos.size:
        reps = flat_z[pos]
        total = int(reps.sum())
        # table index l - 1 within each cell, laid out contiguously
        offsets = np.repeat(np.cumsum(reps) - reps, reps)
        l_minus_1 = np.arange(total, dtype=np.int64) - offsets
        rr = np.repeat(flat_r[pos], reps)
        hits = gen.random(total) * (rr + l_minus_1) < rr
        seg = np.repeat(np.arange(reps.size), reps)
        out.reshape(-1)[pos] = np.bincount(seg, weights=hits, minlength=reps.size).astype(np.int64)
    return int(out[0]) if scalar else out


def crt_pmf(z, r):
    """Exact CRT pmf over 0..z by enumeration of the Bernoulli chain.

    O(z^2); intended for verification with small z.
    """
    if z < 0:
        raise ValueError("z must be nonnegative")
    if r <= 0:
        raise ValueError("r must be positive")
    pmf = np.zeros(z + 1)
    pmf[0] = 1.0
    for l in range(1, z + 1):
        p = r / (r + l - 1)
        nxt = np.zeros(z + 1)
        nxt[1:] += pmf[:-1] * p
        nxt += pmf * (1.0 - p)
        pmf = nxt
    return pmf


# ---------------------------------------------------------------------------
# Three-parameter beta
# ---------------------------------------------------------------------------

def tpb_logpdf(x, params: TpbParams):
    """Log density of TPB(a, b, c) at x in (0, 1)."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0) or np.any(x >= 1.0):
        raise ValueError("TPB support is the open interval (0, 1)")
    a, b, c = params.a, params.b, params.c
    return (
        gammaln(a + b)
        - gammaln(a)
        - gammaln(b)
        + b * np.log(c)
        + (b - 1.0) * np.log(x)
        + (a - 1.0) * np.log1p(-x)
        - (a + b) * np.log1p((c - 1.0) * x)
    )


def sample_tpb(params: TpbParams, rng, size=None):
    """Draw from TPB(a, b, c) via its gamma mixture.

    x = psi / (1 + psi) with psi ~ Gamma(b, rate=w) and w ~ Gamma(a, rate=1/c)
    is TPB(a, b, c); used for prior simulation and QQ oracles.
    """
    gen = as_generator(rng)
    w = gen.gamma(params.a, params.c, size=size)  # scale c == rate 1/c
    psi = gen.gamma(params.b, 1.0 / w)
    return psi / (1.0 + psi)


# ---------------------------------------------------------------------------
# Negative binomial (mean / dispersion parameterization)
# ---------------------------------------------------------------------------

def negbin_logpmf(z, mean, dispersion):
    """Log pmf of the count family with E = mean, Var = mean * (1 + dispersion)."""
    z = np.asarray(z)
    mean = np.asarray(mean, dtype=float)
    xi = np.asarray(dispersion, dtype=float)
    a = mean / xi  # number-of-failures shape
    log1pxi = np.log1p(xi)
    return (
        gammaln(z + a)
        - gammaln(a)
        - gammaln(z + 1.0)
        - a * log1pxi
        + z * (np.log(xi) - log1pxi)
    )


def sample_negbin(mean, dispersion, rng, size=None):
    """Draw counts with E = mean and Var = mean * (1 + dispersion).

    Equals NegBin(a, b) with a = mean/dispersion, b = 1/(1 + dispersion);
    sampled as a Poisson-gamma mixture, which is exact for all positive
    (mean, dispersion).
    """
    gen = as_generator(rng)
    mean = np.asarray(mean, dtype=float)
    xi = np.asarray(dispersion, dtype=float)
    if np.any(mean <= 0):
        raise ValueError("negbin mean must be positive")
    if np.any(xi <= 0):
        raise ValueError("negbin dispersion must be positive")
    shape = mean / xi
    lam = gen.gamma(shape, xi, size=size)  # scale xi
    return gen.poisson(lam)


# ---------------------------------------------------------------------------
# Truncated inverse gamma
# ---------------------------------------------------------------------------

def sample_truncated_inverse_gamma(shape, scale, upper, rng, size=None):
    """Inverse-gamma(shape, scale) conditioned on (0, upper], via inverse CDF.

    P(X <= x) for the inverse gamma is Q(shape, scale / x) with Q the
    regularized upper incomplete gamma, so a uniform draw u maps to
    x = scale / Qinv(shape, u * Q(shape, scale / upper)).

    Raises
    ------
    TruncationMassError
        If the truncation region holds mass below 1e-300; callers fall back
        to the upper bound.
    """
    gen = as_generator(rng)
    shape = np.asarray(shape, dtype=float)
    scale = np.asarray(scale, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(shape <= 0) or np.any(scale <= 0):
        raise ValueError("shape and scale must be positive")
    if np.any(upper <= 0) or np.any(upper > 1.0):
        raise ValueError("upper truncation bound must lie in (0, 1]")
    mass = gammaincc(shape, scale / upper)
    if np.any(mass < 1e-300):
        raise TruncationMassError("truncated inverse-gamma region has mass < 1e-300")
    u = gen.random(size=size if size is not None else np.broadcast(shape, scale, upper).shape)
    x = scale / gammainccinv(shape, u * mass)
    return np.minimum(x, upper)  # guard the inverse's last-ulp overshoot


def truncated_inverse_gamma_cdf(x, shape, scale, upper):
    """Analytic CDF of the truncated inverse gamma (verification oracle)."""
    x = np.asarray(x, dtype=float)
    num = gammaincc(shape, scale / np.clip(x, 1e-300, upper))
    return np.where(x <= 0, 0.0, np.where(x >= upper, 1.0, num / gammaincc(shape, scale / upper)))


def expit_clipped(x):
    """expit with outputs clipped away from exactly 0 and 1."""
    p = expit(np.asarray(x, dtype=float))
    tiny = np.finfo(float).tiny
    return np.clip(p, tiny, 1.0 - 1e-16)


def log_gammaincc(a, x):
    """log of the regularized upper incomplete gamma Q(a, x), elementwise.

    Direct where Q is representable; for deep upper tails (x >> a) the
    asymptotic expansion Q(a,x) ~ x^(a-1) e^(-x) / G(a) * sum_k prod(a-1..a-k)/x^k
    takes over.
    """
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    a, x = np.broadcast_arrays(a, x)
    with np.errstate(divide="ignore"):
        out = np.log(gammaincc(a, x))
    deep = ~np.isfinite(out)
    if deep.any():
        ad, xd = a[deep], x[deep]
        if np.any(xd < 2.0 * ad + 100.0):
            raise FloatingPointError("log_gammaincc tail expansion invalid for x < 2a + 100")
        series = np.ones_like(xd)
        term = np.ones_like(xd)
        for k in range(1, 12):
            term = term * (ad - k) / xd
            series += term
        out = np.array(out)
        out[deep] = (ad - 1.0) * np.log(xd) - xd - gammaln(ad) + np.log(np.maximum(series, 1e-30))
    return out
