"""Synthetic-data generator with known ground truth.

One dataset: 80 units, 24 periods, one outcome per family driven by seven
shared loadings whose factor paths are AR-like correlated over time.  Units
select into treatment with a hazard that depends on their latent completion
probability and contact rate, which confounds naive comparisons; intervention
effects are applied on the natural scale of each family (identity, log-odds,
log) from the first post-treatment period onward.

Treated-cell outcomes are drawn from cell-keyed substreams, so a zero-effect
scenario reproduces the potential untreated outcomes bit-for-bit and effect
scenarios stay maximally coupled to them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, logit

from .data import PanelDataset
from .errors import ValidationError
from .rng import RngStream, as_generator

# 97.5% quantile of a sum of three independent products of standard normals,
# solved once by solve_factor_scales (40M Monte-Carlo draws) and frozen.
PRODUCT_SUM_Q975 = 3.6035490673726427

# factor scales hitting the 97.5% marginal targets 7.5 / 0.85 / 10
S1_DEFAULT = 2.5 / PRODUCT_SUM_Q975
S2_DEFAULT = float(logit(0.85) - logit(0.6)) / PRODUCT_SUM_Q975
S3_DEFAULT = float(np.log(10.0 / 4.0)) / PRODUCT_SUM_Q975

# confounded-hazard coefficients, solved once by calibrate_kappas and frozen
# (1500 datasets per gap evaluation; achieved mean controls 40.11 and
# confounding gaps 0.0723 / 0.7499 against the 0.075 / 0.75 targets)
KAPPA0_DEFAULT = 8.802337646484375
KAPPA1_DEFAULT = -13.419677734375
KAPPA2_DEFAULT = -1.3198486328125
FACTOR_TIME_CORR = 0.8
VARIANCE_EXPLAINED = 0.8

# which factor drives which outcome: column j of the loading matrix carries
# scale s_d for outcome d when pattern[j, d] is set (factor 1 is the pinned
# mean factor shared by every outcome)
FACTOR_PATTERN = np.array([
    [0, 0, 0],   # j=1: constant mean paths
    [1, 1, 0],
    [1, 0, 1],
    [0, 1, 1],
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
], dtype=bool)


@dataclass(frozen=True)
class SimScenario:
    """Generation settings; effect level 1 must carry zero magnitudes."""

    effect_level: int = 1
    alpha_eff: float = 0.0
    beta_eff: float = 0.0
    delta_eff: float = 0.0
    N: int = 80
    T: int = 24
    J_true: int = 7
    t_min: int = 8
    xi_true: float = 2.0
    kappa0: float = KAPPA0_DEFAULT
    kappa1: float = KAPPA1_DEFAULT
    kappa2: float = KAPPA2_DEFAULT
    s1: float = S1_DEFAULT
    s2: float = S2_DEFAULT
    s3: float = S3_DEFAULT
    seed: int = 0

    def __post_init__(self):
        zero = self.alpha_eff == 0.0 and self.beta_eff == 0.0 and self.delta_eff == 0.0
        if (self.effect_level == 1) != zero:
            raise ValidationError("effect level 1 must hold exactly the zero magnitudes")
        if not 1 <= self.t_min < self.T:
            raise ValidationError("t_min must lie in [1, T)")

    @property
    def noise_var(self) -> float:
        """Noise variance making the factor term explain the target share of
        continuous-outcome variance (population identity, not per-dataset)."""
        n_active = int(FACTOR_PATTERN[:, 0].sum())
        factor_var = n_active * self.s1**2
        return factor_var * (1.0 - VARIANCE_EXPLAINED) / VARIANCE_EXPLAINED


@dataclass
class SimTruth:
    """Everything needed to score an analysis of the generated dataset."""

    loadings: np.ndarray        # (N, J)
    f_path: np.ndarray          # (T, J) continuous-outcome factors
    g_path: np.ndarray          # (T, J)
    h_path: np.ndarray          # (T, J)
    mu: np.ndarray              # (N, T) untreated mean
    p: np.ndarray               # (N, T) untreated success probability
    q: np.ndarray               # (N, T) untreated rate
    y0: np.ndarray              # (N, T) potential untreated outcomes
    k0: np.ndarray
    z0: np.ndarray
    last_untreated: np.ndarray  # (N,)
    noise_var: float
    dispersion: float
    alpha_true: np.ndarray      # (N, T) nan outside treated post cells
    beta_true: np.ndarray
    gamma_true: np.ndarray
    delta_true: np.ndarray


def _factor_paths(scenario, gen):
    T, J = scenario.T, scenario.J_true
    R = FACTOR_TIME_CORR ** np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    chol = np.linalg.cholesky(R)
    means = np.zeros((3, J))
    means[:, 0] = [5.0, logit(0.6), np.log(4.0)]
    scales = np.zeros((3, J))
    for d, s in enumerate((scenario.s1, scenario.s2, scenario.s3)):
        scales[d, FACTOR_PATTERN[:, d]] = s
    paths = []
    for d in range(3):
        z = gen.standard_normal((T, J))
        paths.append(means[d] + (chol @ z) * scales[d])
    return paths  # each (T, J)


def _ramp_rates(gen, N, T, start, lo, hi):
    end = gen.uniform(lo, hi, size=N)
    frac = np.arange(T) / (T - 1)
    return start + frac[None, :] * (end[:, None] - start)


def generate_dataset(scenario: SimScenario, rng=None, coupled: bool = True):
    """One synthetic panel plus its ground truth.

    Returns (PanelDataset, SimTruth).  The observed outcomes already include
    the scenario's intervention effects at treated post-intervention cells.
    ``coupled=False`` draws treated cells from the master stream instead of
    cell-keyed substreams: same law, faster, but effect scenarios of the same
    seed are no longer draw-coupled (calibration uses this path).
    """
    stream = RngStream(scenario.seed, (11,)) if rng is None else rng
    gen = as_generator(stream)
    N, T, J = scenario.N, scenario.T, scenario.J_true

    loadings = gen.standard_normal((N, J))
    loadings[:, 0] = 1.0
    f_path, g_path, h_path = _factor_paths(scenario, gen)
    mu = loadings @ f_path.T              # (N, T)
    p = expit(loadings @ g_path.T)
    q = np.exp(loadings @ h_path.T)

    n_trials = gen.poisson(_ramp_rates(gen, N, T, 5.0, 50.0, 200.0))
    w_offset = gen.poisson(_ramp_rates(gen, N, T, 5.0, 25.0, 75.0)).astype(float)

    # treatment hazard; a unit drawn at time t has last untreated period t-1
    u = gen.uniform(0.0, 1.0, size=(N, T))
    hazard = expit(scenario.kappa0 + scenario.kappa1 * p + scenario.kappa2 * q)
    t_idx = np.arange(1, T + 1)[None, :]
    hazard = np.where(t_idx > scenario.t_min, hazard, 0.0)
    fired = u < hazard
    last_untreated = np.where(fired.any(axis=1), fired.argmax(axis=1), T).astype(np.int64)

    sd = np.sqrt(scenario.noise_var)
    y0 = gen.normal(mu, sd)
    xi = scenario.xi_true

    # control and pre-treatment cells from the master stream; treated post
    # cells from cell-keyed substreams so effect scenarios stay coupled
    k0 = gen.binomial(n_trials, p)
    lam = gen.gamma(np.maximum(w_offset * q, 1e-300) / xi, xi)
    z0 = np.where(w_offset > 0, gen.poisson(lam), 0)

    if coupled:
        treated_units = np.flatnonzero(last_untreated < T)
        base = RngStream(scenario.seed, (23,))
        for i in treated_units:
            for t in range(int(last_untreated[i]), T):
                cg = base.substream(i, t).generator()
                k0[i, t] = cg.binomial(n_trials[i, t], p[i, t])
                if w_offset[i, t] > 0:
                    z0[i, t] = cg.poisson(cg.gamma(w_offset[i, t] * q[i, t] / xi, xi))
                else:
                    z0[i, t] = 0

    truth = SimTruth(
        loadings=loadings, f_path=f_path, g_path=g_path, h_path=h_path,
        mu=mu, p=p, q=q, y0=y0, k0=k0, z0=z0,
        last_untreated=last_untreated, noise_var=scenario.noise_var,
        dispersion=xi,
        alpha_true=np.full((N, T), np.nan), beta_true=np.full((N, T), np.nan),
        gamma_true=np.full((N, T), np.nan), delta_true=np.full((N, T), np.nan),
    )
    data = apply_effects(truth, scenario, n_trials, w_offset, coupled=coupled)
    return data, truth


def apply_effects(truth: SimTruth, scenario: SimScenario, n_trials, w_offset,
                  coupled: bool = True) -> PanelDataset:
    """Observed outcomes under the scenario's effects, plus realized truths.

    Treated post cells shift the continuous mean additively, the success
    probability on the log-odds scale and the rate on the log scale, and are
    redrawn from the same cell-keyed substreams used for the potential
    untreated outcomes (a zero-magnitude scenario reproduces them exactly).
    """
    N, T = truth.mu.shape
    y_obs = truth.y0.copy()
    k_obs = truth.k0.copy()
    z_obs = truth.z0.copy()
    last = truth.last_untreated
    xi = truth.dispersion
    zero = scenario.alpha_eff == 0.0 and scenario.beta_eff == 0.0 and scenario.delta_eff == 0.0
    base = RngStream(scenario.seed, (23,))
    fallback = RngStream(scenario.seed, (29,)).generator()
    for i in np.flatnonzero(last < T):
        for t in range(int(last[i]), T):
            if scenario.beta_eff == 0.0:  # avoid the logit/expit round-trip ulp
                p1 = float(truth.p[i, t])
            else:
                p1 = float(expit(logit(truth.p[i, t]) + scenario.beta_eff))
            q1 = float(truth.q[i, t] * np.exp(scenario.delta_eff))
            if coupled:
                cg = base.substream(i, t).generator()
            elif zero:
                cg = None  # observed == potential untreated, no redraw
            else:
                cg = fallback
            if cg is not None:
                k_obs[i, t] = cg.binomial(n_trials[i, t], p1)
                if w_offset[i, t] > 0:
                    z_obs[i, t] = cg.poisson(cg.gamma(w_offset[i, t] * q1 / xi, xi))
                else:
                    z_obs[i, t] = 0
            y_obs[i, t] = truth.y0[i, t] + scenario.alpha_eff
            truth.alpha_true[i, t] = scenario.alpha_eff
            truth.beta_true[i, t] = p1 - truth.p[i, t]
            truth.gamma_true[i, t] = k_obs[i, t] - truth.k0[i, t]
            truth.delta_true[i, t] = z_obs[i, t] - truth.z0[i, t]

    return PanelDataset(
        y=y_obs[:, :, None],
        k=k_obs[:, :, None],
        n=n_trials[:, :, None],
        z=z_obs[:, :, None],
        w=w_offset[:, :, None],
        x=np.zeros((N, T, 0)),
        last_untreated=last,
        unit_labels=[f"unit_{i:03d}" for i in range(N)],
        normal_labels=["score"],
        binomial_labels=["completion"],
        count_labels=["contacts"],
    )


# ---------------------------------------------------------------------------
# Calibration targets and search (maintenance tools; defaults above are the
# frozen outputs of these procedures)
# ---------------------------------------------------------------------------

def measure_targets(scenario: SimScenario, n_datasets: int, seed: int = 1000):
    """Monte-Carlo estimates of (mean control count, completion gap,
    contacts-per-case gap) under zero effects."""
    n1 = np.empty(n_datasets)
    gap_p = np.empty(n_datasets)
    gap_q = np.empty(n_datasets)
    for b in range(n_datasets):
        sc = replace(scenario, seed=seed + b)
        data, truth = generate_dataset(sc, coupled=False)
        last = truth.last_untreated
        control = last == sc.T
        n1[b] = control.sum()
        t_keep = np.arange(sc.t_min - 1, sc.T)  # periods t_min..T, 1-based
        k = data.k[:, t_keep, 0]
        n = data.n[:, t_keep, 0]
        z = data.z[:, t_keep, 0]
        w = data.w[:, t_keep, 0]

        def group_mean(num, den, units):
            m = den[units] > 0
            return (num[units][m] / den[units][m]).mean() if m.any() else np.nan

        gap_p[b] = group_mean(k, n, control) - group_mean(k, n, ~control)
        gap_q[b] = group_mean(z, w, control) - group_mean(z, w, ~control)
    return float(n1.mean()), float(np.nanmean(gap_p)), float(np.nanmean(gap_q))


def calibrate_kappas(scenario: SimScenario | None = None, n_datasets: int = 1500,
                     seed: int = 500, rounds: int = 3, verbose: bool = False,
                     k1_bracket=(-24.0, 0.0), k2_bracket=(-2.5, 0.0),
                     k0_datasets: int | None = None):
    """Nested bisection for the hazard coefficients.

    Inner loop re-solves the intercept for a 50% control share at every
    candidate slope; outer rounds alternate the completion-probability slope
    (gap target 0.075) and the rate slope (gap target 0.75).  Returns the
    fitted (kappa0, kappa1, kappa2) with achieved targets.

    The contacts-per-case gap estimator has a per-dataset standard deviation
    near 0.8, so evaluations need a four-digit dataset count for the frozen
    constants to sit within a couple percent of the targets; the intercept
    share is far less noisy and uses a fifth of the budget.
    """
    base = scenario or SimScenario()
    k1, k2 = -1.0, -0.1
    n_k0 = k0_datasets if k0_datasets is not None else max(200, n_datasets // 5)

    def solve_k0(k1, k2):
        # wide bracket: strong negative slopes need a large intercept offset
        lo, hi = -14.0, 14.0
        for _ in range(16):
            mid = 0.5 * (lo + hi)
            sc = replace(base, kappa0=mid, kappa1=k1, kappa2=k2)
            n1, _, _ = measure_targets(sc, n_k0, seed)
            if n1 > 40.0:   # too many controls: raise the hazard
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def gaps_at(k1, k2):
        k0 = solve_k0(k1, k2)
        sc = replace(base, kappa0=k0, kappa1=k1, kappa2=k2)
        n1, g1, g2 = measure_targets(sc, n_datasets, seed)
        return k0, n1, g1, g2

    for r in range(rounds):
        lo, hi = k1_bracket   # completion gap increases as kappa1 decreases
        for _ in range(10):
            mid = 0.5 * (lo + hi)
            _, _, g1, _ = gaps_at(mid, k2)
            if g1 < 0.075:
                hi = mid
            else:
                lo = mid
        k1 = 0.5 * (lo + hi)
        lo, hi = k2_bracket
        for _ in range(10):
            mid = 0.5 * (lo + hi)
            _, _, _, g2 = gaps_at(k1, mid)
            if g2 < 0.75:
                hi = mid
            else:
                lo = mid
        k2 = 0.5 * (lo + hi)
        if verbose:
            k0, n1, g1, g2 = gaps_at(k1, k2)
            print(f"round {r}: k0={k0:.4f} k1={k1:.4f} k2={k2:.4f} "
                  f"N1={n1:.2f} gapP={g1:.4f} gapQ={g2:.4f}", flush=True)
    k0, n1, g1, g2 = gaps_at(k1, k2)
    return {"kappa0": k0, "kappa1": k1, "kappa2": k2,
            "mean_controls": n1, "completion_gap": g1, "contacts_gap": g2}


def solve_factor_scales(samples: int = 40_000_000, seed: int = 20260810):
    """Recompute the frozen product-sum quantile and the implied scales."""
    gen = np.random.default_rng(seed)
    s = np.zeros(samples)
    for _ in range(FACTOR_PATTERN[:, 0].sum()):
        s += gen.standard_normal(samples) * gen.standard_normal(samples)
    q = float(np.quantile(s, 0.975))
    return {
        "product_sum_q975": q,
        "s1": 2.5 / q,
        "s2": float(logit(0.85) - logit(0.6)) / q,
        "s3": float(np.log(10.0 / 4.0)) / q,
    }
