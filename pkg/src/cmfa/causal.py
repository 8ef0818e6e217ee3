"""Counterfactual prediction and causal-effect computation.

For every retained posterior draw and every treated unit-time, the potential
untreated outcome is drawn from the observation model with the design
quantities (trials, offsets, covariates) held at their observed values.
Effects are observed-minus-counterfactual per draw; the binomial family also
carries a success-probability effect whose treated side comes from the
conjugate beta posterior of the post-intervention cell.

All reductions run in a fixed canonical order (units sorted by label, times
ascending, outcomes in family order), so repeated runs and independent
re-aggregations are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import PanelDataset
from .rng import as_generator
from .samplers import PosteriorDraws

PERCENTILES = (2.5, 97.5)  # summaries interpolate linearly between order statistics


@dataclass
class CellIndex:
    """Treated post-intervention cells of one family, in canonical order."""

    unit: np.ndarray
    time: np.ndarray
    outcome: np.ndarray

    @property
    def size(self) -> int:
        return self.unit.size


def treated_cells(data: PanelDataset, width: int) -> CellIndex:
    units, times, outs = [], [], []
    for i in np.flatnonzero(data.last_untreated < data.T):
        for t in range(int(data.last_untreated[i]), data.T):
            for d in range(width):
                units.append(i)
                times.append(t)
                outs.append(d)
    return CellIndex(np.array(units, dtype=int), np.array(times, dtype=int),
                     np.array(outs, dtype=int))


@dataclass
class CounterfactualDraws:
    """Per-draw predictive draws of potential untreated outcomes."""

    cells_normal: CellIndex
    cells_binomial: CellIndex
    cells_count: CellIndex
    y0: np.ndarray          # (L, m1)
    k0: np.ndarray          # (L, m2)
    z0: np.ndarray          # (L, m3)
    p0: np.ndarray          # (L, m2) untreated success probabilities
    q0: np.ndarray          # (L, m3) untreated rates
    p_treated: np.ndarray   # (L, m2) beta-posterior draws for treated cells
    beta_valid: np.ndarray  # (m2,) false where the treated cell has no trials


def predict_counterfactuals(draws: PosteriorDraws, data: PanelDataset, rng) -> CounterfactualDraws:
    gen = as_generator(rng)
    L = draws.n_draws
    c1 = treated_cells(data, data.D1)
    c2 = treated_cells(data, data.D2)
    c3 = treated_cells(data, data.D3)

    y0 = np.empty((L, c1.size))
    k0 = np.empty((L, c2.size), dtype=np.int64)
    z0 = np.empty((L, c3.size), dtype=np.int64)
    p0 = np.empty((L, c2.size))
    q0 = np.empty((L, c3.size))
    p_treated = np.empty((L, c2.size))

    n_cell = data.n[c2.unit, c2.time, c2.outcome]
    k_cell = data.k[c2.unit, c2.time, c2.outcome]
    w_cell = data.w[c3.unit, c3.time, c3.outcome]

    for m in range(L):
        lam = draws.loadings[m]
        if c1.size:
            f = draws.f_factors[m][c1.time, c1.outcome, :]        # (m1,J)
            mu = (lam[c1.unit] * f).sum(axis=1)
            if data.P:
                mu = mu + (data.x[c1.unit, c1.time] * draws.eta1[m][c1.outcome]).sum(axis=1)
            sd = np.sqrt(draws.noise_var[m][c1.unit, c1.outcome])
            y0[m] = gen.normal(mu, sd)
        if c2.size:
            g = draws.g_factors[m][c2.time, c2.outcome, :]
            psi = (lam[c2.unit] * g).sum(axis=1)
            if data.P:
                psi = psi + (data.x[c2.unit, c2.time] * draws.eta2[m][c2.outcome]).sum(axis=1)
            p = expit(psi)
            p0[m] = p
            k0[m] = gen.binomial(n_cell, p)
            p_treated[m] = gen.beta(1.0 + k_cell, 1.0 + n_cell - k_cell)
        if c3.size:
            h = draws.h_factors[m][c3.time, c3.outcome, :]
            psi = (lam[c3.unit] * h).sum(axis=1)
            if data.P:
                psi = psi + (data.x[c3.unit, c3.time] * draws.eta3[m][c3.outcome]).sum(axis=1)
            q = np.exp(psi)
            q0[m] = q
            disp = draws.dispersion[m]
            if disp.shape[0] == 1:
                xi = disp[0][c3.outcome]
            else:
                xi = disp[c3.unit, c3.outcome]
            mean = w_cell * q
            ok = mean > 0
            lamz = np.zeros(c3.size)
            if ok.any():
                lamz[ok] = gen.gamma(mean[ok] / xi[ok], xi[ok])
            z0[m] = np.where(ok, gen.poisson(lamz), 0)

    eps = np.finfo(float).tiny
    np.clip(p_treated, eps, 1.0 - 1e-16, out=p_treated)
    np.clip(p0, eps, 1.0 - 1e-16, out=p0)
    return CounterfactualDraws(
        cells_normal=c1, cells_binomial=c2, cells_count=c3,
        y0=y0, k0=k0, z0=z0, p0=p0, q0=q0, p_treated=p_treated,
        beta_valid=n_cell > 0,
    )


@dataclass
class EffectDraws:
    """Per-draw unit-time effects: observed minus potential untreated."""

    cells_normal: CellIndex
    cells_binomial: CellIndex
    cells_count: CellIndex
    alpha: np.ndarray       # (L, m1) continuous differences
    beta: np.ndarray        # (L, m2) success-probability differences
    gamma: np.ndarray       # (L, m2) success-count differences
    delta: np.ndarray       # (L, m3) count differences
    beta_valid: np.ndarray  # (m2,)


def compute_effects(cf: CounterfactualDraws, data: PanelDataset) -> EffectDraws:
    c1, c2, c3 = cf.cells_normal, cf.cells_binomial, cf.cells_count
    y_obs = data.y[c1.unit, c1.time, c1.outcome]
    k_obs = data.k[c2.unit, c2.time, c2.outcome]
    z_obs = data.z[c3.unit, c3.time, c3.outcome]
    return EffectDraws(
        cells_normal=c1, cells_binomial=c2, cells_count=c3,
        alpha=y_obs[None, :] - cf.y0,
        beta=cf.p_treated - cf.p0,
        gamma=k_obs[None, :] - cf.k0,
        delta=z_obs[None, :] - cf.z0,
        beta_valid=cf.beta_valid,
    )


# ---------------------------------------------------------------------------
# Aggregation (per posterior draw)
# ---------------------------------------------------------------------------

def _group_mean(values, keys, valid=None):
    """Mean of value columns grouped by key tuples, preserving first-seen order.

    Returns (group_keys, (L, n_groups) array).  ``valid`` masks columns out
    of both numerator and denominator.
    """
    if valid is None:
        valid = np.ones(len(keys), dtype=bool)
    order = {}
    for idx, key in enumerate(keys):
        if valid[idx]:
            order.setdefault(key, []).append(idx)
    group_keys = list(order.keys())
    out = np.empty((values.shape[0], len(group_keys)))
    for gi, key in enumerate(group_keys):
        out[:, gi] = values[:, order[key]].mean(axis=1)
    return group_keys, out


def aggregate_effects(values: np.ndarray, cells: CellIndex, data: PanelDataset,
                      valid: np.ndarray | None = None):
    """Unit-, time- and overall-level per-draw aggregates of unit-time effects.

    Unit level averages a unit's post-intervention times; time level averages
    the units already treated at that time; the overall level averages every
    treated cell (equivalently, the treated-count-weighted mean over times).
    """
    unit_keys, unit_vals = _group_mean(
        values, [(int(u), int(d)) for u, d in zip(cells.unit, cells.outcome)], valid)
    time_keys, time_vals = _group_mean(
        values, [(int(t), int(d)) for t, d in zip(cells.time, cells.outcome)], valid)
    all_keys, all_vals = _group_mean(
        values, [int(d) for d in cells.outcome], valid)
    return {
        "unit": (unit_keys, unit_vals),
        "time": (time_keys, time_vals),
        "overall": (all_keys, all_vals),
    }


def compute_ranks(values: np.ndarray, cells: CellIndex, data: PanelDataset,
                  valid: np.ndarray | None = None):
    """Scaled ranks of each treated unit's effect among units treated by t.

    rank = #{j treated by t : effect_j <= effect_i} / (count + 1), per draw;
    plus the per-unit time-average of those ranks.
    """
    L = values.shape[0]
    if valid is None:
        valid = np.ones(cells.size, dtype=bool)
    rank_vals = np.full((L, cells.size), np.nan)
    groups = {}
    for idx in range(cells.size):
        if valid[idx]:
            groups.setdefault((int(cells.time[idx]), int(cells.outcome[idx])), []).append(idx)
    for (t, d), idxs in groups.items():
        vals = values[:, idxs]                              # (L, m)
        le = (vals[:, :, None] <= vals[:, None, :]).sum(axis=1)  # counts of <= per column
        rank_vals[:, idxs] = le / (len(idxs) + 1.0)
    unit_keys, unit_ranks = _group_mean(
        rank_vals, [(int(u), int(d)) for u, d in zip(cells.unit, cells.outcome)], valid)
    return rank_vals, unit_keys, unit_ranks


# ---------------------------------------------------------------------------
# Posterior summaries
# ---------------------------------------------------------------------------

def summarize_draws(values: np.ndarray):
    """(mean, lo95, hi95) along the draw axis with linear interpolation."""
    mean = values.mean(axis=0)
    lo, hi = np.percentile(values, PERCENTILES, axis=0)
    return mean, lo, hi


@dataclass
class EffectSummary:
    level: str        # unit_time | unit | time | overall
    estimand: str     # alpha | beta | gamma | delta | rank_*
    unit: str | None
    time: int | None  # 1-based period
    outcome: str
    mean: float
    lo95: float
    hi95: float


def _family_meta(data):
    return (
        ("alpha", data.normal_labels, "cells_normal"),
        ("beta", data.binomial_labels, "cells_binomial"),
        ("gamma", data.binomial_labels, "cells_binomial"),
        ("delta", data.count_labels, "cells_count"),
    )


def summarize_effects(effects: EffectDraws, data: PanelDataset) -> list[EffectSummary]:
    """Full summary table: unit-time, unit, time and overall levels, plus
    scaled ranks at the unit-time and unit levels."""
    out: list[EffectSummary] = []
    for estimand, labels, cell_attr in _family_meta(data):
        values = getattr(effects, estimand)
        if not values.size:
            continue
        cells: CellIndex = getattr(effects, cell_attr)
        valid = effects.beta_valid if estimand == "beta" else None
        vmask = valid if valid is not None else np.ones(cells.size, dtype=bool)

        mean, lo, hi = summarize_draws(values)
        for idx in range(cells.size):
            if not vmask[idx]:
                continue
            out.append(EffectSummary(
                "unit_time", estimand, data.unit_labels[cells.unit[idx]],
                int(cells.time[idx]) + 1, labels[cells.outcome[idx]],
                float(mean[idx]), float(lo[idx]), float(hi[idx])))
        aggs = aggregate_effects(values, cells, data, valid)
        for level, (keys, vals) in aggs.items():
            m, l, h = summarize_draws(vals)
            for gi, key in enumerate(keys):
                if level == "unit":
                    u, d = key
                    out.append(EffectSummary(level, estimand, data.unit_labels[u], None,
                                             labels[d], float(m[gi]), float(l[gi]), float(h[gi])))
                elif level == "time":
                    t, d = key
                    out.append(EffectSummary(level, estimand, None, int(t) + 1,
                                             labels[d], float(m[gi]), float(l[gi]), float(h[gi])))
                else:
                    out.append(EffectSummary(level, estimand, None, None,
                                             labels[key], float(m[gi]), float(l[gi]), float(h[gi])))
        rank_vals, unit_keys, unit_ranks = compute_ranks(values, cells, data, valid)
        rmean, rlo, rhi = summarize_draws(rank_vals)
        for idx in range(cells.size):
            if not vmask[idx]:
                continue
            out.append(EffectSummary(
                "unit_time", "rank_" + estimand, data.unit_labels[cells.unit[idx]],
                int(cells.time[idx]) + 1, labels[cells.outcome[idx]],
                float(rmean[idx]), float(rlo[idx]), float(rhi[idx])))
        um, ul, uh = summarize_draws(unit_ranks)
        for gi, (u, d) in enumerate(unit_keys):
            out.append(EffectSummary("unit", "rank_" + estimand, data.unit_labels[u], None,
                                     labels[d], float(um[gi]), float(ul[gi]), float(uh[gi])))
    return out


def rank_correlations(effects: EffectDraws, data: PanelDataset):
    """Pearson correlations between mean posterior unit ranks, across all
    estimand/outcome pairs sharing the treated-unit set."""
    series = {}
    for estimand, labels, cell_attr in _family_meta(data):
        values = getattr(effects, estimand)
        if not values.size:
            continue
        cells = getattr(effects, cell_attr)
        valid = effects.beta_valid if estimand == "beta" else None
        _, unit_keys, unit_ranks = compute_ranks(values, cells, data, valid)
        mean_rank = unit_ranks.mean(axis=0)
        for d in sorted({k[1] for k in unit_keys}):
            col = {u: mean_rank[gi] for gi, (u, dd) in enumerate(unit_keys) if dd == d}
            series[f"rank_{estimand}:{labels[d]}"] = col
    names = list(series.keys())
    units = sorted(set().union(*[set(s) for s in series.values()])) if series else []
    mat = np.full((len(names), len(names)), np.nan)
    for a in range(len(names)):
        for b in range(len(names)):
            common = [u for u in units if u in series[names[a]] and u in series[names[b]]]
            if len(common) >= 2:
                xa = np.array([series[names[a]][u] for u in common])
                xb = np.array([series[names[b]][u] for u in common])
                if xa.std() > 0 and xb.std() > 0:
                    mat[a, b] = float(np.corrcoef(xa, xb)[0, 1])
            if a == b:
                mat[a, b] = 1.0
    return names, mat


def probability_bands(cf: CounterfactualDraws, data: PanelDataset) -> list[dict]:
    """Per treated binomial cell: posterior bands of the untreated success
    probability and of the treated-cell probability (plot input)."""
    rows = []
    c2 = cf.cells_binomial
    if not c2.size:
        return rows
    p0m, p0lo, p0hi = summarize_draws(cf.p0)
    ptm, ptlo, pthi = summarize_draws(cf.p_treated)
    for idx in range(c2.size):
        rows.append({
            "unit": data.unit_labels[c2.unit[idx]],
            "time": int(c2.time[idx]) + 1,
            "outcome": data.binomial_labels[c2.outcome[idx]],
            "p0_mean": float(p0m[idx]), "p0_lo95": float(p0lo[idx]), "p0_hi95": float(p0hi[idx]),
            "pT_mean": float(ptm[idx]), "pT_lo95": float(ptlo[idx]), "pT_hi95": float(pthi[idx]),
            "valid": bool(cf.beta_valid[idx]),
        })
    return rows
