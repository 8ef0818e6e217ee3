"""Sampler health and correctness instrumentation.

Effective sample size, per-scalar R-hat, acceptance summaries, and the
joint-distribution self-test: simulate (parameters, data) once directly from
the prior and once by alternating Gibbs sweeps with data redraws, then
compare a fixed panel of twenty scalar functions between the two simulators.
A correct sampler makes every panel entry agree to Monte-Carlo error; seeded
faults must blow at least one entry far outside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import samplers as smp
from .data import PanelDataset
from .errors import NumericalError, ValidationError
from .model import FitConfig
from .rng import RngStream

GEWEKE_PANEL = (
    "mean_loading", "mean_loading_sq", "mean_f", "mean_f_sq", "mean_g_sq",
    "mean_h_sq", "mean_noise_var", "mean_log_dispersion", "mean_factor_var",
    "global_shrink", "mean_column_shrink", "mean_element_shrink",
    "log_disp_rate", "mean_y", "mean_y_sq", "mean_success_rate",
    "mean_log1p_count", "cross_y_loading", "mean_mu", "mean_success_prob",
)


def effective_sample_size(trace) -> float:
    """ESS via Geyer's initial-positive-sequence truncation.

    Requires at least 10 points and a non-constant trace; capped above at
    the trace length.
    """
    x = np.asarray(trace, dtype=float)
    if x.ndim != 1 or x.size < 10:
        raise ValidationError("ESS needs a 1-d trace of length >= 10")
    n = x.size
    x = x - x.mean()
    var = float(x @ x) / n
    if var == 0.0:
        raise ValidationError("degenerate (constant) trace has no ESS")
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n].real / n
    rho = acov / acov[0]
    # pair sums rho[2m] + rho[2m+1]; stop before the first negative pair
    npair = (n - 1) // 2
    pair = rho[: 2 * npair].reshape(npair, 2).sum(axis=1)
    neg = np.flatnonzero(pair < 0)
    m = neg[0] if neg.size else npair
    tau = max(-1.0 + 2.0 * pair[:m].sum(), 1e-12)
    return float(min(n, n / tau))


def split_rhat(traces) -> float:
    """Potential scale reduction over chains (split in half)."""
    arr = np.asarray(traces, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    halves = []
    for row in arr:
        h = row.size // 2
        halves.extend([row[:h], row[h:2 * h]])
    chains = np.array(halves)
    m, n = chains.shape
    means = chains.mean(axis=1)
    w = chains.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w == 0:
        return np.nan
    return float(np.sqrt((n - 1) / n + b / (w * n)))


@dataclass
class ChainDiagnostics:
    acceptance: dict
    ess: dict
    rhat: dict
    step_sizes: dict
    failures: list = field(default_factory=list)


def tracked_scalars(draws: smp.PosteriorDraws) -> dict:
    """Scalar traces summarizing a chain, for ESS / R-hat reporting."""
    out = {
        "mean_loading_sq": (draws.loadings**2).mean(axis=(1, 2)),
        "global_mean_factor_var": draws.factor_var.mean(axis=(1, 2)),
    }
    if draws.f_factors.shape[2]:
        out["mean_f_sq"] = (draws.f_factors**2).mean(axis=(1, 2, 3))
    if draws.g_factors.shape[2]:
        out["mean_g_sq"] = (draws.g_factors**2).mean(axis=(1, 2, 3))
    if draws.h_factors.shape[2]:
        out["mean_h_sq"] = (draws.h_factors**2).mean(axis=(1, 2, 3))
    if draws.noise_var.shape[2]:
        out["mean_noise_var"] = draws.noise_var.mean(axis=(1, 2))
    if draws.dispersion.shape[2]:
        out["mean_log_dispersion"] = np.log(draws.dispersion).mean(axis=(1, 2))
    return out


def compute_chain_diagnostics(chains: list, min_len: int = 10) -> ChainDiagnostics:
    """ESS per tracked scalar (pooled across chains) and split R-hat."""
    per_chain = [tracked_scalars(d) for d in chains]
    names = per_chain[0].keys()
    ess = {}
    rhat = {}
    for name in names:
        traces = [pc[name] for pc in per_chain]
        try:
            ess[name] = float(sum(effective_sample_size(t) for t in traces))
        except ValidationError:
            ess[name] = np.nan
        rhat[name] = split_rhat(traces) if len(traces) > 1 else np.nan
    acceptance = {}
    for d in chains:
        for k, v in d.acceptance.items():
            acceptance.setdefault(k, []).append(v)
    acceptance = {k: float(np.mean(v)) for k, v in acceptance.items()}
    steps = {k: np.asarray(v).mean() for k, v in chains[0].step_sizes.items()}
    return ChainDiagnostics(acceptance=acceptance, ess=ess, rhat=rhat, step_sizes=steps)


# ---------------------------------------------------------------------------
# Joint-distribution (prior reproduction) test
# ---------------------------------------------------------------------------

def tiny_model(seed: int = 0):
    """Fixed small design for the self-test: 6 units, 8 periods, one outcome
    per family, no covariates.

    The shrinkage shapes are set far into the light-tailed regime and the
    offsets kept at or below one.  Under the production shapes the marginal
    loadings have polynomial tails, so prior-predictive counts under the log
    link have no usable moments and the panel z-scores would be meaningless;
    the conditional updates exercised by the sweep are shape-generic, so the
    test loses no coverage from running at tame hyperparameters.
    """
    N, T = 6, 8
    i = np.arange(N)[:, None]
    t = np.arange(T)[None, :]
    n = (5 + (i * 3 + t) % 9).astype(np.int64)[:, :, None]          # 5..13 trials
    w = (0.25 + ((i + 2 * t) % 4) / 4.0)[:, :, None]                # 0.25..1.0 offsets
    data = PanelDataset(
        y=np.zeros((N, T, 1)),
        k=np.zeros((N, T, 1), dtype=np.int64),
        n=n,
        z=np.zeros((N, T, 1), dtype=np.int64),
        w=w,
        x=np.zeros((N, T, 0)),
        last_untreated=np.array([8, 8, 8, 8, 6, 4]),
        unit_labels=[f"u{j}" for j in range(N)],
    )
    config = FitConfig(
        max_factors=3, iterations=100, thin=10, burn_in_draws=2,
        tpb_shapes=(30.0,) * 6, nu=0.25, a_xi=5.0, c_xi=1.0, seed=seed,
    )
    return data, config


def geweke_statistics(state, data) -> np.ndarray:
    """The fixed 20-entry panel of scalar functions of (parameters, data)."""
    pre, bin_valid, cnt_valid = data.masks()
    from . import model as mdl

    mu = mdl.predictor_normal(state, data)
    psi = mdl.predictor_binomial(state, data)
    y_pre = data.y[:, :, 0][pre]
    kn = (data.k[:, :, 0] / np.maximum(data.n[:, :, 0], 1))[bin_valid[:, :, 0]]
    logz = np.log1p(data.z[:, :, 0])[cnt_valid[:, :, 0]]
    lam1 = np.broadcast_to(state.loadings[:, 0][:, None], pre.shape)
    return np.array([
        state.loadings.mean(),
        (state.loadings**2).mean(),
        state.f_factors.mean(),
        (state.f_factors**2).mean(),
        (state.g_factors**2).mean(),
        (state.h_factors**2).mean(),
        state.noise_var.mean(),
        np.log(state.dispersion).mean(),
        state.factor_var.mean(),
        state.rho,
        state.zeta.mean(),
        state.phi.mean(),
        np.log(state.disp_rate),
        y_pre.mean(),
        (y_pre**2).mean(),
        kn.mean(),
        logz.mean(),
        (data.y[:, :, 0] * lam1)[pre].mean(),
        mu[:, :, 0][pre].mean(),
        expit(psi[:, :, 0])[bin_valid[:, :, 0]].mean(),
    ])


@dataclass
class GewekeResult:
    names: tuple
    z_scores: np.ndarray
    prior_means: np.ndarray
    chain_means: np.ndarray
    prior_se: np.ndarray
    chain_se: np.ndarray
    fault: str | None = None
    diverged: str | None = None  # message when the faulted chain blew up

    @property
    def fraction_within_4(self) -> float:
        return float(np.mean(np.abs(self.z_scores) < 4.0))

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z_scores)))

    def passed(self) -> bool:
        return self.diverged is None and self.fraction_within_4 >= 0.95

    def detected(self) -> bool:
        """A seeded fault counts as caught on a far-out z or a blown-up chain."""
        return self.diverged is not None or self.max_abs_z > 6.0


def geweke_test(samples: int = 100_000, seed: int = 0, fault: str | None = None,
                progress=None) -> GewekeResult:
    """Marginal-conditional vs successive-conditional moment comparison.

    The first simulator draws (parameters, data) independently from the
    prior/model; the second alternates a data redraw with one Gibbs sweep.
    Step adaptation stays off so the sweep kernel is exactly invariant.
    """
    data, config = tiny_model(seed)
    n_stats = len(GEWEKE_PANEL)

    mc = np.empty((samples, n_stats))
    stream = RngStream(seed, (101,))
    gen = stream.generator()
    mc_data = data.permuted(np.arange(data.N))  # private copy: outcomes get overwritten
    for m in range(samples):
        state = smp.draw_state_from_prior(mc_data, config, gen, with_augmentation=False)
        smp.draw_outcomes(state, mc_data, gen)
        mc[m] = geweke_statistics(state, mc_data)
        if progress is not None and (m + 1) % max(1, samples // 10) == 0:
            progress("prior", m + 1, samples)

    sc = np.empty((samples, n_stats))
    gen = RngStream(seed, (202,)).generator()
    sc_data = data.permuted(np.arange(data.N))
    state = smp.draw_state_from_prior(sc_data, config, gen)
    smp.draw_outcomes(state, sc_data, gen)
    diverged = None
    done = samples
    for m in range(samples):
        try:
            smp.gibbs_sweep(state, sc_data, config, gen, adapt=False, it=m, fault=fault)
            smp.draw_outcomes(state, sc_data, gen)
        except NumericalError as err:
            # a broken block can drive the chain to overflow, which is the
            # loudest possible detection; a clean sampler must never get here
            if fault is None:
                raise
            diverged = str(err)
            done = m
            break
        sc[m] = geweke_statistics(state, sc_data)
        if progress is not None and (m + 1) % max(1, samples // 10) == 0:
            progress("chain", m + 1, samples)
    if diverged is not None and done < 10:
        raise NumericalError(f"faulted chain diverged immediately: {diverged}")
    sc = sc[:done]

    mc_mean = mc.mean(axis=0)
    mc_se = mc.std(axis=0, ddof=1) / np.sqrt(samples)
    sc_mean = sc.mean(axis=0)
    sc_se = np.empty(n_stats)
    for s in range(n_stats):
        try:
            ess = effective_sample_size(sc[:, s])
        except ValidationError:
            ess = 1.0
        sc_se[s] = sc[:, s].std(ddof=1) / np.sqrt(ess)
    z = (mc_mean - sc_mean) / np.hypot(mc_se, sc_se)
    return GewekeResult(GEWEKE_PANEL, z, mc_mean, sc_mean, mc_se, sc_se,
                        fault=fault, diverged=diverged)


def mutation_panel(samples: int = 100_000, seed: int = 0, progress=None) -> dict:
    """Run the self-test once per seeded fault; each must be detected."""
    return {fault: geweke_test(samples=samples, seed=seed, fault=fault, progress=progress)
            for fault in smp.FAULTS}
