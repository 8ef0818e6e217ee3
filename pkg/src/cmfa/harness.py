"""Simulation-study runner: joint versus single-outcome fits over many
synthetic datasets, scored against the generator's ground truth.

Each dataset is fitted once per analysis (the fits see only pre-intervention
data, which no effect scenario touches), then scored under every effect
scenario.  Per-unit results are persisted as CSV so the metrics can be
recomputed without refitting.  Weighting follows the varying number of
treated units: every treated unit in dataset b carries weight 1/(B * N2_b).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import causal
from .data import FAMILY_BINOMIAL, FAMILY_COUNT, FAMILY_NORMAL
from .errors import ValidationError
from .model import FitConfig
from .rng import RngStream
from .samplers import run_chain
from .simgen import SimScenario, generate_dataset

ANALYSES = ("mv", "uv")
UNIT_FIELDS = ("dataset", "analysis", "scenario", "unit", "last_untreated",
               "nbar", "wbar", "estimand", "truth", "estimate", "lo95", "hi95")
# heatmap cells averaging fewer datasets than this fraction of the study are
# suppressed (50 / 2500 in the reference design)
SUPPRESS_FRACTION = 0.02


@dataclass
class EffectLevel:
    level: int
    alpha: float = 0.0
    beta: float = 0.0
    delta: float = 0.0


@dataclass
class StudyConfig:
    n_datasets: int = 100
    seed: int = 20_26
    effect_levels: list = field(default_factory=lambda: [
        EffectLevel(1, 0.0, 0.0, 0.0),
        EffectLevel(2, 0.25, 0.2, 0.1),
        EffectLevel(3, 0.5, 0.4, 0.2),
        EffectLevel(4, 0.75, 0.6, 0.3),
        EffectLevel(5, 1.0, 0.8, 0.4),
    ])
    mv_fit: FitConfig = field(default_factory=lambda: FitConfig(
        max_factors=12, iterations=20_000, thin=20, burn_in_draws=200))
    uv_fit: FitConfig = field(default_factory=lambda: FitConfig(
        max_factors=8, iterations=20_000, thin=20, burn_in_draws=200))
    analyses: tuple = ANALYSES
    scenario_overrides: dict = field(default_factory=dict)

    def base_scenario(self, b: int) -> SimScenario:
        return SimScenario(seed=self.seed * 1_000_003 + b, **self.scenario_overrides)

    def scenario(self, b: int, lv: EffectLevel) -> SimScenario:
        return replace(self.base_scenario(b), effect_level=lv.level,
                       alpha_eff=lv.alpha, beta_eff=lv.beta, delta_eff=lv.delta)


def load_manifest(path) -> StudyConfig:
    """Study manifest: JSON with dataset count, seed, effect grid, fit configs."""
    with open(path) as fh:
        raw = json.load(fh)
    kw = {}
    if "n_datasets" in raw:
        kw["n_datasets"] = int(raw["n_datasets"])
    if "seed" in raw:
        kw["seed"] = int(raw["seed"])
    if "effect_levels" in raw:
        kw["effect_levels"] = [EffectLevel(**lv) for lv in raw["effect_levels"]]
    for name in ("mv_fit", "uv_fit"):
        if name in raw:
            kw[name] = FitConfig(**raw[name])
    if "analyses" in raw:
        kw["analyses"] = tuple(raw["analyses"])
    if "scenario" in raw:
        kw["scenario_overrides"] = dict(raw["scenario"])
    return StudyConfig(**kw)


# ---------------------------------------------------------------------------
# Per-dataset work
# ---------------------------------------------------------------------------

def _unit_truth(truth, data, estimand, beta_valid_cells=None):
    """True unit-level effects: average of per-cell truths over post cells."""
    out = {}
    grid = {"alpha": truth.alpha_true, "beta": truth.beta_true,
            "gamma": truth.gamma_true, "delta": truth.delta_true}[estimand]
    for i in np.flatnonzero(truth.last_untreated < data.T):
        cells = grid[i, int(truth.last_untreated[i]):]
        if estimand == "beta":
            n_post = data.n[i, int(truth.last_untreated[i]):, 0]
            cells = cells[n_post > 0]
        if cells.size:
            out[i] = float(np.mean(cells))
    return out


def _fit_and_score(data_by_level, fit_config, analysis, families, rng):
    """Fit once on the base dataset, score every effect level against that
    level's realized truth.

    ``families`` restricts the estimands this fit is responsible for (the
    single-outcome analyses each cover their own family).
    """
    base = data_by_level[0][1]
    if analysis == "mv":
        fit_data = base
    else:
        fam, d = families[0]
        fit_data = base.restrict_to_outcome(fam, d)
    draws = run_chain(fit_data, fit_config, rng.substream(1))
    cf = causal.predict_counterfactuals(draws, fit_data, rng.substream(2))

    estimands = []
    for fam, d in families:
        if fam == FAMILY_NORMAL:
            estimands.append(("alpha", "alpha", "cells_normal"))
        elif fam == FAMILY_BINOMIAL:
            estimands.extend([("beta", "beta", "cells_binomial"),
                              ("gamma", "gamma", "cells_binomial")])
        else:
            estimands.append(("delta", "delta", "cells_count"))

    rows = []
    pt_stream = rng.substream(3)
    for lv_idx, (level, data_lv, truth_lv) in enumerate(data_by_level):
        cf_lv = cf
        if any(e[0] in ("beta", "gamma") for e in estimands):
            # treated-cell probabilities depend on the scenario's observed counts
            c2 = cf.cells_binomial
            if analysis == "mv":
                k_cell = data_lv.k[c2.unit, c2.time, c2.outcome]
                n_cell = data_lv.n[c2.unit, c2.time, c2.outcome]
            else:
                fam, d = families[0]
                k_cell = data_lv.k[c2.unit, c2.time, [d] * c2.size]
                n_cell = data_lv.n[c2.unit, c2.time, [d] * c2.size]
            gen = pt_stream.substream(lv_idx).generator()
            p_treated = gen.beta(1.0 + k_cell[None, :].repeat(cf.p0.shape[0], 0),
                                 1.0 + (n_cell - k_cell)[None, :].repeat(cf.p0.shape[0], 0))
            eps = np.finfo(float).tiny
            cf_lv = causal.CounterfactualDraws(
                cells_normal=cf.cells_normal, cells_binomial=cf.cells_binomial,
                cells_count=cf.cells_count, y0=cf.y0, k0=cf.k0, z0=cf.z0,
                p0=cf.p0, q0=cf.q0,
                p_treated=np.clip(p_treated, eps, 1 - 1e-16),
                beta_valid=n_cell > 0)
        scen_data = data_lv if analysis == "mv" else _restricted(data_lv, families[0])
        effects = causal.compute_effects(cf_lv, scen_data)
        for estimand, attr, cell_attr in estimands:
            values = getattr(effects, attr)
            cells = getattr(effects, cell_attr)
            valid = effects.beta_valid if estimand == "beta" else None
            keys, vals = causal._group_mean(
                values, [(int(u), int(d)) for u, d in zip(cells.unit, cells.outcome)], valid)
            mean, lo, hi = causal.summarize_draws(vals)
            truths = _unit_truth(truth_lv, base, estimand)
            for gi, (i, d) in enumerate(keys):
                if i not in truths:
                    continue
                pre = int(truth_lv.last_untreated[i])
                rows.append({
                    "dataset": -1,  # caller fills
                    "analysis": analysis, "scenario": level,
                    "unit": base.unit_labels[i],
                    "last_untreated": pre,
                    "nbar": float(base.n[i, :pre, 0].mean()) if base.D2 else np.nan,
                    "wbar": float(base.w[i, :pre, 0].mean()) if base.D3 else np.nan,
                    "estimand": estimand,
                    "truth": truths[i],
                    "estimate": float(mean[gi]),
                    "lo95": float(lo[gi]), "hi95": float(hi[gi]),
                })
    return rows


def _restricted(data_lv, family_d):
    fam, d = family_d
    return data_lv.restrict_to_outcome(fam, d)


def run_dataset_task(b: int, analysis: str, study: StudyConfig, out_dir) -> str:
    """Generate dataset b, fit the requested analysis, score all levels.

    Returns the path of the written per-unit CSV.  ``analysis`` is one of
    mv, uv_normal, uv_binomial, uv_count, or oracle (truth-as-estimate
    plumbing check).
    """
    data_by_level = []
    has_null = False
    for lv in study.effect_levels:
        sc = study.scenario(b, lv)
        data_lv, truth_lv = generate_dataset(sc)
        data_by_level.append((lv.level, data_lv, truth_lv))
        has_null = has_null or lv.level == 1
    if not has_null:
        raise ValidationError("the effect grid must include the zero level 1")

    rng = RngStream(study.seed, (b, {"mv": 0, "uv_normal": 1, "uv_binomial": 2,
                                     "uv_count": 3, "oracle": 9}[analysis]))
    if analysis == "oracle":
        rows = _oracle_rows(data_by_level, study)
    elif analysis == "mv":
        fams = [(FAMILY_NORMAL, 0), (FAMILY_BINOMIAL, 0), (FAMILY_COUNT, 0)]
        rows = _fit_and_score(data_by_level, study.mv_fit, "mv", fams, rng)
    elif analysis == "uv_normal":
        rows = _fit_and_score(data_by_level, study.uv_fit, analysis,
                              [(FAMILY_NORMAL, 0)], rng)
    elif analysis == "uv_binomial":
        rows = _fit_and_score(data_by_level, study.uv_fit, analysis,
                              [(FAMILY_BINOMIAL, 0)], rng)
    elif analysis == "uv_count":
        rows = _fit_and_score(data_by_level, study.uv_fit, analysis,
                              [(FAMILY_COUNT, 0)], rng)
    else:
        raise ValidationError(f"unknown analysis {analysis!r}")
    for r in rows:
        r["dataset"] = b
    path = Path(out_dir) / "units" / f"b{b:05d}_{analysis}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=UNIT_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(r[k]) for k in UNIT_FIELDS})
    return str(path)


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return v


def _oracle_rows(data_by_level, study):
    rows = []
    base = data_by_level[0][1]
    for level, _, truth_lv in data_by_level:
        for estimand in ("alpha", "beta", "gamma", "delta"):
            truths = _unit_truth(truth_lv, base, estimand)
            for i, tv in truths.items():
                rows.append({
                    "dataset": -1, "analysis": "oracle", "scenario": level,
                    "unit": base.unit_labels[i],
                    "last_untreated": int(truth_lv.last_untreated[i]),
                    "nbar": float(base.n[i, :int(truth_lv.last_untreated[i]), 0].mean()),
                    "wbar": float(base.w[i, :int(truth_lv.last_untreated[i]), 0].mean()),
                    "estimand": estimand, "truth": tv,
                    "estimate": tv, "lo95": tv, "hi95": tv,
                })
    return rows


# ---------------------------------------------------------------------------
# Study driver
# ---------------------------------------------------------------------------

def expand_tasks(study: StudyConfig):
    tasks = []
    for b in range(study.n_datasets):
        for analysis in study.analyses:
            if analysis == "uv":
                tasks.extend([(b, "uv_normal"), (b, "uv_binomial"), (b, "uv_count")])
            else:
                tasks.append((b, analysis))
    return tasks


def task_path(out_dir, b, analysis) -> Path:
    return Path(out_dir) / "units" / f"b{b:05d}_{analysis}.csv"


def run_study(study: StudyConfig, out_dir, jobs: int = 1, progress=None,
              resume: bool = False):
    """Run every (dataset, analysis) task, then aggregate the metrics.

    Failures are quarantined per task: the study continues and the failed
    tasks are reported in the returned summary.  ``resume`` skips tasks whose
    per-unit file already exists (outputs are deterministic per task, so a
    restarted study converges to the identical directory).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest_echo.json", "w") as fh:
        json.dump(_study_to_json(study), fh, indent=2)
    tasks = expand_tasks(study)
    if resume:
        tasks = [(b, a) for b, a in tasks if not task_path(out_dir, b, a).exists()]
    failures = []
    if jobs > 1:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(jobs) as pool:
            results = [pool.apply_async(run_dataset_task, (b, a, study, str(out_dir)))
                       for b, a in tasks]
            for (b, a), res in zip(tasks, results):
                try:
                    res.get()
                except Exception as err:  # noqa: BLE001 - quarantined per task
                    failures.append({"dataset": b, "analysis": a, "error": str(err)})
                if progress is not None:
                    progress(b, a)
    else:
        for b, a in tasks:
            try:
                run_dataset_task(b, a, study, str(out_dir))
            except Exception as err:  # noqa: BLE001
                failures.append({"dataset": b, "analysis": a, "error": str(err)})
            if progress is not None:
                progress(b, a)
    metrics = aggregate_metrics(out_dir, study)
    write_metrics(metrics, out_dir / "metrics.csv")
    grids = stratify_by_history(load_unit_records(out_dir), study)
    write_heatmaps(grids, out_dir / "heatmaps.csv")
    if failures:
        with open(out_dir / "failures.json", "w") as fh:
            json.dump(failures, fh, indent=2)
    return metrics, failures


def _study_to_json(study: StudyConfig):
    d = asdict(study)
    d["mv_fit"] = asdict(study.mv_fit)
    d["uv_fit"] = asdict(study.uv_fit)
    d["analyses"] = list(study.analyses)
    return d


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def load_unit_records(out_dir) -> list[dict]:
    rows = []
    units_dir = Path(out_dir) / "units"
    for path in sorted(units_dir.glob("*.csv")):
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                r["dataset"] = int(r["dataset"])
                r["scenario"] = int(r["scenario"])
                r["last_untreated"] = int(r["last_untreated"])
                for k in ("nbar", "wbar", "truth", "estimate", "lo95", "hi95"):
                    r[k] = float(r[k])
                rows.append(r)
    return rows


def _weights(records):
    """Per-record weight 1/(B * N2_b), with B the datasets present."""
    n2 = {}
    for r in records:
        key = (r["dataset"], r["analysis"], r["scenario"], r["estimand"])
        n2.setdefault(key, set()).add(r["unit"])
    datasets = {r["dataset"] for r in records}
    B = len(datasets)
    return np.array([1.0 / (B * len(n2[(r["dataset"], r["analysis"], r["scenario"],
                                        r["estimand"])])) for r in records])


def summarize_records(records) -> dict:
    """Weighted bias, error spread, CI width and detection for one cell."""
    if not records:
        return {}
    w = _weights(records)
    w = w / w.sum()
    err = np.array([r["estimate"] - r["truth"] for r in records])
    width = np.array([r["hi95"] - r["lo95"] for r in records])
    null = records[0]["scenario"] == 1
    if null:
        det = np.array([(r["lo95"] > 0.0) or (r["hi95"] < 0.0) for r in records], dtype=float)
    else:
        det = np.array([r["lo95"] > 0.0 for r in records], dtype=float)
    bias = float(w @ err)
    se = float(np.sqrt(max(w @ (err - bias) ** 2, 0.0)))
    return {"bias": bias, "se": se, "ci_width": float(w @ width),
            "detection_rate": float(w @ det), "n_records": len(records)}


def aggregate_metrics(out_dir, study: StudyConfig) -> list[dict]:
    records = load_unit_records(out_dir)
    rows = []
    analyses = sorted({r["analysis"] for r in records})
    scenarios = sorted({r["scenario"] for r in records})
    for analysis in analyses:
        for scenario in scenarios:
            for estimand in ("alpha", "beta", "gamma", "delta"):
                sub = [r for r in records if r["analysis"] == analysis
                       and r["scenario"] == scenario and r["estimand"] == estimand]
                if not sub:
                    continue
                strata = {"any": sub}
                for ti in (8, 16, 23):
                    strata[str(ti)] = [r for r in sub if r["last_untreated"] == ti]
                for name, cell in strata.items():
                    summ = summarize_records(cell)
                    if not summ:
                        continue
                    rows.append({"analysis": analysis, "scenario": scenario,
                                 "estimand": estimand, "stratum": name, **summ})
    return rows


def write_metrics(rows, path):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(v) for k, v in r.items()})


def stratify_by_history(records, study: StudyConfig,
                        ti_values=(8, 16, 23),
                        nbar_edges=(0, 40, 80, 120, 160, 1e18),
                        wbar_edges=(0, 20, 35, 50, 1e18)) -> list[dict]:
    """Heatmap grids over pre-treatment history: CI width and detection by
    (T_i, mean trials) and (T_i, mean offsets); sparse cells suppressed."""
    min_cell = max(2, round(SUPPRESS_FRACTION * study.n_datasets))
    grids = []
    specs = [("nbar", nbar_edges, "beta"), ("wbar", wbar_edges, "delta")]
    analyses = sorted({r["analysis"] for r in records})
    scenarios = sorted({r["scenario"] for r in records})
    for covariate, edges, estimand in specs:
        for analysis in analyses:
            for scenario in scenarios:
                sub = [r for r in records if r["analysis"] == analysis
                       and r["scenario"] == scenario and r["estimand"] == estimand]
                for ti in ti_values:
                    for lo, hi in zip(edges[:-1], edges[1:]):
                        cell = [r for r in sub if r["last_untreated"] == ti
                                and lo <= r[covariate] < hi]
                        n_data = len({r["dataset"] for r in cell})
                        if n_data < min_cell:
                            continue
                        summ = summarize_records(cell)
                        grids.append({
                            "grid": covariate, "analysis": analysis,
                            "scenario": scenario, "estimand": estimand,
                            "last_untreated": ti, "bin_lo": lo,
                            "bin_hi": min(hi, 1e17), "datasets": n_data, **summ,
                        })
    return grids


def write_heatmaps(rows, path):
    if not rows:
        Path(path).write_text("grid,analysis,scenario,estimand,last_untreated,"
                              "bin_lo,bin_hi,datasets,bias,se,ci_width,detection_rate,n_records\n")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(v) for k, v in r.items()})
