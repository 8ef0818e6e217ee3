"""File schemas: long-format panel CSVs in, result CSVs out.

All numbers are serialized with 17 significant digits so a written file
reloads bit-identically.  Schemas are documented field-by-field in
docs/formats.md; every writer here has a matching loader used by the
round-trip tests.
"""

from __future__ import annotations

import csv
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .causal import EffectSummary
from .data import FAMILY_BY_NAME, PanelDataset
from .errors import ValidationError
from .model import FitConfig
from .samplers import PosteriorDraws

OUTCOME_FIELDS = ("unit_id", "time", "outcome", "family", "value", "trials", "offset")
TREATMENT_FIELDS = ("unit_id", "last_untreated_time")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _err(path, line, msg):
    raise ValidationError(f"{path}:{line}: {msg}")


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------

def load_dataset(outcomes_path, treatment_path, covariates_path=None) -> PanelDataset:
    """Assemble a dense PanelDataset from the documented CSV schemas.

    Missing (unit, time, outcome) rows become no-information cells for the
    binomial and count families; continuous outcomes must be fully observed.
    """
    outcomes_path = str(outcomes_path)
    rows = []
    with open(outcomes_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != list(OUTCOME_FIELDS):
            _err(outcomes_path, 1, f"header must be exactly {','.join(OUTCOME_FIELDS)}")
        for lineno, r in enumerate(reader, start=2):
            rows.append((lineno, r))
    if not rows:
        _err(outcomes_path, 2, "no data rows")

    families = {}
    seen = set()
    units, times = set(), set()
    for lineno, r in rows:
        name = r["outcome"]
        fam = r["family"]
        if fam not in FAMILY_BY_NAME:
            _err(outcomes_path, lineno, f"unknown family {fam!r}")
        if families.setdefault(name, fam) != fam:
            _err(outcomes_path, lineno, f"outcome {name!r} declared with conflicting families")
        try:
            t = int(r["time"])
        except ValueError:
            _err(outcomes_path, lineno, f"time {r['time']!r} is not an integer")
        if t < 1:
            _err(outcomes_path, lineno, "time must be >= 1")
        key = (r["unit_id"], t, name)
        if key in seen:
            _err(outcomes_path, lineno, f"duplicate row for {key}")
        seen.add(key)
        units.add(r["unit_id"])
        times.add(t)

    T = max(times)
    unit_labels = sorted(units)
    uidx = {u: i for i, u in enumerate(unit_labels)}
    normal_labels = sorted(n for n, f in families.items() if f == "normal")
    binomial_labels = sorted(n for n, f in families.items() if f == "binomial")
    count_labels = sorted(n for n, f in families.items() if f == "negbin")
    d1 = {n: d for d, n in enumerate(normal_labels)}
    d2 = {n: d for d, n in enumerate(binomial_labels)}
    d3 = {n: d for d, n in enumerate(count_labels)}
    N = len(unit_labels)

    y = np.zeros((N, T, len(normal_labels)))
    y_seen = np.zeros(y.shape, dtype=bool)
    k = np.zeros((N, T, len(binomial_labels)), dtype=np.int64)
    n = np.zeros_like(k)
    z = np.zeros((N, T, len(count_labels)), dtype=np.int64)
    w = np.zeros((N, T, len(count_labels)))

    for lineno, r in rows:
        i = uidx[r["unit_id"]]
        t = int(r["time"]) - 1
        name = r["outcome"]
        fam = families[name]
        try:
            value = float(r["value"])
        except ValueError:
            _err(outcomes_path, lineno, f"value {r['value']!r} is not numeric")
        if fam == "normal":
            y[i, t, d1[name]] = value
            y_seen[i, t, d1[name]] = True
        elif fam == "binomial":
            if not r["trials"]:
                _err(outcomes_path, lineno, "binomial rows need a trials entry")
            trials = int(r["trials"])
            kk = int(value)
            if kk != value:
                _err(outcomes_path, lineno, "binomial successes must be integral")
            if trials < 0 or kk < 0 or kk > trials:
                _err(outcomes_path, lineno,
                     f"successes {kk} outside [0, trials={trials}]")
            k[i, t, d2[name]] = kk
            n[i, t, d2[name]] = trials
        else:
            zz = int(value)
            if zz != value or zz < 0:
                _err(outcomes_path, lineno, "counts must be nonnegative integers")
            offset = float(r["offset"]) if r["offset"] else 1.0
            if offset < 0:
                _err(outcomes_path, lineno, "offsets must be nonnegative")
            z[i, t, d3[name]] = zz
            w[i, t, d3[name]] = offset

    last = _load_treatment(treatment_path, unit_labels, T)
    if normal_labels and not y_seen.all():
        i, t, d = np.argwhere(~y_seen)[0]
        raise ValidationError(
            f"{outcomes_path}: continuous outcome {normal_labels[d]!r} missing for "
            f"unit {unit_labels[i]!r} at time {t + 1} (continuous outcomes must be complete)")

    x = np.zeros((N, T, 0))
    if covariates_path is not None:
        x = _load_covariates(covariates_path, unit_labels, T)

    return PanelDataset(y=y, k=k, n=n, z=z, w=w, x=x, last_untreated=last,
                        unit_labels=unit_labels, normal_labels=normal_labels,
                        binomial_labels=binomial_labels, count_labels=count_labels)


def _load_treatment(path, unit_labels, T):
    path = str(path)
    last = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != list(TREATMENT_FIELDS):
            _err(path, 1, f"header must be exactly {','.join(TREATMENT_FIELDS)}")
        for lineno, r in enumerate(reader, start=2):
            u = r["unit_id"]
            if u in last:
                _err(path, lineno, f"duplicate unit {u!r}")
            try:
                t = int(r["last_untreated_time"])
            except ValueError:
                _err(path, lineno, "last_untreated_time must be an integer")
            if not 2 <= t <= T:
                _err(path, lineno,
                     f"last untreated time {t} outside [2, T={T}]")
            last[u] = t
    missing = [u for u in unit_labels if u not in last]
    if missing:
        raise ValidationError(f"{path}: no treatment row for unit {missing[0]!r}")
    extra = [u for u in last if u not in set(unit_labels)]
    if extra:
        raise ValidationError(f"{path}: treatment row for unknown unit {extra[0]!r}")
    return np.array([last[u] for u in unit_labels], dtype=np.int64)


def _load_covariates(path, unit_labels, T):
    path = str(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        names = [f for f in (reader.fieldnames or []) if f not in ("unit_id", "time")]
        if not names or (reader.fieldnames or [])[:2] != ["unit_id", "time"]:
            _err(path, 1, "header must start with unit_id,time followed by covariate columns")
        uidx = {u: i for i, u in enumerate(unit_labels)}
        x = np.zeros((len(unit_labels), T, len(names)))
        seen = np.zeros((len(unit_labels), T), dtype=bool)
        for lineno, r in enumerate(reader, start=2):
            if r["unit_id"] not in uidx:
                _err(path, lineno, f"unknown unit {r['unit_id']!r}")
            i = uidx[r["unit_id"]]
            t = int(r["time"]) - 1
            if not 0 <= t < T:
                _err(path, lineno, f"time {t + 1} outside 1..{T}")
            x[i, t] = [float(r[c]) for c in names]
            seen[i, t] = True
    if not seen.all():
        i, t = np.argwhere(~seen)[0]
        raise ValidationError(f"{path}: covariates missing for unit {unit_labels[i]!r} time {t + 1}")
    return x


# ---------------------------------------------------------------------------
# Dataset writing (simulate output, round-trips)
# ---------------------------------------------------------------------------

def write_dataset(data: PanelDataset, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "outcomes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(OUTCOME_FIELDS)
        for i, u in enumerate(data.unit_labels):
            for t in range(data.T):
                for d, name in enumerate(data.normal_labels):
                    writer.writerow([u, t + 1, name, "normal", _fmt(data.y[i, t, d]), "", ""])
                for d, name in enumerate(data.binomial_labels):
                    writer.writerow([u, t + 1, name, "binomial",
                                     int(data.k[i, t, d]), int(data.n[i, t, d]), ""])
                for d, name in enumerate(data.count_labels):
                    writer.writerow([u, t + 1, name, "negbin",
                                     int(data.z[i, t, d]), "", _fmt(data.w[i, t, d])])
    with open(out_dir / "treatment.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TREATMENT_FIELDS)
        for i, u in enumerate(data.unit_labels):
            writer.writerow([u, int(data.last_untreated[i])])
    if data.P:
        with open(out_dir / "covariates.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["unit_id", "time"] + [f"x{j + 1}" for j in range(data.P)])
            for i, u in enumerate(data.unit_labels):
                for t in range(data.T):
                    writer.writerow([u, t + 1] + [_fmt(v) for v in data.x[i, t]])


# ---------------------------------------------------------------------------
# Posterior draws (columnar CSV)
# ---------------------------------------------------------------------------

DRAW_PARAMS = ("loadings", "f_factors", "g_factors", "h_factors", "eta1",
               "eta2", "eta3", "noise_var", "dispersion", "factor_var", "anchor")


def write_draws(draws: PosteriorDraws, path):
    """Columnar draw file: draw, parameter, index ('a:b:c'), value."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["draw", "parameter", "index", "value"])
        for name in DRAW_PARAMS:
            arr = getattr(draws, name)
            if arr.size == 0:
                continue
            for m in range(arr.shape[0]):
                flat = arr[m]
                for idx in np.ndindex(flat.shape):
                    writer.writerow([m, name, ":".join(map(str, idx)), _fmt(flat[idx])])


def read_draws(path, config: FitConfig | None = None) -> PosteriorDraws:
    shapes = {}
    entries = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for r in reader:
            name = r["parameter"]
            m = int(r["draw"])
            idx = tuple(int(s) for s in r["index"].split(":")) if r["index"] else ()
            entries.setdefault(name, []).append((m, idx, float(r["value"])))
            full = (m,) + idx
            cur = shapes.get(name)
            shapes[name] = tuple(max(a, b + 1) for a, b in zip(cur, full)) if cur \
                else tuple(v + 1 for v in full)
    n_draws = max(s[0] for s in shapes.values())
    kw = {}
    for name in DRAW_PARAMS:
        if name in shapes:
            shape = (n_draws,) + shapes[name][1:]
            arr = np.zeros(shape)
            for m, idx, v in entries[name]:
                arr[(m,) + idx] = v
            kw[name] = arr.astype(np.int64) if name == "anchor" else arr
        else:
            kw[name] = np.zeros((n_draws, 0, 0) if name != "anchor" else (n_draws, 0),
                                dtype=np.int64 if name == "anchor" else float)
    # empty families need rank-3 placeholders with the right draw count
    for name in ("f_factors", "g_factors", "h_factors"):
        if kw[name].ndim == 3:
            kw[name] = kw[name].reshape(n_draws, 0, 0, 0) if kw[name].size == 0 else kw[name]
    return PosteriorDraws(config=config, seed=config.seed if config else 0, **kw)


# ---------------------------------------------------------------------------
# Effect tables
# ---------------------------------------------------------------------------

def write_effects(summaries: list[EffectSummary], names_mat, out_dir):
    """The six effect CSVs: unit-time, unit, time, overall, ranks, and the
    rank-correlation matrix."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    effect_rows = [s for s in summaries if not s.estimand.startswith("rank_")]
    rank_rows = [s for s in summaries if s.estimand.startswith("rank_")]

    def dump(path, rows, fields):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields)
            for s in rows:
                rec = {"unit": s.unit, "time": s.time, "outcome": s.outcome,
                       "estimand": s.estimand, "mean": _fmt(s.mean),
                       "lo95": _fmt(s.lo95), "hi95": _fmt(s.hi95), "level": s.level}
                writer.writerow([rec[f] for f in fields])

    dump(out_dir / "effects_unit_time.csv",
         [s for s in effect_rows if s.level == "unit_time"],
         ["unit", "time", "outcome", "estimand", "mean", "lo95", "hi95"])
    dump(out_dir / "effects_unit.csv",
         [s for s in effect_rows if s.level == "unit"],
         ["unit", "outcome", "estimand", "mean", "lo95", "hi95"])
    dump(out_dir / "effects_time.csv",
         [s for s in effect_rows if s.level == "time"],
         ["time", "outcome", "estimand", "mean", "lo95", "hi95"])
    dump(out_dir / "effects_overall.csv",
         [s for s in effect_rows if s.level == "overall"],
         ["outcome", "estimand", "mean", "lo95", "hi95"])
    dump(out_dir / "ranks.csv", rank_rows,
         ["level", "unit", "time", "outcome", "estimand", "mean", "lo95", "hi95"])

    names, mat = names_mat
    with open(out_dir / "rank_correlations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series"] + names)
        for a, name in enumerate(names):
            writer.writerow([name] + [_fmt(v) for v in mat[a]])


def write_probability_bands(rows, path):
    fields = ["unit", "time", "outcome", "p0_mean", "p0_lo95", "p0_hi95",
              "pT_mean", "pT_lo95", "pT_hi95", "valid"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for r in rows:
            writer.writerow([_fmt(r[f]) if isinstance(r[f], float) else r[f] for f in fields])


# ---------------------------------------------------------------------------
# Config files (flat key=value with # comments)
# ---------------------------------------------------------------------------

def read_kv_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                _err(str(path), lineno, "expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def fit_config_from_file(path, **overrides) -> FitConfig:
    raw = read_kv_file(path) if path else {}
    kw = {}
    casts = {
        "max_factors": int, "iterations": int, "thin": int, "burn_in_draws": int,
        "nu": float, "a_xi": float, "c_xi": float, "pooled_dispersion":
            lambda s: s.lower() in ("1", "true", "yes"),
        "chains": int, "seed": int, "smmala_accept_target": float,
        "barker_accept_target": float, "sigma2_step": float, "checkpoint_every": int,
    }
    for key, value in raw.items():
        if key == "tpb_shapes":
            kw[key] = tuple(float(v) for v in value.split(","))
        elif key in casts:
            kw[key] = casts[key](value)
        else:
            raise ValidationError(f"{path}: unknown config key {key!r}")
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return FitConfig(**kw)


def write_config_echo(config: FitConfig, path):
    with open(path, "w") as fh:
        for key, value in asdict(config).items():
            if key == "tpb_shapes":
                value = ",".join(_fmt(v) for v in value)
            fh.write(f"{key}={value}\n")


def scenario_from_file(path, **overrides):
    from .simgen import SimScenario
    raw = read_kv_file(path) if path else {}
    casts = {"effect_level": int, "N": int, "T": int, "J_true": int, "t_min": int,
             "seed": int}
    kw = {}
    for key, value in raw.items():
        if key in ("alpha_eff", "beta_eff", "delta_eff", "xi_true", "kappa0",
                   "kappa1", "kappa2", "s1", "s2", "s3"):
            kw[key] = float(value)
        elif key in casts:
            kw[key] = casts[key](value)
        else:
            raise ValidationError(f"{path}: unknown scenario key {key!r}")
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return SimScenario(**kw)


# ---------------------------------------------------------------------------
# Diagnostics output
# ---------------------------------------------------------------------------

def write_diagnostics(diag, out_dir):
    out_dir = Path(out_dir)
    with open(out_dir / "diagnostics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "name", "value"])
        for k, v in sorted(diag.acceptance.items()):
            writer.writerow(["acceptance", k, _fmt(v)])
        for k, v in sorted(diag.ess.items()):
            writer.writerow(["ess", k, _fmt(v)])
        for k, v in sorted(diag.rhat.items()):
            writer.writerow(["rhat", k, _fmt(v)])
        for k, v in sorted(diag.step_sizes.items()):
            writer.writerow(["mean_step", k, _fmt(float(v))])
    lines = ["chain diagnostics", "================="]
    lines.append("acceptance rates (sampling phase):")
    for k, v in sorted(diag.acceptance.items()):
        lines.append(f"  {k:10s} {v:.3f}")
    lines.append("effective sample sizes:")
    for k, v in sorted(diag.ess.items()):
        lines.append(f"  {k:24s} {v:9.1f}")
    if any(np.isfinite(v) for v in diag.rhat.values()):
        lines.append("split R-hat:")
        for k, v in sorted(diag.rhat.items()):
            lines.append(f"  {k:24s} {v:6.3f}")
    if diag.failures:
        lines.append(f"failures: {diag.failures}")
    (out_dir / "diagnostics.txt").write_text("\n".join(lines) + "\n")
