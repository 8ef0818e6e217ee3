"""Panel data container.

Outcomes are stored dense over (unit, time, outcome) with zero-information
encodings for days without observations: a binomial cell with ``trials = 0``
or a count cell with ``offset = 0`` contributes nothing to any likelihood,
gradient or Hessian.  Units are kept in canonical (label-sorted) order so that
fits are bit-reproducible under permutations of the input rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

FAMILY_NORMAL = 1
FAMILY_BINOMIAL = 2
FAMILY_COUNT = 3
FAMILY_NAMES = {FAMILY_NORMAL: "normal", FAMILY_BINOMIAL: "binomial", FAMILY_COUNT: "negbin"}
FAMILY_BY_NAME = {v: k for k, v in FAMILY_NAMES.items()}


@dataclass
class PanelDataset:
    """Observed panel of mixed-type outcomes.

    Shapes: ``y`` (N,T,D1) continuous values; ``k``/``n`` (N,T,D2) binomial
    successes/trials; ``z``/``w`` (N,T,D3) counts/offsets; ``x`` (N,T,P)
    exogenous covariates; ``last_untreated`` (N,) holds T_i in 1..T with
    T_i = T marking a control unit.
    """

    y: np.ndarray
    k: np.ndarray
    n: np.ndarray
    z: np.ndarray
    w: np.ndarray
    x: np.ndarray
    last_untreated: np.ndarray
    unit_labels: list[str]
    normal_labels: list[str] = field(default_factory=list)
    binomial_labels: list[str] = field(default_factory=list)
    count_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.k = np.asarray(self.k, dtype=np.int64)
        self.n = np.asarray(self.n, dtype=np.int64)
        self.z = np.asarray(self.z, dtype=np.int64)
        self.w = np.asarray(self.w, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        self.last_untreated = np.asarray(self.last_untreated, dtype=np.int64)
        self.unit_labels = [str(u) for u in self.unit_labels]
        self._validate()
        self._canonicalize()
        self._masks = None

    # -- construction -------------------------------------------------------

    def _validate(self):
        N = len(self.unit_labels)
        if self.y.ndim != 3 or self.k.ndim != 3 or self.z.ndim != 3 or self.x.ndim != 3:
            raise ValidationError("outcome arrays must be (units, times, outcomes)")
        T = self.y.shape[1]
        for name, arr in [("y", self.y), ("k", self.k), ("n", self.n),
                          ("z", self.z), ("w", self.w), ("x", self.x)]:
            if arr.shape[0] != N or arr.shape[1] != T:
                raise ValidationError(f"array {name} has shape {arr.shape}, expected ({N},{T},*)")
        if self.k.shape != self.n.shape or self.z.shape != self.w.shape:
            raise ValidationError("successes/trials and counts/offsets shapes must match")
        if len(set(self.unit_labels)) != N:
            raise ValidationError("duplicate unit labels")
        if np.any(self.n < 0) or np.any(self.k < 0) or np.any(self.k > self.n):
            bad = np.argwhere((self.k < 0) | (self.k > self.n))
            raise ValidationError(f"binomial successes outside [0, trials] at (unit,time,outcome)={tuple(bad[0])}")
        if np.any(self.z < 0):
            raise ValidationError("counts must be nonnegative")
        if np.any(self.w < 0) or not np.all(np.isfinite(self.w)):
            raise ValidationError("offsets must be finite and nonnegative")
        if not np.all(np.isfinite(self.y)):
            raise ValidationError("continuous outcomes must be finite")
        if not np.all(np.isfinite(self.x)):
            raise ValidationError("covariates must be finite")
        if np.any(self.last_untreated < 1) or np.any(self.last_untreated > T):
            raise ValidationError("last untreated time must lie in 1..T")
        for labels, arr in [(self.normal_labels, self.y), (self.binomial_labels, self.k),
                            (self.count_labels, self.z)]:
            if labels and len(labels) != arr.shape[2]:
                raise ValidationError("outcome label count does not match array width")
        # default outcome labels
        if not self.normal_labels:
            self.normal_labels = [f"normal_{d+1}" for d in range(self.y.shape[2])]
        if not self.binomial_labels:
            self.binomial_labels = [f"binomial_{d+1}" for d in range(self.k.shape[2])]
        if not self.count_labels:
            self.count_labels = [f"negbin_{d+1}" for d in range(self.z.shape[2])]

    def _canonicalize(self):
        order = np.argsort(np.asarray(self.unit_labels, dtype=object))
        if np.array_equal(order, np.arange(len(order))):
            return
        self.unit_labels = [self.unit_labels[i] for i in order]
        self.y = self.y[order]
        self.k = self.k[order]
        self.n = self.n[order]
        self.z = self.z[order]
        self.w = self.w[order]
        self.x = self.x[order]
        self.last_untreated = self.last_untreated[order]

    # -- dimensions ----------------------------------------------------------

    @property
    def N(self) -> int:
        return len(self.unit_labels)

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def D1(self) -> int:
        return self.y.shape[2]

    @property
    def D2(self) -> int:
        return self.k.shape[2]

    @property
    def D3(self) -> int:
        return self.z.shape[2]

    @property
    def D(self) -> int:
        return self.D1 + self.D2 + self.D3

    @property
    def P(self) -> int:
        return self.x.shape[2]

    @property
    def n_control(self) -> int:
        return int(np.sum(self.last_untreated == self.T))

    @property
    def n_treated(self) -> int:
        return self.N - self.n_control

    @property
    def t_min(self) -> int:
        return int(self.last_untreated.min())

    @property
    def treated_units(self) -> np.ndarray:
        return np.flatnonzero(self.last_untreated < self.T)

    def outcome_label(self, family: int, d: int) -> str:
        return {FAMILY_NORMAL: self.normal_labels, FAMILY_BINOMIAL: self.binomial_labels,
                FAMILY_COUNT: self.count_labels}[family][d]

    # -- masks ---------------------------------------------------------------

    def masks(self):
        """(pre, bin_valid, cnt_valid): pre-intervention and observed-cell masks."""
        if self._masks is None:
            t_idx = np.arange(self.T)
            pre = t_idx[None, :] < self.last_untreated[:, None]  # (N,T)
            bin_valid = pre[:, :, None] & (self.n > 0)
            cnt_valid = pre[:, :, None] & (self.w > 0)
            self._masks = (pre, bin_valid, cnt_valid)
        return self._masks

    def post_mask(self):
        """(N,T) boolean, True at post-intervention times of treated units."""
        t_idx = np.arange(self.T)
        return t_idx[None, :] >= self.last_untreated[:, None]

    # -- slicing -------------------------------------------------------------

    def restrict_to_outcome(self, family: int, d: int) -> "PanelDataset":
        """Single-outcome view used by univariate analyses."""
        e3 = np.empty((self.N, self.T, 0))
        ei = np.empty((self.N, self.T, 0), dtype=np.int64)
        kw = dict(
            y=np.empty((self.N, self.T, 0)), k=ei, n=ei, z=ei, w=e3,
            x=self.x, last_untreated=self.last_untreated,
            unit_labels=list(self.unit_labels),
        )
        if family == FAMILY_NORMAL:
            kw["y"] = self.y[:, :, d:d + 1]
            kw["normal_labels"] = [self.normal_labels[d]]
        elif family == FAMILY_BINOMIAL:
            kw["k"] = self.k[:, :, d:d + 1]
            kw["n"] = self.n[:, :, d:d + 1]
            kw["binomial_labels"] = [self.binomial_labels[d]]
        elif family == FAMILY_COUNT:
            kw["z"] = self.z[:, :, d:d + 1]
            kw["w"] = self.w[:, :, d:d + 1]
            kw["count_labels"] = [self.count_labels[d]]
        else:
            raise ValidationError(f"unknown family {family}")
        return PanelDataset(**kw)

    def permuted(self, order) -> "PanelDataset":
        """Copy with units presented in a different order (re-canonicalized)."""
        order = np.asarray(order)
        return PanelDataset(
            y=self.y[order], k=self.k[order], n=self.n[order],
            z=self.z[order], w=self.w[order], x=self.x[order],
            last_untreated=self.last_untreated[order],
            unit_labels=[self.unit_labels[i] for i in order],
            normal_labels=list(self.normal_labels),
            binomial_labels=list(self.binomial_labels),
            count_labels=list(self.count_labels),
        )
