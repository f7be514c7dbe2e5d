"""Dataset containers, CSV ingestion, validation and cross-fitting folds.

Group labels are normalised to ``1..N_G+1`` with the treated group mapped to
``1``; the original labels are kept in ``group_labels`` (index ``g - 1``).
Periods are normalised to ``1..T`` in chronological order.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    DataError,
    EmptyPeriod,
    MissingColumn,
    NonNumericOutcome,
    TooFewUnits,
    UnbalancedPanel,
    UnknownGroupLabel,
)

NEVER = math.inf


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class CovariateProfile:
    continuous: np.ndarray
    discrete: tuple


@dataclass(frozen=True)
class Stratum:
    """A cell of the discrete covariates and the indices of its members."""

    levels: tuple
    members: np.ndarray

    @property
    def label(self):
        return "/".join(str(v) for v in self.levels) if self.levels else "all"


class _CovariateMixin:
    @property
    def n(self) -> int:
        return len(self.group)

    @property
    def n_groups(self) -> int:
        return len(self.group_labels)

    @property
    def n_controls(self) -> int:
        return self.n_groups - 1

    @property
    def has_covariates(self) -> bool:
        return self.x.shape[1] > 0

    def group_sizes(self) -> dict:
        counts = np.bincount(self.group, minlength=self.n_groups + 1)[1:]
        return {self.group_labels[g]: int(c) for g, c in enumerate(counts)}

    def strata(self) -> list[Stratum]:
        """Partition of the sample by the levels of the discrete covariates."""
        if self.discrete.shape[1] == 0:
            return [Stratum((), np.arange(self.n))]
        keys = [tuple(row) for row in self.discrete]
        cells: dict[tuple, list[int]] = {}
        for i, key in enumerate(keys):
            cells.setdefault(key, []).append(i)
        return [Stratum(k, np.asarray(cells[k])) for k in sorted(cells)]

    def stratum_codes(self) -> np.ndarray:
        codes = np.empty(self.n, dtype=np.int64)
        for s, stratum in enumerate(self.strata()):
            codes[stratum.members] = s
        return codes


@dataclass(frozen=True, eq=False)
class PanelDataset(_CovariateMixin):
    """Balanced panel: one row per unit, outcomes in columns ``1..T``."""

    unit_ids: np.ndarray
    group: np.ndarray
    x: np.ndarray
    discrete: np.ndarray
    y: np.ndarray
    group_labels: tuple
    periods: tuple
    continuous_names: tuple = ()
    discrete_names: tuple = ()
    discrete_levels: tuple = ()

    def __post_init__(self):
        n = len(self.group)
        x = np.asarray(self.x, dtype=float).reshape(n, -1)
        disc = np.asarray(self.discrete, dtype=object).reshape(n, -1)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "unit_ids", _frozen(self.unit_ids, object))
        object.__setattr__(self, "group", _frozen(self.group, np.int64))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "discrete", _frozen(disc, object))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "group_labels", tuple(self.group_labels))
        object.__setattr__(self, "periods", tuple(self.periods))
        if not self.discrete_levels and disc.shape[1]:
            levels = tuple(tuple(sorted(set(disc[:, j]))) for j in range(disc.shape[1]))
            object.__setattr__(self, "discrete_levels", levels)
        self._check()

    def _check(self):
        n, T = self.y.shape if self.y.ndim == 2 else (None, None)
        if T is None or n != len(self.group):
            raise DataError("outcomes must be an (n, T) array aligned with units")
        if T < 2:
            raise DataError("a panel needs at least two periods")
        if len(self.periods) != T:
            raise DataError("period labels do not match outcome columns")
        if not np.all(np.isfinite(self.y)):
            raise NonNumericOutcome("outcomes must be finite")
        if not np.all(np.isfinite(self.x)):
            raise DataError("continuous covariates must be finite")
        G = len(self.group_labels)
        if n and (self.group.min() < 1 or self.group.max() > G):
            raise UnknownGroupLabel("group codes outside 1..N_G+1")
        present = np.bincount(self.group, minlength=G + 1)[1:]
        missing = [self.group_labels[g] for g in range(G) if present[g] == 0]
        if missing:
            raise DataError(f"groups without units: {missing}")

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def delta_y(self) -> np.ndarray:
        return self.y[:, -1] - self.y[:, -2]

    def unit(self, i: int):
        prof = CovariateProfile(self.x[i], tuple(self.discrete[i]))
        return self.unit_ids[i], int(self.group[i]), prof, self.y[i]

    def subset(self, idx, group=None, y=None, group_labels=None, periods=None):
        idx = np.asarray(idx)
        return PanelDataset(
            unit_ids=self.unit_ids[idx],
            group=self.group[idx] if group is None else group,
            x=self.x[idx],
            discrete=self.discrete[idx],
            y=self.y[idx] if y is None else y,
            group_labels=self.group_labels if group_labels is None else group_labels,
            periods=self.periods if periods is None else periods,
            continuous_names=self.continuous_names,
            discrete_names=self.discrete_names,
            discrete_levels=self.discrete_levels,
        )

    def with_outcomes(self, y):
        return self.subset(np.arange(self.n), y=y)

    def equals(self, other: "PanelDataset") -> bool:
        return (
            self.group_labels == other.group_labels
            and self.periods == other.periods
            and self.continuous_names == other.continuous_names
            and self.discrete_names == other.discrete_names
            and self.discrete_levels == other.discrete_levels
            and np.array_equal(self.unit_ids, other.unit_ids)
            and np.array_equal(self.group, other.group)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.discrete, other.discrete)
            and np.array_equal(self.y, other.y)
        )


@dataclass(frozen=True, eq=False)
class RepeatedCrossSection(_CovariateMixin):
    """Long-format sample of ``(y, group, time, covariates)`` rows."""

    y: np.ndarray
    group: np.ndarray
    time: np.ndarray
    x: np.ndarray
    discrete: np.ndarray
    group_labels: tuple
    periods: tuple
    continuous_names: tuple = ()
    discrete_names: tuple = ()
    discrete_levels: tuple = ()

    def __post_init__(self):
        n = len(self.group)
        x = np.asarray(self.x, dtype=float).reshape(n, -1)
        disc = np.asarray(self.discrete, dtype=object).reshape(n, -1)
        object.__setattr__(self, "y", _frozen(self.y, float))
        object.__setattr__(self, "group", _frozen(self.group, np.int64))
        object.__setattr__(self, "time", _frozen(self.time, np.int64))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "discrete", _frozen(disc, object))
        object.__setattr__(self, "group_labels", tuple(self.group_labels))
        object.__setattr__(self, "periods", tuple(self.periods))
        if not self.discrete_levels and disc.shape[1]:
            levels = tuple(tuple(sorted(set(disc[:, j]))) for j in range(disc.shape[1]))
            object.__setattr__(self, "discrete_levels", levels)
        if not np.all(np.isfinite(self.y)):
            raise NonNumericOutcome("outcomes must be finite")
        T = len(self.periods)
        if T < 2:
            raise DataError("repeated cross-sections need at least two periods")
        counts = np.bincount(self.time, minlength=T + 1)[1:]
        if len(counts) > T:
            raise DataError("time codes outside 1..T")
        empty = [self.periods[t] for t in range(T) if counts[t] == 0]
        if empty:
            raise EmptyPeriod(f"no rows observed in period(s) {empty}")
        G = len(self.group_labels)
        present = np.bincount(self.group, minlength=G + 1)[1:]
        missing = [self.group_labels[g] for g in range(G) if present[g] == 0]
        if missing:
            raise DataError(f"groups without rows: {missing}")

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    def period_indicators(self) -> np.ndarray:
        """(n, T) matrix of 1{T_i = t}."""
        out = np.zeros((self.n, self.n_periods))
        out[np.arange(self.n), self.time - 1] = 1.0
        return out

    def equals(self, other: "RepeatedCrossSection") -> bool:
        return (
            self.group_labels == other.group_labels
            and self.periods == other.periods
            and self.continuous_names == other.continuous_names
            and self.discrete_names == other.discrete_names
            and self.discrete_levels == other.discrete_levels
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.group, other.group)
            and np.array_equal(self.time, other.time)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.discrete, other.discrete)
        )


@dataclass(frozen=True)
class StaggeredDesign:
    """Adoption period ``gamma(g)`` per internal group code (``inf`` = never)."""

    adoption: Mapping[int, float]

    def __post_init__(self):
        adoption = {int(g): (NEVER if math.isinf(float(v)) else int(v)) for g, v in self.adoption.items()}
        treated = [g for g, v in adoption.items() if not math.isinf(v)]
        if not treated:
            raise ConfigError("staggered design needs at least one treated group")
        bad = [g for g in treated if adoption[g] < 2]
        if bad:
            raise ConfigError(f"adoption period must be >= 2 for treated groups, got groups {bad}")
        object.__setattr__(self, "adoption", adoption)

    def gamma(self, g: int) -> float:
        return self.adoption.get(g, NEVER)

    def treated_groups(self) -> list[int]:
        return sorted(g for g, v in self.adoption.items() if not math.isinf(v))

    def donor_pool(self, g: int, e_bar: int, n_groups: int) -> list[int]:
        """Groups still untreated through period gamma(g) + e_bar."""
        cutoff = self.gamma(g) + e_bar
        return [h for h in range(1, n_groups + 1) if h != g and self.gamma(h) > cutoff]

    @classmethod
    def from_labels(cls, dataset, adoption: Mapping) -> "StaggeredDesign":
        """Build from ``{group_label: period_label | "inf"}`` in the data's own labels."""
        codes = {str(lab): g + 1 for g, lab in enumerate(dataset.group_labels)}
        periods = {str(p): t + 1 for t, p in enumerate(dataset.periods)}
        out = {}
        for label, period in adoption.items():
            if str(label) not in codes:
                raise UnknownGroupLabel(f"adoption given for unknown group {label!r}")
            if isinstance(period, str) and period.strip().lower() in ("inf", "never"):
                out[codes[str(label)]] = NEVER
            elif isinstance(period, float) and math.isinf(period):
                out[codes[str(label)]] = NEVER
            else:
                key = str(period)
                if key not in periods:
                    try:
                        key = str(int(float(period)))
                    except ValueError:
                        pass
                if key not in periods:
                    raise ConfigError(f"adoption period {period!r} for group {label!r} not in data")
                out[codes[str(label)]] = periods[key]
        for g in range(1, dataset.n_groups + 1):
            out.setdefault(g, NEVER)
        return cls(out)


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: np.ndarray
    L: int

    def __post_init__(self):
        object.__setattr__(self, "fold_of", _frozen(self.fold_of, np.int64))

    def members(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def complement(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)

    def restrict(self, idx) -> "FoldAssignment":
        return FoldAssignment(self.fold_of[np.asarray(idx)], self.L)


@dataclass
class ValidationReport:
    mode: str
    group_sizes: dict
    n_periods: int
    n_controls: int
    identifiable: bool
    empty_cells: list = field(default_factory=list)
    staggered: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "group_sizes": self.group_sizes,
            "n_periods": self.n_periods,
            "n_controls": self.n_controls,
            "identifiable": self.identifiable,
            "empty_cells": self.empty_cells,
            "staggered": self.staggered,
            "warnings": self.warnings,
        }


@dataclass(frozen=True)
class PanelSchema:
    unit: str = "unit_id"
    group: str = "group"
    time: str = "time"
    outcome: str = "y"
    continuous: Sequence[str] | None = None
    discrete: Sequence[str] | None = None
    treated: str | None = None


@dataclass(frozen=True)
class RCSchema:
    group: str = "group"
    time: str = "time"
    outcome: str = "y"
    continuous: Sequence[str] | None = None
    discrete: Sequence[str] | None = None
    treated: str | None = None


# --------------------------------------------------------------------------- io


def _read_frame(path, required):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise MissingColumn(f"missing column(s) {missing} in {path.name}")
    return df


def _split_covariates(df, used, continuous, discrete):
    rest = [c for c in df.columns if c not in used]
    if continuous is None and discrete is None:
        continuous, discrete = [], []
        for c in rest:
            (continuous if _is_numeric(df[c]) else discrete).append(c)
    else:
        continuous = list(continuous or [])
        discrete = list(discrete or [])
    missing = [c for c in continuous + discrete if c not in df.columns]
    if missing:
        raise MissingColumn(f"missing covariate column(s) {missing}")
    if len(set(continuous + discrete + list(used))) != len(continuous) + len(discrete) + len(used):
        raise ConfigError("schema columns must be distinct")
    return continuous, discrete


def _is_numeric(col):
    try:
        np.asarray(col.to_numpy(), dtype=float)
    except (ValueError, TypeError):
        return False
    return len(col) > 0


def _numeric(col, name, exc=DataError):
    try:
        # exact round-trip parsing; pd.to_numeric may be off in the last bit
        vals = np.asarray(col.to_numpy(), dtype=float)
    except (ValueError, TypeError):
        raise exc(f"column {name!r} has non-numeric entries") from None
    if not np.all(np.isfinite(vals)):
        raise exc(f"column {name!r} has missing or non-finite entries")
    return vals


def _period_order(col):
    labels = list(dict.fromkeys(col))
    try:
        nums = [float(v) for v in labels]
    except ValueError:
        order = sorted(labels)
        return order, order
    order = [lab for _, lab in sorted(zip(nums, labels))]
    pretty = [int(float(v)) if float(v).is_integer() else float(v) for v in order]
    return order, pretty


def _group_order(labels, treated):
    labels = sorted(set(labels), key=_natural_key)
    if treated is not None:
        treated = str(treated)
        if treated not in labels:
            raise UnknownGroupLabel(f"treated group {treated!r} not present in data")
        labels.remove(treated)
        labels.insert(0, treated)
    return labels


_INT_RE = re.compile(r"^-?\d+$")


def _natural_key(s):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, 0.0, s)


def load_panel_csv(path, schema: PanelSchema | None = None) -> PanelDataset:
    """Read a long-format panel (one row per unit-period) into a PanelDataset."""
    schema = schema or PanelSchema()
    used = [schema.unit, schema.group, schema.time, schema.outcome]
    df = _read_frame(path, used)
    continuous, discrete = _split_covariates(df, used, schema.continuous, schema.discrete)
    y_long = _numeric(df[schema.outcome], schema.outcome, NonNumericOutcome)

    time_keys, periods = _period_order(df[schema.time])
    t_index = {k: t for t, k in enumerate(time_keys)}
    units = list(dict.fromkeys(df[schema.unit]))
    u_index = {u: i for i, u in enumerate(units)}
    n, T = len(units), len(time_keys)

    ui = df[schema.unit].map(u_index).to_numpy()
    ti = df[schema.time].map(t_index).to_numpy()
    if pd.Series(list(zip(ui, ti))).duplicated().any():
        raise DataError("duplicate unit-period rows")
    Y = np.full((n, T), np.nan)
    Y[ui, ti] = y_long
    incomplete = np.flatnonzero(np.isnan(Y).any(axis=1))
    if incomplete.size:
        i = incomplete[0]
        lacking = [periods[t] for t in range(T) if np.isnan(Y[i, t])]
        raise UnbalancedPanel(f"unit {units[i]!r} lacks period(s) {lacking}")

    first = np.zeros(n, dtype=np.int64)
    first[ui[::-1]] = np.arange(len(df))[::-1]
    for c in [schema.group] + continuous + discrete:
        vals = df[c].to_numpy()
        if np.any(vals != vals[first][ui]):
            raise DataError(f"column {c!r} varies within unit; it must be time-invariant")

    group_raw = df[schema.group].to_numpy()[first]
    labels = _group_order(group_raw, schema.treated)
    g_index = {lab: g + 1 for g, lab in enumerate(labels)}
    group = np.array([g_index[v] for v in group_raw])

    x = np.column_stack([_numeric(df[c], c)[first] for c in continuous]) if continuous else np.zeros((n, 0))
    disc = (
        np.column_stack([df[c].to_numpy(dtype=object)[first] for c in discrete])
        if discrete
        else np.zeros((n, 0), dtype=object)
    )
    if all(_INT_RE.match(u) for u in units):
        units = [int(u) for u in units]
    return PanelDataset(
        unit_ids=np.array(units, dtype=object),
        group=group,
        x=x,
        discrete=disc,
        y=Y,
        group_labels=tuple(labels),
        periods=tuple(periods),
        continuous_names=tuple(continuous),
        discrete_names=tuple(discrete),
    )


def load_rc_csv(path, schema: RCSchema | None = None, n_periods: int | None = None) -> RepeatedCrossSection:
    """Read a repeated cross-section. ``n_periods`` declares T when some periods may be empty."""
    schema = schema or RCSchema()
    used = [schema.group, schema.time, schema.outcome]
    df = _read_frame(path, used)
    continuous, discrete = _split_covariates(df, used, schema.continuous, schema.discrete)
    y = _numeric(df[schema.outcome], schema.outcome, NonNumericOutcome)
    time_keys, periods = _period_order(df[schema.time])
    if n_periods is not None and len(periods) < n_periods:
        raise EmptyPeriod(f"declared {n_periods} periods but rows cover only {periods}")
    t_index = {k: t + 1 for t, k in enumerate(time_keys)}
    labels = _group_order(df[schema.group], schema.treated)
    g_index = {lab: g + 1 for g, lab in enumerate(labels)}
    n = len(df)
    x = np.column_stack([_numeric(df[c], c) for c in continuous]) if continuous else np.zeros((n, 0))
    disc = (
        np.column_stack([df[c].to_numpy(dtype=object) for c in discrete])
        if discrete
        else np.zeros((n, 0), dtype=object)
    )
    return RepeatedCrossSection(
        y=y,
        group=df[schema.group].map(g_index).to_numpy(),
        time=df[schema.time].map(t_index).to_numpy(),
        x=x,
        discrete=disc,
        group_labels=tuple(labels),
        periods=tuple(periods),
        continuous_names=tuple(continuous),
        discrete_names=tuple(discrete),
    )


def write_panel_csv(dataset: PanelDataset, path, schema: PanelSchema | None = None):
    schema = schema or PanelSchema()
    n, T = dataset.y.shape
    cols = {
        schema.unit: np.repeat(dataset.unit_ids, T),
        schema.group: np.repeat(np.array(dataset.group_labels, dtype=object)[dataset.group - 1], T),
        schema.time: np.tile(np.array(dataset.periods, dtype=object), n),
        schema.outcome: dataset.y.reshape(-1),
    }
    for j, name in enumerate(dataset.continuous_names):
        cols[name] = np.repeat(dataset.x[:, j], T)
    for j, name in enumerate(dataset.discrete_names):
        cols[name] = np.repeat(dataset.discrete[:, j], T)
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g")


def write_rc_csv(dataset: RepeatedCrossSection, path, schema: RCSchema | None = None):
    schema = schema or RCSchema()
    cols = {
        schema.group: np.array(dataset.group_labels, dtype=object)[dataset.group - 1],
        schema.time: np.array(dataset.periods, dtype=object)[dataset.time - 1],
        schema.outcome: dataset.y,
    }
    for j, name in enumerate(dataset.continuous_names):
        cols[name] = dataset.x[:, j]
    for j, name in enumerate(dataset.discrete_names):
        cols[name] = dataset.discrete[:, j]
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g")


# ---------------------------------------------------------------- validation


def validate(dataset, mode: str = "panel", design: StaggeredDesign | None = None, e_bar: int | None = None):
    """Overlap and identifiability diagnostics. Never raises; returns warnings."""
    if mode not in ("panel", "rc", "staggered"):
        raise ConfigError(f"unknown validation mode {mode!r}")
    T, NG = dataset.n_periods, dataset.n_controls
    report = ValidationReport(
        mode=mode,
        group_sizes=dataset.group_sizes(),
        n_periods=T,
        n_controls=NG,
        identifiable=T >= NG,
    )
    if mode != "staggered" and not report.identifiable:
        report.warnings.append(
            f"T={T} < N_G={NG}: synthetic control weights are not identified; use pt-only weights"
        )

    if dataset.discrete.shape[1]:
        present = {(tuple(d), int(g)) for d, g in zip(dataset.discrete, dataset.group)}
        for levels in product(*dataset.discrete_levels):
            cell_groups = [g for g in range(1, dataset.n_groups + 1) if (levels, g) in present]
            if not cell_groups:
                continue
            for g in range(1, dataset.n_groups + 1):
                if (levels, g) not in present:
                    name = "/".join(map(str, levels))
                    report.empty_cells.append({"stratum": name, "group": dataset.group_labels[g - 1]})
                    report.warnings.append(
                        f"overlap: stratum {name} has no units in group {dataset.group_labels[g - 1]!r}"
                    )

    if mode == "staggered":
        if design is None:
            raise ConfigError("staggered validation needs an adoption design")
        for g in design.treated_groups():
            gamma = design.gamma(g)
            eb = (T - gamma) if e_bar is None else min(e_bar, T - gamma)
            donors = design.donor_pool(g, eb, dataset.n_groups)
            ok = gamma >= len(donors) and len(donors) > 0
            report.staggered.append(
                {
                    "group": dataset.group_labels[g - 1],
                    "gamma": gamma,
                    "e_bar": eb,
                    "donors": [dataset.group_labels[h - 1] for h in donors],
                    "identifiable": ok,
                }
            )
            if not donors:
                report.warnings.append(f"group {dataset.group_labels[g - 1]!r}: empty donor pool")
            elif gamma < len(donors):
                report.warnings.append(
                    f"group {dataset.group_labels[g - 1]!r}: gamma={gamma} < |donors|={len(donors)}; "
                    "weights not identified"
                )
        report.identifiable = all(s["identifiable"] for s in report.staggered)
    return report


# --------------------------------------------------------------------- folds


def assign_folds(dataset, L: int = 2, seed: int = 0) -> FoldAssignment:
    """Stratified random split into L folds.

    Units are shuffled within each (group, discrete stratum) cell, the cells
    are concatenated in a fixed order and dealt round-robin, so fold counts
    differ by at most one within every group, every cell and overall.
    """
    if L < 2:
        raise ConfigError("need at least two folds")
    sizes = np.bincount(dataset.group, minlength=dataset.n_groups + 1)[1:]
    small = [dataset.group_labels[g] for g in range(dataset.n_groups) if sizes[g] < L]
    if small:
        raise TooFewUnits(f"group(s) {small} have fewer than L={L} units")
    rng = np.random.default_rng(seed)
    cell = dataset.stratum_codes()
    order = []
    for g in range(1, dataset.n_groups + 1):
        for s in np.unique(cell):
            idx = np.flatnonzero((dataset.group == g) & (cell == s))
            order.append(rng.permutation(idx))
    order = np.concatenate(order)
    fold_of = np.empty(dataset.n, dtype=np.int64)
    fold_of[order] = np.arange(len(order)) % L + 1
    return FoldAssignment(fold_of, L)
