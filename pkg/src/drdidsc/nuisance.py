"""Cross-fitted nuisance surfaces.

Every conditional-mean and ratio surface attached to an observation in fold
``l`` is fit on the complement ``I_l^c`` within the observation's discrete
stratum.  :class:`CrossFitEngine` builds one :class:`LocalPolyPlan` per
(fold, stratum, fit) once, with frozen bandwidths, and then evaluates all
surfaces for any vector of sample weights.  The point estimate is the call
with unit weights; bootstrap replications pass multipliers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import FoldAssignment, PanelDataset, RepeatedCrossSection
from .errors import DegenerateCovariate, EmptyPeriod, SingularLocalDesign
from .kernel_regression import (
    LocalPolyConfig,
    LocalPolyPlan,
    _unique_rows,
    auto_bandwidth,
    intercept_rows,
)


@dataclass
class NuisanceSurface:
    """Per-observation nuisance values.

    ``m_gt[i, g-1, t-1]`` is m_{g,t}(X_i) (panel) or mu_{g,t}(X_i) (rc);
    ``m_pool`` holds the control-pool fits: a single ΔY column for panels,
    one column per period for repeated cross-sections.  ``r1g[:, 0]`` is 1
    by convention.
    """

    mode: str
    m_gt: np.ndarray | None
    m_pool: np.ndarray | None
    r1g: np.ndarray | None
    point_id: np.ndarray
    point_rep: np.ndarray
    n_points: int
    clamped: int = 0
    bandwidths: list = field(default_factory=list)
    lambdas: np.ndarray | None = None

    @property
    def m_delta(self) -> np.ndarray:
        return self.m_pool[:, 0]

    def group_delta(self) -> np.ndarray:
        """m_{g,Δ}(X_i) = m_{g,T} - m_{g,T-1} for every group (panel)."""
        return self.m_gt[:, :, -1] - self.m_gt[:, :, -2]


@dataclass
class _Fit:
    kind: str
    g: int
    plan: LocalPolyPlan
    train: np.ndarray
    numer: np.ndarray | None = None
    denom: np.ndarray | None = None


@dataclass
class _Cell:
    fold: int
    stratum: str
    members: np.ndarray
    point_of: np.ndarray
    offset: int
    n_eval: int
    fits: list


def _bandwidth(x_train, cfg: LocalPolyConfig, group_tag, stratum_tag):
    if x_train.shape[1] == 0:
        return 1.0
    if cfg.bandwidth != "auto":
        return cfg.bandwidth
    try:
        return auto_bandwidth(x_train, len(x_train), cfg.bandwidth_constant)
    except DegenerateCovariate as err:
        raise DegenerateCovariate(f"{err} [group={group_tag}, stratum={stratum_tag}]") from None


class CrossFitEngine:
    """Cached cross-fitted local polynomial fits for one design.

    Parameters
    ----------
    outcome : (n, R) responses fit separately within every group, or None
    pool : (n, R') responses fit on the control pool (G != 1), or None
    ratios : whether to fit r_{1g} for g >= 2
    """

    def __init__(
        self,
        x,
        group,
        strata,
        folds: FoldAssignment,
        cfg: LocalPolyConfig,
        outcome=None,
        pool=None,
        ratios=True,
        n_groups=None,
        group_labels=None,
        stratum_labels=None,
    ):
        self.x = np.asarray(x, dtype=float).reshape(len(group), -1)
        self.group = np.asarray(group)
        self.n = len(self.group)
        self.G = int(n_groups or self.group.max())
        self.cfg = cfg
        self.folds = folds
        self.outcome = None if outcome is None else np.asarray(outcome, dtype=float).reshape(self.n, -1)
        self.pool = None if pool is None else np.asarray(pool, dtype=float).reshape(self.n, -1)
        self.ratios = ratios
        labels = group_labels or tuple(str(g) for g in range(1, self.G + 1))
        self._labels = labels
        strata = np.asarray(strata)
        slabels = stratum_labels or {s: str(s) for s in np.unique(strata)}
        self.cells: list[_Cell] = []
        self.bandwidths = []
        offset = 0
        for fold in range(1, folds.L + 1):
            in_fold = folds.fold_of == fold
            for s in np.unique(strata):
                members = np.flatnonzero(in_fold & (strata == s))
                if members.size == 0:
                    continue
                train_all = np.flatnonzero(~in_fold & (strata == s))
                ev, point_of = _unique_rows(self.x[members])
                fits = self._build_fits(train_all, ev, labels, slabels[s], fold)
                self.cells.append(_Cell(fold, slabels[s], members, point_of, offset, len(ev), fits))
                offset += len(ev)
        self.n_points = offset
        self.point_id = np.empty(self.n, dtype=np.int64)
        self.point_rep = np.empty(self.n_points, dtype=np.int64)
        for c in self.cells:
            self.point_id[c.members] = c.offset + c.point_of
            self.point_rep[c.offset + c.point_of] = c.members

    def _build_fits(self, train_all, ev, labels, slabel, fold):
        cfg = self.cfg
        g_train = self.group[train_all]
        fits = []

        def need(idx, g):
            if idx.size == 0:
                raise SingularLocalDesign(
                    f"complement of fold {fold} has no training rows",
                    group=labels[g - 1] if g else "controls",
                    stratum=slabel,
                )

        if self.outcome is not None:
            for g in range(1, self.G + 1):
                idx = train_all[g_train == g]
                need(idx, g)
                h = _bandwidth(self.x[idx], cfg, labels[g - 1], slabel)
                self.bandwidths.append({"fit": "outcome", "group": labels[g - 1], "stratum": slabel, "fold": fold, "h": h})
                fits.append(_Fit("outcome", g, LocalPolyPlan(self.x[idx], ev, h, cfg.order, cfg.kernel), idx))
        if self.pool is not None:
            idx = train_all[g_train != 1]
            need(idx, 0)
            h = _bandwidth(self.x[idx], cfg, "controls", slabel)
            self.bandwidths.append({"fit": "pool", "group": "controls", "stratum": slabel, "fold": fold, "h": h})
            fits.append(_Fit("pool", 0, LocalPolyPlan(self.x[idx], ev, h, cfg.order, cfg.kernel), idx))
        if self.ratios:
            for g in range(2, self.G + 1):
                idx = train_all[(g_train == 1) | (g_train == g)]
                gi = self.group[idx]
                need(idx[gi == g], g)
                h = _bandwidth(self.x[idx], cfg, labels[g - 1], slabel)
                self.bandwidths.append({"fit": "ratio", "group": labels[g - 1], "stratum": slabel, "fold": fold, "h": h})
                plan = LocalPolyPlan(self.x[idx], ev, h, cfg.order, cfg.kernel)
                fits.append(_Fit("ratio", g, plan, idx, (gi == 1).astype(float), (gi == g).astype(float)))
        return fits

    def evaluate(self, weights=None, mode="panel") -> NuisanceSurface:
        """All surfaces at every observation for the given sample weights."""
        W = np.ones(self.n) if weights is None else np.asarray(weights, dtype=float)
        P = self.n_points
        m_gt = None if self.outcome is None else np.empty((P, self.G, self.outcome.shape[1]))
        m_pool = None if self.pool is None else np.empty((P, self.pool.shape[1]))
        r1g = None
        if self.ratios:
            r1g = np.ones((P, self.G))
        grams, rhss, floors, owners = [], [], [], []
        for c in self.cells:
            for f in c.fits:
                w = W[f.train]
                if f.kind == "ratio":
                    agg_w, _ = f.plan.pool(w * f.denom)
                    agg_r, _ = f.plan.pool(w * f.numer)
                    agg_r = agg_r[:, None]
                else:
                    resp = self.outcome if f.kind == "outcome" else self.pool
                    agg_w, agg_r = f.plan.pool(w, resp[f.train])
                gram, rhs = f.plan.moments(agg_w, agg_r)
                grams.append(gram)
                rhss.append(rhs)
                floors.append(np.full(len(gram), 1e-14 * f.plan.kernel_mass_scale(agg_w)))
                owners.append((c, f))
        gram = np.concatenate(grams)
        rows, singular = intercept_rows(gram, self.cfg.ridge_eps, 0.0)
        singular |= ~(gram[:, 0, 0] > np.concatenate(floors))
        clamped = 0
        start = 0
        for (c, f), rhs in zip(owners, rhss):
            stop = start + len(rhs)
            if singular[start:stop].any():
                k = int(singular[start:stop].sum())
                what = "no comparison-group mass" if f.kind == "ratio" else "local design singular"
                raise SingularLocalDesign(
                    f"{what} at {k} of {len(rhs)} evaluation point(s) in fold {c.fold}",
                    group=self._labels[f.g - 1] if f.g else "controls",
                    stratum=c.stratum,
                )
            est = np.einsum("ep,epr->er", rows[start:stop], rhs)
            sl = slice(c.offset, c.offset + c.n_eval)
            if f.kind == "outcome":
                m_gt[sl, f.g - 1, :] = est
            elif f.kind == "pool":
                m_pool[sl] = est
            else:
                raw = est[:, 0]
                r = np.clip(raw, 0.0, self.cfg.r_max)
                clamped += int(np.count_nonzero(r != raw))
                r1g[sl, f.g - 1] = r
            start = stop
        pid = self.point_id
        return NuisanceSurface(
            mode=mode,
            m_gt=None if m_gt is None else m_gt[pid],
            m_pool=None if m_pool is None else m_pool[pid],
            r1g=None if r1g is None else r1g[pid],
            point_id=pid,
            point_rep=self.point_rep,
            n_points=P,
            clamped=clamped,
            bandwidths=self.bandwidths,
        )


def _engine_args(dataset):
    strata = dataset.stratum_codes()
    labels = {s: st.label for s, st in enumerate(dataset.strata())}
    return dict(
        x=dataset.x,
        group=dataset.group,
        strata=strata,
        n_groups=dataset.n_groups,
        group_labels=tuple(str(g) for g in dataset.group_labels),
        stratum_labels=labels,
    )


def panel_engine(dataset: PanelDataset, folds: FoldAssignment, cfg: LocalPolyConfig, ratios=True) -> CrossFitEngine:
    """Engine for m_{g,t} (all groups and periods), m_Δ and r_{1g}."""
    return CrossFitEngine(
        folds=folds, cfg=cfg, outcome=dataset.y, pool=dataset.delta_y, ratios=ratios, **_engine_args(dataset)
    )


def rc_engine(dataset: RepeatedCrossSection, folds: FoldAssignment, cfg: LocalPolyConfig, ratios=True) -> CrossFitEngine:
    """Engine for mu_{g,t}, mu_{G!=1,t} and r_{1g} on a repeated cross-section."""
    tY = dataset.period_indicators() * dataset.y[:, None]
    for fold in range(1, folds.L + 1):
        counts = np.bincount(dataset.time[folds.complement(fold)], minlength=dataset.n_periods + 1)[1:]
        empty = [dataset.periods[t] for t in range(dataset.n_periods) if counts[t] == 0]
        if empty:
            raise EmptyPeriod(f"complement of fold {fold} has no rows in period(s) {empty}")
    return CrossFitEngine(folds=folds, cfg=cfg, outcome=tY, pool=tY, ratios=ratios, **_engine_args(dataset))


def fit_outcome_surfaces(dataset: PanelDataset, folds: FoldAssignment, cfg: LocalPolyConfig | None = None) -> NuisanceSurface:
    cfg = cfg or LocalPolyConfig()
    eng = CrossFitEngine(folds=folds, cfg=cfg, outcome=dataset.y, pool=dataset.delta_y, ratios=False, **_engine_args(dataset))
    return eng.evaluate()


def fit_rc_surfaces(dataset: RepeatedCrossSection, folds: FoldAssignment, cfg: LocalPolyConfig | None = None) -> NuisanceSurface:
    cfg = cfg or LocalPolyConfig()
    surf = rc_engine(dataset, folds, cfg, ratios=False).evaluate(mode="rc")
    surf.lambdas = rc_lambdas(dataset)
    return surf


def fit_ratio_surfaces(dataset, folds: FoldAssignment, cfg: LocalPolyConfig | None = None) -> NuisanceSurface:
    cfg = cfg or LocalPolyConfig()
    return CrossFitEngine(folds=folds, cfg=cfg, ratios=True, **_engine_args(dataset)).evaluate()


def rc_lambdas(dataset: RepeatedCrossSection, weights=None) -> np.ndarray:
    """λ_t = P_n 1{T = t}; with multipliers, the bootstrap operator P*_n."""
    W = np.ones(dataset.n) if weights is None else np.asarray(weights, dtype=float)
    return np.bincount(dataset.time - 1, weights=W, minlength=dataset.n_periods) / dataset.n
