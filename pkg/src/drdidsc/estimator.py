"""ATT estimation: panel, repeated cross-section, staggered adoption.

The moment for a unit is

    phi = (G_1 - sum_{g>=2} w_g(X) r_{1g}(X) G_g) (ΔY - m_Δ(X)) / pi_1

and the estimate is its sample mean with cross-fitted nuisances and a
full-sample pi_1.  Each design is wrapped in a pipeline object that maps a
vector of sample weights to an estimate, so the bootstrap and the point
estimate run the same code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import FoldAssignment, PanelDataset, RepeatedCrossSection, StaggeredDesign, assign_folds
from .errors import (
    ConfigError,
    EmptyDonorPool,
    EmptyPeriod,
    EventTimeOutOfRange,
    NoQualifyingGroup,
    Underidentified,
)
from .kernel_regression import LocalPolyConfig
from .nuisance import CrossFitEngine, NuisanceSurface, rc_lambdas
from .weights import WeightOptions, WeightSurface, weight_surface


@dataclass(frozen=True)
class EstimatorConfig:
    folds: int = 2
    seed: int = 0
    poly: LocalPolyConfig = field(default_factory=LocalPolyConfig)
    weights: WeightOptions = field(default_factory=WeightOptions)
    # fit every group's outcome surfaces even when weights are fixed (diagnostics need them)
    fit_outcomes: bool | None = None

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("need at least two folds")


@dataclass
class AttEstimate:
    theta_hat: float
    pi1_hat: float
    per_obs_moment: np.ndarray
    design: str
    n: int
    folds: int
    diagnostics: dict
    weights_summary: dict
    nuisances: NuisanceSurface | None = None
    weights: WeightSurface | None = None
    kept: np.ndarray | None = None
    pipeline: object = None

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat,
            "pi1_hat": self.pi1_hat,
            "design": self.design,
            "n": self.n,
            "folds": self.folds,
            "diagnostics": self.diagnostics,
            "weights_summary": self.weights_summary,
        }


@dataclass
class EventStudyEstimate:
    e: int
    es_hat: float
    components: list
    shares: dict
    skipped: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "e": self.e,
            "es_hat": self.es_hat,
            "shares": self.shares,
            "components": self.components,
            "skipped": self.skipped,
        }


# ----------------------------------------------------------------- moments


def control_factor(group, w, r1g):
    """G_1 - sum_{g>=2} w_g r_{1g} G_g per unit; w is (n, N_G), r1g is (n, N_G+1)."""
    group = np.asarray(group)
    out = (group == 1).astype(float)
    ctrl = group > 1
    gi = group[ctrl] - 2
    rows = np.flatnonzero(ctrl)
    out[ctrl] = -w[rows, gi] * r1g[rows, gi + 1]
    return out


def moment_phi(group, w, r1g, delta_y, m_delta, pi1):
    """Moment values in the factored form (treated-minus-synthetic times residual)."""
    return control_factor(group, w, r1g) * (np.asarray(delta_y) - np.asarray(m_delta)) / pi1


def moment_phi_split(group, w, r1g, delta_y, m_delta, pi1):
    """Same moment written as the DiD term minus the synthetic control adjustment."""
    group = np.asarray(group)
    resid = np.asarray(delta_y) - np.asarray(m_delta)
    did = (group == 1) * resid / pi1
    adj = np.zeros(len(group))
    for g in range(2, r1g.shape[1] + 1):
        adj += w[:, g - 2] * r1g[:, g - 1] * (group == g) * resid
    return did - adj / pi1


def moment_phi_rc(group, w, r1g, y, time, mu_pool, pi1, lam_T, lam_Tm1, T):
    """Repeated cross-section moment; ``mu_pool`` holds mu_{G!=1,t} for t = T-1, T."""
    time = np.asarray(time)
    y = np.asarray(y, dtype=float)
    mu_pool = np.asarray(mu_pool, dtype=float)
    resid = ((time == T) / lam_T - (time == T - 1) / lam_Tm1) * y - (mu_pool[:, 1] / lam_T - mu_pool[:, 0] / lam_Tm1)
    return control_factor(group, w, r1g) * resid / pi1


def estimate_att_nocov(dataset: PanelDataset, w) -> float:
    """Group-mean closed form: ΔȲ_1 - sum_g w_g ΔȲ_g."""
    w = np.asarray(w, dtype=float)
    dy = dataset.delta_y
    means = np.array([dy[dataset.group == g].mean() for g in range(1, dataset.n_groups + 1)])
    return float(means[0] - np.dot(w, means[1:]))


# --------------------------------------------------------------- pipelines


class PanelPipeline:
    """Maps sample weights W to (theta, pi1, phi, nuisances, weights)."""

    design = "panel"

    def __init__(self, dataset: PanelDataset, folds: FoldAssignment, cfg: EstimatorConfig, need_outcomes=None):
        self.data = dataset
        self.folds = folds
        self.cfg = cfg
        wopt = cfg.weights
        fixed = wopt.pt_only or wopt.fixed is not None
        if not fixed and dataset.n_periods < dataset.n_controls:
            raise Underidentified(
                f"T={dataset.n_periods} < N_G={dataset.n_controls}: weights not identified; use pt-only mode"
            )
        if need_outcomes is None:
            need_outcomes = cfg.fit_outcomes
        outcomes = (not fixed) if need_outcomes is None else need_outcomes
        self.engine = CrossFitEngine(
            x=dataset.x,
            group=dataset.group,
            strata=dataset.stratum_codes(),
            folds=folds,
            cfg=cfg.poly,
            outcome=dataset.y if outcomes else None,
            pool=dataset.delta_y,
            ratios=True,
            n_groups=dataset.n_groups,
            group_labels=tuple(str(g) for g in dataset.group_labels),
            stratum_labels={s: st.label for s, st in enumerate(dataset.strata())},
        )
        self.g1 = (dataset.group == 1).astype(float)
        self.n_source = dataset.n

    def _weights(self, nuis):
        return weight_surface(nuis, self.data, self.folds, "panel", self.cfg.weights)

    def _residual(self, nuis, W):
        return self.data.delta_y - nuis.m_delta

    def run(self, W=None):
        n = self.data.n
        nuis = self.engine.evaluate(W)
        ws = self._weights(nuis)
        keep = ~ws.failed
        Wv = np.ones(n) if W is None else np.asarray(W, dtype=float)
        if keep.all():
            n_eff = n
            pi1 = float(np.sum(Wv * self.g1) / n)
        else:
            n_eff = int(keep.sum())
            pi1 = float(np.sum((Wv * self.g1)[keep]) / n_eff)
        phi = self.moment(nuis, ws, pi1, Wv)
        phi = np.where(keep, phi, 0.0)
        theta = float(np.sum(Wv * phi) / n_eff)
        return theta, pi1, phi, nuis, ws, keep

    def moment(self, nuis, ws, pi1, W):
        w = np.nan_to_num(ws.w)
        return control_factor(self.data.group, w, nuis.r1g) * self._residual(nuis, W) / pi1

    def estimate(self) -> AttEstimate:
        theta, pi1, phi, nuis, ws, keep = self.run(None)
        hs = [b["h"] for b in nuis.bandwidths]
        hs = [float(np.min(h)) for h in hs]
        diag = {
            "clamped": nuis.clamped,
            "dropped": int((~keep).sum()),
            "min_eig_quantiles": ws.summary().get("min_eig_quantiles"),
            "n_eval_points": nuis.n_points,
            "bandwidth_range": [min(hs), max(hs)] if hs else None,
            "notes": list(ws.notes),
        }
        return AttEstimate(
            theta_hat=theta,
            pi1_hat=pi1,
            per_obs_moment=phi,
            design=self.design,
            n=self.data.n,
            folds=self.folds.L,
            diagnostics=diag,
            weights_summary=ws.summary(),
            nuisances=nuis,
            weights=ws,
            kept=keep,
            pipeline=self,
        )


class RCPipeline(PanelPipeline):
    design = "rc"

    def __init__(self, dataset: RepeatedCrossSection, folds: FoldAssignment, cfg: EstimatorConfig, need_outcomes=None):
        self.data = dataset
        self.folds = folds
        self.cfg = cfg
        wopt = cfg.weights
        fixed = wopt.pt_only or wopt.fixed is not None
        if not fixed and dataset.n_periods < dataset.n_controls:
            raise Underidentified(
                f"T={dataset.n_periods} < N_G={dataset.n_controls}: weights not identified; use pt-only mode"
            )
        if need_outcomes is None:
            need_outcomes = cfg.fit_outcomes
        outcomes = (not fixed) if need_outcomes is None else need_outcomes
        T = dataset.n_periods
        tY = dataset.period_indicators() * dataset.y[:, None]
        for fold in range(1, folds.L + 1):
            counts = np.bincount(dataset.time[folds.complement(fold)], minlength=T + 1)[1:]
            empty = [dataset.periods[t] for t in range(T) if counts[t] == 0]
            if empty:
                raise EmptyPeriod(f"complement of fold {fold} has no rows in period(s) {empty}")
        self.engine = CrossFitEngine(
            x=dataset.x,
            group=dataset.group,
            strata=dataset.stratum_codes(),
            folds=folds,
            cfg=cfg.poly,
            outcome=tY if outcomes else None,
            pool=tY[:, T - 2 :],
            ratios=True,
            n_groups=dataset.n_groups,
            group_labels=tuple(str(g) for g in dataset.group_labels),
            stratum_labels={s: st.label for s, st in enumerate(dataset.strata())},
        )
        self.g1 = (dataset.group == 1).astype(float)
        self.n_source = dataset.n

    def _weights(self, nuis):
        return weight_surface(nuis, self.data, self.folds, "rc", self.cfg.weights)

    def moment(self, nuis, ws, pi1, W):
        T = self.data.n_periods
        lam = rc_lambdas(self.data, W)
        w = np.nan_to_num(ws.w)
        return moment_phi_rc(
            self.data.group, w, nuis.r1g, self.data.y, self.data.time, nuis.m_pool, pi1, lam[T - 1], lam[T - 2], T
        )

    def estimate(self) -> AttEstimate:
        est = super().estimate()
        est.diagnostics["lambda"] = rc_lambdas(self.data).tolist()
        est.nuisances.lambdas = rc_lambdas(self.data)
        return est


def _folds_for(dataset, cfg: EstimatorConfig, folds):
    return folds if folds is not None else assign_folds(dataset, cfg.folds, cfg.seed)


def estimate_att_panel(dataset: PanelDataset, cfg: EstimatorConfig | None = None, folds: FoldAssignment | None = None) -> AttEstimate:
    cfg = cfg or EstimatorConfig()
    return PanelPipeline(dataset, _folds_for(dataset, cfg, folds), cfg).estimate()


def estimate_att_rc(dataset: RepeatedCrossSection, cfg: EstimatorConfig | None = None, folds: FoldAssignment | None = None) -> AttEstimate:
    cfg = cfg or EstimatorConfig()
    return RCPipeline(dataset, _folds_for(dataset, cfg, folds), cfg).estimate()


# ---------------------------------------------------------------- staggered


def default_e_bar(dataset, design: StaggeredDesign, g: int, e: int = 0):
    """Largest e_bar in [e, T - gamma(g)] whose donor pool is non-empty."""
    T = dataset.n_periods
    gamma = design.gamma(g)
    for eb in range(int(T - gamma), e - 1, -1):
        if design.donor_pool(g, eb, dataset.n_groups):
            return eb
    return None


def staggered_subpanel(dataset: PanelDataset, design: StaggeredDesign, g: int, e: int, e_bar: int):
    """Relabel cohort g as treated and its donor pool as controls.

    The sub-panel keeps periods 1..gamma(g)-1 and gamma(g)+e, so its last
    pair is (gamma(g)-1, gamma(g)+e) and its pre-periods feed the weights.
    Returns the sub-panel and the indices of the retained units.
    """
    T = dataset.n_periods
    gamma = design.gamma(g)
    if math.isinf(gamma):
        raise ConfigError(f"group {dataset.group_labels[g - 1]!r} is never treated")
    if not (0 <= e <= e_bar <= T - gamma):
        raise EventTimeOutOfRange(
            f"need 0 <= e <= e_bar <= T - gamma(g) = {T - gamma}; got e={e}, e_bar={e_bar}"
        )
    donors = design.donor_pool(g, e_bar, dataset.n_groups)
    if not donors:
        raise EmptyDonorPool(f"no group untreated through period {gamma + e_bar} for cohort {dataset.group_labels[g - 1]!r}")
    keep_groups = [g] + donors
    code = np.zeros(dataset.n_groups + 1, dtype=np.int64)
    code[keep_groups] = np.arange(1, len(keep_groups) + 1)
    idx = np.flatnonzero(code[dataset.group] > 0)
    cols = list(range(int(gamma) - 1)) + [int(gamma) + e - 1]
    sub = dataset.subset(
        idx,
        group=code[dataset.group[idx]],
        y=dataset.y[idx][:, cols],
        group_labels=tuple(dataset.group_labels[h - 1] for h in keep_groups),
        periods=tuple(dataset.periods[c] for c in cols),
    )
    return sub, idx


class StaggeredPipeline(PanelPipeline):
    def __init__(self, dataset, design, g, e, e_bar, folds, cfg: EstimatorConfig):
        sub, idx = staggered_subpanel(dataset, design, g, e, e_bar)
        fixed = cfg.weights.pt_only or cfg.weights.fixed is not None
        if not fixed and design.gamma(g) < sub.n_controls:
            raise Underidentified(
                f"gamma(g)={design.gamma(g)} < |donor pool|={sub.n_controls} for cohort "
                f"{dataset.group_labels[g - 1]!r}; weights not identified, use pt-only mode"
            )
        self.design = f"staggered(g={dataset.group_labels[g - 1]},e={e})"
        self.index = idx
        super().__init__(sub, folds.restrict(idx), cfg)
        self.n_source = dataset.n

    def run(self, W=None):
        return super().run(None if W is None else np.asarray(W)[self.index])


def estimate_att_staggered(
    dataset: PanelDataset,
    design: StaggeredDesign,
    g: int,
    e: int,
    e_bar: int | None = None,
    cfg: EstimatorConfig | None = None,
    folds: FoldAssignment | None = None,
) -> AttEstimate:
    """ATT(g, gamma(g)+e) against the donor pool of groups untreated through gamma(g)+e_bar."""
    cfg = cfg or EstimatorConfig()
    folds = _folds_for(dataset, cfg, folds)
    if e_bar is None:
        e_bar = default_e_bar(dataset, design, g, e)
        if e_bar is None:
            raise EmptyDonorPool(f"no donor pool for cohort {dataset.group_labels[g - 1]!r} at e={e}")
    est = StaggeredPipeline(dataset, design, g, e, e_bar, folds, cfg).estimate()
    est.diagnostics["e_bar"] = e_bar
    return est


def event_study(
    dataset: PanelDataset,
    design: StaggeredDesign,
    e: int,
    e_bar: int | None = None,
    cfg: EstimatorConfig | None = None,
    folds: FoldAssignment | None = None,
) -> EventStudyEstimate:
    """ES(e): cohort ATTs at event time e averaged with sample cohort shares."""
    cfg = cfg or EstimatorConfig()
    folds = _folds_for(dataset, cfg, folds)
    T = dataset.n_periods
    if e < 0:
        raise EventTimeOutOfRange("event time must be nonnegative")
    if e_bar is not None and e_bar < e:
        raise EventTimeOutOfRange(f"e_bar={e_bar} is below e={e}")
    comps, skipped = [], []
    for g in design.treated_groups():
        gamma = design.gamma(g)
        if not (2 <= gamma + e <= T):
            continue
        eb = default_e_bar(dataset, design, g, e) if e_bar is None else min(e_bar, int(T - gamma))
        if eb is None or not design.donor_pool(g, eb, dataset.n_groups):
            skipped.append({"group": dataset.group_labels[g - 1], "reason": "empty donor pool"})
            continue
        est = estimate_att_staggered(dataset, design, g, e, eb, cfg, folds)
        comps.append((g, est, eb))
    if not comps:
        raise NoQualifyingGroup(f"no cohort is observed at event time {e} with a donor pool")
    sizes = np.array([np.sum(dataset.group == g) for g, _, _ in comps], dtype=float)
    shares = sizes / sizes.sum()
    es = float(np.dot(shares, [c[1].theta_hat for c in comps]))
    return EventStudyEstimate(
        e=e,
        es_hat=es,
        components=[
            {
                "group": dataset.group_labels[g - 1],
                "gamma": int(design.gamma(g)),
                "e_bar": eb,
                "att": est.theta_hat,
                "share": float(s),
                "n": est.n,
            }
            for (g, est, eb), s in zip(comps, shares)
        ],
        shares={dataset.group_labels[g - 1]: float(s) for (g, _, _), s in zip(comps, shares)},
        skipped=skipped,
    )
