"""Synthetic panels with known ATT and a Monte Carlo harness.

Three untreated-outcome designs on T = N_G = 6 with X uniform on a 101 point
grid and G | X multinomial logit:

* dgp1: interactive fixed effects with group-specific loadings; the treated
  group's loadings and fixed effect are the w(x)-average of the controls'.
  Synthetic-control structure holds; group-specific factors move between
  T-1 and T, so parallel trends fail.
* dgp2: control means are zero before T, the treated mean is a quadratic in
  x per period, and every group shares the trend h(x) into T.  Parallel
  trends hold; no weighting of zeros reproduces the treated mean.
* dgp3: dgp1 with the group-specific factors frozen between T-1 and T, so
  only the common component moves and both structures hold.

The treated outcome at T adds ``scale * sin(2 pi X) + 1``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import PanelDataset, RepeatedCrossSection
from .errors import ConfigError, EstimationError

GRID = np.linspace(0.0, 1.0, 101)
KINDS = ("dgp1", "dgp2", "dgp3")


def _quad(coef, x):
    """Evaluate quadratics with coefficients (..., 3) at points x (m,) -> (m, ...)."""
    coef = np.asarray(coef, dtype=float)
    x = np.asarray(x, dtype=float)
    return coef[..., 0] + np.multiply.outer(x, coef[..., 1]) + np.multiply.outer(x * x, coef[..., 2])


@dataclass
class Calibration:
    n_controls: int
    n_periods: int
    logit_intercept: list  # (G,)
    logit_slope: list  # (G,)
    loadings: list  # (N_G, K, 3) quadratic coefficients per control group and factor
    factors: list  # (T, K) group-specific factors for dgp1
    alpha: list  # (N_G,) control-group fixed effects
    delta: list  # (T,) time effects
    common_loading: list  # (3,) quadratic
    common_factor: list  # (T,)
    sigma: list  # (T,) noise sd per period
    treated_quads: list  # (T-1, 3) dgp2 treated means before T
    trend_quad: list  # (3,) dgp2 shared trend h(x)
    alpha_treated: float = 0.0  # dgp2 treated fixed effect
    seed: int | None = None

    def __post_init__(self):
        NG, T = self.n_controls, self.n_periods
        shapes = {
            "logit_intercept": (NG + 1,),
            "logit_slope": (NG + 1,),
            "factors": (T, None),
            "alpha": (NG,),
            "delta": (T,),
            "common_loading": (3,),
            "common_factor": (T,),
            "sigma": (T,),
            "treated_quads": (T - 1, 3),
            "trend_quad": (3,),
        }
        for name, shape in shapes.items():
            a = np.asarray(getattr(self, name), dtype=float)
            if a.ndim != len(shape) or any(s is not None and s != d for s, d in zip(shape, a.shape)):
                raise ConfigError(f"calibration field {name} has shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                raise ConfigError(f"calibration field {name} has non-finite entries")
        lo = np.asarray(self.loadings, dtype=float)
        if lo.shape[:1] != (NG,) or lo.shape[2:] != (3,) or lo.shape[1] != np.asarray(self.factors).shape[1]:
            raise ConfigError("loadings must be (N_G, K, 3) with K matching the factors")
        if np.any(np.asarray(self.sigma) < 0):
            raise ConfigError("noise sds must be nonnegative")

    # ---- structural pieces on arbitrary x
    def group_probs(self, x=GRID) -> np.ndarray:
        z = np.asarray(self.logit_intercept)[None, :] + np.multiply.outer(np.asarray(x, float), self.logit_slope)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def true_weights(self, x=GRID) -> np.ndarray:
        """w_g(x), g = 2..N_G+1: a floor-plus-softmax profile normalised to sum to one."""
        NG = self.n_controls
        g = np.arange(2, NG + 2)
        z = np.multiply.outer(np.asarray(x, float), g - NG - 1.0)
        s = np.exp(z)
        s /= s.sum(axis=1, keepdims=True)
        return (0.2 + 0.8 * s) / (0.2 * NG + 0.8)

    def control_loadings(self, x=GRID) -> np.ndarray:
        """lambda(g, x) for control groups: (m, N_G, K)."""
        return _quad(self.loadings, x)

    def factor_path(self, kind) -> np.ndarray:
        F = np.asarray(self.factors, dtype=float).copy()
        if kind == "dgp3":
            F[-1] = F[-2]
        return F

    def cond_means(self, kind: str, x=GRID) -> np.ndarray:
        """E[Y_t(0) | G=g, X=x] on x: (m, G, T)."""
        if kind not in KINDS:
            raise ConfigError(f"unknown dgp {kind!r}")
        x = np.asarray(x, dtype=float)
        T = self.n_periods
        common = np.asarray(self.delta)[None, :] + np.multiply.outer(_quad(self.common_loading, x), self.common_factor)
        if kind == "dgp2":
            out = np.zeros((len(x), self.n_controls + 1, T))
            out[:, 0, :-1] = _quad(self.treated_quads, x)
            out[:, :, -1] = out[:, :, -2] + _quad(self.trend_quad, x)[:, None]
            out[:, 0, :] += self.alpha_treated
            out[:, 1:, :] += np.asarray(self.alpha)[None, :, None]
            return out + common[:, None, :]
        F = self.factor_path(kind)
        lam = self.control_loadings(x)
        ctrl = np.einsum("mgk,tk->mgt", lam, F) + np.asarray(self.alpha)[None, :, None]
        w = self.true_weights(x)
        treated = np.einsum("mg,mgt->mt", w, ctrl)
        out = np.concatenate([treated[:, None, :], ctrl], axis=1)
        return out + common[:, None, :]

    def delta_variance(self, kind: str) -> float:
        """Population Var(Y_T(0) - Y_{T-1}(0)) under X uniform on the grid."""
        m = self.cond_means(kind)
        dm = m[:, :, -1] - m[:, :, -2]
        p = self.group_probs() / len(GRID)
        mean = np.sum(p * dm)
        s2 = self.sigma[-1] ** 2 + self.sigma[-2] ** 2
        return float(np.sum(p * (dm - mean) ** 2) + s2)

    def to_dict(self) -> dict:
        return {k: (np.asarray(v).tolist() if isinstance(v, (list, np.ndarray)) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Calibration":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError, TypeError) as err:
            raise ConfigError(f"cannot read calibration {path}: {err}") from None

    def equals(self, other) -> bool:
        return json.dumps(self.to_dict(), sort_keys=True) == json.dumps(other.to_dict(), sort_keys=True)


def weight_system_condition(cal: Calibration, x=GRID) -> np.ndarray:
    """Condition number of the true M(x) across x (dgp1 and dgp3 share it)."""
    m = cal.cond_means("dgp1", x)[:, :, :-1]
    M = np.swapaxes(m[:, 1:-1, :] - m[:, -1:, :], 1, 2)
    s = np.linalg.svd(M, compute_uv=False)
    return s[:, 0] / s[:, -1]


def surrogate_calibration(seed: int = 0, n_controls: int = 6, n_periods: int = 6, max_tries: int = 1000) -> Calibration:
    """Deterministic synthetic calibration.

    Group loadings are a diagonal-dominant base (one dominant factor per
    control group, plus the fixed effect as the fifth direction) with small
    quadratic variation in x.  Draws are rejected until the true weight
    system is well conditioned on the grid, every group probability is
    at least 0.08 and the control trends differ by at least 0.3 somewhere.
    """
    NG, T = n_controls, n_periods
    K = NG - 2  # factors plus the fixed effect span the N_G - 1 free directions
    if K < 1 or T < NG:
        raise ConfigError("surrogate calibration needs N_G >= 3 and T >= N_G")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 20240611]))
    for _ in range(max_tries):
        base = np.zeros((NG, K))
        base[: K, :] = 1.5 * np.eye(K)
        loadings = np.zeros((NG, K, 3))
        loadings[:, :, 0] = base + rng.normal(0, 0.2, (NG, K))
        loadings[:, :, 1] = rng.normal(0, 0.5, (NG, K))
        loadings[:, :, 2] = rng.normal(0, 0.5, (NG, K))
        alpha = np.zeros(NG)
        alpha[K] = 1.5
        alpha += rng.normal(0, 0.2, NG)
        factors = rng.normal(0, 1, (T, K))
        factors[-1] = factors[-2] + rng.normal(0, 0.25, K)
        intercept = np.concatenate([[0.6], rng.normal(0, 0.2, NG)])
        slope = rng.uniform(-0.6, 0.6, NG + 1)
        cal = Calibration(
            n_controls=NG,
            n_periods=T,
            logit_intercept=intercept.tolist(),
            logit_slope=slope.tolist(),
            loadings=loadings.tolist(),
            factors=factors.tolist(),
            alpha=alpha.tolist(),
            delta=np.cumsum(rng.normal(0.2, 0.3, T)).tolist(),
            common_loading=rng.normal(0, 0.5, 3).tolist(),
            common_factor=rng.normal(0, 1, T).tolist(),
            sigma=rng.uniform(0.15, 0.3, T).tolist(),
            treated_quads=rng.normal(0, 1, (T - 1, 3)).tolist(),
            trend_quad=rng.normal(0, 1, 3).tolist(),
            alpha_treated=float(rng.normal(0, 1)),
            seed=int(seed),
        )
        dgp1_trend = cal.cond_means("dgp1")
        trend_gap = np.ptp(dgp1_trend[:, 1:, -1] - dgp1_trend[:, 1:, -2], axis=1).min()
        if (
            cal.group_probs().min() >= 0.08
            and weight_system_condition(cal).max() <= 15.0
            and trend_gap >= 0.3
        ):
            return cal
    raise ConfigError(f"no admissible surrogate calibration found for seed {seed}")


# ----------------------------------------------------------------- generator


@dataclass(frozen=True)
class DgpSpec:
    kind: str = "dgp1"
    n: int = 1000
    n_periods: int = 6
    n_controls: int = 6
    calibration: Calibration | str | None = None  # None: surrogate(seed 0); str: JSON path
    effect_scale: float | None = None  # None: sd(ΔY_T(0)) / sd(sin(2 pi X))
    effect_shift: float = 1.0
    noise: float = 1.0  # multiplies every period's noise sd

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dgp {self.kind!r}")
        if self.n < 2 * (self.n_controls + 1):
            raise ConfigError("sample too small for the number of groups")

    def resolve_calibration(self) -> Calibration:
        cal = self.calibration
        if cal is None:
            cal = surrogate_calibration(0, self.n_controls, self.n_periods)
        elif isinstance(cal, (str, Path)):
            cal = Calibration.load(cal)
        if cal.n_controls != self.n_controls or cal.n_periods != self.n_periods:
            raise ConfigError("calibration dimensions do not match the DgpSpec")
        return cal


def effect_scale(cal: Calibration, kind: str) -> float:
    """sd(ΔY_T(0)) / sd(sin(2 pi X)), both in the population."""
    s = np.sin(2 * np.pi * GRID)
    return float(np.sqrt(cal.delta_variance(kind)) / s.std())


def effect_function(cal: Calibration, spec: DgpSpec):
    scale = effect_scale(cal, spec.kind) if spec.effect_scale is None else spec.effect_scale
    return lambda x: scale * np.sin(2 * np.pi * np.asarray(x)) + spec.effect_shift


def population_att(cal: Calibration, spec: DgpSpec) -> float:
    """Exact ATT: the effect averaged over X | G = 1 on the grid."""
    p1 = cal.group_probs()[:, 0]
    return float(np.sum(p1 * effect_function(cal, spec)(GRID)) / p1.sum())


def generate_dgp(spec: DgpSpec, rng=None, calibration: Calibration | None = None):
    """Draw one panel; returns (dataset, population ATT, truth dict)."""
    rng = rng if rng is not None else np.random.default_rng()
    cal = calibration or spec.resolve_calibration()
    n, T = spec.n, spec.n_periods
    xi = rng.integers(0, len(GRID), n)
    x = GRID[xi]
    probs = cal.group_probs()[xi]
    u = rng.random(n)[:, None]
    group = 1 + np.minimum((u > np.cumsum(probs, axis=1)).sum(axis=1), cal.n_controls)
    means = cal.cond_means(spec.kind)
    y0 = means[xi, group - 1, :] + spec.noise * rng.normal(size=(n, T)) * np.asarray(cal.sigma)[None, :]
    tau = effect_function(cal, spec)
    y = y0.copy()
    treated = group == 1
    y[treated, -1] += tau(x[treated])
    labels = ("1",) + tuple(str(g) for g in range(2, cal.n_controls + 2))
    att = population_att(cal, spec)
    truth = {
        "att_population": att,
        "att_sample": float(tau(x[treated]).mean()) if treated.any() else float("nan"),
        "weights_grid": cal.true_weights(),
        "cond_means_grid": means,
        "grid": GRID,
        "calibration": cal,
    }
    ds = PanelDataset(
        unit_ids=np.arange(1, n + 1),
        group=group,
        x=x[:, None],
        discrete=np.zeros((n, 0), dtype=object),
        y=y,
        group_labels=labels,
        periods=tuple(range(1, T + 1)),
        continuous_names=("x",),
    )
    return ds, att, truth


def tag_periods(panel: PanelDataset, rng) -> RepeatedCrossSection:
    """Keep one uniformly drawn period per unit: a repeated cross-section."""
    n, T = panel.y.shape
    t = rng.integers(0, T, n)
    return RepeatedCrossSection(
        y=panel.y[np.arange(n), t],
        group=panel.group,
        time=t + 1,
        x=panel.x,
        discrete=panel.discrete,
        group_labels=panel.group_labels,
        periods=panel.periods,
        continuous_names=panel.continuous_names,
    )


# ---------------------------------------------------------------- monte carlo


@dataclass
class MonteCarloReport:
    kind: str
    n: int
    true_att: float
    bias: float
    sd: float
    coverage: float | None
    median_ci_length: float | None
    reps: int
    B: int
    failures: int
    estimates: np.ndarray = field(repr=False, default=None)
    cis: np.ndarray = field(repr=False, default=None)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dgp": self.kind,
            "n": self.n,
            "true_att": self.true_att,
            "bias": self.bias,
            "sd": self.sd,
            "coverage": self.coverage,
            "median_ci_length": self.median_ci_length,
            "reps": self.reps,
            "B": self.B,
            "failures": self.failures,
            **{k: v for k, v in self.extras.items() if np.isscalar(v) or v is None},
        }

    def table(self) -> str:
        head = f"{'DGP':<6}{'True ATT':>10}{'n':>7}{'Bias':>9}{'SD':>8}{'Coverage':>10}{'CI Length':>11}"
        cov = "" if self.coverage is None else f"{self.coverage:.3f}"
        length = "" if self.median_ci_length is None else f"{self.median_ci_length:.3f}"
        row = f"{self.kind:<6}{self.true_att:>10.3f}{self.n:>7d}{self.bias:>9.3f}{self.sd:>8.3f}{cov:>10}{length:>11}"
        return head + "\n" + row


def default_estimator_config(kind: str, **overrides):
    """dgp2 has no identified weights, so it runs with uniform (pt-only) weights."""
    from .estimator import EstimatorConfig
    from .weights import WeightOptions

    if kind == "dgp2":
        overrides.setdefault("weights", WeightOptions(pt_only=True))
    return EstimatorConfig(**overrides)


def monte_carlo(
    spec: DgpSpec,
    reps: int,
    B: int = 0,
    alpha: float = 0.05,
    seed: int = 0,
    cfg=None,
    multiplier: str = "exponential",
    design: str = "panel",
    diagnostics: bool = False,
    max_failure_rate: float = 0.05,
    progress=None,
) -> MonteCarloReport:
    """Repeated generate -> estimate [-> bootstrap] with per-replication streams.

    ``design="rc"`` tags each simulated panel with one random period per
    unit and runs the repeated cross-section estimator instead.
    """
    from .estimator import estimate_att_panel, estimate_att_rc
    from .inference import bootstrap_att, influence_pt, influence_sc, pooled_variance

    cal = spec.resolve_calibration()
    cfg = cfg or default_estimator_config(spec.kind)
    true_att = population_att(cal, spec)
    est = np.full(reps, np.nan)
    cis = np.full((reps, 2), np.nan)
    v_pt = np.full(reps, np.nan)
    v_sc = np.full(reps, np.nan)
    v_pool = np.full(reps, np.nan)
    failures = 0
    for r in range(reps):
        ss = np.random.SeedSequence([int(seed), r])
        data_seed, fold_seed, boot_seed, tag_seed = ss.generate_state(4)
        rng = np.random.default_rng(data_seed)
        ds, _, _ = generate_dgp(spec, rng, cal)
        rcfg = _with_seed(cfg, int(fold_seed))
        try:
            if design == "rc":
                rc = tag_periods(ds, np.random.default_rng(tag_seed))
                fit = estimate_att_rc(rc, rcfg)
            else:
                fit = estimate_att_panel(ds, rcfg)
            est[r] = fit.theta_hat
            if B:
                res = bootstrap_att(estimate=fit, B=B, alpha=alpha, spec=multiplier, seed=int(boot_seed))
                cis[r] = res.ci
            if diagnostics:
                _, v_pt[r], _ = influence_pt(fit)
                if fit.weights.source == "solved":
                    v_sc[r] = influence_sc(fit)[3]
                if fit.nuisances.m_gt is not None and design != "rc":
                    v_pool[r] = pooled_variance(fit)
        except EstimationError:
            failures += 1
            est[r] = np.nan
            if failures > max_failure_rate * reps:
                raise EstimationError(f"{failures} of {reps} Monte Carlo replications failed") from None
        if progress is not None:
            progress(r)
    ok = np.isfinite(est)
    vals = est[ok]
    extras = {}
    coverage = length = None
    if B:
        c = cis[ok]
        coverage = float(np.mean((c[:, 0] <= true_att) & (true_att <= c[:, 1])))
        length = float(np.median(c[:, 1] - c[:, 0]))
    if diagnostics:
        extras["se_pt_mean"] = float(np.nanmean(np.sqrt(v_pt / spec.n)))
        extras["se_sc_mean"] = float(np.nanmean(np.sqrt(v_sc / spec.n))) if np.isfinite(v_sc).any() else None
        extras["v_pt"] = v_pt
        extras["v_sc"] = v_sc
        extras["v_pool"] = v_pool
    return MonteCarloReport(
        kind=spec.kind,
        n=spec.n,
        true_att=true_att,
        bias=float(vals.mean() - true_att),
        sd=float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
        coverage=coverage,
        median_ci_length=length,
        reps=reps,
        B=B,
        failures=failures,
        estimates=est,
        cis=cis if B else None,
        extras=extras,
    )


def _with_seed(cfg, seed):
    from dataclasses import replace

    return replace(cfg, seed=seed)
