"""Multiplier bootstrap and plug-in influence-function diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BootstrapFailure, ConfigError, EstimationError, SingularSystem
from .estimator import AttEstimate, EstimatorConfig, estimate_att_panel
from .weights import build_system

MULTIPLIERS = ("exponential", "mammen", "normal_shift")

_SQ5 = np.sqrt(5.0)
# Mammen two-point law (mean 0, variance 1), shifted by one
MAMMEN_POINTS = (1.0 - (_SQ5 - 1.0) / 2.0, 1.0 + (_SQ5 + 1.0) / 2.0)
MAMMEN_PROBS = ((_SQ5 + 1.0) / (2.0 * _SQ5), (_SQ5 - 1.0) / (2.0 * _SQ5))


@dataclass(frozen=True)
class MultiplierSpec:
    dist: str = "exponential"

    def __post_init__(self):
        if self.dist not in MULTIPLIERS + ("constant",):
            raise ConfigError(f"unknown multiplier distribution {self.dist!r}")


@dataclass
class BootstrapResult:
    theta_hat: float
    draws: np.ndarray
    B: int
    alpha: float
    ci: tuple
    seed: int
    dist: str
    failures: int = 0
    retries: int = 0

    def summary(self) -> dict:
        d = self.draws[np.isfinite(self.draws)]
        q = np.quantile(d, [0.05, 0.25, 0.5, 0.75, 0.95]) if d.size else [np.nan] * 5
        return {
            "ci": list(self.ci),
            "alpha": self.alpha,
            "B": self.B,
            "dist": self.dist,
            "seed": self.seed,
            "failures": self.failures,
            "retries": self.retries,
            "sd": float(d.std(ddof=1)) if d.size > 1 else None,
            "draws_summary": dict(zip(["q05", "q25", "q50", "q75", "q95"], map(float, q))),
        }


def multiplier_rng(seed: int, index: int, attempt: int = 0) -> np.random.Generator:
    """Independent stream for replication ``index`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), int(attempt)]))


def draw_multipliers(n: int, spec: MultiplierSpec | str = "exponential", rng=None) -> np.ndarray:
    """iid mean-one, variance-one multipliers."""
    spec = MultiplierSpec(spec) if isinstance(spec, str) else spec
    rng = rng if rng is not None else np.random.default_rng()
    if spec.dist == "exponential":
        return rng.exponential(1.0, n)
    if spec.dist == "mammen":
        hi = rng.random(n) < MAMMEN_PROBS[1]
        return np.where(hi, MAMMEN_POINTS[1], MAMMEN_POINTS[0])
    if spec.dist == "normal_shift":
        return 1.0 + rng.standard_normal(n)
    return np.ones(n)


def percentile_ci(theta_hat, draws, alpha):
    """[theta - q_{1-a/2}, theta - q_{a/2}] from draws of theta* - theta."""
    d = np.asarray(draws, dtype=float)
    d = d[np.isfinite(d)]
    lo, hi = np.quantile(d, [alpha / 2.0, 1.0 - alpha / 2.0], method="linear")
    return (float(theta_hat - hi), float(theta_hat - lo))


def bootstrap_att(
    dataset=None,
    cfg: EstimatorConfig | None = None,
    B: int = 500,
    alpha: float = 0.05,
    spec: MultiplierSpec | str = "exponential",
    seed: int = 0,
    estimate: AttEstimate | None = None,
    max_failure_rate: float = 0.05,
) -> BootstrapResult:
    """Multiplier bootstrap of theta-hat.

    Every replication refits all nuisances and weights with the multipliers
    as extra sample weights, reusing the point estimate's folds and
    bandwidths.  A failed replication is retried once with a fresh stream.
    """
    spec = MultiplierSpec(spec) if isinstance(spec, str) else spec
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    if B < 1:
        raise ConfigError("need at least one bootstrap replication")
    if estimate is None:
        estimate = estimate_att_panel(dataset, cfg)
    pipe = estimate.pipeline
    n = pipe.n_source
    theta = estimate.theta_hat
    draws = np.full(B, np.nan)
    failures = retries = 0
    for b in range(B):
        for attempt in range(2):
            W = draw_multipliers(n, spec, multiplier_rng(seed, b, attempt))
            try:
                draws[b] = pipe.run(W)[0] - theta
                break
            except EstimationError:
                if attempt == 0:
                    retries += 1
        else:
            failures += 1
            if failures > max_failure_rate * B:
                raise BootstrapFailure(f"{failures} of {B} bootstrap replications failed")
    ci = percentile_ci(theta, draws, alpha)
    return BootstrapResult(theta, draws, B, alpha, ci, seed, spec.dist, failures, retries)


# -------------------------------------------------------------- diagnostics


@dataclass
class InfluenceDiagnostics:
    psi_pt: np.ndarray
    v_pt: float
    v_pt_decomposed: float | None = None
    psi1: np.ndarray | None = None
    psi2: np.ndarray | None = None
    v_sc: float | None = None
    v_pool: float | None = None
    notes: list = field(default_factory=list)

    def to_dict(self, n=None) -> dict:
        out = {"v_pt": self.v_pt, "v_pt_decomposed": self.v_pt_decomposed, "v_sc": self.v_sc, "v_pool": self.v_pool}
        if n:
            for k in ("v_pt", "v_sc", "v_pool"):
                v = out[k]
                out["se_" + k[2:]] = None if v is None else float(np.sqrt(v / n))
        if self.notes:
            out["notes"] = self.notes
        return out


def _ratio_shares(r1g, r_max):
    """p_1 and 1/p_g reconstructed from the ratios r_{1g} = p_1 / p_g."""
    r = np.clip(r1g[:, 1:], 1.0 / r_max, r_max)
    p1 = 1.0 / (1.0 + np.sum(1.0 / r, axis=1))
    inv_pg = r / p1[:, None]
    return p1, inv_pg


def _parts(est: AttEstimate):
    data = est.pipeline.data
    nuis = est.nuisances
    keep = est.kept if est.kept is not None else np.ones(data.n, dtype=bool)
    return data, nuis, keep


def influence_pt(est: AttEstimate, dataset=None, nuisances=None, theta_hat=None, pi1_hat=None):
    """psi_PT = phi - theta G_1 / pi_1 and V_PT, directly and in decomposed form."""
    data, nuis, keep = _parts(est)
    theta = est.theta_hat if theta_hat is None else theta_hat
    pi1 = est.pi1_hat if pi1_hat is None else pi1_hat
    g1 = (data.group == 1).astype(float)
    psi = np.where(keep, est.per_obs_moment - theta * g1 / pi1, 0.0)
    n_eff = int(keep.sum())
    v_pt = float(np.sum(psi**2) / n_eff)
    v_dec = None
    if nuis.m_gt is not None and est.design != "rc":
        dy = data.delta_y
        md = nuis.m_delta
        m1d = nuis.group_delta()[:, 0]
        w = np.nan_to_num(est.weights.w)
        ctrl = data.group > 1
        gi = np.clip(data.group - 2, 0, None)
        rows = np.arange(data.n)
        term3 = np.where(ctrl, (w[rows, gi] * nuis.r1g[rows, gi + 1]) ** 2 * (dy - md) ** 2, 0.0)
        terms = g1 * (dy - m1d) ** 2 + g1 * (m1d - md - theta) ** 2 + term3
        v_dec = float(np.sum(terms[keep]) / n_eff / pi1**2)
    return psi, v_pt, v_dec


def influence_sc(est: AttEstimate, min_eig_floor: float | None = None):
    """Plug-in adjustments psi_1, psi_2 for estimated weights; returns (psi1, psi2, psi_sc, V_SC)."""
    data, nuis, keep = _parts(est)
    if est.design == "rc":
        raise ConfigError("weight-estimation adjustments are implemented for panel designs")
    if nuis.m_gt is None:
        raise ConfigError("outcome surfaces unavailable (pt-only estimate); no weight adjustment applies")
    cfg = est.pipeline.cfg
    floor = cfg.weights.min_eig_floor if min_eig_floor is None else min_eig_floor
    r_max = cfg.poly.r_max
    pi1 = est.pi1_hat
    n, G, T = nuis.m_gt.shape
    NG = G - 1
    group = data.group
    y = data.y
    md = nuis.m_delta
    mgd = nuis.group_delta()
    r = nuis.r1g
    w = np.nan_to_num(est.weights.w)
    g1 = (group == 1).astype(float)

    # psi_1: first-order effect of the ratio and group-trend surfaces
    onehot = np.zeros((n, G))
    onehot[np.arange(n), group - 1] = 1.0
    inner = g1[:, None] - r[:, 1:] * onehot[:, 1:]
    psi1 = -np.sum(w * inner * (mgd[:, 1:] - md[:, None]), axis=1) / pi1

    # psi_2: first-order effect of estimating w_0 through M and m_1
    p1, inv_pg = _ratio_shares(r, r_max)
    u = p1[:, None] * (mgd[:, 1:] - md[:, None])
    psi2 = np.zeros(n)
    if NG > 1 and est.weights.source == "solved":
        M, m1 = build_system(nuis.m_gt)
        MtM = np.einsum("ntk,ntj->nkj", M, M)
        eig = np.linalg.eigvalsh(MtM)
        smax2 = eig[:, -1]
        bad = (eig[:, 0] <= floor * smax2) & keep
        if bad.any():
            raise SingularSystem(f"M'M below the floor at {int(bad.sum())} observation(s)")
        # A(S) and a_1(S): Bahadur terms of the group-period surfaces
        inv_p = np.column_stack([1.0 / p1, inv_pg])
        resid = (y[:, None, :-1] - nuis.m_gt[:, :, :-1]) * (onehot * inv_p)[:, :, None]
        last = resid[:, -1, :]
        A = np.swapaxes(resid[:, 1:-1, :] - last[:, None, :], 1, 2)
        a1 = resid[:, 0, :] - last
        safe = np.where(keep[:, None, None], MtM, np.eye(NG - 1))
        w0 = np.linalg.solve(safe, np.einsum("ntk,nt->nk", M, m1)[..., None])[..., 0]
        P1 = np.einsum("ntk,nt->nk", M, a1)
        P2 = np.einsum("ntk,nt->nk", A, m1)
        S = np.einsum("ntk,ntj->nkj", A, M) + np.einsum("ntk,ntj->nkj", M, A)
        P3 = -np.einsum("nkj,nj->nk", S, w0)
        P = np.linalg.solve(safe, (P1 + P2 + P3)[..., None])[..., 0]
        full = np.concatenate([P, -P.sum(axis=1, keepdims=True)], axis=1)
        psi2 = -np.sum(u * full, axis=1) / pi1
    psi1 = np.where(keep, psi1, 0.0)
    psi2 = np.where(keep, psi2, 0.0)
    psi_pt, _, _ = influence_pt(est)
    psi_sc = psi_pt + psi1 + psi2
    v_sc = float(np.sum(psi_sc**2) / keep.sum())
    return psi1, psi2, psi_sc, v_sc


def pooled_variance(est: AttEstimate, theta_hat=None) -> float:
    """V_pool: the decomposed V_PT with control shares p_g / p_{-1} as weights."""
    data, nuis, keep = _parts(est)
    if nuis.m_gt is None or est.design == "rc":
        raise ConfigError("pooled variance needs panel outcome surfaces")
    theta = est.theta_hat if theta_hat is None else theta_hat
    pi1 = est.pi1_hat
    r = np.clip(nuis.r1g[:, 1:], 1.0 / est.pipeline.cfg.poly.r_max, est.pipeline.cfg.poly.r_max)
    inv = 1.0 / r
    shares = inv / inv.sum(axis=1, keepdims=True)
    dy, md = data.delta_y, nuis.m_delta
    m1d = nuis.group_delta()[:, 0]
    g1 = (data.group == 1).astype(float)
    ctrl = data.group > 1
    gi = np.clip(data.group - 2, 0, None)
    rows = np.arange(data.n)
    rr = nuis.r1g[rows, gi + 1]
    term3 = np.where(ctrl, (shares[rows, gi] * rr) ** 2 * (dy - md) ** 2, 0.0)
    terms = g1 * (dy - m1d) ** 2 + g1 * (m1d - md - theta) ** 2 + term3
    return float(np.sum(terms[keep]) / keep.sum() / pi1**2)


def pool_shares(r1g, r_max=50.0):
    r = np.clip(np.asarray(r1g)[:, 1:], 1.0 / r_max, r_max)
    inv = 1.0 / r
    return inv / inv.sum(axis=1, keepdims=True)


def diagnostics(est: AttEstimate) -> InfluenceDiagnostics:
    """All plug-in variances that apply to the estimate's design."""
    psi, v_pt, v_dec = influence_pt(est)
    out = InfluenceDiagnostics(psi_pt=psi, v_pt=v_pt, v_pt_decomposed=v_dec)
    if est.design == "rc":
        out.notes.append("weight-estimation adjustments are only implemented for panel designs")
        return out
    if est.nuisances.m_gt is None:
        out.notes.append("pt-only estimate: no outcome surfaces, V_SC and V_pool skipped")
        return out
    try:
        out.psi1, out.psi2, _, out.v_sc = influence_sc(est)
    except SingularSystem as err:
        out.notes.append(f"V_SC unavailable: {err}")
    out.v_pool = pooled_variance(est)
    return out
