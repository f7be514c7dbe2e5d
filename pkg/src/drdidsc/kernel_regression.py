"""Weighted local polynomial least squares.

Fits are organised around :class:`LocalPolyPlan`, which caches everything
that depends only on covariate positions and the bandwidth (kernel weights
and the polynomial basis, after collapsing tied training points).  Applying
a plan to a new vector of sample weights costs two matrix products and one
batched small solve, which is what makes the multiplier bootstrap cheap:
every replication reuses the plans of the point estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .errors import BandwidthRequired, ConfigError, DegenerateCovariate, SingularLocalDesign

_MAX_CACHE_ENTRIES = 20_000_000
_HADAMARD_FLOOR = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind not in ("gaussian", "epanechnikov"):
            raise ConfigError(f"unknown kernel {self.kind!r}")

    def __call__(self, u):
        """Product kernel at standardised offsets ``u`` of shape (..., d)."""
        u = np.asarray(u, dtype=float)
        if self.kind == "gaussian":
            return np.exp(-0.5 * np.sum(u * u, axis=-1)) / (2 * np.pi) ** (u.shape[-1] / 2)
        k = np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)
        return np.prod(k, axis=-1)

    def scaled(self, u, h):
        """K_h(u) = K(u / h) / h for scalar offsets."""
        u = np.asarray(u, dtype=float)
        return self(u[..., None] / h) / h


@dataclass(frozen=True)
class LocalPolyConfig:
    order: int = 1
    bandwidth: float | str = "auto"
    kernel: KernelSpec = field(default_factory=KernelSpec)
    ridge_eps: float = 1e-10
    bandwidth_constant: float = 1.06
    r_max: float = 50.0

    def __post_init__(self):
        if not 0 <= self.order <= 3:
            raise ConfigError("local polynomial order must be in 0..3")
        if self.bandwidth != "auto":
            if not np.all(np.asarray(self.bandwidth, dtype=float) > 0):
                raise ConfigError("fixed bandwidth must be positive")
        if self.ridge_eps < 0:
            raise ConfigError("ridge_eps must be nonnegative")
        if isinstance(self.kernel, str):
            object.__setattr__(self, "kernel", KernelSpec(self.kernel))


@dataclass
class FitSurface:
    eval_points: np.ndarray
    estimates: np.ndarray
    effective_n: np.ndarray
    bandwidth: np.ndarray
    clamped: np.ndarray | None = None
    coefficients: np.ndarray | None = None

    @property
    def n_clamped(self) -> int:
        return 0 if self.clamped is None else int(self.clamped.sum())


def auto_bandwidth(x_obs, n: int | None = None, constant: float = 1.06):
    """Undersmoothed rule of thumb ``c * sd(x) * n**(-1/3.5)``.

    A pilot of order ``n**(-1/5)`` rescaled by ``n**(1/5 - 1/3.5)``.  Vector
    covariates get one bandwidth per coordinate.
    """
    x = np.asarray(x_obs, dtype=float)
    x = x.reshape(len(x), -1)
    n = len(x) if n is None else n
    if len(x) < 2:
        raise DegenerateCovariate("need at least two observations to pick a bandwidth")
    sd = x.std(axis=0, ddof=1)
    if np.any(sd <= 0) or not np.all(np.isfinite(sd)):
        raise DegenerateCovariate("covariate has zero dispersion; bandwidth undefined")
    h = constant * sd * float(n) ** (-1 / 3.5)
    return float(h[0]) if h.size == 1 else h


def _as_2d(x, d=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if d != 0 else x.reshape(len(x), 0)
    return x


def _unique_rows(x):
    if x.shape[1] == 0:
        return np.zeros((1, 0)), np.zeros(len(x), dtype=np.int64)
    if x.shape[1] == 1:
        u, inv = np.unique(x[:, 0], return_inverse=True)
        return u[:, None], inv.reshape(-1)
    u, inv = np.unique(x, axis=0, return_inverse=True)
    return u, inv.reshape(-1)


def _exponents(d, order):
    """Monomial exponent tuples of total degree <= order (constant first)."""
    terms = [()]
    for k in range(1, order + 1):
        terms.extend(combinations_with_replacement(range(d), k))
    return terms


class LocalPolyPlan:
    """Cached kernel/basis products for one (training x, eval points, h) triple.

    Training points with identical covariates are pooled, so designs on a
    finite grid cost O(grid^2) per fit regardless of sample size.
    """

    def __init__(self, x_obs, eval_points, h, order=1, kernel: KernelSpec | None = None):
        kernel = kernel or KernelSpec()
        x_obs = _as_2d(x_obs)
        d = x_obs.shape[1]
        if d == 0:
            ev = np.asarray(eval_points, dtype=float)
            eval_points = np.zeros((ev.shape[0] if ev.ndim else 1, 0))
        else:
            eval_points = _as_2d(eval_points, d).reshape(-1, d)
        self.d = d
        self.order = order if d > 0 else 0
        self.kernel = kernel
        self.h = np.broadcast_to(np.asarray(h, dtype=float), (d,)).copy() if d else np.zeros(0)
        self.eval_points = eval_points
        self._k0 = float(kernel(np.zeros((1, d)))[0]) if d else 1.0
        self.ux, self.inv = _unique_rows(x_obs)
        self.n_obs = len(x_obs)
        self.terms = _exponents(d, self.order)
        self.P = len(self.terms)
        E, U, P = len(eval_points), len(self.ux), self.P
        self._chunks = []
        step = max(1, _MAX_CACHE_ENTRIES // max(1, U * P * P))
        self._cache = E * U * P * P <= 4 * _MAX_CACHE_ENTRIES
        for start in range(0, E, step):
            sl = slice(start, min(E, start + step))
            self._chunks.append((sl, self._build(sl) if self._cache else None))

    def _build(self, sl):
        ev = self.eval_points[sl]
        E, U, P = len(ev), len(self.ux), self.P
        if self.d == 0:
            K = np.ones((E, U))
            B = np.ones((E, U, 1))
        else:
            u = (self.ux[None, :, :] - ev[:, None, :]) / self.h
            K = self.kernel(u)
            B = np.empty((E, U, P))
            for p, term in enumerate(self.terms):
                col = np.ones((E, U))
                for j in term:
                    col = col * u[:, :, j]
                B[:, :, p] = col
        KB = K[:, :, None] * B
        gram_op = (KB[:, :, :, None] * B[:, :, None, :]).transpose(0, 2, 3, 1).reshape(E * P * P, U)
        rhs_op = KB.transpose(0, 2, 1).reshape(E * P, U)
        return np.ascontiguousarray(gram_op), np.ascontiguousarray(rhs_op)

    def pool(self, weights, responses=None):
        """Sum weights (and weighted responses) over tied training points."""
        U = len(self.ux)
        w = np.asarray(weights, dtype=float)
        agg_w = np.bincount(self.inv, weights=w, minlength=U)
        if responses is None:
            return agg_w, None
        Y = np.asarray(responses, dtype=float)
        Y = Y.reshape(len(Y), -1)
        wy = w[:, None] * Y
        agg_y = np.empty((U, Y.shape[1]))
        for r in range(Y.shape[1]):
            agg_y[:, r] = np.bincount(self.inv, weights=wy[:, r], minlength=U)
        return agg_w, agg_y

    def moments(self, agg_gram, agg_rhs):
        """Gram matrices (E, P, P) and right-hand sides (E, P, R)."""
        E, P = len(self.eval_points), self.P
        R = agg_rhs.shape[1]
        gram = np.empty((E, P, P))
        rhs = np.empty((E, P, R))
        for sl, ops in self._chunks:
            if ops is None:
                ops = self._build(sl)
            gram_op, rhs_op = ops
            m = sl.stop - sl.start
            gram[sl] = (gram_op @ agg_gram).reshape(m, P, P)
            rhs[sl] = (rhs_op @ agg_rhs).reshape(m, P, R)
        return gram, rhs

    def kernel_mass_scale(self, agg_w):
        return np.abs(agg_w).sum() * self._k0


def regularize(gram, ridge_eps, mass_floor):
    """Copy of ``gram`` made safe to invert, and a mask of unusable systems.

    Systems with no kernel mass are replaced by the identity and flagged.
    A trace-scaled ridge is added only where the Hadamard ratio
    det(G) / prod(diag(G)) signals near-singularity, so well-posed fits are
    solved exactly.
    """
    P = gram.shape[-1]
    mass = gram[:, 0, 0]
    singular = ~np.isfinite(mass) | (mass <= mass_floor)
    g = gram.copy()
    g[singular] = np.eye(P)
    if ridge_eps > 0 and P > 1:
        diag = np.abs(np.diagonal(g, axis1=1, axis2=2))
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            hadamard = np.abs(np.linalg.det(g)) / np.prod(diag, axis=1)
        weak = ~(hadamard > _HADAMARD_FLOOR)
        if weak.any():
            tr = np.abs(np.trace(g[weak], axis1=1, axis2=2)) / P
            idx = np.arange(P)
            g[np.ix_(np.flatnonzero(weak), idx, idx)] += tr[:, None, None] * ridge_eps * np.eye(P)
    return g, singular


def _batched_solve(g, rhs, singular):
    try:
        beta = np.linalg.solve(g, rhs)
    except np.linalg.LinAlgError:
        beta = np.empty(np.broadcast_shapes(rhs.shape, g.shape[:-1] + rhs.shape[-1:]))
        for e in range(len(g)):
            try:
                beta[e] = np.linalg.solve(g[e], rhs[e])
            except np.linalg.LinAlgError:
                singular[e] = True
                beta[e] = np.nan
    singular |= ~np.all(np.isfinite(beta.reshape(len(beta), -1)), axis=1)
    return beta, singular


def solve_local(gram, rhs, ridge_eps, mass_floor):
    """Ridge-stabilised batched solve; returns coefficients and a singular mask."""
    g, singular = regularize(gram, ridge_eps, mass_floor)
    return _batched_solve(g, rhs, singular)


def intercept_rows(gram, ridge_eps, mass_floor):
    """First row of each (regularised) inverse Gram: the intercept functional.

    ``intercept = row @ rhs`` for any right-hand side, which lets many fits
    share one batched factorisation.
    """
    P = gram.shape[-1]
    g, singular = regularize(gram, ridge_eps, mass_floor)
    e1 = np.zeros((len(g), P, 1))
    e1[:, 0, 0] = 1.0
    row, singular = _batched_solve(np.swapaxes(g, 1, 2), e1, singular)
    return row[:, :, 0], singular


def _resolve_bandwidth(x_obs, cfg: LocalPolyConfig, bandwidth):
    if bandwidth is not None:
        return bandwidth
    if cfg.bandwidth == "auto":
        raise BandwidthRequired("auto bandwidth requested; compute it with auto_bandwidth first")
    return cfg.bandwidth


def local_poly_fit(x_obs, y_obs, sample_weights, eval_points, cfg: LocalPolyConfig | None = None, bandwidth=None):
    """Local polynomial estimate of E[y | x] at each evaluation point.

    ``y_obs`` may be a matrix; every column is fit with the same kernel
    weights.  ``sample_weights`` multiply the kernel weights (bootstrap
    multipliers enter here).
    """
    cfg = cfg or LocalPolyConfig()
    x_obs = _as_2d(x_obs)
    y = np.asarray(y_obs, dtype=float)
    w = np.ones(len(x_obs)) if sample_weights is None else np.asarray(sample_weights, dtype=float)
    if not (len(x_obs) == len(y) == len(w)):
        raise ConfigError("x_obs, y_obs and sample_weights must have equal length")
    h = _resolve_bandwidth(x_obs, cfg, bandwidth) if x_obs.shape[1] else 1.0
    plan = LocalPolyPlan(x_obs, eval_points, h, cfg.order, cfg.kernel)
    return fit_with_plan(plan, w, y, cfg.ridge_eps)


def fit_with_plan(plan: LocalPolyPlan, weights, responses, ridge_eps=1e-10, tag=None) -> FitSurface:
    squeeze = np.ndim(responses) == 1
    agg_w, agg_y = plan.pool(weights, responses)
    gram, rhs = plan.moments(agg_w, agg_y)
    floor = 1e-14 * plan.kernel_mass_scale(agg_w)
    beta, singular = solve_local(gram, rhs, ridge_eps, floor)
    if singular.any():
        tag = tag or {}
        raise SingularLocalDesign(
            f"local design singular at {int(singular.sum())} of {len(singular)} evaluation point(s)", **tag
        )
    est = beta[:, 0, :]
    return FitSurface(
        eval_points=plan.eval_points,
        estimates=est[:, 0] if squeeze else est,
        effective_n=gram[:, 0, 0],
        bandwidth=plan.h,
        coefficients=beta,
    )


def ratio_with_plan(plan: LocalPolyPlan, weights_g, weights_1, ridge_eps=1e-10, r_max=50.0, tag=None) -> FitSurface:
    """Ratio fit given pooled plan weights for group g (Gram) and group 1 (rhs)."""
    agg_g, _ = plan.pool(weights_g)
    agg_1, _ = plan.pool(weights_1)
    gram, rhs = plan.moments(agg_g, agg_1[:, None])
    floor = 1e-14 * plan.kernel_mass_scale(agg_g)
    beta, singular = solve_local(gram, rhs, ridge_eps, floor)
    if singular.any():
        tag = tag or {}
        raise SingularLocalDesign(
            f"no comparison-group mass at {int(singular.sum())} of {len(singular)} evaluation point(s)", **tag
        )
    raw = beta[:, 0, 0]
    est = np.clip(raw, 0.0, r_max)
    return FitSurface(
        eval_points=plan.eval_points,
        estimates=est,
        effective_n=gram[:, 0, 0],
        bandwidth=plan.h,
        clamped=est != raw,
        coefficients=beta[:, :, 0],
    )


def local_poly_ratio_fit(
    x_obs, g1_indicator, gg_indicator, sample_weights, eval_points, cfg: LocalPolyConfig | None = None, bandwidth=None
):
    """Local polynomial estimate of p_1(x) / p_g(x).

    Minimises the kernel-weighted quadratic loss ``r^2 1{G=g} - 2 r 1{G=1}``
    over local polynomials; the first-order condition is the linear system
    ``sum w K 1{G=g} b b' beta = sum w K 1{G=1} b``.  The intercept is
    clamped to ``[0, r_max]``.
    """
    cfg = cfg or LocalPolyConfig()
    x_obs = _as_2d(x_obs)
    g1 = np.asarray(g1_indicator, dtype=float)
    gg = np.asarray(gg_indicator, dtype=float)
    if np.any((g1 > 0) & (gg > 0)):
        raise ConfigError("group indicators must be disjoint")
    w = np.ones(len(x_obs)) if sample_weights is None else np.asarray(sample_weights, dtype=float)
    h = _resolve_bandwidth(x_obs, cfg, bandwidth) if x_obs.shape[1] else 1.0
    plan = LocalPolyPlan(x_obs, eval_points, h, cfg.order, cfg.kernel)
    return ratio_with_plan(plan, w * gg, w * g1, cfg.ridge_eps, cfg.r_max)


def normal_equation_residual(plan: LocalPolyPlan, weights_g, weights_1, coefficients):
    """Scaled residual of the ratio first-order condition at each eval point."""
    agg_g, _ = plan.pool(weights_g)
    agg_1, _ = plan.pool(weights_1)
    gram, rhs = plan.moments(agg_g, agg_1[:, None])
    res = np.einsum("epq,eq->ep", gram, coefficients) - rhs[:, :, 0]
    return np.linalg.norm(res, axis=1) / gram[:, 0, 0]
