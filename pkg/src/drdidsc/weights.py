"""Synthetic control weight functions.

At a covariate value x the pre-treatment surfaces give the linear system
``M w0 = m1`` with rows t = 1..T-1,

    M[t, g] = m_{g+2,t}(x) - m_{N_G+1,t}(x)      (g = 0..N_G-2)
    m1[t]   = m_{1,t}(x)   - m_{N_G+1,t}(x)

and the last control weight is the complement ``1 - sum(w0)``.  Repeated
cross-sections use mu_{g,t} in place of m_{g,t}; the 1/lambda_t factors are
common to both sides and cancel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SingularSystem, Underidentified


@dataclass(frozen=True)
class WeightOptions:
    min_eig_floor: float = 1e-8
    ridge: float | None = None
    nonneg: bool = False
    allow_partial: bool = False
    pt_only: bool = False
    fixed: tuple | None = None

    def __post_init__(self):
        if self.min_eig_floor < 0:
            raise ConfigError("min_eig_floor must be nonnegative")
        if self.ridge is not None and self.ridge < 0:
            raise ConfigError("ridge must be nonnegative")


@dataclass
class WeightSolution:
    w: np.ndarray
    w0: np.ndarray
    min_eig: float
    residual: float


@dataclass
class WeightSurface:
    """Per-observation control weights ``w[:, g-2]`` for g = 2..N_G+1."""

    w: np.ndarray
    failed: np.ndarray
    min_eig: np.ndarray
    residual: np.ndarray
    n_points: int
    n_failed_points: int = 0
    source: str = "solved"
    notes: list = field(default_factory=list)

    def full(self) -> np.ndarray:
        """Weights with the treated-group convention w_1 = 1 prepended."""
        return np.column_stack([np.ones(len(self.w)), self.w])

    def summary(self) -> dict:
        ok = ~self.failed
        w = self.w[ok]
        out = {
            "source": self.source,
            "mean": w.mean(axis=0).tolist() if len(w) else [],
            "min": w.min(axis=0).tolist() if len(w) else [],
            "max": w.max(axis=0).tolist() if len(w) else [],
            "failed_points": self.n_failed_points,
        }
        eig = self.min_eig[ok & np.isfinite(self.min_eig)]
        if eig.size:
            out["min_eig_quantiles"] = np.quantile(eig, [0.0, 0.25, 0.5, 0.75, 1.0]).tolist()
        return out


def build_system(surface, x=None, mode: str = "panel"):
    """(M, m1) from group-by-period surface values.

    ``surface`` is either a NuisanceSurface (``x`` then indexes an
    observation) or an array of shape (..., G, T) of m_{g,t}(x) values.
    """
    if mode not in ("panel", "rc"):
        raise ConfigError(f"unknown mode {mode!r}")
    m = surface.m_gt[x] if hasattr(surface, "m_gt") else np.asarray(surface, dtype=float)
    pre = m[..., :, :-1]
    last = pre[..., -1:, :]
    M = np.swapaxes(pre[..., 1:-1, :] - last, -1, -2)
    m1 = pre[..., 0, :] - last[..., 0, :]
    return M, m1


def _exact_complement(w0):
    """Append 1 - sum(w0) so that every row sums to exactly one in floating point.

    Nudging the last entry alone cannot always hit 1.0 (its grid spacing can
    straddle it), so the free weights are first snapped to a common
    power-of-two grid fine enough to move them by at most ~1e-14 relative.
    On that grid every partial sum, and the complement, is exact.
    """
    w0 = np.asarray(w0, dtype=float)
    bound = np.abs(w0).sum(axis=-1, keepdims=True) + 1.0
    finite = np.isfinite(bound)
    e = np.ceil(np.log2(np.where(finite, bound, 1.0)))
    q = np.exp2(e - 48)
    snapped = np.where(finite, np.round(w0 / q) * q, w0)
    return np.concatenate([snapped, 1.0 - snapped.sum(axis=-1, keepdims=True)], axis=-1)


def _simplex_ls(A, b):
    """min ||A w - b|| over the probability simplex."""
    from scipy.optimize import nnls

    k = A.shape[1]
    kappa = 1e3 * (np.abs(A).max() + np.abs(b).max() + 1.0)
    Aa = np.vstack([A, kappa * np.ones((1, k))])
    ba = np.concatenate([b, [kappa]])
    w, _ = nnls(Aa, ba, maxiter=50 * k)
    s = w.sum()
    return w / s if s > 0 else np.full(k, 1.0 / k)


def solve_batch(M, m1, opts: WeightOptions | None = None):
    """Vectorised solve over a stack of systems.

    Returns full weights (E, N_G), min_eig (E,), residual (E,) and a mask of
    systems whose M'M falls below the floor ``c * ||M||_2^2``.
    """
    opts = opts or WeightOptions()
    M = np.asarray(M, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    E, Tm1, K = M.shape
    if Tm1 < K:
        raise Underidentified(f"T-1={Tm1} pre-periods for N_G-1={K} free weights; T must be at least N_G")
    if K == 0:
        w = np.ones((E, 1))
        return w, np.full(E, np.inf), np.linalg.norm(m1, axis=1), np.zeros(E, dtype=bool)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    smax = s[:, 0]
    min_eig = s[:, -1] ** 2
    failed = (smax == 0) | (min_eig <= opts.min_eig_floor * smax**2) | ~np.isfinite(min_eig)
    proj = np.einsum("etk,et->ek", U, m1)
    if opts.ridge:
        lam = opts.ridge * smax[:, None] ** 2
        inv = s / (s * s + lam)
        failed = (smax == 0) | ~np.isfinite(min_eig)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(failed[:, None], 0.0, 1.0 / s)
    w0 = np.einsum("eki,ek->ei", Vt, inv * proj)
    if opts.nonneg:
        # columns m_g - m_last for the free groups, zero for the last group
        A = np.concatenate([M, np.zeros((E, Tm1, 1))], axis=2)
        for e in np.flatnonzero(~failed):
            full = _simplex_ls(A[e], m1[e])
            w0[e] = full[:-1]
    residual = np.linalg.norm(np.einsum("etk,ek->et", M, w0) - m1, axis=1)
    w = _exact_complement(w0)
    w[failed] = np.nan
    return w, min_eig, residual, failed


def solve_weights(M, m1, opts: WeightOptions | None = None) -> WeightSolution:
    """Least-squares weights at a single covariate value."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    m1 = np.asarray(m1, dtype=float).reshape(-1)
    if M.shape[0] != m1.shape[0]:
        M = M.reshape(m1.shape[0], -1)
    w, eig, res, failed = solve_batch(M[None], m1[None], opts)
    if failed[0]:
        raise SingularSystem(f"min eigenvalue of M'M is {eig[0]:.3g}, below the floor")
    return WeightSolution(w=w[0], w0=w[0, :-1], min_eig=float(eig[0]), residual=float(res[0]))


def weight_surface(surface, dataset=None, folds=None, mode: str = "panel", opts: WeightOptions | None = None) -> WeightSurface:
    """Solve at every distinct (fold, stratum, x) evaluation point and broadcast."""
    opts = opts or WeightOptions()
    n = len(surface.point_id)
    G = surface.m_gt.shape[1] if surface.m_gt is not None else (dataset.n_groups if dataset is not None else None)
    if opts.pt_only or opts.fixed is not None:
        NG = G - 1
        if opts.fixed is not None:
            w_fixed = np.asarray(opts.fixed, dtype=float)
            if w_fixed.shape != (NG,):
                raise ConfigError(f"fixed weights need {NG} entries")
            if not np.isclose(w_fixed.sum(), 1.0, atol=1e-12):
                raise ConfigError("fixed weights must sum to one")
            w_fixed = _exact_complement(w_fixed[None, :-1])[0] if NG > 1 else np.ones(1)
        else:
            w_fixed = _exact_complement(np.full((1, NG - 1), 1.0 / NG))[0] if NG > 1 else np.ones(1)
        W = np.broadcast_to(w_fixed, (n, NG)).copy()
        nan = np.full(n, np.nan)
        return WeightSurface(W, np.zeros(n, dtype=bool), nan, nan, surface.n_points, source="fixed" if opts.fixed is not None else "uniform")
    M, m1 = build_system(surface.m_gt[surface.point_rep], mode=mode)
    w, eig, res, failed = solve_batch(M, m1, opts)
    n_bad = int(failed.sum())
    if n_bad:
        frac = n_bad / len(failed)
        msg = f"weight system singular at {n_bad} of {len(failed)} evaluation points"
        if frac > 0.5 or not opts.allow_partial:
            raise SingularSystem(msg)
    pid = surface.point_id
    ws = WeightSurface(w[pid], failed[pid], eig[pid], res[pid], len(failed), n_bad)
    if n_bad:
        ws.notes.append(msg + f"; {int(ws.failed.sum())} observation(s) dropped")
    return ws
