"""
Bounded Levenberg-Marquardt least squares with finite-difference Jacobians.

Minimizes ``sum(((y - model(x, **params)) / sigma)**2)`` over the free
parameters. Bounds are enforced by projecting trial points into the box.
"""

from __future__ import annotations

import math

import numpy as np

from ..core import FitResult
from ..errors import ModelDomainError, ValidationError

#: eps**(1/3): optimal relative step for central differences
DEFAULT_REL_STEP = np.finfo(float).eps ** (1.0 / 3.0)


def _step_sizes(p, rel_step):
    return rel_step * np.maximum(np.abs(p), 1e-3)


def numeric_jacobian(fun, p, lo=None, hi=None, rel_step=DEFAULT_REL_STEP):
    """Central-difference Jacobian of ``fun`` (vector -> vector) at ``p``.

    Falls back to a one-sided difference on any coordinate whose central
    stencil would leave ``[lo, hi]``.
    """
    p = np.asarray(p, dtype=float)
    lo = np.full(p.size, -np.inf) if lo is None else np.asarray(lo, dtype=float)
    hi = np.full(p.size, np.inf) if hi is None else np.asarray(hi, dtype=float)
    h = _step_sizes(p, rel_step)
    f0 = None
    cols = []
    for i in range(p.size):
        up, dn = p.copy(), p.copy()
        up[i] += h[i]
        dn[i] -= h[i]
        if up[i] <= hi[i] and dn[i] >= lo[i]:
            cols.append((fun(up) - fun(dn)) / (up[i] - dn[i]))
            continue
        if f0 is None:
            f0 = fun(p)
        if up[i] <= hi[i]:
            cols.append((fun(up) - f0) / (up[i] - p[i]))
        else:
            cols.append((f0 - fun(dn)) / (p[i] - dn[i]))
    return np.column_stack(cols) if cols else np.zeros((0, 0))


def _covariance(jw):
    """Covariance (J^T J)^-1 with rank deficiency mapped to infinite variance."""
    a = jw.T @ jw
    d = np.sqrt(np.diag(a))
    npar = a.shape[0]
    if npar == 0:
        return a, False
    dead = d == 0
    dinv = np.where(dead, 0.0, 1.0 / np.where(dead, 1.0, d))
    s = a * dinv[:, None] * dinv[None, :]
    w, v = np.linalg.eigh(s)
    wmax = max(w.max(), 0.0)
    small = w <= 1e-13 * wmax if wmax > 0 else np.ones_like(w, dtype=bool)
    winv = np.where(small, 0.0, 1.0 / np.where(small, 1.0, w))
    cov = (v * winv) @ v.T * dinv[:, None] * dinv[None, :]
    singular = bool(small.any() or dead.any())
    if singular:
        touched = np.zeros(npar, dtype=bool)
        touched |= dead
        for k in np.flatnonzero(small):
            touched |= np.abs(v[:, k]) > 1e-6
        diag = np.diag(cov).copy()
        diag[touched] = np.inf
        cov[np.diag_indices(npar)] = diag
    return cov, singular


def nlls_fit(model, x, y, sigma, init, bounds=None, fixed=(), *, max_iter=500,
             ftol=1e-12, xtol=1e-10, gtol=1e-10, rel_step=DEFAULT_REL_STEP):
    """Weighted nonlinear least squares.

    Parameters
    ----------
    model : callable
        ``model(x, **params) -> array`` with the same shape as ``y``.
    x, y, sigma : array_like
        Data; ``sigma`` must be strictly positive.
    init : dict
        Starting value for every model parameter.
    bounds : dict, optional
        ``name -> (lo, hi)``; missing names are unbounded.
    fixed : iterable of str
        Parameters held at their ``init`` value.

    Returns
    -------
    FitResult
        ``stderrs`` holds the covariance-based errors of the free parameters.
        Singular normal equations or an exhausted iteration budget give
        ``converged=False`` with the best point found.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), y.shape)
    if np.any(~(sigma > 0)):
        raise ValidationError("sigma", "all uncertainties must be > 0")
    bounds = dict(bounds or {})
    fixed = set(fixed)
    unknown = (set(bounds) | fixed) - set(init)
    if unknown:
        raise ValidationError("init", f"no initial value for {sorted(unknown)}")
    names = [k for k in init if k not in fixed]
    const = {k: float(init[k]) for k in init if k in fixed}
    p = np.array([float(init[k]) for k in names])
    lo = np.array([bounds.get(k, (-np.inf, np.inf))[0] for k in names], dtype=float)
    hi = np.array([bounds.get(k, (-np.inf, np.inf))[1] for k in names], dtype=float)
    for k, v, a, b in zip(names, p, lo, hi):
        if not (a <= v <= b):
            raise ValidationError(k, f"initial value {v} outside bounds ({a}, {b})")

    def evaluate(pv):
        params = dict(const)
        params.update(zip(names, pv.tolist()))
        f = np.asarray(model(x, **params), dtype=float)
        if f.shape != y.shape:
            f = np.broadcast_to(f, y.shape)
        if not np.all(np.isfinite(f)):
            raise ModelDomainError(f"model returned non-finite values at {params}")
        return f

    def resid(pv):
        return (y - evaluate(pv)) / sigma

    def wjac(pv):
        return numeric_jacobian(evaluate, pv, lo, hi, rel_step) / sigma[:, None]

    r = resid(p)
    cost = 0.5 * float(r @ r)
    lam = 1e-3
    converged = False
    n_iter = 0
    jw = wjac(p) if names else np.zeros((y.size, 0))
    while names and n_iter < max_iter:
        n_iter += 1
        a = jw.T @ jw
        g = jw.T @ r
        diag = np.diag(a).copy()
        diag[diag == 0] = 1e-30
        scale = np.sqrt(diag * max(2.0 * cost, 1e-300))
        if cost == 0.0 or np.max(np.abs(g) / scale) <= gtol:
            converged = True
            break
        accepted = False
        while lam <= 1e16:
            try:
                step = np.linalg.solve(a + lam * np.diag(diag), g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = np.clip(p + step, lo, hi)
            r_new = resid(trial)
            cost_new = 0.5 * float(r_new @ r_new)
            if cost_new < cost or (cost_new == cost and np.array_equal(trial, p)):
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        dp = trial - p
        dcost = cost - cost_new
        p, r = trial, r_new
        cost_old, cost = cost, cost_new
        lam = max(lam / 10.0, 1e-12)
        jw = wjac(p)
        small_step = np.all(np.abs(dp) <= xtol * (np.abs(p) + xtol))
        if small_step or dcost <= ftol * cost_old or cost <= 1e-28 * y.size:
            converged = True
            break

    cov, singular = _covariance(jw) if names else (np.zeros((0, 0)), False)
    params = dict(const)
    params.update(zip(names, p.tolist()))
    stderrs = {k: float(math.sqrt(cov[i, i])) if cov[i, i] >= 0 else float("nan")
               for i, k in enumerate(names)}
    dof = y.size - len(names)
    return FitResult(
        params=params,
        stderrs=stderrs,
        residual_norm=float(np.sqrt(2.0 * cost)),
        converged=bool(converged and not singular),
        n_iter=n_iter,
        meta={"chi2": 2.0 * cost, "dof": dof, "cov": cov, "free": tuple(names),
              "singular": singular},
    )


def propagate(fun, result, names=None, rel_step=DEFAULT_REL_STEP, bounds=None):
    """Value and first-order standard error of ``fun(**params)``.

    Uses the fit covariance; ``names`` restricts the gradient to a subset of
    the free parameters. ``bounds`` (as for :func:`nlls_fit`) keeps the
    difference stencil inside the parameter domain.
    """
    free = list(result.meta["free"])
    cov = np.asarray(result.meta["cov"])
    names = free if names is None else [n for n in names if n in free]
    idx = [free.index(n) for n in names]
    base = dict(result.params)
    p0 = np.array([base[n] for n in names])

    def f(pv):
        d = dict(base)
        d.update(zip(names, pv.tolist()))
        return np.atleast_1d(float(fun(**d)))

    value = float(fun(**base))
    if not names:
        return value, 0.0
    bounds = bounds or {}
    lo = np.array([bounds.get(n, (-np.inf, np.inf))[0] for n in names], dtype=float)
    hi = np.array([bounds.get(n, (-np.inf, np.inf))[1] for n in names], dtype=float)
    grad = numeric_jacobian(f, p0, lo, hi, rel_step=rel_step)[0]
    sub = cov[np.ix_(idx, idx)]
    with np.errstate(invalid="ignore"):
        var = float(grad @ sub @ grad)
    return value, math.sqrt(var) if var >= 0 else float("nan")
