"""Damped Newton ascent and finite-difference derivatives.

The 2-parameter batched maximizer drives every (mean, log variance) factor
update; the dense maximizer covers small M-step and projection problems.
Both enforce monotone ascent by step halving, which is what makes the
coordinate-ascent ELBO traces nondecreasing.
"""

from __future__ import annotations

import numpy as np

from .errors import NewtonError

MAX_HALVINGS = 30
# An accepted step may reduce the objective by at most this much; anything
# worse after the halving budget is a reported failure, not a silent one.
ASCENT_SLACK = 1e-12


def newton2_max(vgh, x0, y0, max_iter=200, step_tol=1e-11, grad_tol=1e-9,
                max_halvings=MAX_HALVINGS, where=None, max_step=None):
    """Maximize a batch of independent 2-parameter objectives.

    Parameters
    ----------
    vgh : callable
        Maps arrays (x, y) to (f, gx, gy, hxx, hxy, hyy), all broadcast to
        the batch shape.
    x0, y0 : array_like
        Starting point, one entry per batch element.
    where : bool array, optional
        Batch elements to update; others are returned untouched.
    max_step : float, optional
        Trust-region cap on the per-iteration displacement; the proposed
        direction is rescaled, not clipped per coordinate, so ascent
        directions stay ascent directions. Exponential-sum objectives need
        this: their Newton step from a flat start can overshoot by
        hundreds, and the halving budget cannot claw that back.

    Returns
    -------
    x, y, f : arrays of the batch shape (f evaluated at the final point).
    """
    x = np.array(x0, dtype=float, copy=True)
    y = np.array(y0, dtype=float, copy=True)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    y = np.atleast_1d(y)
    active = np.ones(x.shape, dtype=bool) if where is None else np.array(where, dtype=bool, copy=True)

    with np.errstate(over="ignore", invalid="ignore"):
        f, gx, gy, hxx, hxy, hyy = (np.broadcast_to(np.asarray(a, dtype=float), x.shape).copy()
                                    for a in vgh(x, y))
    for _ in range(max_iter):
        # a non-finite current value means the element started in a
        # saturated region of its objective; leave it where it is rather
        # than steering by garbage derivatives
        active &= np.isfinite(f)
        # curvature-scaled stationarity: the implied displacement is what
        # step_tol bounds, not the raw gradient of a steep objective
        curv = 1.0 + np.maximum(np.abs(hxx), np.abs(hyy))
        gnorm = np.maximum(np.abs(gx), np.abs(gy))
        active &= (gnorm > grad_tol) & (gnorm / curv > step_tol)
        if not active.any():
            break
        with np.errstate(over="ignore", invalid="ignore"):
            det = hxx * hyy - hxy * hxy
            concave = (hxx < 0) & (det > 0)
            # Newton direction solves H d = -g; outside the concave region
            # fall back to a curvature-scaled gradient step.
            safe_det = np.where(concave, det, 1.0)
            dx = np.where(concave, -(hyy * gx - hxy * gy) / safe_det, gx / (1.0 + np.abs(hxx)))
            dy = np.where(concave, -(hxx * gy - hxy * gx) / safe_det, gy / (1.0 + np.abs(hyy)))
        # saturated derivatives give no usable direction; park the element
        # at its current point instead of walking it through nan
        active &= np.isfinite(dx) & np.isfinite(dy)
        dx = np.where(active, dx, 0.0)
        dy = np.where(active, dy, 0.0)
        if max_step is not None:
            biggest = np.maximum(np.abs(dx), np.abs(dy))
            shrink = np.where(biggest > max_step,
                              max_step / np.maximum(biggest, 1e-300), 1.0)
            dx = dx * shrink
            dy = dy * shrink

        step = np.where(active, 1.0, 0.0)
        pending = active.copy()
        for _ in range(max_halvings + 1):
            if not pending.any():
                break
            xt = x + step * dx
            yt = y + step * dy
            with np.errstate(over="ignore", invalid="ignore"):
                ft, gxt, gyt, hxxt, hxyt, hyyt = (np.broadcast_to(np.asarray(a, dtype=float), x.shape)
                                                  for a in vgh(xt, yt))
            # slack scales with |f|: near an optimum of a large-magnitude
            # objective, a genuine ascent step can round to a tiny decrease
            ok = pending & np.isfinite(ft) & (ft >= f - ASCENT_SLACK * np.maximum(1.0, np.abs(f)))
            for dst, src in ((x, xt), (y, yt), (f, ft), (gx, gxt), (gy, gyt),
                             (hxx, hxxt), (hxy, hxyt), (hyy, hyyt)):
                np.copyto(dst, src, where=ok)
            pending &= ~ok
            step = np.where(pending, step * 0.5, step)
        if pending.any():
            # a point whose implied Newton displacement is below step_tol is
            # converged even when the raw gradient is large on the scale of a
            # steep objective; only a genuinely unconverged point is an error
            gnorm = np.maximum(np.abs(gx), np.abs(gy))
            curv = 1.0 + np.maximum(np.abs(hxx), np.abs(hyy))
            bad = pending & (gnorm / curv > step_tol) & (gnorm > grad_tol)
            if bad.any():
                idx = int(np.flatnonzero(bad.ravel())[0])
                raise NewtonError(
                    f"no ascent step after {max_halvings} halvings at batch index {idx} "
                    f"(|grad|={gnorm.ravel()[idx]:.3e})")
            active &= ~pending
        moved = np.maximum(np.abs(step * dx), np.abs(step * dy))
        gnorm = np.maximum(np.abs(gx), np.abs(gy))
        active &= (moved > step_tol) | (gnorm > grad_tol)
    if scalar:
        return x[0], y[0], f[0]
    return x, y, f


def newton_nd_max(value, grad, hess, x0, max_iter=200, step_tol=1e-11,
                  grad_tol=1e-9, max_halvings=MAX_HALVINGS, max_step=None):
    """Maximize a smooth function of a small dense parameter vector.

    max_step caps the proposed displacement per iteration by uniform
    rescaling (see newton2_max).
    """
    x = np.array(x0, dtype=float, copy=True)
    fx = float(value(x))
    if not np.isfinite(fx):
        raise ValueError("objective not finite at the starting point")
    for _ in range(max_iter):
        g = np.asarray(grad(x), dtype=float)
        if np.max(np.abs(g)) <= grad_tol:
            break
        h = np.asarray(hess(x), dtype=float)
        try:
            # Ascent direction for concave h; fall back on gradient otherwise.
            d = np.linalg.solve(h, -g)
            if d @ g <= 0:
                d = g / (1.0 + np.max(np.abs(h)))
        except np.linalg.LinAlgError:
            d = g / (1.0 + np.max(np.abs(h)))
        if max_step is not None:
            biggest = float(np.max(np.abs(d)))
            if biggest > max_step:
                d = d * (max_step / biggest)
        step = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            xt = x + step * d
            ft = float(value(xt))
            if np.isfinite(ft) and ft >= fx - ASCENT_SLACK:
                x, fx = xt, ft
                accepted = True
                break
            step *= 0.5
        if not accepted:
            raise NewtonError(f"no ascent step after {max_halvings} halvings (|grad|={np.max(np.abs(g)):.3e})")
        if np.max(np.abs(step * d)) <= step_tol:
            break
    return x, fx


def fd_gradient(f, x, h):
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def fd_hessian(f, x, h):
    """Central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    d = x.size
    hess = np.empty((d, d))
    f0 = f(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        hess[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h**2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h
            hess[i, j] = hess[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h**2)
    return hess


def richardson_hessian(f, x, h):
    """Step-halved Hessian estimate with an error measure.

    Returns the Richardson extrapolation of the central stencil at steps h
    and h/2 together with max|H(h/2) - H(h)| / 3, an estimate of the
    remaining truncation error.
    """
    h1 = fd_hessian(f, x, h)
    h2 = fd_hessian(f, x, h / 2.0)
    extrap = (4.0 * h2 - h1) / 3.0
    err = float(np.max(np.abs(h2 - h1)) / 3.0)
    return extrap, err
