"""Vectorized numpy implementation of the per-voxel penalty kernel.

Serves as the import-time fallback when the compiled extension is not
available, and as the reference the compiled kernel is tested against.

All hinge terms use the positive part (t)+; with smoothing half-width
delta > 0, linear kinks are replaced by C1 quadratic blends (Huber for
the absolute value, a quadratic ramp-in for one-sided hinges). delta = 0
reproduces the exact piecewise-linear terms with derivative 0 at kinks.
"""

from __future__ import annotations

import numpy as np


def hinge(t, delta):
    """Smoothed positive part: 0 for t<=0, t - delta/2 for t>=delta."""
    t = np.asarray(t, dtype=np.float64)
    if delta <= 0.0:
        return np.maximum(t, 0.0)
    return np.where(t <= 0.0, 0.0, np.where(t >= delta, t - 0.5 * delta, t * t / (2.0 * delta)))


def hinge_deriv(t, delta):
    t = np.asarray(t, dtype=np.float64)
    if delta <= 0.0:
        return (t > 0.0).astype(np.float64)
    return np.clip(t / delta, 0.0, 1.0)


def huber_abs(r, delta):
    """Smoothed |r| (Huber); exact absolute value at delta = 0."""
    r = np.asarray(r, dtype=np.float64)
    if delta <= 0.0:
        return np.abs(r)
    a = np.abs(r)
    return np.where(a <= delta, r * r / (2.0 * delta), a - 0.5 * delta)


def huber_abs_deriv(r, delta):
    r = np.asarray(r, dtype=np.float64)
    if delta <= 0.0:
        return np.sign(r)
    return np.clip(r / delta, -1.0, 1.0)


def accumulate_penalties(
    d,
    grad,
    delta,
    psi1, psi2, psi3, psi4, xi1, xi2, xi3,
    ptv_idx, ptv_w, ptv_lo, ptv_up, ptv_pres,
    oar_idx, oar_w, oar_pred,
    max_idx, max_w, max_ref, max_lo, max_span,
):
    """Accumulate per-voxel penalty terms and (optionally) dF/d(dose).

    Weights are pre-normalized (omega_v over the section's weight sum).
    max_lo = zeta * MaxP and max_span = chi * MaxP per voxel. Returns the
    (z1, z2, z3) section values; grad, when not None, receives += dF/dd.
    """
    z1 = z2 = z3 = 0.0

    if len(ptv_idx):
        dp = d[ptv_idx]
        under = np.maximum(ptv_lo - dp, 0.0)
        over = np.maximum(dp - ptv_up, 0.0)
        resid = ptv_pres - dp
        z1 = float(
            psi1 * np.dot(ptv_w, under * under)
            + psi2 * np.dot(ptv_w, over * over)
            + xi1 * np.dot(ptv_w, huber_abs(resid, delta))
        )
        if grad is not None:
            np.add.at(
                grad, ptv_idx,
                ptv_w * (-2.0 * psi1 * under + 2.0 * psi2 * over
                         - xi1 * huber_abs_deriv(resid, delta)),
            )

    if len(oar_idx):
        do = d[oar_idx]
        over = np.maximum(do - oar_pred, 0.0)
        z2 = float(psi3 * np.dot(oar_w, over * over) + xi2 * np.dot(oar_w, do))
        if grad is not None:
            np.add.at(grad, oar_idx, oar_w * (2.0 * psi3 * over + xi2))

    if len(max_idx):
        dm = d[max_idx]
        t = dm - max_lo
        ramp = hinge(t, delta) - hinge(t - max_span, delta)  # ~ min((t)+, span)
        z3 = float(
            psi4 * np.dot(max_w, hinge(dm - max_ref, delta))
            - xi3 * np.dot(max_w, max_span - ramp)
        )
        if grad is not None:
            np.add.at(
                grad, max_idx,
                max_w * (psi4 * hinge_deriv(dm - max_ref, delta)
                         + xi3 * (hinge_deriv(t, delta) - hinge_deriv(t - max_span, delta))),
            )

    return z1, z2, z3
