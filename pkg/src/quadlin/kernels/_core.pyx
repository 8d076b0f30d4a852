# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused per-voxel penalty + gradient kernel (compiled hot path).

Semantics identical to quadlin.kernels.numpy_backend.accumulate_penalties;
the equivalence is enforced by tests. One pass per section, no temporaries.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline double _hinge(double t, double delta) nogil:
    if t <= 0.0:
        return 0.0
    if delta <= 0.0 or t >= delta:
        return t - 0.5 * delta if delta > 0.0 else t
    return t * t / (2.0 * delta)


cdef inline double _hinge_d(double t, double delta) nogil:
    if t <= 0.0:
        return 0.0
    if delta <= 0.0 or t >= delta:
        return 1.0
    return t / delta


cdef inline double _habs(double r, double delta) nogil:
    cdef double a = r if r >= 0.0 else -r
    if delta <= 0.0 or a > delta:
        return a - 0.5 * delta if delta > 0.0 else a
    return r * r / (2.0 * delta)


cdef inline double _habs_d(double r, double delta) nogil:
    if delta <= 0.0:
        return 1.0 if r > 0.0 else (-1.0 if r < 0.0 else 0.0)
    if r >= delta:
        return 1.0
    if r <= -delta:
        return -1.0
    return r / delta


def accumulate_penalties(
    cnp.float64_t[::1] d,
    grad_obj,
    double delta,
    double psi1, double psi2, double psi3, double psi4,
    double xi1, double xi2, double xi3,
    cnp.int64_t[::1] ptv_idx, cnp.float64_t[::1] ptv_w,
    cnp.float64_t[::1] ptv_lo, cnp.float64_t[::1] ptv_up, cnp.float64_t[::1] ptv_pres,
    cnp.int64_t[::1] oar_idx, cnp.float64_t[::1] oar_w, cnp.float64_t[::1] oar_pred,
    cnp.int64_t[::1] max_idx, cnp.float64_t[::1] max_w,
    cnp.float64_t[::1] max_ref, cnp.float64_t[::1] max_lo, cnp.float64_t[::1] max_span,
):
    cdef double z1 = 0.0, z2 = 0.0, z3 = 0.0
    cdef double dv, under, over, resid, t, ramp, w
    cdef Py_ssize_t i, v
    cdef bint with_grad = grad_obj is not None
    cdef cnp.float64_t[::1] grad
    if with_grad:
        grad = grad_obj

    with nogil:
        for i in range(ptv_idx.shape[0]):
            v = ptv_idx[i]
            dv = d[v]
            w = ptv_w[i]
            under = ptv_lo[i] - dv
            if under < 0.0:
                under = 0.0
            over = dv - ptv_up[i]
            if over < 0.0:
                over = 0.0
            resid = ptv_pres[i] - dv
            z1 += w * (psi1 * under * under + psi2 * over * over + xi1 * _habs(resid, delta))
            if with_grad:
                grad[v] += w * (-2.0 * psi1 * under + 2.0 * psi2 * over
                                - xi1 * _habs_d(resid, delta))

        for i in range(oar_idx.shape[0]):
            v = oar_idx[i]
            dv = d[v]
            w = oar_w[i]
            over = dv - oar_pred[i]
            if over < 0.0:
                over = 0.0
            z2 += w * (psi3 * over * over + xi2 * dv)
            if with_grad:
                grad[v] += w * (2.0 * psi3 * over + xi2)

        for i in range(max_idx.shape[0]):
            v = max_idx[i]
            dv = d[v]
            w = max_w[i]
            t = dv - max_lo[i]
            ramp = _hinge(t, delta) - _hinge(t - max_span[i], delta)
            z3 += w * (psi4 * _hinge(dv - max_ref[i], delta) - xi3 * (max_span[i] - ramp))
            if with_grad:
                grad[v] += w * (psi4 * _hinge_d(dv - max_ref[i], delta)
                                + xi3 * (_hinge_d(t, delta) - _hinge_d(t - max_span[i], delta)))

    return z1, z2, z3
