import numpy as np
import pytest

import helpers
from quadlin import kernels
from quadlin.kernels import numpy_backend
from quadlin.model import smoothed_value_and_gradient

compiled = pytest.importorskip("quadlin.kernels._core",
                               reason="compiled kernel not built")


def random_kernel_inputs(seed, n_voxels=60, delta=0.01):
    rng = np.random.default_rng(seed)
    ids = rng.permutation(n_voxels).astype(np.int64)
    n_ptv, n_oar, n_max = 20, 25, 15
    ptv_idx = np.sort(ids[:n_ptv])
    oar_idx = np.sort(ids[n_ptv:n_ptv + n_oar])
    max_idx = np.sort(ids[n_ptv + n_oar:])

    def weights(n):
        w = rng.uniform(0.5, 1.5, size=n)
        return w / w.sum()

    pres = np.full(n_ptv, 70.0)
    pred = rng.uniform(60.0, 75.0, size=n_ptv)
    max_p = rng.uniform(20.0, 40.0, size=n_max)
    return dict(
        d=rng.uniform(0.0, 80.0, size=n_voxels),
        delta=delta,
        psi1=2e6, psi2=5e5, psi3=2e5, psi4=2e5,
        xi1=2e4, xi2=2e2, xi3=1e3,
        ptv_idx=ptv_idx, ptv_w=weights(n_ptv),
        ptv_lo=np.minimum(pred, pres), ptv_up=np.maximum(pred, pres),
        ptv_pres=pres,
        oar_idx=oar_idx, oar_w=weights(n_oar),
        oar_pred=rng.uniform(5.0, 45.0, size=n_oar),
        max_idx=max_idx, max_w=weights(n_max),
        max_ref=max_p, max_lo=0.9 * max_p, max_span=0.1 * max_p,
    )


def run_backend(fn, inputs, with_grad=True):
    grad = np.zeros(len(inputs["d"])) if with_grad else None
    args = dict(inputs)
    z = fn(args.pop("d"), grad, args.pop("delta"), **args)
    return z, grad


class TestBackendEquivalence:
    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("delta", [0.0, 0.01, 0.5])
    def test_values_and_gradient_match(self, seed, delta):
        inputs = random_kernel_inputs(seed, delta=delta)
        z_np, g_np = run_backend(numpy_backend.accumulate_penalties, inputs)
        z_cy, g_cy = run_backend(compiled.accumulate_penalties, inputs)
        # summation order differs between backends, so exact equality is
        # not guaranteed; 1e-12 relative covers reordering only
        for a, b in zip(z_np, z_cy):
            assert b == pytest.approx(a, rel=1e-12, abs=1e-9)
        np.testing.assert_allclose(g_cy, g_np, rtol=1e-12, atol=1e-9)

    def test_gradient_optional(self):
        inputs = random_kernel_inputs(3)
        z_np, _ = run_backend(numpy_backend.accumulate_penalties, inputs,
                              with_grad=False)
        z_cy, _ = run_backend(compiled.accumulate_penalties, inputs,
                              with_grad=False)
        for a, b in zip(z_np, z_cy):
            assert b == pytest.approx(a, rel=1e-12, abs=1e-9)

    def test_empty_sections(self):
        inputs = random_kernel_inputs(0)
        empty_i = np.zeros(0, dtype=np.int64)
        empty_f = np.zeros(0)
        for keys in (("ptv_idx", "ptv_w", "ptv_lo", "ptv_up", "ptv_pres"),
                     ("oar_idx", "oar_w", "oar_pred"),
                     ("max_idx", "max_w", "max_ref", "max_lo", "max_span")):
            trimmed = dict(inputs)
            for k in keys:
                trimmed[k] = empty_i if k.endswith("_idx") else empty_f
            z_np, g_np = run_backend(numpy_backend.accumulate_penalties, trimmed)
            z_cy, g_cy = run_backend(compiled.accumulate_penalties, trimmed)
            for a, b in zip(z_np, z_cy):
                assert b == pytest.approx(a, rel=1e-12, abs=1e-9)
            np.testing.assert_allclose(g_cy, g_np, rtol=1e-12, atol=1e-9)


class TestBackendSelection:
    def test_active_backend_reported(self):
        assert kernels.BACKEND in ("cython", "numpy")

    def test_get_backend_names(self):
        assert kernels.get_backend("numpy") is numpy_backend.accumulate_penalties
        assert kernels.get_backend("cython") is compiled.accumulate_penalties
        with pytest.raises(ValueError):
            kernels.get_backend("fortran")

    @pytest.mark.parametrize("seed", range(3))
    def test_full_objective_matches_across_backends(self, seed, monkeypatch):
        case, model = helpers.random_instance(seed, n_voxels=30, n_beamlets=8)
        x = np.random.default_rng(seed).uniform(0.0, 50.0, size=8)
        results = {}
        for name in ("numpy", "cython"):
            monkeypatch.setattr(kernels, "accumulate_penalties",
                                kernels.get_backend(name))
            results[name] = smoothed_value_and_gradient(model, x, 0.01)
        f_np, g_np = results["numpy"]
        f_cy, g_cy = results["cython"]
        assert f_cy == pytest.approx(f_np, rel=1e-12)
        np.testing.assert_allclose(g_cy, g_np, rtol=1e-12, atol=1e-9)


class TestScalarHelpers:
    def test_hinge_limits(self):
        assert numpy_backend.hinge(-1.0, 0.01) == 0.0
        assert numpy_backend.hinge(2.0, 0.0) == 2.0
        assert numpy_backend.hinge(2.0, 0.01) == pytest.approx(2.0 - 0.005)
        # quadratic blend inside the half-width
        assert numpy_backend.hinge(0.005, 0.01) == pytest.approx(0.00125)

    def test_huber_limits(self):
        assert numpy_backend.huber_abs(-3.0, 0.0) == 3.0
        assert numpy_backend.huber_abs(0.0, 0.01) == 0.0
        assert numpy_backend.huber_abs(-3.0, 0.01) == pytest.approx(3.0 - 0.005)
        assert numpy_backend.huber_abs_deriv(-3.0, 0.01) == -1.0
        assert numpy_backend.huber_abs_deriv(0.005, 0.01) == pytest.approx(0.5)
