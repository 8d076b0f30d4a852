"""First-order solvers for the reduced objective over nonnegative fluence.

The main path is a monotone accelerated proximal-gradient method (FISTA
with backtracking, projection onto x >= 0, and momentum restart) applied
to the smoothed objective. A deliberately plain projected-subgradient
method serves as the slow reference oracle for testing; it shares nothing
with the main path beyond objective evaluation.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import Diverged, InstanceTooLarge
from .model import (
    ObjectiveBreakdown,
    QuadLinModel,
    compute_dose,
    objective_from_dose,
    smoothed_value_and_gradient,
)

REFERENCE_MAX_VOXELS = 1000
REFERENCE_MAX_BEAMLETS = 100


@dataclass(frozen=True)
class SolverConfig:
    method: str = "accelerated_proximal"
    max_iters: int = 5000
    rel_obj_tol: float = 1e-6
    stall_window: int = 50
    smoothing_delta_gy: float = 0.01  # 0 selects pure projected-subgradient steps
    backtrack_increase: float = 2.0
    backtrack_decrease: float = 0.95
    step_scale: float | None = None  # subgradient step a in a/sqrt(k); None = auto
    seed: int = 0

    def __post_init__(self):
        if self.rel_obj_tol <= 0:
            raise ValueError("rel_obj_tol must be positive")
        if self.smoothing_delta_gy < 0:
            raise ValueError("smoothing_delta_gy must be >= 0")
        if self.stall_window < 1 or self.max_iters < 1:
            raise ValueError("stall_window and max_iters must be >= 1")
        if self.method not in ("accelerated_proximal", "projected_subgradient_reference"):
            raise ValueError(f"unknown method {self.method!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SolverConfig":
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "SolverConfig":
        return cls.from_dict(json.loads(open(path).read()))


@dataclass
class Diagnostics:
    iterations: int = 0
    converged: bool = False
    final_objective: float = 0.0
    optimality: float = float("inf")
    wall_time_s: float = 0.0
    objective_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    optimality_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    step_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class PlanSolution:
    fluence: np.ndarray
    dose: np.ndarray
    breakdown: ObjectiveBreakdown
    diagnostics: Diagnostics


def optimality_measure(model: QuadLinModel, fluence, delta: float = 0.01) -> float:
    """Projected-gradient stationarity residual, scaled by 1/(1 + |F(x)|)."""
    x = np.asarray(fluence, dtype=np.float64)
    f, g = smoothed_value_and_gradient(model, x, delta)
    residual = np.where(x > 0.0, g, np.minimum(g, 0.0))
    return float(np.max(np.abs(residual), initial=0.0) / (1.0 + abs(f)))


def _initial_lipschitz(model: QuadLinModel, delta: float) -> float:
    """Cheap upper-bound estimate; backtracking corrects it either way."""
    a = model.influence
    # power iteration on A^T A from a deterministic start
    v = np.ones(model.n_beamlets)
    v /= max(np.linalg.norm(v), 1e-12)
    sigma2 = 1.0
    for _ in range(8):
        w = model.influence_t @ (a @ v)
        nw = np.linalg.norm(w)
        if not np.isfinite(nw):
            raise Diverged("curvature estimate overflowed; check influence magnitudes")
        if nw <= 1e-30:
            return 1.0
        sigma2 = nw
        v = w / nw
    c = model.coefficients
    curv = 0.0
    if len(model.ptv_w):
        wmax = float(model.ptv_w.max())
        curv = max(curv, wmax * 2.0 * (c.psi1 + c.psi2))
        if delta > 0:
            curv = max(curv, wmax * c.xi1 / delta)
    if len(model.oar_w):
        curv = max(curv, float(model.oar_w.max()) * 2.0 * c.psi3)
    if len(model.max_w) and delta > 0:
        curv = max(curv, float(model.max_w.max()) * (c.psi4 + c.xi3) / delta)
    for s in model.mean_structs:
        curv = max(curv, 2.0 * (c.psi5 + c.xi4) * float(s.weights.max()))
    return max(sigma2 * curv, 1e-9)


def _auto_step_scale(model: QuadLinModel) -> float:
    """Rough magnitude of an optimal fluence: target dose over beamlet strength."""
    target = float(model.ptv_up.max()) if len(model.ptv_up) else 1.0
    col_max = np.zeros(model.n_beamlets)
    t = model.influence_t
    for b in range(model.n_beamlets):
        row = t.data[t.indptr[b]:t.indptr[b + 1]]
        if len(row):
            col_max[b] = row.max()
    strong = col_max[col_max > 0]
    if len(strong) == 0:
        return 1.0
    return max(target / float(np.median(strong)), 1.0)


def _check_finite(value: float):
    if not np.isfinite(value):
        raise Diverged(f"objective became non-finite ({value}); check input magnitudes")


def solve(model: QuadLinModel, config: SolverConfig | None = None) -> PlanSolution:
    """Minimize the reduced objective over x >= 0 to the configured tolerance."""
    config = config if config is not None else SolverConfig()
    if config.method == "projected_subgradient_reference":
        return reference_solve(model, iters=config.max_iters)
    start = time.perf_counter()
    delta = config.smoothing_delta_gy
    if delta == 0.0:
        return _solve_subgradient(model, config, start)

    x = np.zeros(model.n_beamlets)
    y = x.copy()
    f_x, _ = smoothed_value_and_gradient(model, x, delta)
    _check_finite(f_x)
    lip = _initial_lipschitz(model, delta)
    t_k = 1.0

    obj_trace = [f_x]
    opt_trace = [optimality_measure(model, x, delta)]
    step_trace = [1.0 / lip]
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        f_y, g_y = smoothed_value_and_gradient(model, y, delta)
        _check_finite(f_y)
        # backtracking on the quadratic upper model at y
        for _ in range(100):
            p = np.maximum(y - g_y / lip, 0.0)
            dp = p - y
            f_p, _ = smoothed_value_and_gradient(model, p, delta)
            if f_p <= f_y + float(g_y @ dp) + 0.5 * lip * float(dp @ dp) + 1e-12 * (1 + abs(f_y)):
                break
            lip *= config.backtrack_increase
        _check_finite(f_p)

        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_k * t_k))
        if f_p <= f_x:  # monotone accept
            x_next, f_next = p, f_p
        else:
            x_next, f_next = x, f_x
        y = x_next + (t_k / t_next) * (p - x_next) + ((t_k - 1.0) / t_next) * (x_next - x)
        y = np.maximum(y, 0.0)
        if float((y - p) @ (p - x)) > 0.0:  # momentum restart
            t_next = 1.0
            y = x_next.copy()
        x, f_x, t_k = x_next, f_next, t_next

        obj_trace.append(f_x)
        opt = optimality_measure(model, x, delta)
        opt_trace.append(opt)
        step_trace.append(1.0 / lip)
        lip *= config.backtrack_decrease

        if it >= config.stall_window:
            f_old = obj_trace[-config.stall_window - 1]
            stalled = abs(f_old - f_x) <= config.rel_obj_tol * (1.0 + abs(f_x))
            if stalled and opt <= 10.0 * config.rel_obj_tol:
                converged = True
                break

    dose = compute_dose(model.influence, x)
    diag = Diagnostics(
        iterations=it,
        converged=converged,
        final_objective=f_x,
        optimality=opt_trace[-1],
        wall_time_s=time.perf_counter() - start,
        objective_trace=np.asarray(obj_trace),
        optimality_trace=np.asarray(opt_trace),
        step_trace=np.asarray(step_trace),
    )
    return PlanSolution(fluence=x, dose=dose,
                        breakdown=objective_from_dose(model, dose), diagnostics=diag)


def _solve_subgradient(model: QuadLinModel, config: SolverConfig, start: float) -> PlanSolution:
    """Pure projected-subgradient path (smoothing disabled)."""
    scale = config.step_scale if config.step_scale is not None else _auto_step_scale(model)
    x = np.zeros(model.n_beamlets)
    f_x, g = smoothed_value_and_gradient(model, x, 0.0)
    _check_finite(f_x)
    best_x, best_f = x.copy(), f_x
    obj_trace = [best_f]
    opt_trace = [optimality_measure(model, x, 0.0)]
    step_trace = [scale]
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        norm = np.linalg.norm(g)
        step = scale / np.sqrt(it)
        if norm > 0:
            x = np.maximum(x - (step / norm) * g, 0.0)
        f_x, g = smoothed_value_and_gradient(model, x, 0.0)
        _check_finite(f_x)
        if f_x < best_f:
            best_f, best_x = f_x, x.copy()
        obj_trace.append(best_f)
        opt = optimality_measure(model, best_x, 0.0)
        opt_trace.append(opt)
        step_trace.append(step)
        if it >= config.stall_window:
            f_old = obj_trace[-config.stall_window - 1]
            stalled = abs(f_old - best_f) <= config.rel_obj_tol * (1.0 + abs(best_f))
            if stalled and opt <= 10.0 * config.rel_obj_tol:
                converged = True
                break

    dose = compute_dose(model.influence, best_x)
    diag = Diagnostics(
        iterations=it,
        converged=converged,
        final_objective=best_f,
        optimality=opt_trace[-1],
        wall_time_s=time.perf_counter() - start,
        objective_trace=np.asarray(obj_trace),
        optimality_trace=np.asarray(opt_trace),
        step_trace=np.asarray(step_trace),
    )
    return PlanSolution(fluence=best_x, dose=dose,
                        breakdown=objective_from_dose(model, dose), diagnostics=diag)


def reference_solve(model: QuadLinModel, iters: int = 20000,
                    step_scales=(0.1, 1.0, 10.0, 100.0)) -> PlanSolution:
    """Slow reference oracle: plain projected subgradient, a/sqrt(k) steps.

    Runs the diminishing-step scheme once per step scale and keeps the best
    iterate seen anywhere. Guarded to small instances; intentionally naive.
    """
    if model.n_voxels > REFERENCE_MAX_VOXELS or model.n_beamlets > REFERENCE_MAX_BEAMLETS:
        raise InstanceTooLarge(
            f"reference oracle limited to {REFERENCE_MAX_VOXELS} voxels x "
            f"{REFERENCE_MAX_BEAMLETS} beamlets; got "
            f"{model.n_voxels} x {model.n_beamlets}"
        )
    start = time.perf_counter()

    def objective_at(x):
        return objective_from_dose(model, compute_dose(model.influence, x)).total

    best_x = np.zeros(model.n_beamlets)
    best_f = objective_at(best_x)
    trace = [best_f]
    for a in step_scales:
        x = np.zeros(model.n_beamlets)
        for k in range(1, iters + 1):
            _, g = smoothed_value_and_gradient(model, x, 0.0)
            norm = np.linalg.norm(g)
            if norm == 0.0:
                break
            x = np.maximum(x - (a / np.sqrt(k) / norm) * g, 0.0)
            f = objective_at(x)
            if f < best_f:
                best_f = f
                best_x = x.copy()
        trace.append(best_f)

    dose = compute_dose(model.influence, best_x)
    diag = Diagnostics(
        iterations=iters * len(step_scales),
        converged=True,
        final_objective=best_f,
        optimality=optimality_measure(model, best_x, 0.0),
        wall_time_s=time.perf_counter() - start,
        objective_trace=np.asarray(trace),
    )
    return PlanSolution(fluence=best_x, dose=dose,
                        breakdown=objective_from_dose(model, dose), diagnostics=diag)
