"""Command-line pipeline: convert, validate, solve, evaluate, compare, batch.

Exit codes: 0 success, 1 input error, 2 solver hit the iteration cap
(artifacts are still written).
"""

from __future__ import annotations

import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import evaluation, model as model_mod, patient_io, solver as solver_mod
from .errors import QuadlinError

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_NOT_CONVERGED = 2


def _load_run_config(config_path, seed=None):
    """Config JSON may carry 'coefficients' and 'solver' sections."""
    coeffs = model_mod.Coefficients()
    solver_cfg = solver_mod.SolverConfig()
    if config_path:
        data = json.loads(Path(config_path).read_text())
        if "coefficients" in data:
            coeffs = model_mod.Coefficients.from_dict(data["coefficients"])
        if "solver" in data:
            solver_cfg = solver_mod.SolverConfig.from_dict(data["solver"])
    if seed is not None:
        solver_cfg = solver_mod.SolverConfig.from_dict({**solver_cfg.to_dict(), "seed": seed})
    return coeffs, solver_cfg


def _resolve_prediction(case, bundle: Path, selector):
    """Prediction selector: None -> bundle default; int k -> predictions/pred_k.csv;
    otherwise a path to a voxel_id,gy CSV."""
    if selector is None:
        return case.predicted_dose
    try:
        index = int(selector)
    except (TypeError, ValueError):
        path = Path(selector)
    else:
        path = bundle / "predictions" / f"pred_{index}.csv"
    if not path.is_file():
        raise patient_io.MissingFile(f"prediction file not found: {path}")
    return patient_io._read_dose_csv(path, case.n_voxels)


def _read_dose_source(case, bundle: Path, source):
    """Dose source: 'reference' | 'prediction' | path to a voxel_id,gy CSV."""
    if source == "reference":
        if case.reference_dose is None:
            raise patient_io.MissingFile(f"bundle {bundle} has no reference_dose.csv")
        return case.reference_dose
    if source == "prediction":
        return case.predicted_dose
    path = Path(source)
    if not path.is_file():
        raise patient_io.MissingFile(f"dose file not found: {path}")
    return patient_io._read_dose_csv(path, case.n_voxels)


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(c) if isinstance(c, float) else c for c in row])


def _write_solution(out: Path, solution):
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "plan.csv", ["beamlet_id", "intensity"],
               [(b, float(v)) for b, v in enumerate(solution.fluence)])
    _write_csv(out / "dose.csv", ["voxel_id", "gy"],
               [(v, float(g)) for v, g in enumerate(solution.dose)])
    diag = solution.diagnostics
    payload = {
        **solution.breakdown.to_dict(),
        "converged": diag.converged,
        "iterations": diag.iterations,
        "optimality_measure": diag.optimality,
        "wall_time_s": diag.wall_time_s,
    }
    (out / "objective.json").write_text(json.dumps(payload, indent=2) + "\n")
    n = len(diag.objective_trace)
    steps = diag.step_trace if len(diag.step_trace) == n else np.zeros(n)
    opts = diag.optimality_trace if len(diag.optimality_trace) == n else np.zeros(n)
    _write_csv(out / "diagnostics.csv",
               ["iteration", "objective", "optimality_measure", "step_size"],
               [(i, float(diag.objective_trace[i]), float(opts[i]), float(steps[i]))
                for i in range(n)])


@click.group()
def main():
    """Fluence-plan generation and evaluation from predicted dose distributions."""


@main.command()
@click.argument("patient_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--influence", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Dose-influence matrix (triplet CSV or scipy .npz).")
@click.option("--prediction", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Predicted dose (OpenKBP sparse CSV); defaults to dose.csv.")
@click.option("--dims", default="128,128,128", show_default=True,
              help="Grid dims as x,y,z.")
@click.option("--n-beamlets", default=None, type=int)
def convert(patient_dir, out, influence, prediction, dims, n_beamlets):
    """Convert an OpenKBP patient folder into a canonical bundle."""
    try:
        dims_t = tuple(int(t) for t in dims.split(","))
        manifest = patient_io.convert_openkbp(
            patient_dir, out, influence_path=influence, prediction_path=prediction,
            dims=dims_t, n_beamlets=n_beamlets,
        )
    except QuadlinError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INPUT_ERROR)
    click.echo(json.dumps(manifest, indent=2))


@main.command()
@click.option("--bundle", required=True, type=click.Path(exists=True, file_okay=False))
def validate(bundle):
    """Validate a bundle; report every invariant violation."""
    try:
        case = patient_io.load_patient(bundle)
    except QuadlinError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INPUT_ERROR)
    report = patient_io.validate_case(case)
    click.echo(json.dumps(report.to_dict(), indent=2))
    sys.exit(EXIT_OK if report.valid else EXIT_INPUT_ERROR)


@main.command()
@click.option("--bundle", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--prediction", default=None, help="Prediction file or index.")
@click.option("--config", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=None, type=int)
def solve(bundle, prediction, config, out, seed):
    """Optimize a fluence plan; writes plan.csv, dose.csv, objective.json,
    diagnostics.csv."""
    try:
        case = patient_io.load_patient(bundle)
        pred = _resolve_prediction(case, Path(bundle), prediction)
        coeffs, solver_cfg = _load_run_config(config, seed)
        qmodel = model_mod.assemble_model(case, prediction=pred, coeffs=coeffs)
        solution = solver_mod.solve(qmodel, solver_cfg)
    except QuadlinError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INPUT_ERROR)
    _write_solution(Path(out), solution)
    if not solution.diagnostics.converged:
        click.echo("warning: iteration cap reached before convergence", err=True)
        sys.exit(EXIT_NOT_CONVERGED)


@main.command()
@click.option("--bundle", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--dose", "dose_source", required=True,
              help="Dose file, or 'reference' / 'prediction'.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--format", "formats", multiple=True,
              type=click.Choice(["csv", "json", "svg"]), default=("csv", "json"))
@click.option("--curves/--no-curves", default=False, help="Also export DVH curves.")
def evaluate(bundle, dose_source, out, formats, curves):
    """Score clinical criteria and DVH points for a dose distribution."""
    try:
        case = patient_io.load_patient(bundle)
        dose = _read_dose_source(case, Path(bundle), dose_source)
    except QuadlinError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INPUT_ERROR)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    report = evaluation.criteria_report(dose, case.structures, case.grid)
    (out_dir / "criteria.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")

    rows = []
    for s in case.structures:
        if len(s.voxel_ids) == 0:
            continue
        for kind, gy in evaluation.structure_points(dose, s, case.grid).items():
            rows.append((s.name, kind, float(gy)))
    _write_csv(out_dir / "dvh_points.csv", ["roi", "point", "gy"], rows)

    if curves or "svg" in formats:
        curve_map = {}
        max_gy = float(np.max(dose)) if len(dose) else 1.0
        for s in case.structures:
            if len(s.voxel_ids):
                curve_map[s.name] = evaluation.dvh_curve(dose, s.voxel_ids, max_gy=max_gy)
        curve_rows = []
        for roi, (edges, frac) in sorted(curve_map.items()):
            for e, fr in zip(edges, frac):
                curve_rows.append((roi, float(e), float(fr)))
        _write_csv(out_dir / "dvh_curves.csv", ["roi", "dose_gy", "volume_fraction"],
                   curve_rows)
        if "svg" in formats:
            from .plots import plot_dvh_curves
            plot_dvh_curves(curve_map, out_dir / "dvh_curves.svg",
                            title=f"DVH ({case.id})")


@main.command()
@click.option("--bundle", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--dose", "dose_sources", multiple=True, required=True,
              help="Two or more dose sources; the first is the baseline.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--format", "formats", multiple=True,
              type=click.Choice(["csv", "json", "svg"]), default=("csv",))
def compare(bundle, dose_sources, out, formats):
    """DVH-point differences and criteria satisfaction of each source vs the first."""
    if len(dose_sources) < 2:
        click.echo("error: need at least two --dose sources", err=True)
        sys.exit(EXIT_INPUT_ERROR)
    try:
        case = patient_io.load_patient(bundle)
        doses = [(src, _read_dose_source(case, Path(bundle), src)) for src in dose_sources]
    except QuadlinError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INPUT_ERROR)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    base_label, base = doses[0]
    diff_rows = []
    summaries = {}
    for label, dose in doses[1:]:
        rows = evaluation.compare_dvh_points(dose, base, case.structures, case.grid)
        for r in rows:
            diff_rows.append((label, r["roi"], r["point"], r["plan_gy"],
                              r["reference_gy"], r["signed_diff_gy"], r["abs_diff_gy"]))
        summaries[label] = evaluation.diff_summary(rows)
    _write_csv(out_dir / "dvh_differences.csv",
               ["source", "roi", "point", "source_gy", "baseline_gy",
                "signed_diff_gy", "abs_diff_gy"],
               diff_rows)

    sat_rows = []
    for label, dose in doses:
        rep = evaluation.criteria_report(dose, case.structures, case.grid)
        for r in rep.rows:
            sat_rows.append((label, r.roi, r.point, r.threshold_gy, r.achieved_gy,
                             int(r.satisfied)))
        sat_rows.append((label, "All OARs", "", "", _fmt_pct(rep.oar_pct), ""))
        sat_rows.append((label, "All Targets", "", "", _fmt_pct(rep.target_pct), ""))
        sat_rows.append((label, "All ROIs", "", "", _fmt_pct(rep.all_pct), ""))
    _write_csv(out_dir / "satisfaction_comparison.csv",
               ["source", "roi", "point", "threshold_gy", "achieved", "satisfied"],
               sat_rows)
    if "svg" in formats and summaries:
        from .plots import plot_diff_bands
        plot_diff_bands(summaries, out_dir / "dvh_differences.svg",
                        title=f"DVH point differences vs {base_label}")


def _fmt_pct(value):
    return "" if value is None else float(value)


def _run_batch_cell(args):
    """One (bundle, prediction) cell; must stay picklable for worker pools."""
    index, cell, coeffs_dict, solver_dict, base_dir = args
    try:
        bundle = Path(base_dir) / cell["bundle"]
        case = patient_io.load_patient(bundle)
        pred = _resolve_prediction(case, bundle, cell.get("prediction"))
        coeffs = model_mod.Coefficients.from_dict(coeffs_dict)
        solver_cfg = solver_mod.SolverConfig.from_dict(solver_dict)
        qmodel = model_mod.assemble_model(case, prediction=pred, coeffs=coeffs)
        solution = solver_mod.solve(qmodel, solver_cfg)
        plan_rep = evaluation.criteria_report(solution.dose, case.structures, case.grid)
        pred_rep = evaluation.criteria_report(pred, case.structures, case.grid)
        ref_rep = None
        if case.reference_dose is not None:
            ref_rep = evaluation.criteria_report(case.reference_dose, case.structures,
                                                 case.grid)
        return {
            "index": index,
            "ok": True,
            "bundle": str(cell["bundle"]),
            "prediction": str(cell.get("prediction") or "default"),
            "converged": solution.diagnostics.converged,
            "iterations": solution.diagnostics.iterations,
            "breakdown": solution.breakdown.to_dict(),
            "plan_report": plan_rep.to_dict(),
            "pred_report": pred_rep.to_dict(),
            "ref_report": None if ref_rep is None else ref_rep.to_dict(),
        }
    except Exception as exc:  # logged per cell, batch continues
        return {
            "index": index,
            "ok": False,
            "bundle": str(cell.get("bundle", "?")),
            "prediction": str(cell.get("prediction") or "default"),
            "error": f"{type(exc).__name__}: {exc}",
        }


def _rows_from_report_dict(rep: dict):
    return [evaluation.CriterionResult(
        r["roi"], r["point"], r["threshold_gy"], r["achieved_gy"],
        r["satisfied"], r["is_target"]) for r in rep["criteria"]]


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSON manifest: {'cells': [{'bundle': ..., 'prediction': ...}, ...]}")
@click.option("--config", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--workers", default=1, show_default=True, type=int)
@click.option("--seed", default=None, type=int)
def batch(manifest, config, out, workers, seed):
    """Solve + evaluate every (patient, prediction) cell of a manifest."""
    try:
        data = json.loads(Path(manifest).read_text())
        cells = data["cells"]
        coeffs, solver_cfg = _load_run_config(config, seed)
    except (QuadlinError, KeyError, json.JSONDecodeError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INPUT_ERROR)
    base_dir = Path(manifest).parent
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = [(i, cell, coeffs.to_dict(), solver_cfg.to_dict(), str(base_dir))
            for i, cell in enumerate(cells)]
    if workers <= 1:
        results = [_run_batch_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_batch_cell, jobs))
    results.sort(key=lambda r: r["index"])  # aggregation order fixed by manifest index

    ok = [r for r in results if r["ok"]]
    failures = [r for r in results if not r["ok"]]

    summary_rows = []
    for r in ok:
        b = r["breakdown"]
        plan_pct = r["plan_report"]["satisfied_pct"]
        pred_pct = r["pred_report"]["satisfied_pct"]
        summary_rows.append((
            r["index"], r["bundle"], r["prediction"],
            "converged" if r["converged"] else "max_iters",
            r["iterations"],
            float(b["z1"]), float(b["z2"]), float(b["z3"]), float(b["z4"]),
            float(b["total"]),
            _fmt_pct(plan_pct["all"]), _fmt_pct(pred_pct["all"]),
        ))
    _write_csv(out_dir / "batch_summary.csv",
               ["index", "bundle", "prediction", "status", "iterations",
                "z1", "z2", "z3", "z4", "total",
                "plan_criteria_pct", "prediction_criteria_pct"],
               summary_rows)

    columns = {}
    if ok:
        columns["prediction"] = evaluation.aggregate_satisfaction(
            [evaluation.CriteriaReport(_rows_from_report_dict(r["pred_report"]))
             for r in ok])
        columns["plan"] = evaluation.aggregate_satisfaction(
            [evaluation.CriteriaReport(_rows_from_report_dict(r["plan_report"]))
             for r in ok])
        with_ref = [r for r in ok if r["ref_report"] is not None]
        if with_ref:
            columns["reference"] = evaluation.aggregate_satisfaction(
                [evaluation.CriteriaReport(_rows_from_report_dict(r["ref_report"]))
                 for r in with_ref])
    roi_names = sorted({roi for agg in columns.values() for roi in agg["per_roi"]})
    matrix_rows = []
    for roi in roi_names + ["All OARs", "All Targets", "All ROIs"]:
        row = [roi]
        for label in sorted(columns):
            agg = columns[label]
            value = (agg["groups"].get(roi) if roi.startswith("All ")
                     else agg["per_roi"].get(roi))
            row.append(_fmt_pct(value))
        matrix_rows.append(tuple(row))
    _write_csv(out_dir / "criteria_matrix.csv", ["roi"] + sorted(columns), matrix_rows)

    _write_csv(out_dir / "failures.csv", ["index", "bundle", "prediction", "error"],
               [(r["index"], r["bundle"], r["prediction"], r["error"]) for r in failures])

    click.echo(f"batch: {len(ok)} succeeded, {len(failures)} failed")
    sys.exit(EXIT_OK if ok else EXIT_INPUT_ERROR)


if __name__ == "__main__":
    main()
