#!/usr/bin/env python3
"""Regenerate the checked-in CLI test fixtures under tests/data/.

Deterministic by construction: fixed seeds, canonical bundle writer, and
repr()-formatted floats. Run from the repository root:

    python3 scripts/make_fixture.py
"""

import csv
import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "tests"))

import helpers  # noqa: E402
from quadlin import reference_solve, save_bundle  # noqa: E402
from quadlin.model import assemble_model  # noqa: E402

DATA = ROOT / "tests" / "data"


def write_dose_csv(path, dose):
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["voxel_id", "gy"])
        for v, g in enumerate(dose):
            w.writerow([v, repr(float(g))])


def make_solver_fixture():
    out = DATA / "fixture_20x8"
    case = helpers.random_case(17, n_voxels=20, n_beamlets=8,
                               include_reference=True,
                               voxel_size_mm=(10.0, 10.0, 10.0))
    save_bundle(case, out)
    ref = reference_solve(assemble_model(case), iters=5000)
    expected = {
        "objective_total": ref.breakdown.total,
        "z1": ref.breakdown.z1,
        "z2": ref.breakdown.z2,
        "z3": ref.breakdown.z3,
        "z4": ref.breakdown.z4,
    }
    (out / "expected.json").write_text(json.dumps(expected, indent=2) + "\n")
    print(f"fixture_20x8: reference objective {ref.breakdown.total:.6g}")


def make_batch_fixture():
    out = DATA / "batch_fixture"
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(23)
    for i, seed in enumerate((31, 32)):
        bundle = out / f"patient_{i}"
        case = helpers.random_case(seed, n_voxels=16, n_beamlets=6,
                                   include_reference=True,
                                   voxel_size_mm=(10.0, 10.0, 10.0))
        save_bundle(case, bundle)
        pred_dir = bundle / "predictions"
        pred_dir.mkdir(exist_ok=True)
        for k in range(2):
            noisy = np.clip(case.predicted_dose
                            + rng.normal(0.0, 1.0, size=case.n_voxels), 0.0, None)
            write_dose_csv(pred_dir / f"pred_{k}.csv", noisy)
    manifest = {
        "cells": [
            {"bundle": f"patient_{i}", "prediction": k}
            for i in range(2) for k in range(2)
        ]
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"batch_fixture: {len(manifest['cells'])} cells")


if __name__ == "__main__":
    DATA.mkdir(parents=True, exist_ok=True)
    make_solver_fixture()
    make_batch_fixture()
