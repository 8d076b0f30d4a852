import numpy as np
import pytest

import helpers
from quadlin import (
    EmptyStructure,
    LengthMismatch,
    Structure,
    StructureSet,
    VoxelGrid,
    aggregate_satisfaction,
    compare_dvh_points,
    criteria_report,
    dvh_curve,
    dvh_point,
)
from quadlin.evaluation import (
    OAR_CRITERIA,
    PTV_D99_THRESHOLDS,
    diff_summary,
    structure_points,
)


def grid_for(n, voxel_size=(2.0, 2.0, 2.5)):
    return VoxelGrid((n, 1, 1), voxel_size)


class TestDvhPoint:
    def test_hot_spot_worked_example(self):
        # 0.05 cc voxels: the 0.1 cc hot spot spans the 2 hottest voxels
        grid = VoxelGrid((3, 1, 1), (5.0, 5.0, 2.0))
        assert grid.voxel_volume_cc == pytest.approx(0.05)
        dose = np.array([60.0, 55.0, 40.0])
        assert dvh_point(dose, [0, 1, 2], grid, "D_0.1cc") == 55.0

    def test_percentile_worked_example(self):
        dose = np.arange(1.0, 21.0)  # 1..20
        assert dvh_point(dose, np.arange(20), grid_for(20), "D_95") == 2.0

    def test_d99_single_voxel(self):
        dose = np.array([42.0])
        for kind in ("D_1", "D_95", "D_99"):
            assert dvh_point(dose, [0], grid_for(1), kind) == 42.0

    def test_mean_uniform_and_weighted(self):
        dose = np.array([10.0, 20.0, 30.0])
        grid = grid_for(3)
        assert dvh_point(dose, [0, 1, 2], grid, "D_mean") == 20.0
        weighted = dvh_point(dose, [0, 1, 2], grid, "D_mean",
                             weights=[1.0, 1.0, 2.0])
        assert weighted == pytest.approx(22.5)

    def test_small_structure_falls_back_to_max(self):
        grid = VoxelGrid((1, 1, 1), (2.0, 2.0, 2.0))  # 0.008 cc < 0.1 cc
        with pytest.warns(UserWarning, match="0.1 cc"):
            assert dvh_point(np.array([33.0]), [0], grid, "D_0.1cc") == 33.0

    def test_empty_structure_raises(self):
        with pytest.raises(EmptyStructure):
            dvh_point(np.zeros(3), [], grid_for(3), "D_mean")

    def test_unknown_kind_raises(self):
        with pytest.raises(ValueError):
            dvh_point(np.zeros(3), [0], grid_for(3), "D_50")

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_sort_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 400))
        dose = rng.uniform(0.0, 80.0, size=500)
        ids = rng.choice(500, size=n, replace=False)
        grid = grid_for(500, voxel_size=tuple(rng.uniform(1.0, 5.0, size=3)))
        for kind in ("D_mean", "D_0.1cc", "D_1", "D_95", "D_99"):
            import warnings
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                got = dvh_point(dose, ids, grid, kind)
                want = helpers.dvh_oracle(dose, ids, grid, kind)
            if kind == "D_mean":
                # summation order differs between mean implementations
                assert got == pytest.approx(want, rel=1e-12)
            else:
                assert got == want

    @pytest.mark.parametrize("seed", range(5))
    def test_percentile_ordering(self, seed):
        rng = np.random.default_rng(seed)
        dose = rng.uniform(0.0, 80.0, size=120)
        ids = np.arange(120)
        g = grid_for(120)
        d1 = dvh_point(dose, ids, g, "D_1")
        d95 = dvh_point(dose, ids, g, "D_95")
        d99 = dvh_point(dose, ids, g, "D_99")
        assert d99 <= d95 <= d1

    def test_shift_equivariance(self):
        rng = np.random.default_rng(9)
        dose = rng.uniform(0.0, 60.0, size=50)
        ids = np.arange(50)
        g = grid_for(50)
        for kind in ("D_mean", "D_1", "D_95", "D_99", "D_0.1cc"):
            base = dvh_point(dose, ids, g, kind)
            shifted = dvh_point(dose + 1.0, ids, g, kind)
            assert shifted == pytest.approx(base + 1.0)


class TestDvhCurve:
    def test_monotone_nonincreasing(self):
        rng = np.random.default_rng(2)
        dose = rng.uniform(0.0, 70.0, size=200)
        edges, frac = dvh_curve(dose, np.arange(200))
        assert frac[0] == 1.0
        assert frac[-1] == 0.0
        assert np.all(np.diff(frac) <= 0.0)
        assert len(edges) == len(frac) == 201

    def test_empty_raises(self):
        with pytest.raises(EmptyStructure):
            dvh_curve(np.zeros(3), [])


class TestCriteria:
    def all_roi_cases(self):
        """One (structure, dose setter) pair per criterion row."""
        cases = []
        for name, (point, thr) in OAR_CRITERIA.items():
            kind = ("oar_max" if point == "D_0.1cc" else "oar_mean")
            cases.append((Structure(name, kind, np.arange(30)), point, thr, False))
        for level, thr in PTV_D99_THRESHOLDS.items():
            s = Structure(f"ptv{int(level)}", "ptv", np.arange(30), level)
            cases.append((s, "D_99", thr, True))
        return cases

    @pytest.mark.parametrize("offset,expect", [(-1e-9, True), (0.0, True),
                                               (1e-6, False)])
    def test_every_oar_roi_at_threshold(self, offset, expect):
        grid = VoxelGrid((30, 1, 1), (10.0, 10.0, 10.0))  # 1 cc voxels
        for s, point, thr, is_target in self.all_roi_cases():
            if is_target:
                continue
            dose = np.full(30, thr + offset)
            rep = criteria_report(dose, StructureSet((s,)), grid)
            assert len(rep.rows) == 1
            row = rep.rows[0]
            assert row.threshold_gy == thr
            assert row.satisfied is expect, (s.name, offset)

    @pytest.mark.parametrize("offset,expect", [(-1e-6, False), (0.0, True),
                                               (1e-9, True)])
    def test_every_target_roi_at_threshold(self, offset, expect):
        grid = VoxelGrid((30, 1, 1), (10.0, 10.0, 10.0))
        for s, point, thr, is_target in self.all_roi_cases():
            if not is_target:
                continue
            dose = np.full(30, thr + offset)
            rep = criteria_report(dose, StructureSet((s,)), grid)
            row = rep.rows[0]
            assert row.is_target
            assert row.satisfied is expect, (s.name, offset)

    def test_literal_le_flips_target_reading(self):
        grid = VoxelGrid((30, 1, 1), (10.0, 10.0, 10.0))
        s = Structure("ptv70", "ptv", np.arange(30), 70.0)
        hot = np.full(30, 70.0)
        assert criteria_report(hot, StructureSet((s,)), grid).rows[0].satisfied
        assert not criteria_report(hot, StructureSet((s,)), grid,
                                   literal_le=True).rows[0].satisfied

    def test_absent_rois_skipped(self):
        grid = grid_for(10)
        structures = StructureSet((
            Structure("body", "oar", np.arange(10)),        # no criterion
            Structure("ptv60", "ptv", np.arange(5), 60.0),  # no threshold level
        ))
        rep = criteria_report(np.zeros(10), structures, grid)
        assert rep.rows == []
        assert rep.all_pct is None

    def test_report_percentages(self):
        grid = VoxelGrid((20, 1, 1), (10.0, 10.0, 10.0))
        structures = StructureSet((
            Structure("brainstem", "oar_max", np.arange(10)),
            Structure("larynx", "oar_mean", np.arange(10, 20)),
            Structure("ptv70", "ptv", np.arange(20), 70.0),
        ))
        dose = np.zeros(20)  # OARs trivially fine, target cold
        rep = criteria_report(dose, structures, grid)
        assert rep.oar_pct == 100.0
        assert rep.target_pct == 0.0
        assert rep.all_pct == pytest.approx(200.0 / 3.0)
        d = rep.to_dict()
        assert len(d["criteria"]) == 3
        assert d["satisfied_pct"]["all"] == rep.all_pct


class TestCompare:
    def test_identical_plans_zero_diff(self):
        case = helpers.random_case(3, n_voxels=40, n_beamlets=6,
                                   voxel_size_mm=(10.0, 10.0, 10.0))
        dose = np.linspace(0.0, 70.0, 40)
        rows = compare_dvh_points(dose, dose, case.structures, case.grid)
        assert rows
        assert all(r["signed_diff_gy"] == 0.0 for r in rows)
        assert all(r["abs_diff_gy"] == 0.0 for r in rows)

    def test_uniform_shift_moves_every_point_by_one(self):
        case = helpers.random_case(3, n_voxels=40, n_beamlets=6,
                                   voxel_size_mm=(10.0, 10.0, 10.0))
        dose = np.linspace(0.0, 70.0, 40)
        rows = compare_dvh_points(dose + 1.0, dose, case.structures, case.grid)
        for r in rows:
            assert r["signed_diff_gy"] == pytest.approx(1.0)

    def test_length_mismatch_raises(self):
        case = helpers.random_case(3, n_voxels=40)
        with pytest.raises(LengthMismatch):
            compare_dvh_points(np.zeros(40), np.zeros(39),
                               case.structures, case.grid)

    def test_structure_points_kinds(self):
        case = helpers.random_case(3, n_voxels=40,
                                   voxel_size_mm=(10.0, 10.0, 10.0))
        dose = np.linspace(0.0, 70.0, 40)
        ptv = case.structures.get("ptv70")
        oar = case.structures.get("larynx")
        assert set(structure_points(dose, ptv, case.grid)) == {"D_1", "D_95", "D_99"}
        assert set(structure_points(dose, oar, case.grid)) == {"D_mean", "D_0.1cc"}

    def test_diff_summary_quartiles(self):
        rows = [{"point": "D_mean", "signed_diff_gy": float(v)}
                for v in range(1, 6)]
        out = diff_summary(rows)
        assert out["D_mean"]["median"] == 3.0
        assert out["D_mean"]["min"] == 1.0
        assert out["D_mean"]["max"] == 5.0
        assert out["D_mean"]["n"] == 5


class TestAggregate:
    def make_report(self, satisfied_flags):
        grid = VoxelGrid((20, 1, 1), (10.0, 10.0, 10.0))
        structures = StructureSet((
            Structure("larynx", "oar_mean", np.arange(10)),
            Structure("ptv70", "ptv", np.arange(10, 20), 70.0),
        ))
        oar_ok, tgt_ok = satisfied_flags
        dose = np.zeros(20)
        dose[:10] = 40.0 if oar_ok else 50.0   # larynx mean vs 45
        dose[10:] = 70.0 if tgt_ok else 10.0   # D_99 vs 66.5
        return criteria_report(dose, structures, grid)

    def test_all_satisfied(self):
        agg = aggregate_satisfaction([self.make_report((True, True))] * 3)
        assert agg["per_roi"] == {"larynx": 100.0, "ptv70": 100.0}
        assert agg["groups"]["All ROIs"] == 100.0

    def test_half_satisfied(self):
        reports = [self.make_report((True, True)),
                   self.make_report((False, False))]
        agg = aggregate_satisfaction(reports)
        assert agg["per_roi"] == {"larynx": 50.0, "ptv70": 50.0}
        assert agg["groups"]["All OARs"] == 50.0
        assert agg["groups"]["All Targets"] == 50.0

    def test_counts_conserved(self):
        reports = [self.make_report((True, False)) for _ in range(4)]
        agg = aggregate_satisfaction(reports)
        assert agg["group_counts"]["All OARs"] == 4
        assert agg["group_counts"]["All Targets"] == 4
        assert agg["group_counts"]["All ROIs"] == 8
        assert sum(agg["per_roi_counts"].values()) == 8

    def test_roi_absent_from_some_reports(self):
        grid = VoxelGrid((10, 1, 1), (10.0, 10.0, 10.0))
        only_larynx = criteria_report(
            np.full(10, 40.0),
            StructureSet((Structure("larynx", "oar_mean", np.arange(10)),)),
            grid)
        agg = aggregate_satisfaction([only_larynx,
                                      self.make_report((False, True))])
        # larynx percent uses 2 reports, ptv70 only 1
        assert agg["per_roi_counts"] == {"larynx": 2, "ptv70": 1}
        assert agg["per_roi"]["larynx"] == 50.0
        assert agg["per_roi"]["ptv70"] == 100.0

    def test_empty_input_raises(self):
        with pytest.raises(ValueError):
            aggregate_satisfaction([])
