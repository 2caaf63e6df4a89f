import numpy as np
import pytest

from lesionxai import autodiff as ad
from lesionxai import experiments as ex
from lesionxai.saliency import NoiseSpec


@pytest.fixture(scope="module")
def study_cfg():
    return ex.StudyConfig(tn_count=2, bootstrap_resamples=100, omega_cap=64)


@pytest.fixture(scope="module")
def noise():
    return NoiseSpec(n=1, sigma=0.05, seed=0)


@pytest.fixture(scope="module")
def table(small_model, small_phantoms, noise, study_cfg):
    return ex.distribution_study(small_model, small_phantoms[:2], noise, study_cfg)


class TestDistributionStudy:
    def test_rows_cover_both_modalities(self, table):
        assert {r.modality for r in table.rows} == {0, 1}

    def test_tn_rows_present(self, table):
        assert len(table.values("TN", 0, "max")) == 4  # 2 phantoms x 2 spheres

    def test_summaries_have_ci_bounds(self, table):
        for s in table.summaries:
            assert s.ci_max[0] <= s.median_max <= s.ci_max[1]
            assert s.ci_min[0] <= s.median_min <= s.ci_min[1]

    def test_tests_only_for_populated_pairs(self, table):
        present = {c for c in ex.CATEGORIES if len(table.values(c, 0, "max"))}
        for t in table.tests:
            assert t.cat_a in present and t.cat_b in present
            assert 0.0 <= t.result.p <= 1.0

    def test_median_helper(self, table):
        assert np.isfinite(table.median("TP", 0, "max"))
        assert np.isnan(table.median("FN", 0, "max")) or len(table.values("FN", 0, "max"))

    def test_csv_roundtrip_is_deterministic(self, table, tmp_path):
        ex.write_extrema_csv(table, tmp_path / "a.csv")
        ex.write_extrema_csv(table, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        ex.write_extrema_summary_csv(table, tmp_path / "s.csv")
        text = (tmp_path / "s.csv").read_text()
        assert text.startswith("# lesionxai extrema summary v1")


class TestSanity:
    def test_empty_region_below_tp(self, small_model, small_phantoms, noise, study_cfg, table):
        rep = ex.sanity_empty_region(
            small_model, small_phantoms[0], noise, study_cfg, table,
            rng=np.random.default_rng(0),
        )
        # the directional factor-vs-TP check runs in the acceptance suite with
        # a properly trained model; here only the plumbing is verified
        assert rep.tp_peak_ratio is not None and rep.tp_peak_ratio > 0.0
        assert rep.within_tn_iqr in (True, False)

    def test_single_voxel_mass_is_local(self, small_model, small_phantoms, noise, study_cfg):
        p = small_phantoms[0]
        rep = ex.sanity_single_voxel(small_model, p, p.instances[0], noise, study_cfg)
        assert rep.nonzero_within_rf
        assert 0.0 < rep.mass_fraction_near_lesion <= 1.0
        # the chosen voxel belongs to the instance
        assert tuple(rep.voxel) in {tuple(v) for v in p.instances[0].voxels}


class TestRelocation:
    def test_three_cases_reported(self, small_model, small_phantoms, noise, study_cfg):
        p = small_phantoms[0]
        reports = ex.relocation_study(
            small_model, p, p.instances[0], noise, study_cfg,
            rng=np.random.default_rng(0),
        )
        assert [(r.destination, r.margin_mm) for r in reports] == [
            ("white-matter", 0), ("background", 0), ("background", 3),
        ]
        wm = reports[0]
        assert wm.placed and wm.detected


class TestContext:
    def test_curve_plateaus_at_receptive_field(self, small_model, small_phantoms, study_cfg):
        p = small_phantoms[0]
        radius = max(ad.receptive_field(small_model))
        curve = ex.context_experiment(
            small_model, p, p.instances[0], iterations=radius + 3, cfg=study_cfg
        )
        scores = curve.scores()
        assert len(scores) == radius + 4
        plateau = scores[radius:]
        assert np.all(plateau == plateau[0])  # exactly constant past the radius

    def test_curve_depends_on_context(self, small_model, small_phantoms, study_cfg):
        p = small_phantoms[0]
        curve = ex.context_experiment(small_model, p, p.instances[0], iterations=6, cfg=study_cfg)
        scores = curve.scores()
        # revealing context must change the score; the quickly trained toy
        # model is already confident from the lesion voxels alone, so the
        # direction of the change is not asserted here
        assert len(set(scores.tolist())) > 1
        assert any(pt.detected for pt in curve.points)

    def test_negative_iterations_rejected(self, small_model, small_phantoms, study_cfg):
        with pytest.raises(ValueError):
            ex.context_experiment(
                small_model, small_phantoms[0], small_phantoms[0].instances[0],
                iterations=-1, cfg=study_cfg,
            )

    def test_aggregate_and_csv_roundtrip(self, small_model, small_phantoms, study_cfg, tmp_path):
        p = small_phantoms[0]
        curves = [
            ex.context_experiment(small_model, p, inst, iterations=2, cfg=study_cfg)
            for inst in p.instances[:2]
        ]
        agg = ex.aggregate_context_curves(curves)
        assert len(agg) == 3
        assert all(a.total == len(curves) for a in agg)
        ex.write_context_csv(agg, tmp_path / "c.csv")
        back = ex.read_context_csv(tmp_path / "c.csv")
        assert [(a.k, a.detected_count) for a in back] == [
            (a.k, a.detected_count) for a in agg
        ]


def test_volume_band(small_phantoms):
    lo, hi = ex.context_volume_band(small_phantoms)
    vols = [i.volume_mm3 for p in small_phantoms for i in p.instances]
    mean = float(np.mean(vols))
    assert lo == pytest.approx(0.85 * mean)
    assert hi == pytest.approx(1.15 * mean)
