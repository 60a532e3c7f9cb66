"""Front-end behavior: outputs, precedence, determinism, exit taxonomy."""

import os

import numpy as np
import pandas as pd
import pytest

from megaclock.cli import EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, main


def run(*argv):
    return main(list(argv))


@pytest.fixture
def panel_dir(tmp_path):
    out = tmp_path / "sim"
    config = tmp_path / "sim.cfg"
    config.write_text("covariate_effects=x1:0.5\n")
    assert run("simulate", "--kind", "panel", "--seed", "11", "-n", "1500",
               "--config", str(config), "--out-dir", str(out)) == EXIT_OK
    return out


class TestSimulate:
    def test_writes_cohort_truth_and_manifest(self, panel_dir):
        for name in ("cohort.csv", "truth.csv", "manifest.txt"):
            assert (panel_dir / name).exists()
        cohort = pd.read_csv(panel_dir / "cohort.csv")
        assert not any(c.startswith("true_") for c in cohort.columns)
        truth = pd.read_csv(panel_dir / "truth.csv")
        assert "true_latent" in truth.columns

    def test_seed_required(self, tmp_path):
        assert run("simulate", "--kind", "panel",
                   "--out-dir", str(tmp_path)) == EXIT_INPUT

    def test_unknown_config_key_rejected(self, tmp_path):
        config = tmp_path / "bad.cfg"
        config.write_text("not_a_setting=1\n")
        assert run("simulate", "--seed", "1", "--config", str(config),
                   "--out-dir", str(tmp_path)) == EXIT_INPUT


class TestAggregate:
    def test_score_columns(self, panel_dir, tmp_path):
        out = tmp_path / "agg"
        assert run("aggregate", "--input", str(panel_dir / "cohort.csv"),
                   "--out-dir", str(out)) == EXIT_OK
        scores = pd.read_csv(out / "scores.csv")
        expected = {"subject_id", "mega_wgt", "mega_fa"}
        expected |= {f"mega_wgt_wo_clock_{k}" for k in range(1, 5)}
        expected |= {f"mega_fa_wo_clock_{k}" for k in range(1, 5)}
        assert set(scores.columns) == expected
        weights = pd.read_csv(out / "weights.csv")
        for method in ("wgt", "fa"):
            sub = weights.loc[weights["method"] == method, "weight"]
            assert sub.sum() == pytest.approx(1.0, abs=1e-8)

    def test_methods_flag_restricts(self, panel_dir, tmp_path):
        out = tmp_path / "agg"
        assert run("aggregate", "--input", str(panel_dir / "cohort.csv"),
                   "--methods", "wgt", "--out-dir", str(out)) == EXIT_OK
        scores = pd.read_csv(out / "scores.csv")
        assert "mega_wgt" in scores.columns
        assert "mega_fa" not in scores.columns
        assert not (out / "factor_diagnostics.txt").exists()

    def test_factor_diagnostics_single_factor(self, panel_dir, tmp_path):
        out = tmp_path / "agg"
        assert run("aggregate", "--input", str(panel_dir / "cohort.csv"),
                   "--out-dir", str(out)) == EXIT_OK
        diag = (out / "factor_diagnostics.txt").read_text()
        assert "n_retained=1" in diag

    def test_flag_beats_config(self, panel_dir, tmp_path):
        config = tmp_path / "agg.cfg"
        config.write_text("methods=wgt\n")
        out = tmp_path / "agg"
        assert run("aggregate", "--input", str(panel_dir / "cohort.csv"),
                   "--config", str(config), "--methods", "fa",
                   "--out-dir", str(out)) == EXIT_OK
        scores = pd.read_csv(out / "scores.csv")
        assert "mega_fa" in scores.columns
        assert "mega_wgt" not in scores.columns

    def test_unknown_method_rejected(self, panel_dir, tmp_path):
        assert run("aggregate", "--input", str(panel_dir / "cohort.csv"),
                   "--methods", "pca", "--out-dir", str(tmp_path)) == EXIT_INPUT

    def test_reruns_are_byte_identical(self, panel_dir, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        for out in (out1, out2):
            assert run("aggregate", "--input", str(panel_dir / "cohort.csv"),
                       "--out-dir", str(out)) == EXIT_OK
        for name in ("scores.csv", "weights.csv", "factor_diagnostics.txt"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
        def normalized(out):
            lines = []
            for ln in (out / "manifest.txt").read_text().splitlines():
                if ln.startswith("timestamp="):
                    continue  # the one permitted non-reproducible line
                if ln.startswith("output="):
                    ln = "output=" + os.path.basename(ln.split("=", 1)[1])
                lines.append(ln)
            return lines

        assert normalized(out1) == normalized(out2)


class TestSem:
    def write_model(self, tmp_path):
        model = tmp_path / "model.txt"
        model.write_text(
            "latent ea: clock_1 clock_2 clock_3 clock_4 ref=clock_1\n"
            "covariates: x1\n"
        )
        return model

    def test_reference_cycling_preserves_likelihood(self, panel_dir, tmp_path):
        model = self.write_model(tmp_path)
        out = tmp_path / "sem"
        assert run("sem", "--input", str(panel_dir / "cohort.csv"),
                   "--model", str(model), "--seed", "3",
                   "--references", "clock_1,clock_2",
                   "--out-dir", str(out)) == EXIT_OK
        log = (out / "sem_convergence.txt").read_text()
        lls = [float(line.split("log_likelihood=")[1])
               for line in log.splitlines() if line.startswith("reference=")]
        assert len(lls) == 2
        assert lls[0] == pytest.approx(lls[1], abs=1e-6)
        scores = pd.read_csv(out / "sem_scores.csv")
        assert {"mega_sem_clock_1", "mega_sem_clock_2"} <= set(scores.columns)
        for ref in ("clock_1", "clock_2"):
            assert (out / f"sem_params_{ref}.csv").exists()

    def test_seed_and_model_required(self, panel_dir, tmp_path):
        model = self.write_model(tmp_path)
        assert run("sem", "--input", str(panel_dir / "cohort.csv"),
                   "--model", str(model), "--out-dir", str(tmp_path)) == EXIT_INPUT
        assert run("sem", "--input", str(panel_dir / "cohort.csv"),
                   "--seed", "3", "--out-dir", str(tmp_path)) == EXIT_INPUT

    def test_mc_coverage_file(self, panel_dir, tmp_path):
        model = self.write_model(tmp_path)
        out = tmp_path / "sem"
        assert run("sem", "--input", str(panel_dir / "cohort.csv"),
                   "--model", str(model), "--seed", "3", "--mc", "5",
                   "--out-dir", str(out)) == EXIT_OK
        coverage = pd.read_csv(out / "sem_mc_coverage.csv")
        assert set(coverage.columns) == {"parameter", "coverage", "replications"}
        assert (coverage["replications"] == 5).all()
        assert coverage["coverage"].between(0.0, 1.0).all()


class TestRegress:
    def test_recovers_covariate_effect(self, panel_dir, tmp_path):
        out = tmp_path / "reg"
        assert run("regress", "--input", str(panel_dir / "cohort.csv"),
                   "--outcome", "clock_1", "--regressors", "x1,age_years",
                   "--out-dir", str(out)) == EXIT_OK
        frame = pd.read_csv(out / "regression.csv")
        row = frame.loc[frame["term"] == "x1"].iloc[0]
        assert abs(row["coefficient"] - 0.5) <= 3.0 * row["std_error"]
        assert (out / "regression.txt").exists()

    def test_missing_arguments(self, panel_dir, tmp_path):
        assert run("regress", "--input", str(panel_dir / "cohort.csv"),
                   "--out-dir", str(tmp_path)) == EXIT_INPUT


class TestRdd:
    @pytest.fixture
    def rdd_dir(self, tmp_path):
        out = tmp_path / "rdd_sim"
        config = tmp_path / "rdd.cfg"
        config.write_text("tau=0.5\ngroup_share=0.5\ngroup_tau=0.6\n")
        assert run("simulate", "--kind", "rdd", "--seed", "21", "-n", "6000",
                   "--config", str(config), "--out-dir", str(out)) == EXIT_OK
        return out

    def test_three_panel_layout(self, rdd_dir, tmp_path):
        out = tmp_path / "rdd"
        assert run("rdd", "--input", str(rdd_dir / "cohort.csv"),
                   "--outcome", "outcome", "--out-dir", str(out)) == EXIT_OK
        text = (out / "rdd.txt").read_text()
        assert "Panel A: May - December" in text
        assert "Panel B: June - November" in text
        assert "Panel C: July - October" in text
        frame = pd.read_csv(out / "rdd.csv")
        assert len(frame) == 3
        assert sorted(frame["bandwidth"]) == [2, 3, 4]

    def test_group_heterogeneity_effects_csv(self, rdd_dir, tmp_path):
        out = tmp_path / "rdd"
        assert run("rdd", "--input", str(rdd_dir / "cohort.csv"),
                   "--outcome", "outcome", "--group", "group",
                   "--out-dir", str(out)) == EXIT_OK
        effects = pd.read_csv(out / "rdd_effects.csv")
        assert sorted(effects["category"]) == ["group=0", "group=1"]
        frame = pd.read_csv(out / "rdd.csv")
        assert len(frame) == 6  # two classes per bandwidth

    def test_outcome_required(self, rdd_dir, tmp_path):
        assert run("rdd", "--input", str(rdd_dir / "cohort.csv"),
                   "--out-dir", str(tmp_path)) == EXIT_INPUT


class TestReport:
    def test_verifies_and_detects_missing(self, panel_dir, tmp_path):
        out = tmp_path / "agg"
        assert run("aggregate", "--input", str(panel_dir / "cohort.csv"),
                   "--out-dir", str(out)) == EXIT_OK
        manifest = str(out / "manifest.txt")
        assert run("report", "--manifest", manifest) == EXIT_OK
        os.remove(out / "scores.csv")
        assert run("report", "--manifest", manifest) == EXIT_INPUT


class TestExitTaxonomy:
    def test_missing_input_file(self, tmp_path):
        assert run("aggregate", "--input", str(tmp_path / "absent.csv"),
                   "--out-dir", str(tmp_path)) == EXIT_INPUT

    def test_singular_panel_is_numerical_failure(self, tmp_path):
        rng = np.random.default_rng(0)
        base = rng.standard_normal(50)
        frame = pd.DataFrame({
            "subject_id": np.arange(1, 51),
            "age_years": np.full(50, 15.0),
            "clock_1": base,
            "clock_2": base,  # duplicated clock: singular covariance
            "clock_3": rng.standard_normal(50),
        })
        path = tmp_path / "singular.csv"
        frame.to_csv(path, index=False)
        assert run("aggregate", "--input", str(path),
                   "--out-dir", str(tmp_path)) == EXIT_NUMERICAL

    def test_unparseable_flags(self):
        assert run("aggregate", "--no-such-flag") == EXIT_INPUT


class TestPipeline:
    def test_simulate_aggregate_regress_roundtrip(self, tmp_path):
        sim = tmp_path / "sim"
        config = tmp_path / "sim.cfg"
        config.write_text("covariate_effects=x1:0.5\nomega_sd=2.5\n")
        assert run("simulate", "--kind", "panel", "--seed", "5", "-n", "4000",
                   "--config", str(config), "--out-dir", str(sim)) == EXIT_OK
        agg = tmp_path / "agg"
        assert run("aggregate", "--input", str(sim / "cohort.csv"),
                   "--out-dir", str(agg)) == EXIT_OK
        scores = pd.read_csv(agg / "scores.csv")
        cohort = pd.read_csv(sim / "cohort.csv")
        merged = cohort.merge(scores[["subject_id", "mega_wgt"]], on="subject_id")
        path = tmp_path / "merged.csv"
        merged.to_csv(path, index=False)
        reg = tmp_path / "reg"
        assert run("regress", "--input", str(path), "--outcome", "mega_wgt",
                   "--regressors", "x1,age_years", "--out-dir", str(reg)) == EXIT_OK
        frame = pd.read_csv(reg / "regression.csv")
        row = frame.loc[frame["term"] == "x1"].iloc[0]
        assert abs(row["coefficient"] - 0.5) <= 3.0 * row["std_error"]
