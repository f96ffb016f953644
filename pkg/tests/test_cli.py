import csv
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import stats

from trilevel.advhpt import bundled_dataset_path
from trilevel.cli import _ci_half, aggregate, main, run_experiment, verify_checks
from trilevel.config import ExperimentConfig, from_ini, load_config, save_config, to_ini
from trilevel.driver import RunTrace, TraceRecord


def tiny_config(tmp_path, **overrides) -> ExperimentConfig:
    base = dict(
        problem="quadratic", n=5, m=5, t=5, spec_seed=1,
        engine="H", mode="deterministic", schedule="decaying",
        alpha_bar=0.3, beta_bar=0.2, gamma_bar=0.1,
        ul_iters=15, adaptive=True, repetitions=2, base_seed=7,
        output_dir=str(tmp_path / "out"),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestConfig:
    def test_round_trip_semantic_identity(self, tmp_path):
        cfg = tiny_config(tmp_path, engine="AD", neumann_q=12, c0=2.0, c1=None,
                          mode="stochastic", std_grad=0.5, std_hess=0.05)
        assert from_ini(to_ini(cfg)) == cfg

    def test_save_and_load(self, tmp_path):
        cfg = tiny_config(tmp_path)
        path = tmp_path / "cfg.ini"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_validation_errors(self, tmp_path):
        with pytest.raises(ValueError):
            tiny_config(tmp_path, problem="pentalevel").validate()
        with pytest.raises(ValueError):
            tiny_config(tmp_path, problem="adv-hpt", csv=None).validate()
        with pytest.raises(ValueError):
            tiny_config(tmp_path, repetitions=0).validate()

    def test_h_engine_hess_noise_warns_not_errors(self, tmp_path):
        cfg = tiny_config(tmp_path, mode="stochastic", engine="H", std_hess=0.5)
        with pytest.warns(UserWarning):
            cfg.validate()


class TestAggregation:
    def test_ci_half_width_matches_t_quantile(self):
        rng = np.random.default_rng(0)
        values = rng.normal(3.0, 1.0, 10)
        expected = stats.t.ppf(0.975, 9) * values.std(ddof=1) / math.sqrt(10)
        assert _ci_half(values) == pytest.approx(expected)

    def test_single_run_zero_width(self):
        assert _ci_half(np.array([4.2])) == 0.0

    def test_identical_runs_zero_width(self):
        assert _ci_half(np.full(10, 1.25)) == 0.0

    def _trace(self, values):
        records = [
            TraceRecord(i=i + 1, cum_ml=0, cum_ll=0, wall_s=0.1 * (i + 1),
                        f1=v, f2=0.0, f3=0.0, gnorm=0.0, J=1, K=1,
                        alpha=0.1, beta=0.1, gamma=0.1)
            for i, v in enumerate(values)
        ]
        return RunTrace(records=records)

    def test_aggregate_mean_and_ci(self):
        traces = [self._trace([10.0, 5.0]), self._trace([12.0, 7.0])]
        agg = aggregate(traces)
        np.testing.assert_allclose(agg.mean_f1, [11.0, 6.0])
        half = stats.t.ppf(0.975, 1) * np.std([10.0, 12.0], ddof=1) / math.sqrt(2)
        np.testing.assert_allclose(agg.ci_hi[0] - agg.mean_f1[0], half)


class TestRunExperiment:
    def test_outputs_and_schema(self, tmp_path):
        cfg = tiny_config(tmp_path)
        agg = run_experiment(cfg)
        out = tmp_path / "out"
        for name in ("run_0.csv", "run_1.csv", "aggregate.csv", "aggregate_time.csv",
                      "config.ini", "spec.json"):
            assert (out / name).exists()
        with open(out / "run_0.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == [
            "run_id", "i", "cum_ml", "cum_ll", "wall_s", "f1", "f2", "f3",
            "gnorm", "J", "K", "alpha", "beta", "gamma",
        ]
        assert len(rows) == 1 + cfg.ul_iters
        # parse-back round-trips exactly (repr of float)
        assert float(rows[1][5]) == agg.traces[0].records[0].f1

    def test_deterministic_mode_seed_invariant(self, tmp_path):
        a = run_experiment(tiny_config(tmp_path, base_seed=1, output_dir=str(tmp_path / "a")))
        b = run_experiment(tiny_config(tmp_path, base_seed=999, output_dir=str(tmp_path / "b")))
        np.testing.assert_array_equal(a.mean_f1, b.mean_f1)

    def test_single_repetition_zero_ci(self, tmp_path):
        agg = run_experiment(tiny_config(tmp_path, repetitions=1))
        np.testing.assert_array_equal(agg.ci_lo, agg.mean_f1)
        np.testing.assert_array_equal(agg.ci_hi, agg.mean_f1)

    def test_stochastic_ci_positive(self, tmp_path):
        cfg = tiny_config(tmp_path, mode="stochastic", std_grad=0.5, std_hess=0.0,
                          repetitions=4, ul_iters=6)
        agg = run_experiment(cfg)
        assert (agg.ci_hi - agg.ci_lo)[1:].max() > 0.0

    def test_jobs_parallel_matches_serial(self, tmp_path):
        cfg1 = tiny_config(tmp_path, mode="stochastic", std_grad=0.2, repetitions=3,
                           ul_iters=5, output_dir=str(tmp_path / "serial"))
        cfg2 = tiny_config(tmp_path, mode="stochastic", std_grad=0.2, repetitions=3,
                           ul_iters=5, output_dir=str(tmp_path / "parallel"))
        a = run_experiment(cfg1, jobs=1)
        b = run_experiment(cfg2, jobs=3)
        np.testing.assert_array_equal(a.mean_f1, b.mean_f1)

    def test_adv_hpt_outputs(self, tmp_path):
        cfg = tiny_config(
            tmp_path, problem="adv-hpt", csv=bundled_dataset_path(), engine="AD",
            mode="stochastic", neumann_q=5, alpha_bar=0.1, beta_bar=0.01, gamma_bar=0.1,
            ul_iters=5, repetitions=2, minibatch=64, noise_test_realizations=10,
        )
        run_experiment(cfg)
        out = tmp_path / "out"
        with open(out / "noisy_test.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["run_id", "realization", "mse"]
        assert len(rows) == 1 + 2 * 10


class TestVerifyCommand:
    def test_default_checks_pass(self, tmp_path):
        cfg = tiny_config(tmp_path, engine="NFD", n=8, m=8, t=8)
        checks = verify_checks(cfg)
        assert all(ok for _, _, _, ok in checks)

    def test_huge_fd_eps_flagged(self, tmp_path):
        cfg = tiny_config(tmp_path, engine="NFD", fd_eps=10.0)
        checks = verify_checks(cfg)
        assert any(not ok for _, _, _, ok in checks)

    def test_corrupt_spec_surfaces_construction_error(self):
        from trilevel.synthetic import QuadraticSpec

        with pytest.raises(ValueError):
            QuadraticSpec(
                n=2, m=2, t=2,
                h_x=np.zeros(2), h_y=np.zeros(2), h_z=np.zeros(2),
                Hxx=np.array([[1.0, 0.5], [-0.5, 1.0]]),  # asymmetric
                Hyy=np.eye(2), Hzz=np.eye(2),
                Hxy=np.zeros((2, 2)), Hxz=np.zeros((2, 2)), Hyz=np.zeros((2, 2)),
            )


class TestMainEntry:
    def test_run_and_verify_exit_codes(self, tmp_path):
        cfg = tiny_config(tmp_path, ul_iters=5, repetitions=1)
        path = tmp_path / "cfg.ini"
        save_config(cfg, path)
        assert main(["run", "--config", str(path)]) == 0
        assert main(["split-info", bundled_dataset_path()]) == 0

    def test_bad_config_exit_code(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[problem]\nkind = pentalevel\n")
        assert main(["run", "--config", str(path)]) == 2

    def test_seed_and_out_overrides(self, tmp_path):
        cfg = tiny_config(tmp_path, ul_iters=3, repetitions=1)
        path = tmp_path / "cfg.ini"
        save_config(cfg, path)
        out2 = tmp_path / "other"
        assert main(["run", "--config", str(path), "--out", str(out2), "--seed", "42"]) == 0
        assert (out2 / "aggregate.csv").exists()
        echoed = load_config(out2 / "config.ini")
        assert echoed.base_seed == 42

    def test_module_invocation(self, tmp_path):
        cfg = tiny_config(tmp_path, ul_iters=3, repetitions=1)
        path = tmp_path / "cfg.ini"
        save_config(cfg, path)
        proc = subprocess.run(
            [sys.executable, "-m", "trilevel.cli", "run", "--config", str(path)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr


class TestGridSearch:
    def test_grid_emits_27_rows(self, tmp_path):
        cfg = tiny_config(tmp_path, n=3, m=3, t=3, ul_iters=3, repetitions=1,
                          adaptive=False)
        path = tmp_path / "cfg.ini"
        save_config(cfg, path)
        assert main(["grid-search", "--config", str(path)]) == 0
        with open(tmp_path / "out" / "grid.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + 27
        assert rows[0] == ["alpha_bar", "beta_bar", "gamma_bar", "final_f1"]
