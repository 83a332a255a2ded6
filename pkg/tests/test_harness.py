import numpy as np
import pytest

from rmcds import cli
from rmcds.core import ParameterError, SamplingMask, generate_low_rank, generate_mask
from rmcds.harness import (
    RECORD_FIELDS,
    ExperimentSpec,
    build_instance,
    csv_header,
    monotonicity_report,
    resolve_threads,
    run_sweep,
    run_trial,
    substream_seed,
    verify_pipeline,
)
from rmcds.io import parse_kv, read_mask, write_mask, write_matrix


class TestSeeding:
    def test_substreams_differ(self):
        seeds = {substream_seed(7, k) for k in range(4)}
        assert len(seeds) == 4

    def test_stable(self):
        assert substream_seed(7, 1) == substream_seed(7, 1)

    def test_instance_deterministic(self):
        spec = ExperimentSpec(n=12, r=1, rho=0.1)
        a = build_instance(spec, 3)
        b = build_instance(spec, 3)
        assert np.array_equal(a.Y, b.Y) and a.mask == b.mask


class TestSpec:
    @pytest.mark.parametrize("kw", [dict(seeds=[]), dict(n=1), dict(r=0), dict(rho=1.0),
                                    dict(lambda_mode=-1.0)])
    def test_invalid(self, kw):
        base = dict(n=10, r=1)
        base.update(kw)
        with pytest.raises(ParameterError):
            ExperimentSpec(**base).validate()

    def test_theorem_lambda(self):
        assert ExperimentSpec(n=20).lam() == pytest.approx(1 / np.sqrt(20 * np.log(20)))


class TestRunTrial:
    def test_full_observation_success(self):
        spec = ExperimentSpec(n=20, r=1, rho=0.0, mask_kind="full", mask_params={},
                              basis="sign")
        rec = run_trial(spec, 0)
        assert rec.status == "ok"
        assert rec.success and rec.converged

    def test_heavy_corruption_recorded(self):
        spec = ExperimentSpec(n=20, r=1, rho=0.9, mask_params={"rate": 0.6})
        rec = run_trial(spec, 0)
        assert rec.conditions["all_pass"] is False
        assert isinstance(rec.success, bool)

    def test_identical_rows(self):
        spec = ExperimentSpec(n=20, r=1, rho=0.05, mask_params={"rate": 0.8})
        assert run_trial(spec, 5).csv_row() == run_trial(spec, 5).csv_row()

    def test_success_implies_converged(self):
        spec = ExperimentSpec(n=20, r=1, rho=0.05, mask_params={"rate": 0.8},
                              solver={"max_iters": 2})
        rec = run_trial(spec, 0)
        assert not rec.converged and not rec.success

    def test_error_lands_in_status(self):
        spec = ExperimentSpec(n=10, r=1, mask_kind="block", mask_params={"b": 10})
        rec = run_trial(spec, 0)
        assert rec.status.startswith("ParameterError")
        assert not rec.success

    def test_schema(self):
        spec = ExperimentSpec(n=10, r=1, rho=0.05)
        rec = run_trial(spec, 0)
        assert list(rec.row()) == list(RECORD_FIELDS)
        assert csv_header().split(",") == list(RECORD_FIELDS)
        assert csv_header(timing=True).endswith(",wall_time")
        assert len(rec.csv_row(timing=True).split(",")) == len(RECORD_FIELDS) + 1


class TestSweep:
    def test_one_cell(self):
        spec = ExperimentSpec(n=10, r=1, rho=0.0, seeds=[1])
        res = run_sweep(spec)
        assert len(res.records) == 1 and len(res.summary) == 1
        assert len(res.data_csv().strip().split("\n")) == 2
        assert len(res.summary_csv().strip().split("\n")) == 2

    def test_empty_grid(self):
        with pytest.raises(ParameterError):
            run_sweep(ExperimentSpec(n=10), rhos=[])

    def test_reproducible(self):
        spec = ExperimentSpec(n=12, r=1, seeds=[0, 1])
        a = run_sweep(spec, rhos=[0.0, 0.1])
        b = run_sweep(spec, rhos=[0.0, 0.1])
        assert a.data_csv() == b.data_csv()

    def test_process_pool_matches_serial(self):
        spec = ExperimentSpec(n=10, r=1, seeds=[0, 1])
        serial = run_sweep(spec, rhos=[0.0, 0.1], threads=1)
        pooled = run_sweep(spec, rhos=[0.0, 0.1], threads=2)
        assert serial.data_csv() == pooled.data_csv()

    def test_monotonicity_report(self):
        rows = [{"r": 1, "rate": 0.6, "rho": rho, "success_fraction": f}
                for rho, f in [(0.0, 1.0), (0.1, 0.6), (0.2, 0.7), (0.3, 0.0)]]
        rep = monotonicity_report(rows)
        assert rep["rho_inversions"] == 1
        assert rep["rho_max_inversion"] == pytest.approx(0.1)

    def test_rho_trend(self):
        seeds = [substream_seed(0, cli.TRIAL_BASE + j) for j in range(10)]
        spec = ExperimentSpec(n=60, r=2, mask_params={"rate": 0.6}, seeds=seeds,
                              conditions={"raiip_restarts": 10})
        res = run_sweep(spec, rhos=[0.0, 0.02, 0.05, 0.1, 0.2])
        assert res.trend["rho_inversions"] <= 1
        assert res.trend["rho_max_inversion"] <= 0.1 + 1e-12


class TestThreads:
    def test_env_fallback(self, monkeypatch):
        monkeypatch.setenv("RMCDS_THREADS", "3")
        assert resolve_threads() == 3
        assert resolve_threads(2) == 2

    def test_default(self, monkeypatch):
        monkeypatch.delenv("RMCDS_THREADS", raising=False)
        assert resolve_threads() == 1


class TestVerifyPipeline:
    def test_full_mask(self):
        spec = ExperimentSpec(n=20, r=1, rho=0.0, mask_kind="full", mask_params={},
                              basis="sign")
        rep = verify_pipeline(spec, 0)
        assert rep["kkt_pass"] and rep["success"]
        assert rep["least_squares"]["terms"] == 0

    def test_conditions_passing_n60(self):
        spec = ExperimentSpec(n=60, r=1, rho=0.0, mask_params={"rate": 0.9}, basis="sign")
        rep = verify_pipeline(spec, 2)
        assert rep["conditions"]["all_pass"]
        assert rep["implication_holds"]

    def test_failure_margins_reported(self):
        spec = ExperimentSpec(n=20, r=1, rho=0.3, mask_params={"rate": 0.5})
        rep = verify_pipeline(spec, 0)
        if not rep["success"]:
            assert rep["failure_margins"]


class TestCli:
    def run(self, capsys, *argv):
        code = cli.main(list(argv))
        out = capsys.readouterr()
        return code, out.out, out.err

    def test_gen_mask_roundtrip(self, capsys, tmp_path):
        path = tmp_path / "m.txt"
        code, _, _ = self.run(capsys, "gen-mask", "--n", "8", "--rate", "0.5", "--seed", "3",
                              "--out", str(path))
        assert code == 0
        assert read_mask(path) == generate_mask(8, "bernoulli", rate=0.5, seed=3)

    def test_check(self, capsys):
        code, out, _ = self.run(capsys, "check", "--n", "12", "--rho", "0.05")
        kv = parse_kv(out)
        assert code == 0 and "all_pass" in kv and "gamma_eff" in kv

    def test_solve_from_files(self, capsys, tmp_path):
        m = generate_low_rank(8, 1, 0, basis="sign")
        write_matrix(m.L0, tmp_path / "y.csv")
        write_mask(SamplingMask.full(8), tmp_path / "o.txt")
        code, out, _ = self.run(capsys, "solve", "--input", str(tmp_path / "y.csv"),
                                "--mask", f"file:{tmp_path / 'o.txt'}",
                                "--out", str(tmp_path / "res"))
        assert code == 0
        assert parse_kv(out)["converged"] == "true"
        assert (tmp_path / "res" / "L_star.csv").exists()

    def test_certify(self, capsys):
        code, out, _ = self.run(capsys, "certify", "--n", "20", "--mask", "full", "--basis",
                                "sign")
        assert code == 0 and parse_kv(out)["pass"] == "true"

    def test_sweep(self, capsys, tmp_path):
        out = tmp_path / "s.csv"
        code, _, err = self.run(capsys, "sweep", "--n", "10", "--rho", "0,0.1", "--trials", "2",
                                "--out", str(out))
        assert code == 0
        assert len(out.read_text().strip().split("\n")) == 1 + 4
        assert len((tmp_path / "s.summary.csv").read_text().strip().split("\n")) == 1 + 2
        assert "rho_inversions" in err

    def test_verify(self, capsys):
        code, out, _ = self.run(capsys, "verify", "--n", "12", "--mask", "full")
        assert code == 0 and "implication_holds" in parse_kv(out)

    def test_usage_errors(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["nope"])
        assert info.value.code == 1
        assert self.run(capsys, "check", "--rho", "0.1,0.2")[0] == 1
        assert self.run(capsys, "check", "--mask", "weird")[0] == 1
        assert self.run(capsys, "sweep", "--rho", "", "--n", "5")[0] == 1

    def test_io_error(self, capsys, tmp_path):
        code, _, err = self.run(capsys, "gen-mask", "--n", "4",
                                "--out", str(tmp_path / "missing" / "m.txt"))
        assert code == 2 and "I/O" in err
