import csv
import json
import shutil
import subprocess
from pathlib import Path

import pytest

from cffair import cli
from cffair.errors import NonFiniteError

TINY = {
    "dataset": {"kind": "synthetic_continuous", "n": 200},
    "step1": {"epochs": 2, "batch_size": 64},
    "step2": {"epochs": 2, "batch_size": 64, "lam": 1.0, "mitigation": "CF"},
    "eval": {"count_per_individual": 20, "hgr": {"max_steps": 20}},
    "plot": {"grid_points": 20, "sampler_draws": 50, "sampler_steps": 5},
    "seeds": [0, 1],
    "lambda_grid": [0.0, 1.0, 2.0],
}


def _config(tmp_path, **changes):
    doc = json.loads(json.dumps(TINY))
    for k, v in changes.items():
        if isinstance(v, dict):
            doc.setdefault(k, {}).update(v)
        else:
            doc[k] = v
    doc["output_dir"] = str(tmp_path / "out")
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def _run(cfg_path, *args):
    return cli.main([args[0], "--config", str(cfg_path), *args[1:]])


def _read_csv(path):
    lines = Path(path).read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    return lines[0].split("=", 1)[1], list(csv.DictReader(lines[1:]))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data, train-inference, train-predictor and evaluate on the tiny config."""
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = _config(tmp)
    for cmd in ("gen-data", "train-inference", "train-predictor", "evaluate"):
        assert _run(cfg, cmd) == 0, cmd
    return cfg, tmp / "out"


class TestPipeline:
    def test_gen_data_shape(self, pipeline):
        _, out = pipeline
        _, rows = _read_csv(out / "seed_0" / "data.csv")
        assert len(rows) == 200
        assert list(rows[0]) == ["x1", "x2", "x3", "x4", "A", "Y", "u1", "u2", "u3", "u4", "u5",
                                 "e_x1", "e_x2", "e_x3", "e_x4", "e_y"]

    def test_one_checkpoint_per_seed(self, pipeline):
        _, out = pipeline
        assert sorted(p.parent.name for p in out.glob("seed_*/inference.json")) == ["seed_0", "seed_1"]
        assert len(list(out.glob("seed_*/predictor.json"))) == 2

    def test_history_rows_per_epoch(self, pipeline):
        _, out = pipeline
        _, rows = _read_csv(out / "seed_0" / "inference_history.csv")
        assert [r["epoch"] for r in rows] == ["0", "1"] and "log_px" in rows[0]
        _, rows = _read_csv(out / "seed_1" / "predictor_history.csv")
        assert len(rows) == 2 and "cf_term" in rows[0]

    def test_report_keys(self, pipeline):
        _, out = pipeline
        rep = json.loads((out / "seed_0" / "eval.json").read_text())
        assert {"cf", "real_cf", "mse", "hgr_u_a"} <= set(rep)
        summary = json.loads((out / "eval_summary.json").read_text())["summary"]
        assert set(summary["cf"]) == {"mean", "std"}

    def test_every_output_carries_hash(self, pipeline):
        cfg_path, out = pipeline
        from cffair.config import RunConfig
        h = RunConfig.load(cfg_path).config_hash()
        files = [p for p in out.rglob("*") if p.is_file()]
        assert files
        for p in files:
            if p.suffix == ".json":
                assert json.loads(p.read_text())["config_hash"] == h, p
            else:
                assert p.read_text().splitlines()[0] == f"# config_hash={h}", p

    def test_rerun_is_bit_identical(self, pipeline, tmp_path):
        cfg_path, out = pipeline
        again = tmp_path / "again"
        shutil.copytree(out, again)
        for cmd in ("gen-data", "train-inference", "train-predictor", "evaluate"):
            assert _run(cfg_path, cmd) == 0
        for p in again.rglob("*"):
            if p.is_file():
                assert p.read_bytes() == (out / p.relative_to(again)).read_bytes(), p

    def test_real_cf_absent_without_true_codes(self, tmp_path):
        fix = Path(__file__).parent / "fixtures"
        schemas = Path(__file__).parent.parent / "schemas"
        rows = (fix / "adult_small.csv").read_text().splitlines()
        big = tmp_path / "adult.csv"
        big.write_text("\n".join([rows[0]] + rows[1:] * 20) + "\n")
        cfg = _config(tmp_path, dataset={"kind": "csv", "path": str(big), "schema_path": str(schemas / "adult.json")},
                      seeds=[0], eval={"hgr": {"max_steps": 20}, "count_per_individual": None})
        for cmd in ("train-inference", "train-predictor", "evaluate"):
            assert _run(cfg, cmd) == 0, cmd
        rep = json.loads((tmp_path / "out" / "seed_0" / "eval.json").read_text())
        assert "real_cf" not in rep and "accuracy" in rep and "dp_gap" in rep


class TestPlots:
    def test_scatter_has_1001_rows_and_flags_factual(self, pipeline):
        cfg, out = pipeline
        assert _run(cfg, "plot-data", "--kind", "scatter_cf") == 0
        _, rows = _read_csv(out / "seed_0" / "plot_scatter_cf.csv")
        assert len(rows) == 1001 and sum(r["is_factual"] == "1" for r in rows) == 1

    def test_dyn_sampling_inside_support(self, pipeline):
        cfg, out = pipeline
        assert _run(cfg, "plot-data", "--kind", "dyn_sampling") == 0
        _, rows = _read_csv(out / "seed_0" / "plot_dyn_sampling.csv")
        train_a = [float(r["A"]) for r in _read_csv(out / "seed_0" / "data.csv")[1]]
        draws = [float(r["a"]) for r in rows if r["source"] == "sampler"]
        assert len(draws) == 50
        assert min(train_a) - 1e-9 <= min(draws) and max(draws) <= max(train_a) + 1e-9

    def test_dyn_sampling_needs_saved_sampler(self, pipeline):
        cfg, _ = pipeline
        assert _run(cfg, "plot-data", "--kind", "dyn_sampling", "--sampler", "run") == 3


class TestSweep:
    def test_rows_sorted_and_lambda_zero_matches_none(self, tmp_path):
        cfg = _config(tmp_path, seeds=[0])
        assert _run(cfg, "sweep-lambda") == 0
        _, table = _read_csv(tmp_path / "out" / "sweep_lambda.csv")
        assert [float(r["lambda"]) for r in table] == [0.0, 1.0, 2.0]
        assert all(r["runs"] == "1" for r in table)
        out_none = tmp_path / "none"
        cfg2 = _config(tmp_path, step2={"mitigation": "None", "lam": 0.0}, seeds=[0])
        assert cli.main(["train-inference", "--config", str(cfg2), "--out", str(out_none)]) == 0
        assert cli.main(["train-predictor", "--config", str(cfg2), "--out", str(out_none)]) == 0
        assert cli.main(["evaluate", "--config", str(cfg2), "--out", str(out_none)]) == 0
        rep = json.loads((out_none / "seed_0" / "eval.json").read_text())
        assert float(table[0]["mse_mean"]) == rep["mse"] and float(table[0]["cf_mean"]) == rep["cf"]
        assert _run(cfg, "plot-data", "--kind", "lambda_curve") == 0
        _, curve = _read_csv(tmp_path / "out" / "plot_lambda_curve.csv")
        assert float(curve[0]["cf_relative"]) == 1.0

    def test_ten_by_five_summarised_in_ten_rows(self, tmp_path, monkeypatch):
        monkeypatch.setattr(cli, "_sweep_one",
                            lambda cfg, seed: [(lam, seed, 0.5 + lam, 1.0 / (1 + lam)) for lam in cfg.lambda_grid])
        cfg = _config(tmp_path, seeds=[0, 1, 2, 3, 4], lambda_grid=[0, .05, .1, .2, .5, 1, 2, 5, 10, 20])
        assert _run(cfg, "sweep-lambda") == 0
        _, runs = _read_csv(tmp_path / "out" / "sweep_runs.csv")
        _, table = _read_csv(tmp_path / "out" / "sweep_lambda.csv")
        assert len(runs) == 50 and len(table) == 10 and all(r["runs"] == "5" for r in table)


class TestExitCodes:
    def test_group_variant_on_continuous_a(self, tmp_path):
        assert _run(_config(tmp_path, variant="MmdPrior"), "train-inference") == 3

    def test_n_zero(self, tmp_path):
        assert _run(_config(tmp_path, dataset={"n": 0}), "gen-data") == 2

    def test_dyncf_on_binary(self, tmp_path):
        cfg = _config(tmp_path, dataset={"kind": "synthetic_binary"}, step2={"mitigation": "DynCF"}, seeds=[0])
        assert _run(cfg, "train-inference") == 0
        assert _run(cfg, "train-predictor") == 3

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{")
        assert cli.main(["gen-data", "--config", str(p)]) == 2

    def test_unknown_key(self, tmp_path):
        assert _run(_config(tmp_path), "gen-data", "--set", "step1.width=3") == 2

    def test_missing_checkpoint(self, tmp_path):
        assert _run(_config(tmp_path), "train-predictor") == 2

    def test_numeric_failure(self, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise NonFiniteError("loss became nan")
        monkeypatch.setattr(cli, "train_step1", boom)
        assert _run(_config(tmp_path, seeds=[0]), "train-inference") == 4


class TestSeeds:
    def test_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CF_FAIR_SEED", "3")
        assert _run(_config(tmp_path), "gen-data") == 0
        assert [p.name for p in (tmp_path / "out").glob("seed_*")] == ["seed_3"]

    def test_five_seeds_five_checkpoints(self, tmp_path):
        cfg = _config(tmp_path, seeds=[0, 1, 2, 3, 4], step1={"epochs": 1})
        assert _run(cfg, "train-inference") == 0
        assert len(list((tmp_path / "out").glob("seed_*/inference.json"))) == 5

    def test_parallel_jobs_match_serial(self, tmp_path):
        cfg = _config(tmp_path, step1={"epochs": 1})
        assert cli.main(["train-inference", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["train-inference", "--config", str(cfg), "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
        for s in (0, 1):
            a = json.loads((tmp_path / "a" / f"seed_{s}" / "inference.json").read_text())
            b = json.loads((tmp_path / "b" / f"seed_{s}" / "inference.json").read_text())
            assert a["model"] == b["model"]


def test_console_script(tmp_path):
    exe = shutil.which("cffair")
    if exe is None:
        pytest.skip("console script not installed")
    res = subprocess.run([exe, "gen-data", "--config", str(_config(tmp_path, seeds=[0]))],
                         capture_output=True, text=True, timeout=120)
    assert res.returncode == 0 and json.loads(res.stdout)["command"] == "gen-data"
