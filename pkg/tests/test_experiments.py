import json

import numpy as np
import pytest

from csitwin import experiments as ex
from csitwin.codec import init_params
from csitwin.pipeline import from_delay_angular, pad_delay_rows


def tiny_spec(tmp_path, **kw):
    base = dict(output_dir=str(tmp_path / "out"), pool_count=200, train_sizes=(20, 40),
                refine_sizes=(5,), steps_per_cell=3, pretrain_epochs=1, naive_epochs=2,
                rehearsal_epochs=1, cdf_samples=30, eval_count=30, sum_rate_count=4,
                acceptance_size=40, acceptance_refine_size=5)
    base.update(kw)
    return ex.ExperimentSpec(**base)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("exp")
    spec = tiny_spec(tmp)
    tables, checks, files = ex.run(spec)
    return spec, tables, checks, files


def test_spec_invariants(tmp_path):
    with pytest.raises(ex.SpecError):
        ex.ExperimentSpec(train_sizes=(640, 160))
    with pytest.raises(ex.SpecError):
        ex.ExperimentSpec(train_sizes=(0, 10))
    with pytest.raises(ex.SpecError):
        ex.ExperimentSpec(datasets={"target": str(tmp_path / "missing.csid")})
    with pytest.raises(ex.SpecError):
        ex.ExperimentSpec(replicates=0)


def test_spec_file_round_trip(tmp_path):
    path = tmp_path / "spec.json"
    d = ex.spec_to_dict(ex.ExperimentSpec(output_dir="res", train_sizes=(10, 20)))
    path.write_text(json.dumps(d))
    spec = ex.load_spec(path)
    assert spec.train_sizes == (10, 20)
    assert spec.output_dir == str(tmp_path / "res")
    path.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ex.SpecError):
        ex.load_spec(path)
    path.write_text(json.dumps({"spec_format_version": 99}))
    with pytest.raises(ex.SpecError):
        ex.load_spec(path)


def test_train_config_step_budget():
    spec = ex.ExperimentSpec(batch_size=64, steps_per_cell=600, max_epochs=200)
    assert spec.train_config(2560, 0).epochs == 15
    assert spec.train_config(160, 0).epochs == 200
    assert spec.train_config(640, 0).epochs == 60


def test_max_workers_env(monkeypatch):
    monkeypatch.setenv("CSITWIN_THREADS", "1")
    assert ex.max_workers() == 1
    monkeypatch.setenv("CSITWIN_THREADS", "junk")
    assert ex.max_workers() >= 1


def test_empirical_cdf_properties():
    grid = np.linspace(0, 1, 101)
    vals = np.random.default_rng(0).uniform(0.2, 0.9, 50)
    cdf = ex.empirical_cdf(vals, grid)
    assert np.all(np.diff(cdf) >= 0) and cdf[-1] == 1.0 and cdf[0] == 0.0
    assert ex.mean_from_cdf(grid, cdf) == pytest.approx(vals.mean(), abs=0.01)


def test_sum_rate_ratio_bounds(small_datasets):
    x = small_datasets["target"].samples[:3]
    p = init_params(seed=0)
    r = ex.sum_rate_ratio(p, x)
    assert 0 < r <= 1


def test_sum_rate_ratio_perfect_is_one(small_datasets, monkeypatch):
    x = small_datasets["target"].samples[:2]
    monkeypatch.setattr(ex, "reconstruct", lambda params, s: s)
    assert ex.sum_rate_ratio(None, x) == pytest.approx(1.0)
    # padded inverse transform reproduces a channel whose truncated transform is x
    H = from_delay_angular(pad_delay_rows(x[0], 256))
    assert H.shape == (256, 32)


def test_tables_shape(tiny_run):
    spec, tables, checks, files = tiny_run
    direct = tables["direct"]
    assert len(direct) == 2 * 3
    assert {r["train_source"] for r in direct} == {"target", "twin", "baseline"}
    for r in direct + tables["refine"]:
        assert np.isfinite(r["nmse_db"])
        assert 0 < r["sum_rate_ratio"] <= 1
    assert [r["policy"] for r in tables["refine"]] == [
        "none", "naive_finetune+random", "naive_finetune+high_nmse", "rehearsal+high_nmse"]
    assert len(tables["cdf"]) == 101
    assert len(checks) == 9


def test_report_files(tiny_run):
    spec, _, _, files = tiny_run
    names = {f.name for f in files}
    for n in ("direct_generalization.csv", "refinement.csv", "correlation_cdf.csv", "summary.txt",
              "direct_generalization.png", "refinement.png", "correlation_cdf.png"):
        assert n in names
    for f in files:
        if f.suffix == ".png":
            assert f.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    summary = next(f for f in files if f.name == "summary.txt").read_text()
    assert "checks passed" in summary


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    spec, _, _, files = tiny_run
    again = tiny_spec(tmp_path)
    # reuse the cached datasets, retrain everything else
    _, _, files2 = ex.run(again)
    for f in files:
        if f.suffix == ".csv":
            assert f.read_bytes() == (tmp_path / "out" / f.name).read_bytes()


def test_audit_recomputes(tiny_run):
    spec = tiny_run[0]
    assert ex.audit(spec) == []


def test_empty_report(tmp_path):
    checks, files = ex.emit_report({"direct": [], "refine": [], "cdf": []}, tmp_path)
    assert checks == []
    assert (tmp_path / "direct_generalization.csv").read_text().strip() == ",".join(ex.ROW_FIELDS)


def test_failing_checks_are_named(tmp_path):
    rows = [dict(experiment="direct", replicate=0, train_source=s, train_size=n, policy="none",
                 refine_size=0, nmse_db=v, sum_rate_ratio=0.5)
            for s, n, v in [("target", 10, -5.0), ("twin", 10, -1.0), ("baseline", 10, 0.0)]]
    spec = ex.ExperimentSpec(train_sizes=(10,), acceptance_size=10)
    checks, _ = ex.emit_report({"direct": rows}, tmp_path, spec)
    failed = [c.name for c in checks if not c.passed]
    assert "direct: twin beats baseline by >= 5 dB" in failed
    assert "failing:" in (tmp_path / "summary.txt").read_text()


def test_cdf_small_pool_warns(tmp_path, caplog):
    spec = tiny_spec(tmp_path, cdf_samples=500)
    rows = ex.run_correlation_cdf(spec)
    assert "fewer than 500" in caplog.text
    assert rows[-1]["cdf_high_nmse"] == 1.0 and rows[-1]["cdf_random"] == 1.0
