import json

import numpy as np
import pytest

from riskgraph import harness as H

LOW, MED, HIGH = 0, 1, 2


def test_perfect_predictions():
    m = H.compute_metrics([0, 1, 2, 2], [0, 1, 2, 2])
    assert m.accuracy == 100.0
    assert m.fp_high == 0.0 and m.fn_high == 0.0
    assert m.confusion == [[1, 0, 0], [0, 1, 0], [0, 0, 2]]


def test_precision_08_recall_09():
    # 36 of 40 high cases caught, 9 false alarms among 45 high predictions
    true = [HIGH] * 40 + [LOW] * 20
    pred = [HIGH] * 36 + [LOW] * 4 + [HIGH] * 9 + [LOW] * 11
    m = H.compute_metrics(pred, true)
    assert m.precision[HIGH] == pytest.approx(80.0)
    assert m.recall[HIGH] == pytest.approx(90.0)
    assert m.fp_high == pytest.approx(20.0) and m.fn_high == pytest.approx(10.0)
    assert m.accuracy == pytest.approx(100 * 47 / 60)


def test_majority_baseline_accuracy():
    rng = np.random.default_rng(0)
    labels = rng.choice(3, size=5000, p=[0.25, 0.35, 0.40])
    m = H.compute_metrics(np.full(5000, HIGH), labels)
    assert m.accuracy == pytest.approx(40.0, abs=2.0)
    assert m.precision[LOW] is None and m.recall[LOW] == 0.0


def test_zero_support_is_none():
    m = H.compute_metrics([0, 0, 1], [0, 0, 1])
    assert m.recall[HIGH] is None and m.fn_high is None
    assert m.precision[HIGH] is None and m.fp_high is None


def test_metrics_input_errors():
    with pytest.raises(ValueError):
        H.compute_metrics([0, 1], [0])
    with pytest.raises(ValueError):
        H.compute_metrics([], [])


def test_latency_stats_and_empty_bench():
    s = H.latency_stats([1.0, 2.0, 3.0, 10.0])
    assert s["median"] == 2.5 and s["mean"] == 4.0 and s["n"] == 4
    with pytest.raises(ValueError):
        H.latency_bench("median", [], None, None, None, None)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError, match="unknown config keys"):
        H.ExperimentConfig.from_dict({"n": 10, "epochs": 3})
    with pytest.raises(ValueError, match="version"):
        H.ExperimentConfig.from_dict({"version": 99})
    with pytest.raises(ValueError):
        H.ExperimentConfig(variant="gcn").validate()
    with pytest.raises(ValueError):
        H.ExperimentConfig(anchor_strategies=["nearest"]).validate()
    with pytest.raises(ValueError):
        H.ExperimentConfig(train_overrides={"d": 30}).validate()
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"n": 100, "train_overrides": {"epochs": 1}}))
    cfg = H.ExperimentConfig.load(path)
    assert cfg.train_config().epochs == 1 and cfg.train_config("attention").variant == "attention"


def test_export_lists_missing(tmp_path):
    (tmp_path / "manifest.json").write_text("{}")
    with pytest.raises(FileNotFoundError) as err:
        H.export_report(tmp_path)
    assert "latency.json" in str(err.value) and "manifest.json" not in str(err.value).split("missing")[1]


TINY = {"n": 660, "data_seed": 3, "train_overrides": {"epochs": 1, "d": 16}, "samples_per_cell": 1,
        "latency_samples": 3, "prune_strategies": ["bottom_excluded"]}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = H.ExperimentConfig.from_dict({**TINY, "out_dir": str(out)})
    return out, H.run_experiment(cfg)


def test_run_writes_every_stage(tiny_run):
    out, manifest = tiny_run
    for name in ("dataset.ndjson", "audit.json", "quantizers.json", "metrics.json", "importance.json",
                 "agreement.json", "latency.json", "prune_comparison.csv", "timings.json"):
        assert (out / name).exists(), name
    assert manifest["files"]["latency.json"] == "timing"
    agree = json.loads((out / "agreement.json").read_text())
    assert set(agree["self_agreement"].values()) == {100.0}


def test_resume_skips_finished_stages(tiny_run):
    out, manifest = tiny_run
    before = (out / "dataset.ndjson").stat().st_mtime_ns
    cfg = H.ExperimentConfig.from_dict({**TINY, "out_dir": str(out)})
    again = H.run_experiment(cfg, resume=True)
    assert (out / "dataset.ndjson").stat().st_mtime_ns == before
    assert again["files"] == manifest["files"]


def test_export(tiny_run):
    out, _ = tiny_run
    names = sorted(p.name for p in H.export_report(out))
    assert names == ["agreement.csv", "importance.csv", "latency.csv", "manifest.json", "plot_data.csv",
                     "pruning.csv"]
    assert (out / "exports" / "plot_data.csv").read_text().startswith("x,y,series")


def test_stage_failure_names_stage(tmp_path):
    cfg = H.ExperimentConfig.from_dict({**TINY, "out_dir": str(tmp_path)})
    exp = H.Experiment(cfg)
    exp.run()
    (tmp_path / "importance.json").unlink()
    (tmp_path / "ckpt" / "params.bin").write_bytes(b"garbage")
    with pytest.raises(H.StageError, match="explain"):
        exp.run(resume=True)


def test_same_seed_runs_share_a_manifest(tiny_run, tmp_path):
    _, first = tiny_run
    second = H.run_experiment(H.ExperimentConfig.from_dict({**TINY, "out_dir": str(tmp_path)}))
    assert H.manifest_without_timing(second) == H.manifest_without_timing(first)
