import csv
import json

import pytest
import yaml

from budding.cli import main
from budding.config import ExperimentConfig, dump_config, from_dict, load_config
from budding.experiment import (
    METRIC_COLUMNS, ablate, ablation_configs, evaluate_run_dir, read_metrics, run_dir, run_experiment, upsert_metrics,
)
from budding.report import emit_report

TINY = {
    "config_id": "tiny",
    "seeds": [0, 1, 2],
    "model": {"backbone_channels": [8, 8, 8], "head_channels": 8},
    "train": {"epochs": 1, "batch_size": 16},
    "data": {"n_train": 32, "n_test": 16},
}


def tiny(tmp_path, **changes):
    cfg = from_dict({**TINY, "output_dir": str(tmp_path / "runs")})
    return cfg.with_changes(**changes) if changes else cfg


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("abl")
    cfg = from_dict({**TINY, "output_dir": str(root / "runs")})
    return cfg, ablate(cfg)


class TestConfig:
    def test_yaml_round_trip(self, tmp_path):
        cfg = tiny(tmp_path)
        dump_config(cfg, tmp_path / "c.yaml")
        assert load_config(tmp_path / "c.yaml") == cfg

    def test_defaults_fill_in(self, tmp_path):
        (tmp_path / "c.yaml").write_text("config_id: x\ntrain:\n  epochs: 3\n")
        cfg = load_config(tmp_path / "c.yaml")
        assert cfg.train.epochs == 3 and cfg.train.batch_size == 32 and cfg.model.grid.S == 8

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.yaml").write_text("config_id: x\nbogus: 1\n")
        with pytest.raises(ValueError):
            load_config(tmp_path / "c.yaml")

    def test_with_changes(self):
        cfg = ExperimentConfig().with_changes(**{"train.weights.enable_tq": False, "eval.conf_floor": 0.1})
        assert not cfg.train.weights.enable_tq and cfg.eval.conf_floor == 0.1

    def test_ablation_grid(self):
        variants = ablation_configs(ExperimentConfig(config_id="b"))
        switches = [(v.train.weights.enable_ta, v.train.weights.enable_tq) for v in variants]
        assert switches == [(False, False), (True, False), (False, True), (True, True)]
        assert len({v.config_id for v in variants}) == 4
        assert all(v.model.bea for v in variants)


class TestRuns:
    def test_twelve_rows(self, ablation):
        cfg, arts = ablation
        rows = read_metrics(run_dir(cfg.output_dir, "x", 0).parent.parent / "metrics.csv")
        assert len(arts) == 12 and len(rows) == 12
        assert list(rows[0]) == list(METRIC_COLUMNS)
        assert {(r["config_id"], r["seed"]) for r in rows} == {
            (f"tiny-{s}", str(k)) for s in ("no_tandem", "ta_only", "tq_only", "ta_tq") for k in range(3)
        }

    def test_layout_is_pure_function_of_id_and_seed(self, ablation):
        cfg, arts = ablation
        for a in arts:
            cid, seed = a.metrics["config_id"], a.metrics["seed"]
            assert a.run_dir == run_dir(cfg.output_dir, cid, seed)
            for name in ("config.yaml", "checkpoint.bud", "history.csv", "dets_test.jsonl", "dets_near.jsonl",
                         "dets_far.jsonl", "gt_test.jsonl", "metrics.csv", "summary.json",
                         "retention.png", "roc.png", "monitor.png"):
                assert (a.run_dir / name).exists(), name

    def test_run_embeds_exact_config(self, ablation):
        _, arts = ablation
        a = arts[5]
        cfg = load_config(a.run_dir / "config.yaml")
        assert cfg.config_id == a.metrics["config_id"] and cfg.train.seed == a.metrics["seed"]
        assert json.loads((a.run_dir / "summary.json").read_text())["config"] == cfg.to_dict()

    def test_rerun_identical(self, ablation, tmp_path):
        cfg, arts = ablation
        first = arts[-1]
        again = run_experiment(ablation_configs(cfg)[-1].with_changes(output_dir=str(tmp_path)), 2)
        for name in ("metrics.csv", "dets_test.jsonl", "dets_near.jsonl", "dets_far.jsonl", "history.csv"):
            assert (first.run_dir / name).read_bytes() == (again.run_dir / name).read_bytes(), name

    def test_eval_from_dumps_reproduces_row(self, ablation):
        _, arts = ablation
        a = arts[0]
        before = (a.run_dir / "metrics.csv").read_bytes()
        evaluate_run_dir(a.run_dir, plots=False)
        assert (a.run_dir / "metrics.csv").read_bytes() == before

    def test_unwritable_output_fails_before_training(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        cfg = tiny(tmp_path, output_dir=str(blocker))
        with pytest.raises(PermissionError):
            run_experiment(cfg, 0)

    def test_upsert_is_idempotent(self, tmp_path):
        path = tmp_path / "m.csv"
        row = {c: 0.5 for c in METRIC_COLUMNS} | {"config_id": "a", "seed": 1}
        upsert_metrics(path, row)
        upsert_metrics(path, row)
        upsert_metrics(path, row | {"seed": 0})
        rows = read_metrics(path)
        assert [(r["config_id"], r["seed"]) for r in rows] == [("a", "0"), ("a", "1")]


class TestReport:
    def test_single_run(self, ablation, tmp_path):
        _, arts = ablation
        rep = emit_report([arts[0].run_dir], tmp_path / "rep")
        assert len(rep.rows) == 1
        assert set(rep.plots) == {"retention", "roc", "monitor"}
        assert all(p.exists() and p.stat().st_size > 0 for p in rep.plots.values())

    def test_four_configs_four_curves(self, ablation, tmp_path):
        _, arts = ablation
        rep = emit_report([a.run_dir for a in arts], tmp_path / "rep")
        assert len(rep.rows) == 12
        assert len(rep.curves) == 4

    def test_missing_metrics_skipped(self, ablation, tmp_path):
        _, arts = ablation
        empty = tmp_path / "nothing" / "seed_0"
        empty.mkdir(parents=True)
        with pytest.warns(UserWarning, match="no metrics.csv"):
            rep = emit_report([arts[0].run_dir, empty], tmp_path / "rep")
        assert rep.skipped == [empty] and len(rep.rows) == 1

    def test_merged_csv(self, ablation, tmp_path):
        _, arts = ablation
        rep = emit_report([a.run_dir for a in arts[:3]], tmp_path / "rep")
        with open(rep.table) as fh:
            assert len(list(csv.DictReader(fh))) == 3


class TestCli:
    def test_verbs(self, tmp_path, capsys):
        cfg_path = tmp_path / "c.yaml"
        cfg_path.write_text(yaml.safe_dump({**TINY, "seeds": [0]}))
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg_path), "--seed", "4", "--out", str(out)]) == 0
        assert (out / "tiny" / "seed_4" / "metrics.csv").exists()
        assert main(["eval", "--config", str(cfg_path), "--seed", "4", "--out", str(out)]) == 0
        assert main(["report", "--out", str(out)]) == 0
        assert (out / "report" / "report.csv").exists()
        assert "report.csv (1 rows)" in capsys.readouterr().out

    def test_ablate_verb(self, tmp_path):
        cfg_path = tmp_path / "c.yaml"
        cfg_path.write_text(yaml.safe_dump({**TINY, "seeds": [0]}))
        assert main(["ablate", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 0
        assert len(read_metrics(tmp_path / "o" / "metrics.csv")) == 4

    def test_bad_config_reports_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("nonsense: 1\n")
        assert main(["run", "--config", str(bad)]) == 2
        assert "unknown config keys" in capsys.readouterr().err

    def test_eval_nothing(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path)]) == 1
