import json
from pathlib import Path

import numpy as np
import pytest

from coldrec.checkpoint import load_model
from coldrec.cli import main
from coldrec.experiment import ConfigError, ExperimentConfig, apply_overrides, build_report

SMALL = ["--embedding_dim", "8", "--max_seq_len", "8", "--num_blocks", "1", "--max_epochs", "2",
         "--seeds", "[0,1]"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    rc = main(["synth", "--out", str(root), "--n_users", "200", "--n_items", "60", "--n_cold", "8",
               "--content_dim", "16"])
    assert rc == 0
    return root


def config(dataset, tmp_path, **changes):
    raw = json.loads((dataset / "config.json").read_text())
    raw["output_dir"] = str(tmp_path / "out")
    raw.update(changes)
    path = tmp_path / f"cfg_{len(list(tmp_path.glob('cfg_*')))}.json"
    path.write_text(json.dumps(raw))
    return str(path)


class TestConfig:
    def test_overrides_dotted_and_bare(self):
        raw = apply_overrides({}, [("model.dropout", "0.1"), ("batch_size", "16"), ("variant", "content_init")])
        assert raw == {"model": {"dropout": 0.1, "batch_size": 16}, "variant": "content_init"}

    def test_unknown_override(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, [("model.nope", "1")])
        with pytest.raises(ConfigError):
            apply_overrides({}, [("nope", "1")])
        # "seed" exists in model and split_seed is separate, so bare "seed" resolves to model
        assert apply_overrides({}, [("seed", "3")]) == {"model": {"seed": 3}}

    @pytest.mark.parametrize("bad", [
        {"variant": "content_init", "delta_max": 0.5},
        {"variant": "frozen_delta", "delta_max": None},
        {"variant": "frozen_delta", "delta_max": 1.0},
        {"variant": "frozen_delta", "delta_max": -0.1},
        {"seeds": []},
        {"seeds": [1, 1]},
        {"variant": "sasrec"},
        {"unknown": 1},
        {"model": {"embedding_dim": 10, "num_heads": 3}},
    ])
    def test_validation_rejects(self, bad):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)

    def test_validation_exit_code_before_work(self, dataset, tmp_path, capsys):
        path = config(dataset, tmp_path, variant="content_init")
        assert main(["prepare", "--config", path]) == 1
        assert "delta_max" in capsys.readouterr().err
        assert not (tmp_path / "out").exists()

    def test_usage_errors_are_validation_errors(self):
        assert main(["train"]) == 1
        assert main(["prepare", "--config", "/nonexistent.json"]) == 1

    def test_bad_thread_env(self, monkeypatch):
        monkeypatch.setenv("COLDREC_THREADS", "zero")
        assert main(["report", "x"]) == 1


class TestPipeline:
    def test_prepare_stats_and_rerun_identical(self, dataset, tmp_path):
        path = config(dataset, tmp_path)
        assert main(["prepare", "--config", path] + SMALL) == 0
        prepared = tmp_path / "out" / "prepared"
        stats = json.loads((prepared / "stats.json").read_text())
        for key in ("users", "items", "interactions", "avg_length", "cold_gt_percent"):
            assert stats[key] is not None
        assert stats["avg_length"] == pytest.approx(stats["interactions"] / stats["users"])
        first = {p.name: p.read_bytes() for p in prepared.iterdir()}
        assert main(["prepare", "--config", path] + SMALL) == 0
        assert {p.name: p.read_bytes() for p in prepared.iterdir()} == first

    def test_train_evaluate_and_stale_checkpoint(self, dataset, tmp_path):
        path = config(dataset, tmp_path)
        assert main(["prepare", "--config", path] + SMALL) == 0
        assert main(["train", "--config", path] + SMALL) == 0
        run = tmp_path / "out" / "runs" / "frozen_delta_0.5"
        ckpts = [run / f"seed_{s}" / "checkpoint.srck" for s in (0, 1)]
        assert ckpts[0].read_bytes() != ckpts[1].read_bytes()
        model, header = load_model(ckpts[0])
        assert np.linalg.norm(model.item_table.delta.data, axis=1).max() <= 0.5 + 1e-9
        assert header["config"]["delta_max"] == 0.5
        assert (run / "seed_1" / "train_log.csv").read_text().startswith("epoch,step,loss,val_ndcg10\n")

        assert main(["evaluate", "--config", path] + SMALL) == 0
        first = (run / "seed_0" / "metrics.csv").read_bytes()
        assert main(["evaluate", "--config", path] + SMALL) == 0
        assert (run / "seed_0" / "metrics.csv").read_bytes() == first
        assert (run / "summary.json").exists()

        # re-prepare with a different split; the old checkpoints are now stale
        assert main(["prepare", "--config", path, "--train_fraction", "0.8"] + SMALL) == 0
        assert main(["evaluate", "--config", path, "--train_fraction", "0.8"] + SMALL) == 2

    def test_id_learned_without_content(self, dataset, tmp_path):
        path = config(dataset, tmp_path, content=None, variant="id_learned", delta_max=None)
        assert main(["prepare", "--config", path] + SMALL) == 0
        assert main(["train", "--config", path, "--seed", "0"] + SMALL) == 0
        assert main(["evaluate", "--config", path, "--seed", "0"] + SMALL) == 0
        report = json.loads((tmp_path / "out" / "runs" / "id_learned" / "seed_0" / "metrics.json").read_text())
        assert report["segments"]["cold_gt"]["hr"] == 0.0
        assert main(["knn", "--config", path] + SMALL) == 1
        frozen = config(dataset, tmp_path, content=None)
        assert main(["train", "--config", frozen] + SMALL) == 1

    def test_missing_data_file(self, dataset, tmp_path):
        path = config(dataset, tmp_path, interactions=str(tmp_path / "missing.csv"))
        assert main(["prepare", "--config", path]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_training_failure_exit_code(self, dataset, tmp_path):
        path = config(dataset, tmp_path)
        assert main(["prepare", "--config", path] + SMALL) == 0
        assert main(["train", "--config", path, "--learning_rate", "1e300"] + SMALL) == 3

    def test_knn_and_sweep(self, dataset, tmp_path, caplog):
        path = config(dataset, tmp_path)
        assert main(["prepare", "--config", path] + SMALL) == 0
        assert main(["knn", "--config", path] + SMALL) == 0
        knn = json.loads((tmp_path / "out" / "knn" / "metrics.json").read_text())
        assert knn["segments"]["cold_gt"]["hr"] > 0
        assert main(["sweep", "--config", path, "--values", "0.3,0.0,0.3", "--seeds", "[0]"] + SMALL[:-2]) == 0
        assert "duplicate" in caplog.text
        lines = (tmp_path / "out" / "sweep" / "sweep.csv").read_text().splitlines()
        assert lines[0].startswith("delta_max,total_ndcg_mean")
        assert [ln.split(",")[0] for ln in lines[1:]] == ["0.0", "0.3"]
        model, _ = load_model(tmp_path / "out" / "runs" / "frozen_delta_0" / "seed_0" / "checkpoint.srck")
        assert np.all(model.item_table.delta.data == 0.0)
        assert main(["sweep", "--config", path, "--values", "0.3"] + SMALL) == 1


def write_summary(d: Path, name, values, k=10):
    d.mkdir(parents=True)
    stats = {s: {m: [values.get((s, m)), 0.01, 2] for m in ("hr", "ndcg")} for s in ("total", "cold_gt", "warm_gt")}
    doc = {"name": name, "k": k, "seeds": [0, 1], "segmentation": {"a": 1}, "stats": stats}
    (d / "summary.json").write_text(json.dumps(doc))


class TestReport:
    def test_ties_all_marked(self, tmp_path):
        write_summary(tmp_path / "a", "a", {("cold_gt", "ndcg"): 0.5001, ("total", "hr"): 0.2})
        write_summary(tmp_path / "b", "b", {("cold_gt", "ndcg"): 0.4999, ("total", "hr"): 0.3})
        md, table = build_report([tmp_path / "a", tmp_path / "b"])
        rows = md.splitlines()
        assert len(rows) == 4
        assert "**0.500±0.010**" in rows[2] and "**0.500±0.010**" in rows[3]
        assert "**0.300±0.010**" in rows[3] and "**0.200" not in rows[2]
        assert "a,cold_gt,ndcg,10,0.5001,0.01,2,1" in table

    def test_single_run(self, tmp_path):
        write_summary(tmp_path / "a", "a", {("total", "hr"): 0.2})
        md, _ = build_report([tmp_path / "a"])
        assert "**0.200±0.010**" in md
        assert "absent" in md

    def test_inconsistent_k(self, tmp_path):
        write_summary(tmp_path / "a", "a", {}, k=10)
        write_summary(tmp_path / "b", "b", {}, k=20)
        with pytest.raises(ConfigError, match="k=20"):
            build_report([tmp_path / "a", tmp_path / "b"])
        assert main(["report", str(tmp_path / "a"), str(tmp_path / "b")]) == 1
        assert main(["report", str(tmp_path / "missing")]) == 2
