import json

import numpy as np
import pytest
import yaml
from PIL import Image

from blcl import __version__
from blcl.checkpoint import FORMAT_VERSION, load_model, read_checkpoint, save_checkpoint
from blcl.backbone import ArchitecturePlan, build_model
from blcl.cli import main, read_metrics_csv, sigma_figure
from blcl.config import PROFILES, defaults, dump_config, from_dict, load_config
from blcl.data import DATA_ROOT_ENV
from blcl.errors import ArtifactError, ConfigError
from synthetic import write_tree


@pytest.fixture(autouse=True)
def _no_env_root(monkeypatch):
    monkeypatch.delenv(DATA_ROOT_ENV, raising=False)


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
    return write_tree(tmp_path_factory.mktemp("tree"), num_classes=6, per_class=8, size=16, seed=4)


def write_cfg(path, **kw):
    values = dict(profile="desk", dataset="custom", partition=[2, 2, 2], block_spec=[4, 4, 3], epochs=1,
                  batch_size=8, train_per_class=None, test_per_class=None, memory_budget=12)
    values.update(kw)
    path.write_text(yaml.safe_dump(values))
    return path


@pytest.fixture(scope="module")
def finished_run(tree, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write_cfg(d / "cfg.yaml", data_root=str(tree), output_dir=str(d / "out"))
    assert main(["run", str(cfg)]) == 0
    return d / "out", cfg


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = defaults("desk")
        (tmp_path / "c.yaml").write_text(dump_config(cfg))
        assert load_config(tmp_path / "c.yaml") == cfg

    def test_profiles(self):
        assert defaults().epochs == 300 and defaults().block_spec == [1, 1, 2, 2]
        desk = defaults("desk")
        assert desk.epochs == 10 and desk.batch_size == 32 and desk.backbone == "desk"
        assert set(PROFILES) == {"full", "desk"}

    @pytest.mark.parametrize("bad", [
        {"nonsense": 1},
        {"profile": "huge"},
        {"block_spec": [1, 1]},
        {"total_blocks": 1, "block_spec": [3, 1, 1, 1]},
        {"partition": [1, 3, 3, 3]},
        {"batch_size": 1},
        {"device": "toaster"},
    ])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            from_dict(bad)

    def test_digest_tracks_values(self):
        assert defaults().digest() == defaults().digest()
        assert defaults().digest() != from_dict({"seed": 1}).digest()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = build_model(ArchitecturePlan(2, [4], backbone="desk"), 3, seed=0, image_size=16)
        save_checkpoint(tmp_path / "c.npz", model, 1, {"note": "x"})
        again, meta = load_model(tmp_path / "c.npz")
        assert meta["format_version"] == FORMAT_VERSION and meta["note"] == "x"
        for k, v in model.state_dict().items():
            assert np.array_equal(v.numpy(), again.state_dict()[k].numpy())

    def test_errors(self, tmp_path):
        with pytest.raises(ArtifactError):
            read_checkpoint(tmp_path / "missing.npz")
        (tmp_path / "bad.npz").write_bytes(b"not an archive")
        with pytest.raises(ArtifactError):
            read_checkpoint(tmp_path / "bad.npz")
        meta = np.frombuffer(json.dumps({"format_version": 99}).encode(), dtype=np.uint8)
        np.savez(tmp_path / "v.npz", __meta__=meta)
        with pytest.raises(ArtifactError, match="version"):
            read_checkpoint(tmp_path / "v.npz")


class TestRun:
    def test_summary(self, finished_run):
        out, _ = finished_run
        summary = json.loads((out / "run_summary.json").read_text())
        assert summary["version"] == __version__
        assert [t["task"] for t in summary["tasks"]] == [1, 2, 3]
        assert summary["tasks"][1]["classes"] == [2, 3]
        for name in ("metrics.json", "confusion.csv", "metrics.csv", "config.yaml", "exemplars_task3.csv"):
            assert (out / name).exists(), name
        assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["task_1.npz", "task_2.npz", "task_3.npz"]

    def test_missing_dataset(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.yaml", data_root=str(tmp_path / "absent"), output_dir=str(tmp_path / "o"))
        assert main(["run", str(cfg)]) == 2
        assert "dataset not found" in capsys.readouterr().err

    def test_env_root_used(self, tree, tmp_path, monkeypatch):
        monkeypatch.setenv(DATA_ROOT_ENV, str(tree))
        cfg = write_cfg(tmp_path / "c.yaml", data_root="/nowhere", partition=[6], block_spec=[4],
                        output_dir=str(tmp_path / "o"), checkpoints=False)
        assert main(["run", str(cfg)]) == 0

    def test_bad_config_exit(self, tmp_path):
        (tmp_path / "c.yaml").write_text("epochs: [")
        assert main(["run", str(tmp_path / "c.yaml")]) == 2
        assert main(["run", str(tmp_path / "none.yaml")]) == 2

    def test_print_defaults(self, capsys):
        assert main(["run", "--print-defaults"]) == 0
        text = capsys.readouterr().out
        assert "# classes per task" in text and "epochs: 300" in text
        assert main(["print-defaults", "--profile", "desk"]) == 0
        assert yaml.safe_load(capsys.readouterr().out)["epochs"] == 10


class TestEval:
    def test_task_two_cumulative_classes(self, finished_run, tmp_path, tree):
        out, cfg = finished_run
        assert main(["eval", str(out / "checkpoints" / "task_2.npz"), "--config", str(cfg), "--out", str(tmp_path / "e")]) == 0
        metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
        assert np.asarray(metrics["confusion"]).shape == (4, 4)
        assert np.asarray(metrics["confusion"]).sum() == 4 * 8
        header = (tmp_path / "e" / "embeddings.csv").read_text().splitlines()[0].split(",")
        assert len(header) == 2 + 512

    def test_final_task(self, finished_run, tmp_path):
        out, cfg = finished_run
        assert main(["eval", str(out / "checkpoints" / "task_3.npz"), "--config", str(cfg), "--out", str(tmp_path / "e")]) == 0
        metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
        assert len(metrics["confusion"]) == 6
        run_metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["confusion"] == run_metrics["confusion"]

    def test_corrupt_archive(self, finished_run, tmp_path):
        _, cfg = finished_run
        bad = tmp_path / "bad.npz"
        bad.write_bytes(b"\x00" * 64)
        assert main(["eval", str(bad), "--config", str(cfg)]) == 3

    def test_class_count_mismatch(self, finished_run, tmp_path, tree):
        out, _ = finished_run
        cfg = write_cfg(tmp_path / "c.yaml", data_root=str(tree), partition=[3, 3], block_spec=[4, 4])
        assert main(["eval", str(out / "checkpoints" / "task_2.npz"), "--config", str(cfg)]) == 3


class TestReport:
    def test_table_and_plots(self, finished_run):
        out, _ = finished_run
        assert main(["report", str(out)]) == 0
        table = (out / "accuracy_table.md").read_text().splitlines()
        assert len(table) == 3 and "Task 3 Acc." in table[0]
        assert sorted(p.name for p in out.glob("sigma_task*.png")) == ["sigma_task1.png", "sigma_task2.png", "sigma_task3.png"]
        assert Image.open(out / "sigma_task1.png").size[0] > 0

    def test_plot_data_equals_csv(self, finished_run):
        out, _ = finished_run
        rows = read_metrics_csv(out / "metrics.csv")
        fig = sigma_figure(rows, 2)
        lines = fig.axes[0].get_lines()
        mine = [r for r in rows if r["task"] == 2]
        assert list(lines[0].get_ydata()) == [r["sigma1"] for r in mine]
        assert list(lines[1].get_ydata()) == [r["sigma2"] for r in mine]
        assert list(fig.axes[1].get_lines()[0].get_ydata()) == [r["l_ce"] for r in mine]

    def test_single_task_run(self, tree, tmp_path):
        cfg = write_cfg(tmp_path / "c.yaml", data_root=str(tree), partition=[6], block_spec=[4],
                        output_dir=str(tmp_path / "o"))
        assert main(["run", str(cfg)]) == 0
        assert main(["report", str(tmp_path / "o")]) == 0
        assert len(list((tmp_path / "o").glob("sigma_task*.png"))) == 1
        assert len((tmp_path / "o" / "accuracy_table.md").read_text().splitlines()) == 3

    def test_incomplete_dir(self, tmp_path):
        assert main(["report", str(tmp_path)]) == 3
