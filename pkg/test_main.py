"""
Test suite for the Rangewrench command line and pipeline configuration.
Run with: pytest test_main.py -v
"""
from pathlib import Path

import pandas as pd
import pytest

from config.pipeline import PipelineConfig
from config.settings import CONFIG_DIR, settings
from core.exceptions import ConfigurationError
from main import main


@pytest.fixture(autouse=True)
def isolated_logs(tmp_path, monkeypatch):
    """Keep log files out of the working tree."""
    monkeypatch.setattr(settings, "log_file", str(tmp_path / "logs" / "rangewrench.log"))
    monkeypatch.setattr(settings, "config", None)


@pytest.fixture
def frames(tmp_path) -> Path:
    """Two synthetic labeled frames."""
    out = tmp_path / "frames"
    assert main(["synth", "--out-dir", str(out), "--scenes", "2", "--seed", "3", "--jobs", "1"]) == 0
    return out


def tree_bytes(directory: Path) -> dict:
    return {path.name: path.read_bytes() for path in sorted(directory.iterdir())}


class TestPipelineConfig:
    """Test TOML configuration loading and flag overrides."""

    def test_defaults_without_file(self):
        config = PipelineConfig.load(None)
        assert config.rview.subclouds == 3
        assert config.pipeline.post == "nnri"
        config.check_files()

    def test_shipped_default_file(self):
        config = PipelineConfig.load(CONFIG_DIR / "default.toml")
        assert Path(config.pipeline.sensor).is_absolute()
        assert config.postproc.knn.votes == 5
        config.check_files()

    def test_environment_fallback(self, tmp_path, monkeypatch):
        path = tmp_path / "exp.toml"
        path.write_text("[rview]\nheight = 32\n")
        monkeypatch.setattr(settings, "config", str(path))
        assert PipelineConfig.load(None).rview.height == 32

    def test_overrides(self):
        config = PipelineConfig().with_overrides(height=32, alpha=2.0, kernel=5, width=None,
                                                 cutoff_mode="constant")
        assert config.rview.height == 32
        assert config.rview.width == 512
        assert config.postproc.nnri.alpha == 2.0
        assert config.postproc.nnri.k == 5
        assert config.postproc.nnri.cutoff_mode == "constant"
        assert config.postproc.knn.k == 5

    @pytest.mark.parametrize("post", ["knn", "knn-multi", "nla"])
    def test_kernel_follows_selected_post_processor(self, post):
        config = PipelineConfig().with_overrides(kernel=7, post=post)
        assert config.pipeline.post == post
        assert config.postproc.knn.k == 7
        assert config.postproc.nnri.k == 3

    def test_kernel_follows_post_from_file(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text('[pipeline]\npost = "knn"\n')
        config = PipelineConfig.load(path).with_overrides(kernel=3)
        assert config.postproc.knn.k == 3
        assert config.postproc.nnri.k == 3
        assert PipelineConfig.load(path).with_overrides(kernel=1, post="nnri").postproc.nnri.k == 1

    def test_even_kernel_override_rejected(self):
        with pytest.raises(ConfigurationError):
            PipelineConfig().with_overrides(kernel=4)
        with pytest.raises(ConfigurationError):
            PipelineConfig().with_overrides(kernel=4, post="knn")

    def test_cutoff_mode_from_file(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text('[postproc.nnri]\ncutoff_mode = "constant"\nalpha = 0.5\n')
        assert PipelineConfig.load(path).postproc.nnri.cutoff_mode == "constant"
        path.write_text('[postproc.nnri]\ncutoff_mode = "fixed"\n')
        with pytest.raises(ConfigurationError):
            PipelineConfig.load(path)

    def test_invalid_override(self):
        with pytest.raises(ConfigurationError):
            PipelineConfig().with_overrides(subclouds=0)
        with pytest.raises(ConfigurationError):
            PipelineConfig().with_overrides(colour="red")

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text("[rview]\ndepth = 3\n")
        with pytest.raises(ConfigurationError):
            PipelineConfig.load(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            PipelineConfig.load(tmp_path / "absent.toml")


class TestGoldenPath:
    """synth -> mock-predict -> postprocess -> eval."""

    def test_noise_free_pipeline_recovers_labels(self, frames, tmp_path):
        scores, pred = tmp_path / "scores", tmp_path / "pred"
        assert main(["mock-predict", str(frames), "--out-dir", str(scores)]) == 0
        assert sorted(p.name for p in scores.iterdir()) == ["000000.svol", "000001.svol"]

        assert main(["postprocess", str(frames), "--out-dir", str(pred),
                     "--scores-dir", str(scores)]) == 0
        for stem in ("000000", "000001"):
            assert (pred / f"{stem}.label").stat().st_size == (frames / f"{stem}.label").stat().st_size

        report = tmp_path / "eval.csv"
        assert main(["eval", "--pred", str(pred), "--gt", str(frames), "--csv", str(report)]) == 0
        table = pd.read_csv(report).set_index("class")
        assert table.loc["mean", "iou"] >= 0.9
        assert table.loc["overall", "acc"] >= 0.95

    @pytest.mark.parametrize("post", ["knn", "knn-multi", "nla"])
    def test_other_post_processors(self, frames, tmp_path, post):
        scores, pred = tmp_path / "scores", tmp_path / "pred"
        assert main(["mock-predict", str(frames), "--out-dir", str(scores)]) == 0
        assert main(["postprocess", str(frames), "--out-dir", str(pred), "--scores-dir", str(scores),
                     "--post", post]) == 0
        assert (pred / "000000.label").exists()

    def test_constant_cutoff_and_knn_kernel_flags(self, frames, tmp_path):
        scores = tmp_path / "scores"
        assert main(["mock-predict", str(frames), "--out-dir", str(scores)]) == 0
        assert main(["postprocess", str(frames), "--out-dir", str(tmp_path / "nnri"),
                     "--scores-dir", str(scores), "--cutoff-mode", "constant", "--alpha", "0.5"]) == 0
        assert main(["postprocess", str(frames), "--out-dir", str(tmp_path / "knn"),
                     "--scores-dir", str(scores), "--post", "knn", "--kernel", "3"]) == 0
        assert (tmp_path / "nnri" / "000000.label").exists()
        assert (tmp_path / "knn" / "000000.label").exists()

    def test_eval_prints_table(self, frames, capsys):
        assert main(["eval", "--pred", str(frames / "000000.label"),
                     "--gt", str(frames / "000000.label")]) == 0
        out = capsys.readouterr().out
        assert "vehicle" in out
        assert "100.00" in out


class TestCommands:
    """Test the remaining commands and their outputs."""

    def test_project_with_coords(self, frames, tmp_path, capsys):
        out = tmp_path / "rview"
        assert main(["project", str(frames / "000000.bin"), "--out-dir", str(out), "--coords",
                     "--height", "32", "--width", "256", "--subclouds", "2"]) == 0
        names = sorted(p.name for p in out.iterdir())
        assert names == ["000000_0.rimg", "000000_1.rimg", "000000_coords.csv"]
        assert "validity" in capsys.readouterr().out

    def test_split(self, frames, tmp_path):
        out = tmp_path / "split"
        assert main(["split", str(frames / "000001.bin"), "--out-dir", str(out),
                     "--subclouds", "3"]) == 0
        assert len(list(out.glob("*.bin"))) == 3
        assert len(list(out.glob("*.label"))) == 3

    def test_augment(self, frames, tmp_path):
        out = tmp_path / "aug"
        assert main(["augment", str(frames), "--out-dir", str(out), "--height", "32",
                     "--width", "256"]) == 0
        assert len(list(out.glob("*.rimg"))) == 6

    def test_stats_grid_and_plot(self, frames, tmp_path):
        report, plot = tmp_path / "stats.csv", tmp_path / "validity.png"
        assert main(["stats", str(frames), "--height", "32,64", "--width", "256,512",
                     "--csv", str(report), "--plot", str(plot)]) == 0
        table = pd.read_csv(report)
        assert len(table) == 8
        assert {"validity", "occupancy_2d", "subclouds"} <= set(table.columns)
        assert plot.exists()

    def test_stats_when_doubling_width_gains_nothing(self, frames, tmp_path):
        report = tmp_path / "stats.csv"
        assert main(["stats", str(frames), "--height", "32,64", "--width", "512,1024,2048",
                     "--csv", str(report)]) == 0
        table = pd.read_csv(report)
        assert len(table) == 12
        assert set(table["width"]) == {512, 1024, 2048}

    def test_bench(self, frames, tmp_path):
        report = tmp_path / "bench.csv"
        assert main(["bench", str(frames / "000000.bin"), "--warmup", "1", "--iters", "2",
                     "--height", "32", "--width", "256", "--csv", str(report)]) == 0
        table = pd.read_csv(report)
        assert table["stage"].tolist() == ["load", "project", "nnri", "total"]


class TestDeterminism:
    """Seeded commands produce byte-identical outputs."""

    def test_synth_with_workers(self, tmp_path):
        for name, jobs in (("a", "1"), ("b", "2"), ("c", "2")):
            assert main(["synth", "--out-dir", str(tmp_path / name), "--scenes", "3",
                         "--seed", "11", "--jobs", jobs]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b") == tree_bytes(tmp_path / "c")

    def test_mock_predict_and_augment_with_workers(self, frames, tmp_path):
        for name in ("a", "b"):
            assert main(["mock-predict", str(frames), "--out-dir", str(tmp_path / name),
                         "--noise", "0.2", "--jobs", "2"]) == 0
            assert main(["augment", str(frames), "--out-dir", str(tmp_path / f"aug_{name}"),
                         "--height", "32", "--width", "256", "--jobs", "2"]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        assert tree_bytes(tmp_path / "aug_a") == tree_bytes(tmp_path / "aug_b")


class TestErrors:
    """Test exit codes and error reporting."""

    def test_missing_input(self, tmp_path, capsys):
        code = main(["project", str(tmp_path / "absent.bin"), "--out-dir", str(tmp_path)])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_truncated_point_file(self, tmp_path, capsys):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 20)
        assert main(["project", str(path), "--out-dir", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert "[pcio]" in err
        assert "16" in err

    def test_invalid_parameter(self, frames, tmp_path, capsys):
        assert main(["project", str(frames), "--out-dir", str(tmp_path), "--subclouds", "0"]) == 1
        assert "[cli]" in capsys.readouterr().err

    def test_even_kernel_flag(self, frames, tmp_path, capsys):
        assert main(["postprocess", str(frames), "--out-dir", str(tmp_path / "pred"),
                     "--scores-dir", str(tmp_path), "--kernel", "4"]) == 1
        assert "odd" in capsys.readouterr().err

    def test_missing_score_volume(self, frames, tmp_path):
        assert main(["postprocess", str(frames), "--out-dir", str(tmp_path / "pred"),
                     "--scores-dir", str(tmp_path / "none")]) == 1

    def test_unknown_flag_exits_with_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["project", "x.bin", "--out-dir", "y", "--bogus"])
        assert exc.value.code == 2
