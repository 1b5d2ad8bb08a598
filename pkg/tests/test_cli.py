"""Config validation, experiment runner, bundle outputs, CLI exit codes."""

import numpy as np
import pytest

from fuselab.cli import main
from fuselab.data import write_embeddings
from fuselab.experiment import ConfigError, load_bundle, parse_config, run_experiment

TINY_TOY = """\
seed = 0
out_dir = "{out}"

[[datasets]]
name = "toy"
frequency = "toy"

[backbone]
kind = "mlp"
hidden_dim = 8
encoder_layers = 1

[windows]
lookback = 8
horizons = [8]

[training]
seeds = [0{extra_seed}]
sweep = {sweep}
max_epochs = 2
patience = 2

[[fusion]]
strategy = "none"

[[fusion]]
strategy = "cfa"
reduction = 8

[analyses]
run = {analyses}

[toy]
n = 160
text_dim = 8
"""


def _write_config(tmp_path, sweep="false", extra_seed="", analyses='["efficiency"]'):
    path = tmp_path / "config.toml"
    out = (tmp_path / "bundle").as_posix()
    path.write_text(
        TINY_TOY.format(out=out, sweep=sweep, extra_seed=extra_seed, analyses=analyses)
    )
    return path


class TestConfigValidation:
    def test_valid_config_parses(self, tmp_path):
        cfg = parse_config(_write_config(tmp_path))
        assert cfg.toy_n == 160 and len(cfg.fusions) == 2

    def test_missing_file_is_config_error(self):
        with pytest.raises(ConfigError):
            parse_config("/nonexistent/config.toml")

    def test_unknown_strategy_field_path(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('[[fusion]]\nstrategy = "telepathy"\n')
        with pytest.raises(ConfigError) as exc:
            parse_config(path)
        assert "fusion[0]" in exc.value.field

    def test_nonexistent_dataset_path_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text(
            '[[datasets]]\nname = "x"\nseries = "missing.csv"\n'
            'embeddings = "missing.bin"\nfrequency = "monthly"\n'
        )
        with pytest.raises(ConfigError) as exc:
            parse_config(path)
        assert "datasets[0]" in exc.value.field

    def test_validate_subcommand_exit_codes(self, tmp_path):
        good = _write_config(tmp_path)
        assert main(["validate", "--config", str(good)]) == 0
        bad = tmp_path / "bad.toml"
        bad.write_text('[[fusion]]\nstrategy = "nope"\n')
        assert main(["validate", "--config", str(bad)]) == 2

    def test_bad_analysis_name(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('[analyses]\nrun = ["phrenology"]\n')
        with pytest.raises(ConfigError) as exc:
            parse_config(path)
        assert exc.value.field == "analyses.run"


class TestRunExperiment:
    def test_bundle_files_written(self, tmp_path):
        bundle = run_experiment(_write_config(tmp_path))
        for name in ("results.csv", "runs.json", "diagnostics.json", "manifest.json"):
            assert (bundle.out_dir / name).exists()
        assert (bundle.out_dir / "tables" / "mse_summary.csv").exists()

    def test_row_counts_without_sweep(self, tmp_path):
        # 2 fusion specs x 2 seeds x 1 multiplier
        bundle = run_experiment(_write_config(tmp_path, extra_seed=", 1"))
        assert len(bundle.rows) == 4

    def test_row_counts_with_sweep(self, tmp_path):
        # 2 fusion specs x 1 seed x 10 multipliers
        bundle = run_experiment(_write_config(tmp_path, sweep="true"))
        assert len(bundle.rows) == 20

    def test_manifest_links_config_digest(self, tmp_path):
        config = _write_config(tmp_path)
        bundle = run_experiment(config)
        assert bundle.manifest["config_digest"] == parse_config(config).digest()

    def test_rerun_is_byte_identical(self, tmp_path):
        config = _write_config(tmp_path)
        run_experiment(config, out_dir=tmp_path / "a")
        run_experiment(config, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "results.csv").read_bytes() == (
            tmp_path / "b" / "results.csv"
        ).read_bytes()

    def test_aggregate_is_pure_function_of_bundle(self, tmp_path):
        config = _write_config(tmp_path)
        bundle = run_experiment(config)
        summary = (bundle.out_dir / "tables" / "mse_summary.csv").read_bytes()
        (bundle.out_dir / "tables" / "mse_summary.csv").unlink()
        assert main(["aggregate", "--bundle", str(bundle.out_dir)]) == 0
        assert (bundle.out_dir / "tables" / "mse_summary.csv").read_bytes() == summary

    def test_diagnostics_contain_requested_analyses(self, tmp_path):
        config = _write_config(
            tmp_path,
            analyses='["similarity", "effective_rank", "contribution_ratio", "efficiency"]',
        )
        bundle = run_experiment(config)
        cell = bundle.diagnostics["toy-H8"]["seeds"]["0"]["cfa"]
        assert "similarity" in cell and "effective_rank" in cell and "contribution" in cell
        assert bundle.diagnostics["toy-H8"]["efficiency"]


class TestFileDatasets:
    def _make_dataset(self, tmp_path, rows=150, channels=2, dim=4):
        rng = np.random.default_rng(0)
        series = tmp_path / "series.csv"
        lines = ["date," + ",".join(f"c{i}" for i in range(channels))]
        for t in range(rows):
            values = ",".join(f"{v:.6f}" for v in rng.normal(size=channels))
            lines.append(f"2020-01-01T{t // 60:02d}:{t % 60:02d}:00,{values}")
        series.write_text("\n".join(lines) + "\n")
        emb = tmp_path / "emb.bin"
        write_embeddings(emb, rng.normal(size=(rows, dim)))
        return series, emb

    def test_run_on_file_dataset(self, tmp_path):
        series, emb = self._make_dataset(tmp_path)
        config = tmp_path / "config.toml"
        config.write_text(
            f"""\
seed = 0
out_dir = "{(tmp_path / 'out').as_posix()}"

[[datasets]]
name = "filed"
series = "{series.name}"
embeddings = "{emb.name}"
frequency = "monthly"

[backbone]
kind = "dlinear"

[windows]
lookback = 8
horizons = [6]

[training]
seeds = [0]
sweep = false
max_epochs = 2
patience = 2

[[fusion]]
strategy = "none"

[[fusion]]
strategy = "additive"
positions = ["last"]

[analyses]
run = ["efficiency"]
"""
        )
        bundle = run_experiment(config)
        assert bundle.failed_jobs == 0
        assert {row["setting"] for row in bundle.rows} == {"filed-H6"}

    def test_partial_failure_exit_code(self, tmp_path):
        series, emb = self._make_dataset(tmp_path, rows=150)
        (tmp_path / "short").mkdir(exist_ok=True)
        short_series, short_emb = self._make_dataset(tmp_path / "short", rows=20)
        config = tmp_path / "config.toml"
        config.write_text(
            f"""\
seed = 0
out_dir = "{(tmp_path / 'out').as_posix()}"

[[datasets]]
name = "good"
series = "{series.name}"
embeddings = "{emb.name}"
frequency = "monthly"

[[datasets]]
name = "short"
series = "short/{short_series.name}"
embeddings = "short/{short_emb.name}"
frequency = "monthly"

[windows]
lookback = 8
horizons = [6]

[backbone]
kind = "dlinear"

[training]
seeds = [0]
sweep = false
max_epochs = 1
patience = 1

[[fusion]]
strategy = "none"

[analyses]
run = []
"""
        )
        code = main(["run", "--config", str(config)])
        assert code == 3
        bundle = load_bundle(tmp_path / "out")
        assert bundle.manifest["failed_jobs"] == 1

    def test_all_failed_exit_code(self, tmp_path):
        (tmp_path / "short").mkdir(exist_ok=True)
        short_series, short_emb = self._make_dataset(tmp_path / "short", rows=20)
        config = tmp_path / "config.toml"
        config.write_text(
            f"""\
seed = 0
out_dir = "{(tmp_path / 'out').as_posix()}"

[[datasets]]
name = "short"
series = "short/{short_series.name}"
embeddings = "short/{short_emb.name}"
frequency = "monthly"

[windows]
lookback = 8
horizons = [6]

[backbone]
kind = "dlinear"

[training]
seeds = [0]
sweep = false
max_epochs = 1
patience = 1

[[fusion]]
strategy = "none"

[analyses]
run = []
"""
        )
        assert main(["run", "--config", str(config)]) == 4


class TestPlots:
    def test_report_reemits_plots(self, tmp_path):
        config = _write_config(tmp_path, sweep="true")
        bundle = run_experiment(config)
        sweep_plot = bundle.out_dir / "plots" / "sweep_toy-H8.svg"
        original = sweep_plot.read_bytes()
        sweep_plot.unlink()
        assert main(["report", "--bundle", str(bundle.out_dir)]) == 0
        assert sweep_plot.read_bytes() == original
        assert b"<svg" in original
