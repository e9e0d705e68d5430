"""Experiment runners: schemas, manifests, determinism, cell isolation, CLI."""

import json

import numpy as np
import pytest

from memoscope import train as mt
from memoscope.cli import main as cli_main
from memoscope.experiments import config as mcfg
from memoscope.experiments import manifest as mman
from memoscope.experiments import runners as mr
from memoscope.seeding import child_seed


def make_cfg(kind, out_dir, corpus_dir, seed=3, workers=1, plots=False, **values):
    base = {
        "data.synthetic.dir": str(corpus_dir),
        "data.subset": "120",
        "train.hidden": "8,8",
        "train.batch": "30",
        "train.epochs": "4",
        "train.lr": "0.05",
    }
    base.update({k: str(v) for k, v in values.items()})
    return mcfg.ExperimentConfig(kind=kind, out_dir=str(out_dir), seed=seed,
                                 workers=workers, plots=plots, values=base)


class TestConfigParsing:
    def test_flat_dotted_keys_with_comments(self):
        text = """
        # a comment
        train.lr = 0.05
        data.subset = 250  # trailing comment
        gini.variants = real, randX
        """
        values = mcfg.parse_config_text(text)
        assert values == {"train.lr": "0.05", "data.subset": "250",
                          "gini.variants": "real, randX"}

    def test_bad_line_reports_number(self):
        with pytest.raises(mcfg.ConfigError, match="line 2"):
            mcfg.parse_config_text("a = 1\nnot a pair\n")

    def test_typed_getters(self, tmp_path, corpus_dir):
        cfg = make_cfg("gini_curve", tmp_path, corpus_dir)
        assert cfg.get_int("data.subset") == 120
        assert cfg.get_float("train.lr") == 0.05
        assert cfg.get_int_list("train.hidden") == [8, 8]
        assert cfg.get_str("missing", "fallback") == "fallback"
        assert cfg.get_bool("also.missing", True) is True

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("train.lr = 0.5\nseed = 9\n")
        cfg = mcfg.build_config("gini_curve", str(tmp_path / "out"), seed=1,
                                config_path=path, overrides={"train.lr": "0.125"})
        assert cfg.get_float("train.lr") == 0.125  # flag wins
        assert cfg.seed == 9  # file sets seed when the flag left the default

    def test_unknown_kind_rejected(self, tmp_path):
        with pytest.raises(mcfg.ConfigError):
            mcfg.ExperimentConfig(kind="nonsense", out_dir=str(tmp_path))


class TestSeedSplitting:
    def test_labels_fully_determine_streams(self):
        a = child_seed(7, "capacity", "0.5", 64)
        b = child_seed(7, "capacity", "0.5", 64)
        assert a == b
        assert a != child_seed(7, "capacity", "0.5", 128)
        assert a != child_seed(8, "capacity", "0.5", 64)

    def test_binomial_reference_moments(self):
        rates = mr.binomial_reference(100, 0.0, 50, seed=1)
        assert np.all(rates == 0.0)
        rates = mr.binomial_reference(100, 1.0, 50, seed=1)
        assert np.all(rates == 1.0)
        p = 0.37
        rates = mr.binomial_reference(100, p, 1000, seed=2)
        sigma = np.sqrt(p * (1 - p) / 100)
        assert abs(rates.mean() - p) < 3 * sigma / np.sqrt(1000)

    def test_binomial_reference_validation(self):
        with pytest.raises(ValueError):
            mr.binomial_reference(0, 0.5, 10, 1)
        with pytest.raises(ValueError):
            mr.binomial_reference(10, 1.5, 10, 1)


class TestEasyHard:
    def test_single_run_rates_are_bitmaps(self, tmp_path, corpus_dir):
        cfg = make_cfg("easy_hard", tmp_path, corpus_dir, **{
            "easy_hard.runs": 1, "data.subset": 60, "train.batch": 20})
        summary = mr.run_easy_hard(cfg)
        for rate in summary["rates"].values():
            assert set(np.unique(rate)) <= {0.0, 1.0}

    def test_row_count_per_variant(self, tmp_path, corpus_dir):
        cfg = make_cfg("easy_hard", tmp_path, corpus_dir, **{
            "easy_hard.runs": 2, "data.subset": 50, "train.batch": 25})
        mr.run_easy_hard(cfg)
        lines = (tmp_path / "easy_hard_rates.csv").read_text().splitlines()
        assert lines[0] == "variant,example_index,misclassification_rate"
        assert len(lines) == 1 + 3 * 50
        binom = (tmp_path / "binomial_reference.csv").read_text().splitlines()
        assert len([l for l in binom if not l.startswith("#")]) == 1 + 50


class TestGiniAndClassMatrix:
    def test_gini_csv_schema(self, tmp_path, corpus_dir):
        cfg = make_cfg("gini_curve", tmp_path, corpus_dir, **{
            "data.subset": 60, "gini.T": 6, "gini.probe_every": 3, "train.batch": 20})
        summary = mr.run_gini_curve(cfg)
        lines = (tmp_path / "gini_curve.csv").read_text().splitlines()
        assert lines[0] == "variant,step,gini"
        assert len(lines) == 1 + 2 * 2  # two variants x probes {3, 6}
        assert set(summary["curves"]) == {"real", "randX"}

    def test_unique_class_mode(self, tmp_path, corpus_dir):
        cfg = make_cfg("gini_curve", tmp_path, corpus_dir, **{
            "data.subset": 40, "gini.T": 2, "gini.probe_every": 2,
            "gini.unique_classes": "true", "gini.variants": "real", "train.batch": 20})
        summary = mr.run_gini_curve(cfg)
        assert len(summary["curves"]["real"]) == 1

    def test_class_matrix_is_ten_by_ten(self, tmp_path, corpus_dir):
        cfg = make_cfg("class_matrix", tmp_path, corpus_dir, **{
            "data.subset": 80, "class_matrix.T": 4, "class_matrix.probe_every": 2,
            "class_matrix.variants": "real", "train.batch": 20})
        summary = mr.run_class_matrix(cfg)
        lines = (tmp_path / "class_matrix_real.csv").read_text().splitlines()
        assert lines[0] == "i,j,value"
        assert len(lines) == 1 + 100
        assert np.all(summary["matrices"]["real"].values >= 0)


class TestSweeps:
    def test_capacity_degenerate_grid_is_single_run(self, tmp_path, corpus_dir):
        cfg = make_cfg("capacity_sweep", tmp_path, corpus_dir, **{
            "capacity.hidden": "8", "capacity.noise_fractions": "0.0",
            "data.subset": 60, "train.epochs": 2, "train.batch": 20})
        summary = mr.run_capacity_sweep(cfg)
        lines = (tmp_path / "capacity_sweep.csv").read_text().splitlines()
        assert lines[0] == "noise_fraction,hidden_units,best_val_acc"
        assert len(lines) == 2
        assert len(summary["table"]) == 1

    def test_capacity_row_count_is_grid_product(self, tmp_path, corpus_dir):
        cfg = make_cfg("capacity_sweep", tmp_path, corpus_dir, **{
            "capacity.hidden": "4,8", "capacity.noise_fractions": "0.0,0.5",
            "data.subset": 40, "train.epochs": 2, "train.batch": 20})
        mr.run_capacity_sweep(cfg)
        lines = (tmp_path / "capacity_sweep.csv").read_text().splitlines()
        assert len(lines) == 1 + 4

    def test_cell_failure_is_isolated(self, tmp_path, corpus_dir):
        cfg = make_cfg("capacity_sweep", tmp_path, corpus_dir, workers=2, **{
            "capacity.hidden": "0,8", "capacity.noise_fractions": "0.0",
            "data.subset": 40, "train.epochs": 2, "train.batch": 20})
        summary = mr.run_capacity_sweep(cfg)
        assert np.isnan(summary["table"][(0.0, 0)])
        assert np.isfinite(summary["table"][(0.0, 8)])
        assert (tmp_path / "errors.txt").exists()

    def test_ttc_header_comment_and_sentinel(self, tmp_path, corpus_dir):
        cfg = make_cfg("ttc_sweep", tmp_path, corpus_dir, **{
            "ttc.axis": "dataset_size", "ttc.sizes": "40", "ttc.capacity": 8,
            "ttc.noise_levels": "1.0", "ttc.max_epochs": 2, "train.batch": 20})
        mr.run_ttc_sweep(cfg)
        text = (tmp_path / "ttc_sweep.csv").read_text()
        assert "# fixed capacity = 8" in text
        rows = [l for l in text.splitlines() if not l.startswith("#")]
        assert rows[0] == "dataset_size,noise_level,epochs_to_converge"
        assert rows[1].endswith(",-1")  # 2 epochs cannot memorize noise
        assert "not converged" in text

    def test_reg_sweep_baseline_appears_once(self, tmp_path, corpus_dir):
        cfg = make_cfg("reg_sweep", tmp_path, corpus_dir, **{
            "reg.dropout": "0.5", "reg.weight_decay": "0.1",
            "data.subset": 40, "train.epochs": 2, "train.batch": 20})
        mr.run_reg_sweep(cfg)
        lines = (tmp_path / "reg_sweep.csv").read_text().splitlines()
        assert lines[0] == "regularizer,param,randY_final_train_acc,real_best_val_acc"
        assert sum(1 for l in lines if l.startswith("none,")) == 1
        assert len(lines) == 1 + 3

    def test_dropout_zero_equals_none_with_same_seed(self, desk1000):
        import memoscope.data as mdata

        ds = mdata.subset(desk1000, 60, seed=1)
        base = mt.TrainConfig(hidden_sizes=(6,), learning_rate=0.05, momentum=0.9,
                              batch_size=20, epochs=3, seed=11)
        none_trace = mt.train(ds, None, base)
        from dataclasses import replace

        drop_trace = mt.train(ds, None, replace(base, regularizer=mt.RegularizerSpec.dropout(0.0)))
        assert mt.params_equal(none_trace.final_params, drop_trace.final_params)


class TestCsrCurveRunner:
    def test_epochs_strictly_increasing_and_schema(self, tmp_path, corpus_dir):
        cfg = make_cfg("csr_curve", tmp_path, corpus_dir, **{
            "data.subset": 60, "csr.val_subset": 20, "csr.snapshot_every": 2,
            "csr.variants": "real,randY", "train.epochs": 4, "train.batch": 20,
            "lass.max_iter": 10})
        summary = mr.run_csr_curve(cfg)
        lines = (tmp_path / "csr_curve.csv").read_text().splitlines()
        assert lines[0] == "epoch,variant,csr,train_acc,val_acc"
        for variant, points in summary["series"].items():
            epochs = [p[0] for p in points]
            assert epochs == sorted(set(epochs))
            assert epochs[0] == 0 and epochs[-1] == 4

    def test_noise_level_grid_labels(self, tmp_path, corpus_dir):
        cfg = make_cfg("noise_level_grid", tmp_path, corpus_dir, **{
            "data.subset": 40, "csr.val_subset": 10, "csr.snapshot_every": 2,
            "noise_grid.fractions": "0.5", "noise_grid.kinds": "randY",
            "train.epochs": 2, "train.batch": 20, "lass.max_iter": 5})
        summary = mr.run_noise_level_grid(cfg)
        assert list(summary["series"]) == ["randY@0.5"]


class TestFilters:
    def test_pgm_count_header_and_degenerate_row(self, tmp_path):
        params = mt.init_params((16,), 196, 10, seed=1)
        params.weights[0][3][:] = 0.25  # constant row maps to mid-gray
        paths = mr.dump_filters(params, tmp_path / "filters", (14, 14))
        pgms = [p for p in paths if p.endswith(".pgm")]
        assert len(pgms) == 16 + 1
        first = (tmp_path / "filters" / "filter_0000.pgm").read_bytes()
        assert first.startswith(b"P5 14 14 255\n")
        assert len(first) == len(b"P5 14 14 255\n") + 14 * 14
        constant = (tmp_path / "filters" / "filter_0003.pgm").read_bytes()
        assert set(constant[len(b"P5 14 14 255\n"):]) == {128}

    def test_runner_end_to_end(self, tmp_path, corpus_dir):
        cfg = make_cfg("dump_filters", tmp_path, corpus_dir, **{
            "data.subset": 40, "train.hidden": "6,6", "train.epochs": 1, "train.batch": 20})
        summary = mr.run_dump_filters(cfg)
        assert summary["filter_count"] == 6


class TestManifest:
    def test_written_and_verifiable(self, tmp_path, corpus_dir):
        cfg = make_cfg("gini_curve", tmp_path, corpus_dir, **{
            "data.subset": 40, "gini.T": 2, "gini.probe_every": 2,
            "gini.variants": "real", "train.batch": 20})
        summary = mr.run_gini_curve(cfg)
        payload = mman.verify_manifest(summary["manifest"])
        assert payload["experiment"] == "gini_curve"
        assert payload["config"]["seed"] == 3
        assert all("sha256" in a for a in payload["artifacts"])

    def test_tampering_detected(self, tmp_path, corpus_dir):
        cfg = make_cfg("gini_curve", tmp_path, corpus_dir, **{
            "data.subset": 40, "gini.T": 2, "gini.probe_every": 2,
            "gini.variants": "real", "train.batch": 20})
        summary = mr.run_gini_curve(cfg)
        (tmp_path / "gini_curve.csv").write_text("tampered\n")
        with pytest.raises(mman.ManifestError, match="hash mismatch"):
            mman.verify_manifest(summary["manifest"])


class TestDeterminism:
    CSVS = ["easy_hard_rates.csv", "binomial_reference.csv"]

    def _run(self, out_dir, corpus_dir, workers):
        cfg = make_cfg("easy_hard", out_dir, corpus_dir, workers=workers, **{
            "easy_hard.runs": 3, "data.subset": 50, "train.batch": 25,
            "train.epochs": 1})
        mr.run_easy_hard(cfg)
        return {name: (out_dir / name).read_bytes() for name in self.CSVS}

    def test_rerun_reproduces_csv_bytes(self, tmp_path, corpus_dir):
        a = self._run(tmp_path / "a", corpus_dir, workers=1)
        b = self._run(tmp_path / "b", corpus_dir, workers=1)
        assert a == b

    def test_worker_count_does_not_change_bytes(self, tmp_path, corpus_dir):
        a = self._run(tmp_path / "w1", corpus_dir, workers=1)
        b = self._run(tmp_path / "w2", corpus_dir, workers=2)
        assert a == b


class TestCli:
    def test_end_to_end_with_config_file(self, tmp_path, corpus_dir):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text(
            "data.synthetic.dir = {dir}\n"
            "data.subset = 40\n"
            "gini.T = 2\n"
            "gini.probe_every = 2\n"
            "gini.variants = real\n"
            "train.hidden = 6\n"
            "train.batch = 20\n".format(dir=corpus_dir))
        out = tmp_path / "out"
        rc = cli_main(["gini-curve", "--config", str(cfg_file), "--out", str(out),
                       "--seed", "5", "--no-plot"])
        assert rc == 0
        assert (out / "gini_curve.csv").exists()
        assert (out / "manifest.json").exists()
        assert not (out / "gini_curve.png").exists()

    def test_make_data_writes_idx(self, tmp_path):
        out = tmp_path / "corpus"
        rc = cli_main(["make-data", "--out", str(out), "--train-count", "30",
                       "--val-count", "20", "--seed", "1"])
        assert rc == 0
        from memoscope import data as mdata

        train_ds, val_ds = mdata.load_mnist_dir(out)
        assert len(train_ds) == 30 and len(val_ds) == 20

    def test_set_flag_overrides(self, tmp_path, corpus_dir):
        out = tmp_path / "out"
        rc = cli_main(["dump-filters", "--out", str(out), "--seed", "2", "--no-plot",
                       "--set", f"data.synthetic.dir={corpus_dir}",
                       "--set", "data.subset=40", "--set", "train.hidden=4",
                       "--set", "train.epochs=1", "--set", "train.batch=20"])
        assert rc == 0
        assert (out / "filters" / "filter_0000.pgm").exists()
