import json
import subprocess
import sys

import numpy as np
import pytest

from bidrop.cli import main
from bidrop.config import ConfigError, TrainConfig, format_config, parse_config, parse_seeds
from bidrop.experiment import (
    ABLATION_ROWS,
    ReportError,
    emit_report,
    protocol_cells,
    report_csv,
    report_json,
    run_experiment,
    run_protocol,
)
from bidrop.model import loss_and_grad
from bidrop.optim import AdamState, reference_adam_step
from bidrop.selection import SubnetSelector
from bidrop.tensor import RngStream, kept_count
from bidrop.train import Trainer, build_datasets, build_model, train_step

SMALL = TrainConfig(n_train=40, n_dev=40, hidden="8", batch_size=8, max_steps=12, seeds="0-1", lr=0.01)


def small_setup(**changes):
    config = SMALL.override(**changes)
    train, dev = build_datasets(config)
    model = build_model(config, train, RngStream(0, 1))
    state = AdamState.for_params(model.params, lr=config.lr)
    return config, train, model, state


class TestTrainStep:
    def test_full_net_single_pass_equals_plain_adam(self):
        config, train, model, state = small_setup(strategy="full-net", k=1, keep_prob=1.0)
        ref_params = {k: v.copy() for k, v in model.params.items()}
        ref_state = AdamState.for_params(ref_params, lr=config.lr)
        ref_model = model.copy()
        ref_model.params = ref_params
        selector = SubnetSelector(config.strategy_config())
        x, y = train.features[:8], train.targets[:8]
        for step in range(10):
            train_step(model, x, y, config, state, RngStream(5), selector, step)
            logits, trace = ref_model.forward(x)
            _, grads = loss_and_grad(ref_model, trace, logits, y, config.loss)
            reference_adam_step(ref_params, grads, ref_state)
        for name in ref_params:
            np.testing.assert_allclose(model.params[name], ref_params[name], rtol=1e-12, atol=1e-14)

    def test_gavg_updates_every_parameter(self):
        config, train, model, state = small_setup(strategy="gavg-only", k=2)
        record = train_step(model, train.features[:8], train.targets[:8], config, state, RngStream(1),
                            SubnetSelector(config.strategy_config()), 0)
        assert record.selected_count == model.num_params

    def test_bidrop_first_step_touches_exactly_the_kept_count(self):
        config, train, model, state = small_setup(strategy="bidrop-full", k=2, p=0.75)
        before = {k: v.copy() for k, v in model.params.items()}
        selector = SubnetSelector(config.strategy_config())
        record = train_step(model, train.features[:8], train.targets[:8], config, state, RngStream(1), selector, 0)
        changed = sum(int(np.sum(model.params[k] != before[k])) for k in before)
        expected = kept_count(0.75, model.num_params)
        assert record.selected_count == expected
        assert changed <= expected
        # a selected parameter can only stay put if its mean gradient is exactly zero
        mask = selector.current
        for k in before:
            moved = model.params[k] != before[k]
            assert np.all(mask.masks[k][moved] == 1)

    def test_loss_recorded(self):
        config, train, model, state = small_setup()
        record = train_step(model, train.features[:8], train.targets[:8], config, state, RngStream(1),
                            SubnetSelector(config.strategy_config()), 0, RngStream(2))
        assert np.isfinite(record.loss) and record.loss > 0


class TestTrainer:
    def test_steps_and_trajectory(self):
        config = SMALL.override(eval_every=5)
        train, dev = build_datasets(config)
        result = Trainer(config, train, dev, 0).run()
        assert result.steps == 12
        assert [t["step"] for t in result.trajectory] == [5, 10, 12]
        assert len(result.churn) == 11

    def test_epoch_limit(self):
        config = SMALL.override(epochs=2, max_steps=0)
        train, dev = build_datasets(config)
        assert Trainer(config, train, dev, 0).run().steps == 10

    def test_doubled_batch_halves_steps_per_epoch(self):
        config = SMALL.override(epochs=1, max_steps=0, double_batch=True)
        train, dev = build_datasets(config)
        assert Trainer(config, train, dev, 0).total_steps() == 3

    def test_k1_bidrop_warns(self):
        config = SMALL.override(k=1, max_steps=2)
        train, dev = build_datasets(config)
        assert Trainer(config, train, dev, 0).run().warnings

    def test_seeds_are_reproducible(self):
        train, dev = build_datasets(SMALL)
        a = Trainer(SMALL, train, dev, 3).run()
        b = Trainer(SMALL, train, dev, 3).run()
        assert a.final == b.final and a.losses == b.losses


class TestConfig:
    def test_parse_roundtrip(self):
        config = SMALL.override(double_batch=True, name="x")
        assert parse_config(format_config(config)) == config

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match=":2: unknown config key 'stratgy'"):
            parse_config("k = 2\nstratgy = full-net\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config("k = 2\nk = 3\n")

    @pytest.mark.parametrize("text", ["k = two", "p = 1.0", "strategy = nope", "seeds = 3-1", "hidden = 8,x"])
    def test_bad_values(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_seeds(self):
        assert parse_seeds("0-2,5") == [0, 1, 2, 5]
        assert len(parse_seeds("0-9")) == 10

    def test_fingerprint_changes_with_values(self):
        assert SMALL.fingerprint() == SMALL.override().fingerprint()
        assert SMALL.fingerprint() != SMALL.override(p=0.5).fingerprint()


@pytest.fixture(scope="module")
def report():
    return run_experiment(SMALL.override(seeds="0-9", max_steps=3))


class TestReports:
    def test_one_record_per_seed(self, report):
        cell = report["cells"][0]
        assert [r["seed"] for r in cell["seeds"]] == list(range(10))
        assert set(cell["aggregates"]["accuracy"]) == {"mean", "max", "std"}
        values = [r["final"]["accuracy"] for r in cell["seeds"]]
        assert cell["aggregates"]["accuracy"]["std"] == pytest.approx(np.std(values))

    def test_json_roundtrip(self, report):
        text = report_json(report)
        assert json.loads(text) == report
        assert report_json(json.loads(text)) == text

    def test_csv_rows(self, report):
        lines = report_csv(report).splitlines()
        assert len(lines) == 11
        assert lines[0].startswith("cell,strategy,k,seed,steps")

    def test_emit(self, report, tmp_path):
        json_path, csv_path = emit_report(report, tmp_path / "out")
        assert json_path.exists() and csv_path.exists()

    def test_emit_rejects_empty(self, tmp_path):
        with pytest.raises(ReportError):
            emit_report({"protocol": "run", "cells": [], "comparison": []}, tmp_path)

    def test_emit_rejects_nan(self, report, tmp_path):
        bad = json.loads(report_json(report))
        bad["cells"][0]["seeds"][0]["final"]["accuracy"] = float("nan")
        with pytest.raises(ReportError):
            emit_report(bad, tmp_path)


class TestProtocols:
    def test_noise_grid(self):
        cells = protocol_cells("noise", SMALL)
        assert len(cells) == 9
        assert {c[2].label_noise for c in cells} == {0.05, 0.10, 0.15}
        vanilla = [c for c in cells if c[1]["method"] == "vanilla"][0][2]
        assert (vanilla.strategy, vanilla.k) == ("full-net", 1)

    def test_imbalance_grid(self):
        assert sorted({c[2].imbalance for c in protocol_cells("imbalance", SMALL)}) == [0.5, 0.6, 0.7]

    def test_ablation_rows(self):
        assert tuple(c[0] for c in protocol_cells("ablation", SMALL)) == ABLATION_ROWS

    def test_dropout_sweep(self):
        assert [c[1]["dropout_rate"] for c in protocol_cells("dropout-sweep", SMALL)] == [0.05, 0.1]

    def test_doubled_batch_cells(self):
        cells = {c[0]: c[2] for c in protocol_cells("doubled-batch", SMALL)}
        assert cells["vanilla-double-batch"].effective_batch_size == 2 * SMALL.batch_size
        assert cells["bidrop-repeated-batch"].effective_batch_size == SMALL.batch_size
        assert cells["bidrop-repeated-batch"].k == 2

    def test_unknown_protocol(self):
        with pytest.raises(ConfigError):
            protocol_cells("bogus", SMALL)

    def test_low_resource_needs_rows(self):
        with pytest.raises(ConfigError):
            run_protocol("low-resource", SMALL)

    def test_noise_report_has_gaps(self):
        report = run_protocol("noise", SMALL.override(seeds="0", max_steps=2))
        assert len(report["gaps"]) == 6
        assert report["comparison"][0]["metric"] == "accuracy"

    def test_imbalance_metric(self):
        report = run_protocol("imbalance", SMALL.override(seeds="0", max_steps=2))
        assert {r["metric"] for r in report["comparison"]} == {"minority_accuracy"}


CFG_TEXT = "n_train = 40\nn_dev = 40\nhidden = 8\nbatch_size = 8\nmax_steps = 4\nseeds = 0-1\n"


class TestCli:
    def test_run_writes_reports(self, tmp_path, capsys):
        (tmp_path / "a.cfg").write_text(CFG_TEXT)
        code = main(["run", "--config", str(tmp_path / "a.cfg"), "--out", str(tmp_path / "o"), "--dump-masks", "--quiet"])
        assert code == 0
        assert (tmp_path / "o" / "report.json").exists()
        assert len(list((tmp_path / "o" / "masks").iterdir())) == 2

    def test_config_error_exit_code(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("bogus = 1\n")
        assert main(["run", "--config", str(tmp_path / "bad.cfg"), "--quiet"]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.cfg"), "--quiet"]) == 1

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_csv_dataset_relative_to_config(self, tmp_path):
        rows = "\n".join(f"{i % 2},{(i % 2) * 2 - 1 + 0.1 * i},{i * 0.01}" for i in range(16))
        (tmp_path / "tr.csv").write_text(rows + "\n")
        (tmp_path / "dv.csv").write_text(rows + "\n")
        (tmp_path / "c.cfg").write_text("dataset = csv\ntrain_csv = tr.csv\ndev_csv = dv.csv\nhidden = 4\n"
                                        "batch_size = 4\nmax_steps = 3\nseeds = 0\n")
        assert main(["run", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "o"), "--quiet"]) == 0

    def test_bad_csv_exit_code(self, tmp_path):
        (tmp_path / "tr.csv").write_text("1,x\n")
        (tmp_path / "c.cfg").write_text("dataset = csv\ntrain_csv = tr.csv\ndev_csv = tr.csv\nseeds = 0\n")
        assert main(["run", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "o"), "--quiet"]) == 1

    def test_subprocess_runs_are_byte_identical(self, tmp_path):
        (tmp_path / "a.cfg").write_text(CFG_TEXT)
        outputs = []
        for name in ("x", "y"):
            out = tmp_path / name
            subprocess.run([sys.executable, "-m", "bidrop", "run", "--config", str(tmp_path / "a.cfg"),
                            "--out", str(out), "--quiet"], check=True)
            outputs.append(((out / "report.json").read_bytes(), (out / "report.csv").read_bytes()))
        assert outputs[0] == outputs[1]
