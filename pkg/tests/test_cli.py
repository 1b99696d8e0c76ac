"""End-to-end exercises of the command-line tool, run in-process via main().

Covers the five subcommands, the config-file/flag precedence rules, the
documented exit-code mapping (0 ok / 2 config / 3 data / 4 numerical), and
the streaming-memory bound of the audit command.
"""

import json
import tracemalloc
from pathlib import Path

import pytest
import torch

from roadaudit import taxonomy
from roadaudit.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK,
                           main)
from roadaudit.dataset import list_sequence_dirs, load_sequence
from roadaudit.errors import TrainingDiverged
from roadaudit.metrics import REPORT_SCHEMA
from roadaudit.models import load_checkpoint, predict_mask
from roadaudit.tagging import load_thresholds, uniform_thresholds, write_thresholds
from roadaudit.taxonomy import HierarchyLevel

SYNTH_FLAGS = ["--sequences", "2", "--frames", "16", "--size", "128x64"]


def synth(root: Path, seed: int = 7, flags=tuple(SYNTH_FLAGS)) -> int:
    return main(["--seed", str(seed), "--out", str(root), "synth", *flags])


def tree_bytes(root: Path) -> dict[str, bytes]:
    """Relative path -> content for every file under root."""
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def stderr_events(capsys) -> list[dict]:
    return [json.loads(line) for line in capsys.readouterr().err.splitlines() if line]


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory) -> Path:
    """Dataset written by the synth subcommand itself: 2 sequences x 16 frames."""
    root = tmp_path_factory.mktemp("cli_data")
    assert synth(root) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def pixel_thresholds(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("thr") / "ones.json"
    write_thresholds(uniform_thresholds(1.0), path)
    return path


class TestSynth:
    def test_layout(self, cli_data):
        dirs = list_sequence_dirs(cli_data)
        assert [d.name for d in dirs] == ["seq000", "seq001"]
        for d in dirs:
            seq = load_sequence(d)
            assert len(seq) == 16
            assert seq.frames[0].image.shape == (64, 128, 3)
            assert len(list(d.glob("img/*.png"))) == 16
            assert len(list(d.glob("mask/*.png"))) == 16

    def test_labels_json_written(self, cli_data):
        doc = json.loads((cli_data / "labels.json").read_text())
        assert len(doc["labels"]) == taxonomy.NUM_CLASSES

    def test_rerun_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert synth(a) == EXIT_OK
        assert synth(b) == EXIT_OK
        assert tree_bytes(a) == tree_bytes(b)

    def test_seed_changes_output(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        synth(a, seed=7)
        synth(b, seed=8)
        assert tree_bytes(a) != tree_bytes(b)

    def test_indivisible_size_rejected_with_guidance(self, tmp_path, capsys):
        rc = synth(tmp_path / "x", flags=["--size", "250x130"])
        assert rc == EXIT_CONFIG
        error = stderr_events(capsys)[-1]
        assert error["kind"] == "config"
        assert "multiples of 8" in error["message"]
        assert "248x128" in error["message"]  # nearest valid size suggested

    def test_malformed_size_rejected(self, tmp_path):
        assert synth(tmp_path / "x", flags=["--size", "big"]) == EXIT_CONFIG

    def test_logs_are_json_lines(self, tmp_path, capsys):
        synth(tmp_path / "x", flags=["--frames", "2", "--size", "64x32"])
        events = stderr_events(capsys)
        assert events and all("event" in e for e in events)
        assert events[-1]["event"] == "synth_done"


class TestTrain:
    def test_two_step_writes_artifacts(self, cli_data, tmp_path):
        out = tmp_path / "out"
        rc = main(["--data-root", str(cli_data), "--out", str(out),
                   "train", "--preset", "toy", "--epochs", "2"])
        assert rc == EXIT_OK

        model, extra = load_checkpoint(out / "cascade.ckpt")
        assert extra["epochs"] == 4  # 2 road + 2 joint
        frame = load_sequence(cli_data / "seq000").frames[0]
        assert predict_mask(model, frame.image).shape == frame.mask.shape

        rows = (out / "history_cascade.csv").read_text().splitlines()
        steps = [r.split(",")[0] for r in rows[1:]]
        assert steps == ["road", "road", "joint", "joint"]

        recorded = json.loads((out / "train_config.json").read_text())
        assert recorded["max_epochs"] == 2
        assert recorded["learning_rate"] == 5e-4
        assert recorded["model"] == "cascade"
        assert recorded["schedule"] == "two-step"

    def test_baseline_checkpoint_accepted_by_eval(self, cli_data, tmp_path):
        out = tmp_path / "out"
        rc = main(["--data-root", str(cli_data), "--out", str(out),
                   "train", "--model", "baseline", "--preset", "toy",
                   "--epochs", "1"])
        assert rc == EXIT_OK
        assert (out / "baseline.ckpt").is_file()
        rc = main(["--data-root", str(cli_data), "--out", str(out),
                   "eval", "--checkpoint", str(out / "baseline.ckpt"),
                   "--split", "test"])
        assert rc == EXIT_OK
        assert (out / "eval_test.json").is_file()

    def test_missing_dataset_is_a_data_error(self, tmp_path, capsys):
        rc = main(["--data-root", str(tmp_path / "nowhere"), "--out",
                   str(tmp_path / "out"), "train", "--epochs", "1"])
        assert rc == EXIT_DATA
        assert stderr_events(capsys)[-1]["kind"] == "data"

    def test_divergence_exits_numerical_and_keeps_checkpoint(
        self, cli_data, tmp_path, monkeypatch, capsys
    ):
        def sabotaged(model, train_frames, val_frames, config, **kwargs):
            raise TrainingDiverged(0, "road: non-finite logits in loss")

        monkeypatch.setattr("roadaudit.cli.train_two_step", sabotaged)
        out = tmp_path / "out"
        rc = main(["--data-root", str(cli_data), "--out", str(out),
                   "train", "--preset", "toy", "--epochs", "1"])
        assert rc == EXIT_NUMERICAL
        _, extra = load_checkpoint(out / "cascade.ckpt")  # partial state kept
        assert extra["diverged_at_epoch"] == 0
        events = stderr_events(capsys)
        assert any(e["event"] == "train_diverged" for e in events)
        assert events[-1]["kind"] == "numerical"


class TestEval:
    def test_oracle_scores_one_at_every_level(self, cli_data, tmp_path):
        out = tmp_path / "out"
        rc = main(["--data-root", str(cli_data), "--out", str(out),
                   "eval", "--oracle"])
        assert rc == EXIT_OK
        doc = json.loads((out / "eval_test.json").read_text())
        assert set(doc) == {lv.value for lv in HierarchyLevel}
        for rep in doc.values():
            assert rep["mean_iou"] == 1.0
            assert rep["weighted_iou"] == 1.0
            assert all(v == 1.0 for v in rep["per_class_iou"].values())

    def test_report_json_matches_schema(self, cli_data, tmp_path):
        jsonschema = pytest.importorskip("jsonschema")
        out = tmp_path / "out"
        main(["--data-root", str(cli_data), "--out", str(out), "eval", "--oracle"])
        doc = json.loads((out / "eval_test.json").read_text())
        for rep in doc.values():
            jsonschema.validate(rep, REPORT_SCHEMA)

    def test_text_table_written(self, cli_data, tmp_path):
        out = tmp_path / "out"
        main(["--data-root", str(cli_data), "--out", str(out),
              "eval", "--oracle", "--split", "val"])
        text = (out / "eval_val.txt").read_text()
        assert "mean IoU" in text and "weighted mean IoU" in text

    def test_checkpoint_or_oracle_required(self, cli_data, tmp_path, capsys):
        rc = main(["--data-root", str(cli_data), "--out", str(tmp_path / "o"),
                   "eval"])
        assert rc == EXIT_CONFIG
        assert "--oracle" in stderr_events(capsys)[-1]["message"]


class TestFitThresholds:
    def test_oracle_reaches_perfect_macro_f1(self, cli_data, tmp_path):
        out = tmp_path / "out"
        with pytest.warns(RuntimeWarning):  # classes absent from val warn
            rc = main(["--data-root", str(cli_data), "--out", str(out),
                       "fit-thresholds", "--oracle"])
        assert rc == EXIT_OK
        report = json.loads((out / "tag_report_val.json").read_text())
        assert report["macro_f1"] == 1.0
        table = load_thresholds(out / "thresholds.json")
        assert table.unit in ("pixels", "fraction")
        assert (out / "tag_report_val.txt").read_text().count("macro F1") == 1


class TestAudit:
    def test_geojson_coordinates_match_manifest(
        self, cli_data, pixel_thresholds, tmp_path
    ):
        out = tmp_path / "out"
        rc = main(["--data-root", str(cli_data), "--out", str(out), "audit",
                   "--oracle", "--thresholds", str(pixel_thresholds),
                   "--sequence", "seq000"])
        assert rc == EXIT_OK
        seq = load_sequence(cli_data / "seq000")
        by_index = {f.index: f.gps for f in seq.frames}
        doc = json.loads((out / "audit_seq000.geojson").read_text())
        assert doc["type"] == "FeatureCollection" and doc["features"]
        for feat in doc["features"]:
            fix = by_index[feat["properties"]["frame_index"]]
            assert feat["geometry"]["coordinates"] == [fix.lon, fix.lat]
            assert feat["properties"]["sequence_id"] == "seq000"

    def test_severity_csv_and_tags_written(
        self, cli_data, pixel_thresholds, tmp_path
    ):
        out = tmp_path / "out"
        main(["--data-root", str(cli_data), "--out", str(out), "audit",
              "--oracle", "--thresholds", str(pixel_thresholds),
              "--sequence", "seq000"])
        header = (out / "severity_seq000.csv").read_text().splitlines()[0]
        assert header == "sequence_id,frame_index,lat,lon,class,raw,smoothed"
        tags = json.loads((out / "tags_seq000.json").read_text())
        assert [t["frame_index"] for t in tags] == list(range(16))
        names = {n for t in tags for n in t["tags"]}
        assert names <= set(taxonomy.label_names(HierarchyLevel.CLASS_FULL))

    def test_window_comes_from_config_file(
        self, cli_data, pixel_thresholds, tmp_path
    ):
        def rows(out):
            lines = (out / "severity_seq000.csv").read_text().splitlines()[1:]
            return [line.split(",") for line in lines]

        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"window": 1}))
        out1 = tmp_path / "w1"
        main(["--config", str(config), "--data-root", str(cli_data),
              "--out", str(out1), "audit", "--oracle",
              "--thresholds", str(pixel_thresholds), "--sequence", "seq000"])
        assert all(raw == smoothed for *_, raw, smoothed in rows(out1))

        out5 = tmp_path / "w5"  # default window smooths, so columns differ
        main(["--data-root", str(cli_data), "--out", str(out5), "audit",
              "--oracle", "--thresholds", str(pixel_thresholds),
              "--sequence", "seq000"])
        assert any(raw != smoothed for *_, raw, smoothed in rows(out5))

    def test_missing_thresholds_file_is_a_data_error(self, cli_data, tmp_path):
        rc = main(["--data-root", str(cli_data), "--out", str(tmp_path / "o"),
                   "audit", "--oracle", "--thresholds",
                   str(tmp_path / "gone.json"), "--sequence", "seq000"])
        assert rc == EXIT_DATA

    def test_peak_memory_does_not_scale_with_frame_count(self, tmp_path):
        """The audit streams frames: auditing 10x the frames must cost far
        less than 10x the image payload in peak memory."""
        thr = tmp_path / "thr.json"
        write_thresholds(uniform_thresholds(1.0), thr)
        peaks = {}
        for n_frames in (50, 500):
            root = tmp_path / f"data{n_frames}"
            assert main(["--seed", "3", "--out", str(root), "synth",
                         "--frames", str(n_frames), "--size", "256x128"]) == EXIT_OK
            tracemalloc.start()
            rc = main(["--data-root", str(root), "--out",
                       str(tmp_path / f"out{n_frames}"), "audit", "--oracle",
                       "--thresholds", str(thr), "--sequence", "seq000"])
            _, peaks[n_frames] = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            assert rc == EXIT_OK
        extra_payload = 450 * 4 * 256 * 128  # image + mask bytes per extra frame
        assert peaks[500] - peaks[50] < 0.2 * extra_payload


class TestConfigFile:
    def test_flags_beat_config(self, tmp_path):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"seed": 9, "out_dir": str(tmp_path / "cfg_out")}))
        flag_out = tmp_path / "flag_out"
        rc = main(["--config", str(config), "--seed", "7", "--out",
                   str(flag_out), "synth", *SYNTH_FLAGS])
        assert rc == EXIT_OK
        assert not (tmp_path / "cfg_out").exists()
        reference = tmp_path / "ref"
        synth(reference, seed=7)
        assert tree_bytes(flag_out) == tree_bytes(reference)

    def test_config_seed_applies_without_flag(self, tmp_path):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"seed": 8}))
        out = tmp_path / "out"
        rc = main(["--config", str(config), "--out", str(out),
                   "synth", *SYNTH_FLAGS])
        assert rc == EXIT_OK
        reference = tmp_path / "ref"
        synth(reference, seed=8)
        assert tree_bytes(out) == tree_bytes(reference)

    def test_unknown_keys_rejected(self, tmp_path, capsys):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"sede": 8}))
        rc = main(["--config", str(config), "--out", str(tmp_path / "o"),
                   "synth", "--frames", "2"])
        assert rc == EXIT_CONFIG
        assert "sede" in stderr_events(capsys)[-1]["message"]

    def test_missing_config_file_rejected(self, tmp_path):
        rc = main(["--config", str(tmp_path / "gone.json"), "--out",
                   str(tmp_path / "o"), "synth", "--frames", "2"])
        assert rc == EXIT_CONFIG

    def test_unparseable_config_rejected(self, tmp_path):
        config = tmp_path / "cfg.json"
        config.write_text("{not json")
        rc = main(["--config", str(config), "--out", str(tmp_path / "o"),
                   "synth", "--frames", "2"])
        assert rc == EXIT_CONFIG

    def test_unknown_preset_rejected(self, tmp_path, cli_data):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"preset": "huge"}))
        rc = main(["--config", str(config), "--data-root", str(cli_data),
                   "--out", str(tmp_path / "o"), "train", "--epochs", "1"])
        assert rc == EXIT_CONFIG

    def test_train_section_reaches_training(self, tmp_path, cli_data):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({
            "train": {"batch_size": 2, "input_size": [128, 64],
                      "max_epochs": 1, "learning_rate": 1e-3},
        }))
        out = tmp_path / "out"
        rc = main(["--config", str(config), "--data-root", str(cli_data),
                   "--out", str(out), "train"])
        assert rc == EXIT_OK
        recorded = json.loads((out / "train_config.json").read_text())
        assert recorded["batch_size"] == 2
        assert recorded["learning_rate"] == 1e-3
        assert recorded["max_epochs"] == 1


class TestDeterminism:
    def test_training_is_reproducible_for_fixed_seed(self, cli_data, tmp_path):
        histories = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = main(["--seed", "5", "--data-root", str(cli_data), "--out",
                       str(out), "train", "--preset", "toy", "--epochs", "1"])
            assert rc == EXIT_OK
            histories.append((out / "history_cascade.csv").read_text())
            state = load_checkpoint(out / "cascade.ckpt")[0].state_dict()
            if name == "a":
                first_state = state
        assert histories[0] == histories[1]
        assert all(
            torch.equal(first_state[k], state[k]) for k in first_state
        )
