import csv
import json
import os

import pytest

from sim2road.cli import MANIFEST_NAME, main
from sim2road.exceptions import ConfigError
from sim2road.pipeline import AlignmentError, align_frames, sweep_values


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(autouse=True)
def fixed_epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


@pytest.fixture(scope="module")
def clean_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("clean")
    assert main(["synth", "--out", str(out), "--seed", "4", "--frames", "6"]) == 0
    return out


def _read_tree(root):
    tree = {}
    for base, _, files in os.walk(root):
        for name in files:
            path = os.path.join(base, name)
            with open(path, "rb") as f:
                tree[os.path.relpath(path, root)] = f.read()
    return tree


def _gt_count(scene_dir):
    total = 0
    for name in os.listdir(scene_dir / "label_2"):
        total += len((scene_dir / "label_2" / name).read_text().splitlines())
    return total


def _match_args(scene, out, *extra):
    return ("match", "--labels-3d", scene / "teacher_3d", "--dets-2d", scene / "dets_2d", "--calib", scene / "calib", "--out", out, *extra)


class TestAlignment:
    def test_missing_frames_listed(self, tmp_path):
        for sub, stems in (("a", ["000000", "000001", "000002"]), ("b", ["000000"])):
            (tmp_path / sub).mkdir()
            for s in stems:
                (tmp_path / sub / f"{s}.txt").write_text("")
        with pytest.raises(AlignmentError, match="000001.*000002|000002.*000001"):
            align_frames(a=tmp_path / "a", b=tmp_path / "b")

    def test_sweep_values(self):
        assert sweep_values(0.0, 3.0, 31)[10] == pytest.approx(1.0)
        assert sweep_values(1.5, 1.5, 1) == [1.5]
        with pytest.raises(ConfigError):
            sweep_values(2.0, 1.0, 5)


class TestSynth:
    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert _run("synth", "--out", out, "--seed", "2", "--frames", "3", "--loc-sigma", "0.5") == 0
        assert _read_tree(a) == _read_tree(b)

    def test_bad_proportion_is_config_error(self, tmp_path):
        assert _run("synth", "--out", tmp_path, "--det-drop", "1.5") == 2


class TestMatch:
    def test_noise_free_identity(self, clean_scene, tmp_path):
        assert _run(*_match_args(clean_scene, tmp_path)) == 0
        totals = json.loads((tmp_path / "summary.json").read_text())["totals"]
        assert totals == {"matched": _gt_count(clean_scene), "kept_2d": 0, "discarded_3d": 0}
        assert len(os.listdir(tmp_path / "pseudo_labels")) == 6

    def test_zero_threshold_matches_nothing(self, clean_scene, tmp_path):
        assert _run(*_match_args(clean_scene, tmp_path, "--threshold", "0")) == 0
        totals = json.loads((tmp_path / "summary.json").read_text())["totals"]
        assert totals["matched"] == 0
        assert totals["kept_2d"] == totals["discarded_3d"] == _gt_count(clean_scene)

    def test_threshold_out_of_range(self, clean_scene, tmp_path):
        assert _run(*_match_args(clean_scene, tmp_path, "--threshold", "3.5")) == 2

    def test_empty_2d_dir_names_it(self, clean_scene, tmp_path, capsys):
        empty = tmp_path / "nothing"
        empty.mkdir()
        args = ("match", "--labels-3d", clean_scene / "teacher_3d", "--dets-2d", empty, "--calib", clean_scene / "calib")
        assert _run(*args, "--out", tmp_path / "o") == 3
        assert str(empty) in capsys.readouterr().err

    def test_misaligned_frames_listed(self, clean_scene, tmp_path, capsys):
        partial = tmp_path / "partial"
        partial.mkdir()
        for name in sorted(os.listdir(clean_scene / "dets_2d"))[:4]:
            (partial / name).write_bytes((clean_scene / "dets_2d" / name).read_bytes())
        args = ("match", "--labels-3d", clean_scene / "teacher_3d", "--dets-2d", partial, "--calib", clean_scene / "calib")
        assert _run(*args, "--out", tmp_path / "o") == 3
        err = capsys.readouterr().err
        assert "000004" in err and "000005" in err

    def test_missing_option(self, clean_scene, tmp_path):
        assert _run("match", "--calib", clean_scene / "calib", "--out", tmp_path) == 2

    def test_jobs_do_not_change_output(self, clean_scene, tmp_path):
        one, two = tmp_path / "one", tmp_path / "two"
        assert _run(*_match_args(clean_scene, one, "--jobs", "1")) == 0
        assert _run(*_match_args(clean_scene, two, "--jobs", "2")) == 0
        assert _read_tree(one) == _read_tree(two)


class TestEval:
    def _args(self, scene, dets, out, *extra):
        return ("eval", "--dets", dets, "--gt", scene / "label_2", "--calib", scene / "calib", "--out", out, *extra)

    def test_ground_truth_against_itself(self, clean_scene, tmp_path, capsys):
        assert _run(*self._args(clean_scene, clean_scene / "label_2", tmp_path)) == 0
        assert "100.00" in capsys.readouterr().out
        assert json.loads((tmp_path / "report.json").read_text())["map_overall"] == 100.0

    def test_half_frames_empty_halves_recall(self, tmp_path):
        scene = tmp_path / "scene"
        # equal object counts per frame make the recall exactly one half
        assert _run("synth", "--out", scene, "--seed", "5", "--frames", "4", "--min-objects", "5", "--max-objects", "5") == 0
        dets = tmp_path / "dets"
        dets.mkdir()
        for k, name in enumerate(sorted(os.listdir(scene / "label_2"))):
            text = (scene / "label_2" / name).read_text() if k % 2 == 0 else ""
            (dets / name).write_text(text)
        assert _run(*self._args(scene, dets, tmp_path / "out")) == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["recall"] == pytest.approx(0.5)

    def test_iou_out_of_range(self, clean_scene, tmp_path):
        assert _run(*self._args(clean_scene, clean_scene / "label_2", tmp_path, "--iou", "1.01")) == 2


class TestSweep:
    def _args(self, scene, out, *extra):
        return (
            "sweep", "--labels-3d", scene / "teacher_3d", "--dets-2d", scene / "dets_2d",
            "--calib", scene / "calib", "--gt", scene / "label_2", "--out", out, *extra,
        )

    def test_noise_free_curve(self, clean_scene, tmp_path):
        assert _run(*self._args(clean_scene, tmp_path, "--from", "0", "--to", "3", "--steps", "7")) == 0
        rows = list(csv.DictReader((tmp_path / "sweep.csv").open()))
        assert len(rows) == 7
        assert float(rows[0]["map"]) == 0.0
        assert all(float(r["map"]) == 100.0 for r in rows[1:])

    def test_single_step(self, clean_scene, tmp_path):
        assert _run(*self._args(clean_scene, tmp_path, "--from", "2.2", "--to", "2.2", "--steps", "1")) == 0
        assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 2

    def test_descending_range(self, clean_scene, tmp_path):
        assert _run(*self._args(clean_scene, tmp_path, "--from", "2", "--to", "1")) == 2

    def test_unknown_parameter(self, clean_scene, tmp_path):
        assert _run(*self._args(clean_scene, tmp_path, "--param", "momentum")) == 2


class TestStats:
    def test_counts_match_config(self, tmp_path):
        scene = tmp_path / "scene"
        assert _run("synth", "--out", scene, "--seed", "8", "--frames", "5", "--min-objects", "3", "--max-objects", "6") == 0
        out = tmp_path / "stats"
        assert _run("stats", "--labels", scene / "label_2", "--calib", scene / "calib", "--out", out) == 0
        stats = json.loads((out / "stats.json").read_text())
        assert stats["num_frames"] == 5
        assert stats["num_labels"] == _gt_count(scene)
        assert all(3 <= int(k) <= 6 for k in stats["labels_per_frame"])
        assert (out / "class_counts.csv").exists()


class TestAdapt:
    def test_zero_noise_history_is_flat(self, clean_scene, tmp_path):
        args = ("adapt", "--data", clean_scene, "--steps", "20", "--ema-interval", "5", "--out", tmp_path)
        assert _run(*args) == 0
        result = json.loads((tmp_path / "result.json").read_text())
        # only the 8-decimal rounding of the label files is left to fit
        assert result["initial_total"] < 1e-7 and result["final_total"] < 1e-7
        assert result["ema_steps"] == [5, 10, 15, 20]
        rows = list(csv.DictReader((tmp_path / "history.csv").open()))
        assert len(rows) == 21

    def test_bias_is_reduced(self, clean_scene, tmp_path):
        args = ("adapt", "--data", clean_scene, "--steps", "60", "--lr", "0.1", "--lambda-3d", "0.05")
        assert _run(*args, "--bias", "Car:1.0,0,0,0", "--out", tmp_path) == 0
        result = json.loads((tmp_path / "result.json").read_text())
        assert result["final_total"] < result["initial_total"]

    def test_bad_bias(self, clean_scene, tmp_path):
        assert _run("adapt", "--data", clean_scene, "--bias", "Boat:1", "--out", tmp_path) == 2


class TestConfigFile:
    def test_section_applies_and_flag_wins(self, clean_scene, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text(
            f'calib = "{clean_scene / "calib"}"\n'
            "[match]\n"
            f'labels-3d = "{clean_scene / "teacher_3d"}"\n'
            f'dets_2d = "{clean_scene / "dets_2d"}"\n'
            "threshold = 0.0\n"
        )
        out = tmp_path / "from_file"
        assert _run("match", "--config", cfg, "--out", out) == 0
        manifest = json.loads((out / MANIFEST_NAME).read_text())
        assert manifest["config"]["threshold"] == 0.0
        assert manifest["inputs"]["config"] == str(cfg)

        out = tmp_path / "flag"
        assert _run("match", "--config", cfg, "--threshold", "2.2", "--out", out) == 0
        assert json.loads((out / "summary.json").read_text())["totals"]["matched"] == _gt_count(clean_scene)

    def test_unknown_key(self, clean_scene, tmp_path):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("[match]\nthreshhold = 1.0\n")
        assert _run(*_match_args(clean_scene, tmp_path / "o", "--config", cfg)) == 2

    def test_malformed_toml(self, clean_scene, tmp_path):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("threshold = = 1\n")
        assert _run(*_match_args(clean_scene, tmp_path / "o", "--config", cfg)) == 2


class TestManifest:
    def test_one_manifest_per_output(self, clean_scene, tmp_path):
        outs = {
            "match": _match_args(clean_scene, tmp_path / "match"),
            "eval": ("eval", "--dets", clean_scene / "label_2", "--gt", clean_scene / "label_2",
                     "--calib", clean_scene / "calib", "--out", tmp_path / "eval"),
            "stats": ("stats", "--labels", clean_scene / "label_2", "--calib", clean_scene / "calib",
                      "--out", tmp_path / "stats"),
            "losses": ("losses", "--labels-3d", clean_scene / "teacher_3d", "--dets-2d", clean_scene / "dets_2d",
                       "--calib", clean_scene / "calib", "--out", tmp_path / "losses"),
        }
        for name, args in outs.items():
            assert _run(*args) == 0, name
            found = [p for p in _read_tree(tmp_path / name) if os.path.basename(p) == MANIFEST_NAME]
            assert found == [MANIFEST_NAME], name
            manifest = json.loads((tmp_path / name / MANIFEST_NAME).read_text())
            assert manifest["command"] == name
            assert manifest["wall_clock"].startswith("2023-11-14")

    def test_noise_free_losses_vanish(self, clean_scene, tmp_path):
        args = ("losses", "--labels-3d", clean_scene / "teacher_3d", "--dets-2d", clean_scene / "dets_2d",
                "--calib", clean_scene / "calib", "--out", tmp_path)
        assert _run(*args) == 0
        overall = json.loads((tmp_path / "losses.json").read_text())["overall"]
        assert overall["total"] < 1e-6


def test_argparse_usage_error_exits_2(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["match", "--no-such-flag"])
    assert info.value.code == 2
