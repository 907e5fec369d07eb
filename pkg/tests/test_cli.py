"""Command-line pipeline: exit codes, messages, determinism and atomic output."""
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from fcnreg import cli, training
from fcnreg.evaluation import read_metrics_csv
from fcnreg.losses import LossReport
from fcnreg.io import read_volume, write_volume
from fcnreg.network import ArchitectureConfig, build_network, save_model
from fcnreg.volume import DisplacementField, Volume
from fcnreg.warp import warp_trilinear


def run(*argv):
    return cli.run([str(a) for a in argv])


@pytest.fixture(scope="module")
def pairs(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "pairs"
    assert run("synth", "--dims", "8,8,8", "--count", "3", "--max-amp", "1.5",
               "--sigma", "2,3", "--labels", "--seed", "4", "--out", out) == 0
    return out


def test_synth_writes_every_volume(pairs):
    dirs = sorted(p.name for p in pairs.iterdir())
    assert dirs == ["pair_0000", "pair_0001", "pair_0002"]
    for name in ("base", "fixed", "moving", "truth", "fixed_labels", "moving_labels"):
        assert read_volume(pairs / "pair_0000" / name).dims == (8, 8, 8)
    assert isinstance(read_volume(pairs / "pair_0000" / "truth"), DisplacementField)


def test_identity_pair_direct_eval_leaves_ncc_unchanged(tmp_path):
    assert run("synth", "--dims", "16,16,16", "--count", "1", "--max-amp", "0",
               "--out", tmp_path / "p") == 0
    assert run("eval", "--pairs", tmp_path / "p", "--direct", "--truth", tmp_path / "p",
               "--out", tmp_path / "m.csv") == 0
    rows, _ = read_metrics_csv((tmp_path / "m.csv").read_text())
    (row,) = rows
    assert row.error == ""
    assert row.ncc_before == row.ncc_after
    assert abs(row.ncc_before - 1.0) < 1e-6
    assert row.epe_after == 0.0


def test_eval_with_model_labels_and_truth(tmp_path, pairs):
    save_model(build_network(ArchitectureConfig("multires", (8, 8, 8))), tmp_path / "m.bin")
    assert run("eval", "--pairs", pairs, "--model", tmp_path / "m.bin", "--labels", pairs,
               "--truth", pairs, "--out", tmp_path / "m.csv") == 0
    rows, summary = read_metrics_csv((tmp_path / "m.csv").read_text())
    assert len(rows) == 3
    for r in rows:
        assert r.dice_after == r.dice_before and r.epe_after == r.epe_before
    assert "mean" in summary and "std" in summary


def test_register_dims_mismatch_names_both(tmp_path, capsys):
    write_volume(tmp_path / "f", Volume(np.zeros((8, 8, 8))))
    write_volume(tmp_path / "m", Volume(np.zeros((8, 8, 4))))
    code = run("register", "--direct", "--fixed", tmp_path / "f", "--moving", tmp_path / "m",
               "--out-field", tmp_path / "out")
    err = capsys.readouterr().err
    assert code == 1
    assert "8x8x8" in err and "8x8x4" in err
    assert len(err.strip().splitlines()) == 1
    assert not list(tmp_path.glob("out*"))


def test_register_model_dims_mismatch(tmp_path, pairs, capsys):
    save_model(build_network(ArchitectureConfig("multires", (16, 16, 16))), tmp_path / "m.bin")
    code = run("register", "--model", tmp_path / "m.bin", "--fixed", pairs / "pair_0000" / "fixed",
               "--moving", pairs / "pair_0000" / "moving", "--out-field", tmp_path / "out")
    assert code == 1
    err = capsys.readouterr().err
    assert "16x16x16" in err and "8x8x8" in err


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["synth", "--out", "x", "--bogus"],
    ["synth", "--dims", "8,8", "--out", "x"],
    ["train", "--data", "nowhere", "--out", "m.bin"],
    ["warp", "--in", "a", "--field", "b", "--out", "c"],
])
def test_validation_errors_exit_one(tmp_path, monkeypatch, argv, capsys):
    monkeypatch.chdir(tmp_path)
    assert run(*argv) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_train_rejects_dims_not_divisible_by_four(tmp_path):
    assert run("synth", "--dims", "6,8,8", "--count", "2", "--out", tmp_path / "p") == 1
    # hand-made data that the pooled variant cannot take
    for i in range(2):
        for name in ("fixed", "moving"):
            write_volume(tmp_path / "q" / f"pair_{i:04d}" / name, Volume(np.ones((6, 8, 8))))
    assert run("train", "--data", tmp_path / "q", "--iters", "1", "--out", tmp_path / "m.bin") == 1
    assert not (tmp_path / "m.bin").exists()


def test_corrupt_header_is_a_validation_error(tmp_path, capsys):
    write_volume(tmp_path / "v", Volume(np.ones((4, 4, 4))))
    (tmp_path / "v.vjson").write_text("{not json")
    write_volume(tmp_path / "f", DisplacementField.zeros((4, 4, 4)))
    assert run("warp", "--in", tmp_path / "v", "--field", tmp_path / "f",
               "--out", tmp_path / "w") == 1
    assert "v.vjson" in capsys.readouterr().err


def test_divergence_exits_two_without_partial_files(tmp_path, pairs, monkeypatch):
    monkeypatch.setattr(training, "network_loss",
                        lambda *a, **k: (None, LossReport([], float("nan"))))
    out = tmp_path / "model.bin"
    assert run("train", "--data", pairs, "--iters", "2", "--batch", "1", "--out", out) == 2
    assert list(tmp_path.iterdir()) == []


def test_warp_round_trip(tmp_path, pairs):
    assert run("register", "--direct", "--iters", "20", "--fixed", pairs / "pair_0000" / "fixed",
               "--moving", pairs / "pair_0000" / "moving", "--out-field", tmp_path / "d") == 0
    for flag in ([], ["--nearest"]):
        assert run("warp", "--in", pairs / "pair_0000" / "moving_labels", "--field",
                   tmp_path / "d", "--out", tmp_path / "w", *flag) == 0
        assert read_volume(tmp_path / "w").dims == (8, 8, 8)
    labels = read_volume(tmp_path / "w").data
    assert set(np.unique(labels)) <= {0.0, 1.0}


def test_train_then_register_is_deterministic(tmp_path, pairs):
    for tag in ("a", "b"):
        assert run("train", "--data", pairs, "--preset", "desk", "--iters", "3", "--batch", "2",
                   "--seed", "7", "--deterministic", "--out", tmp_path / f"{tag}.bin") == 0
        assert run("register", "--model", tmp_path / f"{tag}.bin",
                   "--fixed", pairs / "pair_0001" / "fixed",
                   "--moving", pairs / "pair_0001" / "moving",
                   "--out-field", tmp_path / f"{tag}_field") == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert ((tmp_path / "a.bin.loss.csv").read_bytes()
            == (tmp_path / "b.bin.loss.csv").read_bytes())
    assert ((tmp_path / "a_field.raw").read_bytes()
            == (tmp_path / "b_field.raw").read_bytes())


def test_synth_is_byte_identical_across_runs(tmp_path):
    for tag in ("a", "b"):
        assert run("synth", "--dims", "8,8,8", "--count", "2", "--seed", "3",
                   "--out", tmp_path / tag) == 0
    for f in sorted((tmp_path / "a").rglob("*.*")):
        twin = tmp_path / "b" / f.relative_to(tmp_path / "a")
        assert f.read_bytes() == twin.read_bytes(), f


def test_log_file_records_messages(tmp_path):
    assert run("synth", "--dims", "8,8,8", "--count", "1", "--out", tmp_path / "p",
               "--log", tmp_path / "run.log") == 0
    assert "wrote 1 pairs" in (tmp_path / "run.log").read_text()


def test_reg_threads_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("REG_THREADS", "zero")
    assert run("synth", "--dims", "8,8,8", "--count", "1", "--no-deterministic",
               "--out", tmp_path / "p") == 1
    monkeypatch.setenv("REG_THREADS", "2")
    assert run("synth", "--dims", "8,8,8", "--count", "1", "--no-deterministic",
               "--out", tmp_path / "p") == 0


def test_gradcheck_subcommand(capsys):
    assert run("gradcheck", "--cases", "1") == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 9 and "FAIL" not in out


def test_module_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "fcnreg", "--help"], capture_output=True,
                          text=True, check=False)
    assert proc.returncode == 0
    for name in cli.COMMANDS:
        assert name in proc.stdout


def test_warp_outputs_match_library(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume(rng.random((8, 8, 8)))
    field = DisplacementField(rng.normal(scale=0.7, size=(3, 8, 8, 8)))
    write_volume(tmp_path / "v", vol)
    write_volume(tmp_path / "f", field)
    assert run("warp", "--in", tmp_path / "v", "--field", tmp_path / "f",
               "--out", tmp_path / "w") == 0
    expected = warp_trilinear(read_volume(tmp_path / "v"), read_volume(tmp_path / "f"))
    assert_array_equal(read_volume(tmp_path / "w").data, expected.data)
