import csv
import re

import numpy as np
import pytest

from fsnet import cli, gradsuite
from fsnet.gradcheck import GradEntry, GradReport

TINY = ["--set", "channels=8", "--set", "cs=4", "--set", "backbone_widths=4,8", "--set", "rois_per_image=32",
        "--set", "proposals_per_image=60"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(root), "--set", "n_train=4", "--set", "n_test=2"]) == 0
    return root


@pytest.fixture(scope="module")
def checkpoint(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    assert cli.main(["train", "--data", str(data), "--out", str(out), "--iterations", "3", *TINY]) == 0
    return out


# --- settings ----------------------------------------------------------------------

def test_resolve_precedence(tmp_path):
    cfg = tmp_path / "run.txt"
    cfg.write_text("# comment\nseed = 4\ncs=20  # trailing comment\nhead_width=none\n")
    s = cli.resolve_settings(cfg, env={})
    assert s["seed"] == 4 and s["cs"] == 20 and s["head_width"] is None
    assert cli.resolve_settings(cfg, env={"FSN_SEED": "9"})["seed"] == 9
    assert cli.resolve_settings(cfg, ["seed=11"], env={"FSN_SEED": "9"})["seed"] == 11
    assert cli.resolve_settings(None, ["backbone_widths=8,16", "lr=0.01"], env={})["backbone_widths"] == [8, 16]


def test_unknown_and_malformed_keys(tmp_path):
    with pytest.raises(cli.UsageError, match="unknown config keys: colour"):
        cli.resolve_settings(None, ["colour=red"], env={})
    with pytest.raises(cli.UsageError, match="bad value"):
        cli.resolve_settings(None, ["cs=many"], env={})
    bad = tmp_path / "bad.txt"
    bad.write_text("just words\n")
    with pytest.raises(cli.UsageError, match="key=value"):
        cli.resolve_settings(bad, env={})


def test_settings_roundtrip():
    s = cli.resolve_settings(None, ["seed=3", "backbone_widths=4,8"], env={})
    text = cli.format_settings(s)
    path_free = dict(line.split("=", 1) for line in text.splitlines())
    assert cli.resolve_settings(None, [f"{k}={v}" for k, v in path_free.items()], env={}) == s


# --- exit codes --------------------------------------------------------------------

@pytest.mark.parametrize("argv", [["frobnicate"], ["train", "--set", "bogus=1"], ["train", "--no-such-flag"],
                                  ["train", "--out", "x"], ["eval", "--checkpoint", "/nonexistent", "--data", "x"],
                                  ["train", "--set", "attention=everything", "--out", "x"]])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        raise SystemExit(cli.main(argv))
    assert exc.value.code == 1


def test_missing_config_file_exit_1(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "none.txt")]) == 1


def test_gradcheck_exit_codes(monkeypatch, capsys, tmp_path):
    assert cli.main(["gradcheck", "--set", "gradcheck_seeds=1", "--out", str(tmp_path)]) == 0
    report = (tmp_path / "gradcheck.txt").read_text()
    assert "micro_pipeline" in report and "0 failed" in report
    assert (tmp_path / "gradcheck.config.txt").exists()
    failing = GradReport("broken", 0, [GradEntry("w", 1.0, 1e-5)])
    monkeypatch.setattr(gradsuite, "run_suite", lambda seeds: ([failing], 0.0))
    assert cli.main(["gradcheck", "--set", "gradcheck_seeds=1"]) == 2
    assert "FAIL" in capsys.readouterr().out


# --- commands ------------------------------------------------------------------------

def test_gen_data_layout(data):
    for split in ("train", "test"):
        assert (data / split / "annotations.jsonl").exists()
        assert (data / split / "manifest.json").exists()
    assert len(list((data / "train" / "images").glob("*.ppm"))) == 4
    assert (data / "gen-data.config.txt").exists()


def test_train_outputs(checkpoint):
    for name in ("params.fsnt", "manifest.json", "loss.tsv", "train.config.txt"):
        assert (checkpoint / name).exists()
    assert len((checkpoint / "loss.tsv").read_text().splitlines()) == 4


def test_rerun_from_echoed_config_is_bit_exact(checkpoint, tmp_path):
    out = tmp_path / "again"
    assert cli.main(["train", "--config", str(checkpoint / "train.config.txt"), "--out", str(out)]) == 0
    assert (out / "params.fsnt").read_bytes() == (checkpoint / "params.fsnt").read_bytes()
    assert (out / "loss.tsv").read_text() == (checkpoint / "loss.tsv").read_text()


def test_fsn_seed_env_changes_run(data, checkpoint, tmp_path, monkeypatch):
    monkeypatch.setenv("FSN_SEED", "5")
    out = tmp_path / "seeded"
    assert cli.main(["train", "--data", str(data), "--out", str(out), "--iterations", "3", *TINY]) == 0
    assert "seed=5" in (out / "train.config.txt").read_text().splitlines()
    assert (out / "params.fsnt").read_bytes() != (checkpoint / "params.fsnt").read_bytes()


def test_eval_prints_table(checkpoint, data, capsys, tmp_path):
    assert cli.main(["eval", "--checkpoint", str(checkpoint), "--data", str(data), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert re.search(r"^mAP\s+\d\.\d{4}$", out, re.M)
    assert (tmp_path / "eval_test.txt").read_text() == out
    assert (tmp_path / "eval.config.txt").exists()


def test_infer_lines(checkpoint, data, capsys):
    image = sorted((data / "test" / "images").glob("*.ppm"))[0]
    assert cli.main(["infer", "--checkpoint", str(checkpoint), "--image", str(image)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines
    for line in lines:
        assert re.fullmatch(r"[123] [01]\.\d{6}( \d+\.\d{2}){4}", line), line
    scores = [float(line.split()[1]) for line in lines]
    assert scores == sorted(scores, reverse=True)


def test_infer_with_proposal_file(checkpoint, data, capsys, tmp_path):
    image = sorted((data / "test" / "images").glob("*.ppm"))[0]
    props = tmp_path / "p.txt"
    np.savetxt(props, [[10, 10, 50, 60], [10, 10, 50, 60]])
    assert cli.main(["infer", "--checkpoint", str(checkpoint), "--image", str(image),
                     "--proposals", str(props)]) == 0
    assert len(capsys.readouterr().out.splitlines()) <= 1


def test_infer_missing_image(checkpoint, tmp_path):
    assert cli.main(["infer", "--checkpoint", str(checkpoint), "--image", str(tmp_path / "x.ppm")]) == 1


def test_ablate_grid(data, tmp_path):
    seq, par = tmp_path / "seq", tmp_path / "par"
    argv = ["ablate", "--data", str(data), "--iterations", "2", "--set", "baseline_seeds=1", *TINY]
    assert cli.main(argv + ["--out", str(seq)]) == 0
    assert cli.main(argv + ["--out", str(par), "--jobs", "2"]) == 0
    with open(seq / "ablation.tsv") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    assert len(rows) == 12
    assert [(r["variant"], r["shift_direction"]) for r in rows] == [
        (v, d) for v in ("none", "sub-region", "aspect", "both") for d in ("center", "outside", "random")]
    for r in rows:
        assert r["config_hash"] and r["trained_as"] and int(r["params"]) > 0
    assert rows[0]["seeds"] == "0,1" and rows[3]["seeds"] == "0" and rows[9]["seeds"] == "0,1"
    assert rows[1]["trained_as"] == "none-center-s0,none-center-s1"
    assert (seq / "ablation.tsv").read_text() == (par / "ablation.tsv").read_text()
    text = (seq / "ablation.txt").read_text().splitlines()
    assert len(text) == 14 and len({line.index("shift_direction") for line in text[:1]}) == 1
    assert (seq / "runs" / "both-center-s1" / "manifest.json").exists()


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "fsnet" in capsys.readouterr().out
