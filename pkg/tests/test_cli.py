"""Command-line interface: artifacts, config precedence, exit codes."""

import csv
import json

import pytest

from mtsn.cli import main

TINY_GEN = ["--num-intents", "3", "--languages", "eng,man", "--train-texts", "6",
            "--test-texts", "3", "--speakers", "1", "--acoustic-dim", "6",
            "--teacher-dim", "4", "--t-min", "2", "--t-max", "3",
            "--sigma-c", "0", "--sigma-a", "0.1", "--sigma-l", "1",
            "--sigma-s", "0.1"]

TINY_TRAIN = ["--epochs", "2", "--hidden-size", "4", "--batch-size", "4"]


def _gen(tmp_path, extra=()):
    out = tmp_path / "corpus"
    assert main(["gen", "--out", str(out)] + TINY_GEN + list(extra)) == 0
    return out


def _trained(tmp_path, extra=()):
    corpus = _gen(tmp_path)
    out = tmp_path / "run"
    rc = main(["train", "--data", str(corpus), "--out", str(out)]
              + TINY_TRAIN + list(extra))
    assert rc == 0
    return corpus, out


def test_gen_writes_corpus_and_reports_counts(tmp_path, capsys):
    out = _gen(tmp_path)
    assert "wrote 12 train and 6 test examples" in capsys.readouterr().out
    assert (out / "train" / "records.jsonl").is_file()
    assert (out / "test" / "manifest.json").is_file()
    effective = json.loads((out / "effective_config.json").read_text())
    assert effective["subcommand"] == "gen"
    assert effective["spec"]["num_intents"] == 3


def test_gen_is_deterministic_across_invocations(tmp_path):
    a = _gen(tmp_path / "a")
    b = _gen(tmp_path / "b")
    for split in ("train", "test"):
        assert (a / split / "records.jsonl").read_bytes() == \
            (b / split / "records.jsonl").read_bytes()


def test_gen_seed_changes_the_corpus(tmp_path):
    a = _gen(tmp_path / "a")
    b = _gen(tmp_path / "b", extra=["--seed", "1"])
    assert (a / "train" / "records.jsonl").read_bytes() != \
        (b / "train" / "records.jsonl").read_bytes()


def test_gen_preset_with_override(tmp_path, capsys):
    out = tmp_path / "c"
    assert main(["gen", "--out", str(out), "--preset", "separable",
                 "--speakers", "1"]) == 0
    # 24 train texts x 2 languages x 1 speaker
    assert "wrote 48 train" in capsys.readouterr().out


def test_gen_without_preset_requires_full_spec(tmp_path, capsys):
    rc = main(["gen", "--out", str(tmp_path / "x"), "--num-intents", "3"])
    assert rc == 2
    err = capsys.readouterr().err
    assert "--languages" in err and "--train-texts" in err


def test_unknown_flag_exits_2(tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        main(["gen", "--no-such-flag"])
    assert excinfo.value.code == 2


def test_unknown_preset_exits_2():
    with pytest.raises(SystemExit) as excinfo:
        main(["gen", "--preset", "bogus"])
    assert excinfo.value.code == 2


def test_train_writes_checkpoint_and_history(tmp_path, capsys):
    corpus, out = _trained(tmp_path, extra=["--eval-every", "1"])
    assert (out / "checkpoint.mtsn").is_file()
    with open(out / "loss_history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "loss_total", "loss_tl", "loss_intent",
                       "eval_accuracy"]
    assert len(rows) == 3
    assert rows[1][0] == "0"
    float(rows[1][1])  # plain numbers, no numpy repr
    assert "checkpoint at" in capsys.readouterr().out
    effective = json.loads((out / "effective_config.json").read_text())
    assert effective["epochs"] == 2
    assert effective["model"] == "mtsn"


def test_train_missing_data_dir_exits_2(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "nowhere")] + TINY_TRAIN)
    assert rc == 2
    assert "error:" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exits_3(tmp_path, capsys):
    corpus = _gen(tmp_path)
    rc = main(["train", "--data", str(corpus), "--out", str(tmp_path / "d"),
               "--epochs", "2", "--hidden-size", "4", "--lr", "1e308"])
    assert rc == 3
    assert "error:" in capsys.readouterr().err


def test_eval_reports_per_language_rows(tmp_path, capsys):
    corpus, out = _trained(tmp_path)
    eval_out = tmp_path / "ev"
    rc = main(["eval", "--checkpoint", str(out / "checkpoint.mtsn"),
               "--data", str(corpus), "--out", str(eval_out)])
    assert rc == 0
    with open(eval_out / "eval.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["test_language", "accuracy", "n_examples"]
    assert [r[0] for r in rows[1:]] == ["eng", "man", "combined"]
    assert rows[3][2] == "6"
    assert "accuracy" in capsys.readouterr().out


def test_eval_single_language(tmp_path):
    corpus, out = _trained(tmp_path)
    eval_out = tmp_path / "ev"
    rc = main(["eval", "--checkpoint", str(out / "checkpoint.mtsn"),
               "--data", str(corpus), "--test-lang", "eng",
               "--out", str(eval_out)])
    assert rc == 0
    with open(eval_out / "eval.csv") as fh:
        rows = list(csv.reader(fh))
    assert [r[0] for r in rows[1:]] == ["eng", "combined"]
    assert rows[1][2] == "3"


def test_eval_unknown_language_exits_2(tmp_path, capsys):
    corpus, out = _trained(tmp_path)
    rc = main(["eval", "--checkpoint", str(out / "checkpoint.mtsn"),
               "--data", str(corpus), "--test-lang", "fra",
               "--out", str(tmp_path / "ev")])
    assert rc == 2
    assert "fra" in capsys.readouterr().err


def test_analyze_writes_cosine_and_projection(tmp_path, capsys):
    corpus, out = _trained(tmp_path)
    an_out = tmp_path / "an"
    rc = main(["analyze", "--checkpoint", str(out / "checkpoint.mtsn"),
               "--data", str(corpus), "--with-initial", "--out", str(an_out)])
    assert rc == 0
    with open(an_out / "cosine_alignment.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["language", "cosine_final", "cosine_initial"]
    assert [r[0] for r in rows[1:]] == ["eng", "man", "combined"]
    with open(an_out / "projection.csv") as fh:
        proj = list(csv.reader(fh))
    # one transferred + one teacher point per test example
    assert len(proj) == 1 + 12
    assert {r[4] for r in proj[1:]} == {"transferred", "teacher"}
    assert "cosine alignment" in capsys.readouterr().out


def test_analyze_rejects_baseline_checkpoint(tmp_path, capsys):
    corpus, out = _trained(tmp_path / "m", extra=["--model", "baseline2"])
    rc = main(["analyze", "--checkpoint", str(out / "checkpoint.mtsn"),
               "--data", str(corpus), "--out", str(tmp_path / "an")])
    assert rc == 2
    assert "transfer layer" in capsys.readouterr().err


def test_grid_smoke(tmp_path, capsys):
    corpus = _gen(tmp_path)
    grid_out = tmp_path / "grid"
    rc = main(["grid", "--data", str(corpus), "--out", str(grid_out)]
              + TINY_TRAIN)
    assert rc == 0
    assert "grid complete: 2 cells" in capsys.readouterr().out
    report = json.loads((grid_out / "report.json").read_text())
    assert [c["cell_id"] for c in report["cells"]] == \
        ["mtsn:both:f1", "baseline2:both:f1"]
    assert (grid_out / "accuracy_grid.csv").is_file()


def test_config_file_sits_under_explicit_flags(tmp_path):
    corpus = _gen(tmp_path)
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"epochs": 5, "hidden-size": 4,
                                  "batch-size": 4, "seed": 9}))
    out = tmp_path / "run"
    rc = main(["train", "--data", str(corpus), "--out", str(out),
               "--config", str(config), "--epochs", "2"])
    assert rc == 0
    effective = json.loads((out / "effective_config.json").read_text())
    assert effective["epochs"] == 2  # explicit flag beats the file
    assert effective["hidden_size"] == 4  # file beats the default
    assert effective["seed"] == 9


def test_config_file_unknown_key_exits_2(tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"epoch": 3}))
    with pytest.raises(SystemExit) as excinfo:
        main(["train", "--data", "x", "--config", str(config)])
    assert excinfo.value.code == 2


def test_config_file_missing_exits_2(tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        main(["train", "--data", "x", "--config", str(tmp_path / "none.json")])
    assert excinfo.value.code == 2


def test_out_root_env_fallback(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MTSN_OUT_ROOT", str(tmp_path))
    assert main(["gen"] + TINY_GEN) == 0
    assert (tmp_path / "mtsn-gen" / "train" / "records.jsonl").is_file()


def test_gradcheck_reports_and_exits_0(capsys):
    rc = main(["gradcheck", "--checks", "sigmoid,matmul", "--points", "2"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "2 ops checked, 0 failures" in out
    assert out.count("PASS") == 2


def test_gradcheck_impossible_tolerance_exits_3(capsys):
    rc = main(["gradcheck", "--checks", "sigmoid", "--points", "1",
               "--tol", "0"])
    captured = capsys.readouterr()
    assert rc == 3
    assert "FAIL" in captured.out
    assert "1 ops checked, 1 failures" in captured.out
    assert "failed: sigmoid" in captured.err


def test_gradcheck_unknown_check_exits_2(capsys):
    rc = main(["gradcheck", "--checks", "warp"])
    assert rc == 2
    assert "unknown gradient check" in capsys.readouterr().err
