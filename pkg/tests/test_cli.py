import csv

import pytest

from frnas.cli import main


def test_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    main(["gen-synth", "--n", "120", "--out", str(data)])
    common = ["--data", str(data / "dataset.jsonl"), "--vocab", str(data / "vocab.txt")]

    run = tmp_path / "run"
    main(["train", *common, "--epochs", "3", "--seed", "1", "--out", str(run)])
    assert (run / "model.json").exists()
    with open(run / "history.csv") as fh:
        assert len(list(csv.reader(fh))) == 4

    main(["eval", *common, "--model", str(run / "model.json"), "--out", str(run)])
    assert "kendall tau" in capsys.readouterr().out

    main(["analyze-irg", *common, "--model", str(run / "model.json"), "--n-graphs", "8",
          "--out", str(run)])
    rows = (run / "irg_diff.csv").read_text().splitlines()
    assert len(rows) == 8 and all(len(r.split(",")) == 8 for r in rows)


def test_train_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("epochs = 2\nlambda = 0.5\n")
    main(["train", "--n-records", "40", "--config", str(cfg), "--epochs", "3",
          "--out", str(tmp_path)])
    assert len((tmp_path / "history.csv").read_text().splitlines()) == 4


def test_grad_check_command(capsys):
    main(["grad-check", "--n-seeds", "1"])
    assert "PASS" in capsys.readouterr().out


def test_unknown_variant_is_rejected(tmp_path):
    with pytest.raises(SystemExit):
        main(["train", "--variant", "gcn", "--out", str(tmp_path)])
