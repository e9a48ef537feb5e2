"""End-to-end tests of the command-line interface."""

import numpy as np

from corrseg import cli, data


def write_data_cfg(path, count=6):
    data.write_config(path, {"count": count, "height": 32, "width": 32,
                             "num_classes": 3, "seed": 5})


def write_train_cfg(path, ds_dir, **extra):
    kv = {"dataset_dir": str(ds_dir), "labeled_ratio": 0.5,
          "batch_labeled": 2, "batch_unlabeled": 2, "n_sampled": 32,
          "total_steps": 2, "eval_every": 2, "eval_count": 4,
          "variant": "supervised_only"}
    kv.update(extra)
    data.write_config(path, kv)


def test_gen_data_writes_readable_dataset(tmp_path, capsys):
    cfg = tmp_path / "data.cfg"
    write_data_cfg(cfg)
    out = tmp_path / "ds"
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
    ds = data.read_dataset(out)
    assert len(ds.images) == 6
    assert "wrote 6 images" in capsys.readouterr().out


def test_train_then_eval(tmp_path, capsys):
    data_cfg = tmp_path / "data.cfg"
    write_data_cfg(data_cfg)
    ds_dir = tmp_path / "ds"
    cli.main(["gen-data", "--config", str(data_cfg), "--out", str(ds_dir)])

    run_cfg = tmp_path / "run.cfg"
    write_train_cfg(run_cfg, ds_dir)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(run_cfg), "--out", str(out)]) == 0
    assert (out / "student.ckpt").exists()
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",")[0] == "variant"
    assert len(lines) >= 3  # header, one eval, final

    assert cli.main(["eval", "--checkpoint", str(out / "student.ckpt"),
                     "--data", str(ds_dir)]) == 0
    assert "mIoU" in capsys.readouterr().out


def test_suite_cross_product(tmp_path, capsys):
    data_cfg = tmp_path / "data.cfg"
    write_data_cfg(data_cfg)
    ds_dir = tmp_path / "ds"
    cli.main(["gen-data", "--config", str(data_cfg), "--out", str(ds_dir)])

    run_cfg = tmp_path / "suite.cfg"
    write_train_cfg(run_cfg, ds_dir, variants="supervised_only")
    out = tmp_path / "suite.csv"
    assert cli.main(["suite", "--config", str(run_cfg), "--seeds", "2",
                     "--out", str(out)]) == 0
    assert "2 runs" in capsys.readouterr().out
    text = out.read_text()
    assert "aggregate_mean" in text and "aggregate_std" in text


def test_cli_reports_errors(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert cli.main(["train", "--config", str(missing), "--out",
                     str(tmp_path / "o")]) == 1
    assert "error:" in capsys.readouterr().err
