import json

import numpy as np
import pytest

from mccm import cli, evalkit, freqspec, imgdata

NET_FLAGS = ["--stem-channels", "4", "--blocks", "1", "--layers-per-block", "1", "--growth", "4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    for gen, seed in (("pristine", 1), ("freqfake", 2), ("spatialfake", 3)):
        assert run("gen", "--out", root / gen, "--generator", gen, "--count", 28, "--size", 16, "--seed", seed) == 0
    return root


def test_gen_split_and_force(data, tmp_path, capsys):
    ds = imgdata.load_dataset(data / "pristine")
    assert [len(ds.indices(s)) for s in imgdata.SPLITS] == [14, 6, 8]
    out = tmp_path / "p"
    assert run("gen", "--out", out, "--generator", "pristine", "--count", 28, "--size", 16, "--seed", 1) == 0
    first = tree_bytes(out)
    assert first == tree_bytes(data / "pristine")
    # refuses to overwrite without --force, then reproduces byte-identically with it
    assert run("gen", "--out", out, "--generator", "pristine", "--count", 28, "--size", 16, "--seed", 1) == 1
    assert run("gen", "--out", out, "--generator", "pristine", "--count", 28, "--size", 16, "--seed", 1,
               "--force") == 0
    assert tree_bytes(out) == first
    announced = json.loads(capsys.readouterr().out.splitlines()[0])
    assert announced["seed"] == 1


def test_gen_usage_errors(tmp_path, capsys):
    assert run("gen", "--out", tmp_path / "x", "--generator", "pristine", "--count", 0, "--seed", 1) == 1
    assert run("gen", "--out", tmp_path / "x", "--generator", "nope", "--count", 3, "--seed", 1) == 1
    assert run("gen", "--out", tmp_path / "x", "--generator", "pristine", "--count", 3, "--seed", 1,
               "--ratios", "0.5,0.5") == 1
    assert not (tmp_path / "x").exists()
    assert run("bogus") == 1
    assert "usage error" in capsys.readouterr().err


def test_spectrum_command(data, tmp_path, capsys):
    assert run("spectrum", "--in", data / "freqfake", "--sample", 100, "--seed", 0, "--out", tmp_path / "f.pgm",
               "--csv", tmp_path / "f.csv") == 0
    captured = capsys.readouterr()
    assert "exceeds dataset size" in captured.err
    assert run("spectrum", "--in", data / "pristine", "--sample", 28, "--seed", 0, "--out", tmp_path / "p.pgm") == 0
    f = freqspec.read_pgm(tmp_path / "f.pgm")
    p = freqspec.read_pgm(tmp_path / "p.pgm")
    assert f.shape == (16, 16) and not np.array_equal(f, p)
    assert (tmp_path / "f.c2.csv").is_file()
    assert run("spectrum", "--in", data / "pristine", "--seed", 0, "--out", tmp_path / "n.pgm", "--no-highpass") == 0


def test_train_eval_fuse_flow(data, tmp_path, capsys):
    common = ["--pristine", data / "pristine", "--fake", data / "freqfake", "--epochs", 1, "--batch", 8, *NET_FLAGS]
    assert run("train", *common, "--variant", "one_rgb", "--seed", 0, "--out", tmp_path / "rgb.ckpt") == 0
    announced = json.loads(capsys.readouterr().out.splitlines()[0])
    assert announced["lr"] == 1e-4 and announced["wd"] == 1e-5
    assert announced["loss_cfg"]["gamma"] == 3.0 and announced["loss_cfg"]["lam"] == 0.5
    assert (tmp_path / "rgb.history.csv").read_text().startswith("epoch,train_loss,val_loss\n")
    assert run("train", *common, "--variant", "one_dft", "--seed", 1, "--out", tmp_path / "dft.ckpt") == 0

    ev = ["--pristine", data / "pristine", "--fake", data / "spatialfake"]
    for name in ("rgb", "dft"):
        assert run("eval", "--model", tmp_path / f"{name}.ckpt", *ev, "--aug", "--eval-seed", 5,
                   "--scores", tmp_path / f"{name}.csv", "--report", tmp_path / f"{name}.json",
                   "--roc", tmp_path / f"{name}.roc.csv") == 0
    first = (tmp_path / "rgb.csv").read_bytes()
    assert run("eval", "--model", tmp_path / "rgb.ckpt", *ev, "--aug", "--eval-seed", 5,
               "--scores", tmp_path / "rgb.csv", "--report", tmp_path / "rgb.json") == 0
    assert (tmp_path / "rgb.csv").read_bytes() == first
    report = json.loads((tmp_path / "rgb.json").read_text())
    assert 0.0 <= report["auc"] <= 1.0 and report["n_pos"] == 8 and report["n_neg"] == 8

    assert run("fuse", "--scores-a", tmp_path / "rgb.csv", "--scores-b", tmp_path / "dft.csv",
               "--out", tmp_path / "fused.csv") == 0
    a = evalkit.read_scores(tmp_path / "rgb.csv")
    b = evalkit.read_scores(tmp_path / "dft.csv")
    fused = evalkit.read_scores(tmp_path / "fused.csv")
    assert fused.ids == a.ids
    np.testing.assert_allclose(fused.scores, (a.scores + b.scores) / 2)


def test_train_and_eval_usage_errors(data, tmp_path, capsys):
    common = ["--pristine", data / "pristine", "--fake", data / "freqfake", "--seed", 0]
    assert run("train", *common, "--variant", "fusion", "--out", tmp_path / "x.ckpt") == 1
    assert run("train", *common, "--variant", "dual_cmfl", "--lambda", 2, "--out", tmp_path / "x.ckpt") == 1
    assert not (tmp_path / "x.ckpt").exists()
    assert run("eval", "--model", tmp_path / "x.ckpt", "--pristine", data / "pristine", "--fake", data / "freqfake",
               "--aug", "--scores", tmp_path / "s.csv", "--report", tmp_path / "r.json") == 1
    assert not (tmp_path / "s.csv").exists()


def test_lambda_zero_warns(data, tmp_path, capsys):
    assert run("train", "--pristine", data / "pristine", "--fake", data / "freqfake", "--variant", "dual_cmfl",
               "--lambda", 0, "--epochs", 1, "--seed", 0, "--out", tmp_path / "m.ckpt", *NET_FLAGS) == 0
    assert "lambda 0" in capsys.readouterr().err


def test_runtime_errors(data, tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE")
    assert run("eval", "--model", tmp_path / "bad.ckpt", "--pristine", data / "pristine", "--fake",
               data / "freqfake", "--scores", tmp_path / "s.csv", "--report", tmp_path / "r.json") == 2
    evalkit.write_scores(evalkit.ScoreSet.from_arrays([1, 0], [0.1, 0.2], ["a", "b"]), tmp_path / "a.csv")
    evalkit.write_scores(evalkit.ScoreSet.from_arrays([1, 0], [0.1, 0.2], ["a", "c"]), tmp_path / "b.csv")
    assert run("fuse", "--scores-a", tmp_path / "a.csv", "--scores-b", tmp_path / "b.csv",
               "--out", tmp_path / "f.csv") == 2
    assert not (tmp_path / "f.csv").exists()
    assert run("spectrum", "--in", tmp_path / "missing", "--seed", 0, "--out", tmp_path / "x.pgm") == 2


def test_compare_grid(data, tmp_path):
    config = {
        "datasets": {g: str(data / g) for g in imgdata.GENERATORS},
        "protocol": "I",
        "seeds": [0],
        "eval_seed": 0,
        "out_dir": "runs",
        "experiment": {"epochs": 1, "batch_size": 8, "lr": 1e-3,
                       "net_cfg": {"stem_channels": 4, "blocks": 1, "layers_per_block": 1, "growth": 4}},
    }
    (tmp_path / "grid.json").write_text(json.dumps(config))
    assert run("compare", "--config", tmp_path / "grid.json", "--out", tmp_path / "table.csv") == 0
    rows = evalkit.parse_table((tmp_path / "table.csv").read_text())
    assert len(rows) == 10
    assert {r["variant"] for r in rows} == {"dual_cmfl", "dual_bce", "one_rgb", "one_dft", "fusion"}
    first = (tmp_path / "table.csv").read_bytes()
    # resumed run reuses verified artifacts and reproduces the table
    assert run("compare", "--config", tmp_path / "grid.json", "--out", tmp_path / "table.csv") == 0
    assert (tmp_path / "table.csv").read_bytes() == first

    config["surprise"] = 1
    (tmp_path / "bad.json").write_text(json.dumps(config))
    assert run("compare", "--config", tmp_path / "bad.json", "--out", tmp_path / "t2.csv") == 1
