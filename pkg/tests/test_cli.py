import csv
import json

import pytest
from click.testing import CliRunner
from PIL import Image

from sparsecafm.cli import main
from sparsecafm.scanio import read_scan


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    spec = d / "spec.json"
    spec.write_text(json.dumps({"grid_size": 64}))
    r = CliRunner().invoke(main, ["generate", "--spec", str(spec), "--count", "3", "--out", str(d / "set"), "--seed", "5"])
    assert r.exit_code == 0, r.output
    return d


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def test_generate_manifest(dataset):
    m = json.loads((dataset / "set" / "manifest.json").read_text())
    assert m["count"] == 3 and len(m["samples"]) == 3
    assert (dataset / "set" / "sample_0002_current.scaf").exists()
    assert read_scan(dataset / "set" / "sample_0000_current.scaf").shape == (64, 64)


def test_generate_deterministic(dataset, tmp_path):
    r = invoke("generate", "--spec", dataset / "spec.json", "--count", 3, "--out", tmp_path / "b", "--seed", 5)
    assert r.exit_code == 0
    assert (tmp_path / "b" / "manifest.json").read_bytes() == (dataset / "set" / "manifest.json").read_bytes()


def test_generate_zero(tmp_path):
    r = invoke("generate", "--count", 0, "--out", tmp_path / "z")
    assert r.exit_code == 0
    assert json.loads((tmp_path / "z" / "manifest.json").read_text())["samples"] == []


def test_generate_bad_spec(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"grid_size": 8}))
    assert invoke("generate", "--spec", spec, "--out", tmp_path / "o").exit_code != 0


def test_train_dry_run(dataset):
    r = invoke("train", "--data", dataset / "set", "--out", dataset / "m.ckpt", "--sigma", 2, "--dry-run")
    assert r.exit_code == 0, r.output
    cfg = json.loads(r.output)
    assert cfg["train"]["sigma"] == 2 and cfg["samples"] == 3


def test_train_flag_overrides_config(dataset, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"sigma": 2, "epochs": 7, "seed": 1}))
    r = invoke("train", "--data", dataset / "set", "--config", conf, "--out", tmp_path / "m.ckpt", "--epochs", 3, "--dry-run")
    cfg = json.loads(r.output)["train"]
    assert (cfg["epochs"], cfg["seed"]) == (3, 1)


@pytest.fixture(scope="module")
def trained(dataset):
    conf = dataset / "tiny.json"
    conf.write_text(json.dumps({
        "sigma": 2, "epochs": 1, "steps_per_epoch": 2, "batch_size": 2, "crop_high": 32,
        "model": {"embed_dim": 8, "rstb_count": 1, "stl_per_rstb": 2, "window_size": 4, "num_heads": 2},
    }))
    ck = dataset / "tiny.ckpt"
    r = invoke("train", "--data", dataset / "set", "--config", conf, "--out", ck)
    assert r.exit_code == 0, r.output
    return ck


def test_train_writes_run_dir(trained):
    assert (trained.parent / "tiny_run" / "train_log.csv").exists()


def test_finetune(dataset, trained, tmp_path):
    conf = dataset / "tiny.json"
    r = invoke("finetune", "--data", dataset / "set", "--config", conf, "--base", trained, "--out", tmp_path / "ft.ckpt", "--epochs", 0)
    assert r.exit_code == 0, r.output


def test_finetune_sigma_mismatch(dataset, trained, tmp_path):
    r = invoke("finetune", "--data", dataset / "set", "--base", trained, "--out", tmp_path / "ft.ckpt", "--sigma", 4, "--epochs", 0)
    assert r.exit_code == 2


def test_reconstruct_evaluate_scorecard(dataset, trained, tmp_path):
    sparse = tmp_path / "sparse"
    assert invoke("subsample", "--data", dataset / "set", "--sigma", 2, "--out", sparse).exit_code == 0
    f = sparse / "sample_0000_current.scaf"
    assert read_scan(f).shape == (32, 32)

    r = invoke("reconstruct", "--in", f, "--method", "bicubic", "--sigma", 2, "--out", tmp_path / "one.scaf")
    assert r.exit_code == 0, r.output
    assert read_scan(tmp_path / "one.scaf").shape == (64, 64)

    pred = tmp_path / "pred"
    r = invoke("reconstruct", "--in", sparse, "--method", "model", "--ckpt", trained, "--sigma", 2, "--out", pred)
    assert r.exit_code == 0, r.output

    out = tmp_path / "m.csv"
    assert invoke("evaluate", "--pred", pred, "--truth", dataset / "set", "--out", out, "--sigma", 2).exit_code == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["sample_id", "method", "sigma", "channel", "psnr_db", "ssim"] and len(rows) == 3

    r = invoke("scorecard", "--pred", pred, "--sparse", sparse, "--truth", dataset / "set", "--out", tmp_path / "card")
    assert r.exit_code == 0, r.output
    card = json.loads((tmp_path / "card.json").read_text())
    assert card["sigma"] == 2 and card["n_samples"] == 3

    png = tmp_path / "p.png"
    r = invoke("plot", "--in", f, "--in", pred / f.name, "--in", dataset / "set" / f.name, "--out", png, "--cmap", "magma")
    assert r.exit_code == 0, r.output
    assert Image.open(png).info["Colormap"] == "magma"
    assert invoke("plot", "--in", out, "--out", tmp_path / "bars.png").exit_code == 0


def test_evaluate_identical_is_inf(dataset, tmp_path):
    out = tmp_path / "m.csv"
    r = invoke("evaluate", "--pred", dataset / "set", "--truth", dataset / "set", "--out", out)
    assert r.exit_code == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert all(r["psnr_db"] == "inf" and float(r["ssim"]) == pytest.approx(1.0) for r in rows)


def test_scorecard_identity(dataset, tmp_path):
    sparse = tmp_path / "s"
    invoke("subsample", "--data", dataset / "set", "--sigma", 4, "--out", sparse)
    r = invoke("scorecard", "--pred", dataset / "set", "--sparse", sparse, "--truth", dataset / "set", "--out", tmp_path / "c")
    assert r.exit_code == 0, r.output
    assert all(v == 0 for v in json.loads((tmp_path / "c.json").read_text())["prediction"].values())


def test_evaluate_unpaired(dataset, tmp_path):
    (tmp_path / "p").mkdir()
    (tmp_path / "p" / "sample_0000_current.scaf").write_bytes((dataset / "set" / "sample_0000_current.scaf").read_bytes())
    r = invoke("evaluate", "--pred", tmp_path / "p", "--truth", dataset / "set", "--out", tmp_path / "x.csv")
    assert r.exit_code != 0 and "unpaired" in r.output


def test_reconstruct_gpr_x8_resource_error(tmp_path):
    invoke("generate", "--count", 1, "--out", tmp_path / "d")
    invoke("subsample", "--data", tmp_path / "d", "--sigma", 8, "--out", tmp_path / "s")
    r = invoke("reconstruct", "--in", tmp_path / "s" / "sample_0000_current.scaf", "--method", "gpr", "--sigma", 8, "--out", tmp_path / "o.scaf")
    assert r.exit_code == 2 and "ResourceError" in r.output
    assert not (tmp_path / "o.scaf").exists()


def test_model_requires_ckpt(dataset, tmp_path):
    r = invoke("reconstruct", "--in", dataset / "set" / "sample_0000_current.scaf", "--sigma", 2, "--out", tmp_path / "o.scaf")
    assert r.exit_code != 0


def test_plot_missing_input(tmp_path):
    assert invoke("plot", "--in", tmp_path / "nope.scaf", "--out", tmp_path / "x.png").exit_code != 0
