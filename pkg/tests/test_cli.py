import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from panmamba.cli import main
from panmamba.data import bicubic_upsample, load_png, load_raw, save_png, save_raw, save_triple, synthetic_triple
from panmamba.model import NetworkConfig, build_model, count_flops, save_checkpoint

TINY_CFG = """# tiny network
channels = 4
state = 2
depth_extract = 1
depth_swap = 1
depth_cross = 1
epochs = 2
batch_size = 2
"""


@pytest.fixture
def dataset(tmp_path):
    root = tmp_path / "data"
    for s in range(3):
        save_triple(root, f"s{s}", synthetic_triple(16, seed=s))
    return root


def test_degrade_constant_and_missing_pair(tmp_path, capsys):
    hrms, pan = tmp_path / "hrms", tmp_path / "pan"
    hrms.mkdir()
    pan.mkdir()
    save_raw(hrms / "a.raw", np.full((4, 16, 16), 0.25))
    save_raw(pan / "a.raw", np.full((1, 64, 64), 0.5))
    save_png(hrms / "b.png", np.full((3, 8, 8), 0.4))
    save_png(pan / "b.png", np.full((1, 32, 32), 0.6))
    save_raw(hrms / "orphan.raw", np.zeros((4, 16, 16)))
    code = main(["degrade", "--hrms", str(hrms), "--pan", str(pan), "--scale", "4", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "orphan" in capsys.readouterr().err
    lrms = load_raw(tmp_path / "o/lrms/a.raw")
    assert lrms.shape == (4, 4, 4)
    np.testing.assert_allclose(lrms, 0.25, atol=1e-6)
    np.testing.assert_allclose(load_raw(tmp_path / "o/pan/a.raw"), 0.5, atol=1e-6)
    assert load_raw(tmp_path / "o/gt/b.raw").shape == (3, 8, 8)


def test_train_resume_and_logs(tmp_path, dataset, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY_CFG)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(out), "--save-every", "1"]) == 0
    assert (out / "final.ckpt").exists() and (out / "epoch_0002.ckpt").exists()
    rows = list(csv.DictReader(open(out / "epochs.csv")))
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert len(list(csv.DictReader(open(out / "steps.csv")))) == 4
    out2 = tmp_path / "run2"
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(out2),
                 "--resume", str(out / "final.ckpt")]) == 0
    other = tmp_path / "o.cfg"
    other.write_text(TINY_CFG.replace("state = 2", "state = 3"))
    assert main(["train", "--config", str(other), "--data", str(dataset), "--out", str(out2),
                 "--resume", str(out / "final.ckpt")]) == 2


def test_train_bad_config_line_number(tmp_path, dataset, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("channels = 4\nthis line is wrong\n")
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "r")]) == 1
    assert "bad.cfg:2" in capsys.readouterr().err
    cfg.write_text("channels = 4\nstate = two\n")
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "r")]) == 1
    assert "bad.cfg:2" in capsys.readouterr().err
    cfg.write_text("chanels = 4\n")
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "r")]) == 1


def _infer_inputs(tmp_path):
    t = synthetic_triple(32, seed=5)
    save_raw(tmp_path / "pan.raw", t.pan)
    save_raw(tmp_path / "lrms.raw", t.lrms)
    save_checkpoint(build_model(NetworkConfig(channels=4, state=2)), tmp_path / "m.ckpt")
    return t


def test_infer_untrained_is_bicubic_and_repeatable(tmp_path):
    t = _infer_inputs(tmp_path)
    args = ["infer", "--ckpt", str(tmp_path / "m.ckpt"), "--pan", str(tmp_path / "pan.raw"),
            "--lrms", str(tmp_path / "lrms.raw")]
    assert main(args + ["--out", str(tmp_path / "a.raw"), "--png"]) == 0
    assert main(args + ["--out", str(tmp_path / "b.raw")]) == 0
    a = load_raw(tmp_path / "a.raw")
    assert a.tobytes() == load_raw(tmp_path / "b.raw").tobytes()
    ref = np.clip(bicubic_upsample(t.lrms.astype(np.float32), 4), 0, 1)
    np.testing.assert_allclose(a, ref, atol=1e-6)
    png = load_png(tmp_path / "a.png")
    assert png.shape == (3, 32, 32)
    np.testing.assert_allclose(png, a[:3], atol=1 / 65535)


def test_infer_errors(tmp_path):
    _infer_inputs(tmp_path)
    save_raw(tmp_path / "bad.raw", np.zeros((3, 8, 8)))
    code = main(["infer", "--ckpt", str(tmp_path / "m.ckpt"), "--pan", str(tmp_path / "pan.raw"),
                 "--lrms", str(tmp_path / "bad.raw"), "--out", str(tmp_path / "x.raw")])
    assert code == 2
    code = main(["infer", "--ckpt", str(tmp_path / "nope.ckpt"), "--pan", str(tmp_path / "pan.raw"),
                 "--lrms", str(tmp_path / "lrms.raw"), "--out", str(tmp_path / "x.raw")])
    assert code == 2


def test_eval_identity_and_full_res(tmp_path, capsys):
    t = synthetic_triple(32, seed=1)
    save_raw(tmp_path / "gt.raw", t.gt)
    save_raw(tmp_path / "pan.raw", t.pan)
    save_raw(tmp_path / "lrms.raw", t.lrms)
    assert main(["eval", "--pred", str(tmp_path / "gt.raw"), "--gt", str(tmp_path / "gt.raw")]) == 0
    kv = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert float(kv["psnr"]) == 99 and float(kv["ssim"]) == pytest.approx(1, abs=1e-9)
    assert float(kv["sam"]) == 0 and float(kv["ergas"]) == 0
    assert main(["eval", "--pred", str(tmp_path / "gt.raw"), "--full-res", "--pan", str(tmp_path / "pan.raw"),
                 "--lrms", str(tmp_path / "lrms.raw"), "--csv"]) == 0
    head, row = capsys.readouterr().out.splitlines()
    vals = dict(zip(head.split(","), row.split(",")))
    assert vals["psnr"] == "" and 0 <= float(vals["qnr"]) <= 1
    assert main(["eval", "--pred", str(tmp_path / "gt.raw")]) == 1


def test_grad_check_pass_and_negative_control(capsys):
    assert main(["grad-check"]) == 0
    out = capsys.readouterr().out
    for name in ("mamba_block", "channel_swap", "cross_modal", "network"):
        assert name in out
    assert out.strip().endswith("PASS")
    assert main(["grad-check", "--inject-error"]) == 3
    assert capsys.readouterr().out.strip().endswith("FAIL")


def test_bench_flops_only_linear(tmp_path, capsys):
    path = tmp_path / "b.csv"
    assert main(["bench", "--sizes", "128,256,512", "--flops-only", "--csv", str(path)]) == 0
    rows = list(csv.DictReader(open(path)))
    assert [int(r["flops"]) for r in rows] == [count_flops(NetworkConfig(), s, s) for s in (128, 256, 512)]
    assert int(rows[2]["flops"]) == 16 * int(rows[0]["flops"])


def test_bench_timed(capsys):
    assert main(["bench", "--sizes", "32"]) == 0
    assert "time" in capsys.readouterr().out
    assert main(["bench", "--sizes", "30"]) == 1


def test_usage_errors(capsys):
    assert main(["train", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["frobnicate"]) == 1


def test_entry_point_and_threads(tmp_path):
    env = dict(os.environ, PANSHARP_THREADS="1")
    r = subprocess.run([sys.executable, "-m", "panmamba.cli", "bench", "--sizes", "64", "--flops-only"],
                       env=env, capture_output=True, text=True)
    assert r.returncode == 0 and "size" in r.stdout
    env["PANSHARP_THREADS"] = "many"
    r = subprocess.run([sys.executable, "-m", "panmamba.cli", "bench", "--flops-only"],
                       env=env, capture_output=True, text=True)
    assert r.returncode == 1 and "PANSHARP_THREADS" in r.stderr
