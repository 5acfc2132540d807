import re

import numpy as np
import pytest

from savfi import dataio
from savfi.cli import main
from savfi.metrics import parse_report_line


def _files(folder):
    return {p.name: p.read_bytes() for p in sorted(folder.iterdir())}


def test_usage_error_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["piv", "--bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


def test_config_error_exit_2(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--set", "probe.nope=1"]) == 2
    assert main(["gen-data", "--out", str(tmp_path), "--config", str(tmp_path / "no.txt")]) == 2
    assert main(["gen-data", "--out", str(tmp_path), "--scene", "bifurcation"]) == 2


def test_data_error_exit_3(tmp_path):
    assert main(["piv", "--input", str(tmp_path / "absent.vfit"), "--out", str(tmp_path / "o.vfit")]) == 3
    dataio.write_tensor(tmp_path / "one.vfit", np.ones((8, 8), np.complex64))
    assert main(["piv", "--input", str(tmp_path / "one.vfit"), "--out", str(tmp_path / "o.vfit")]) == 3
    (tmp_path / "bad.vfit").write_bytes(b"junk")
    assert main(["svd-filter", "--input", str(tmp_path / "bad.vfit"), "--out", str(tmp_path / "o.vfit")]) == 3
    dataio.write_tensor(tmp_path / "t.vfit", np.ones((2, 8, 8), np.float32))
    dataio.write_tensor(tmp_path / "e.vfit", np.ones((2, 8, 9), np.float32))
    assert main(["eval", "--truth", str(tmp_path / "t.vfit"), "--estimate", str(tmp_path / "e.vfit")]) == 3


def test_gen_data_deterministic(tmp_path):
    args = ["gen-data", "--scene", "straight90", "--count", "4", "--seed", "7", "--threads", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert len(a) == 13  # 4 x (iq, truth, mask) + manifest
    assert a == b
    man = dataio.load_manifest(tmp_path / "a" / "manifest.txt")
    assert len(man.entries) == 4
    assert dataio.tensor_dims(man.entries[0].input) == (5, 128, 128)


def test_eval_identity_median_zero(tmp_path, capsys, rng):
    t = rng.normal(size=(3, 2, 16, 16)).astype(np.float32)
    dataio.write_tensor(tmp_path / "t.vfit", t)
    assert main(["eval", "--truth", str(tmp_path / "t.vfit"), "--estimate", str(tmp_path / "t.vfit"),
                 "--out", str(tmp_path / "r.txt")]) == 0
    rep = parse_report_line(capsys.readouterr().out.splitlines()[0])
    assert rep["median"] == 0.0
    assert rep["n"] == 3
    assert (tmp_path / "r.txt").exists()


def test_eval_masked_and_unmasked(tmp_path, capsys, rng):
    t = rng.normal(size=(2, 16, 16)).astype(np.float32)
    m = np.zeros((16, 16), np.float32)
    m[4:8] = 1
    dataio.write_tensor(tmp_path / "t.vfit", t)
    dataio.write_tensor(tmp_path / "e.vfit", 0.9 * t)
    dataio.write_tensor(tmp_path / "m.vfit", m)
    assert main(["eval", "--truth", str(tmp_path / "t.vfit"), "--estimate", str(tmp_path / "e.vfit"),
                 "--mask", str(tmp_path / "m.vfit"), "--tag", "x"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [parse_report_line(l)["tag"] for l in lines] == ["x", "x-masked"]


def test_plot_arrow_count(tmp_path, capsys, rng):
    v = rng.normal(size=(2, 128, 128)).astype(np.float32)
    dataio.write_tensor(tmp_path / "v.vfit", v)
    bg = (rng.normal(size=(128, 128)) + 1j).astype(np.complex64)
    dataio.write_tensor(tmp_path / "bg.vfit", bg)
    assert main(["plot", "--input", str(tmp_path / "v.vfit"), "--background", str(tmp_path / "bg.vfit"),
                 "--out", str(tmp_path / "fig")]) == 0
    pgm = (tmp_path / "fig.pgm").read_bytes()
    assert pgm.startswith(b"P5\n128 128\n255\n")
    assert len(pgm) == len(b"P5\n128 128\n255\n") + 128 * 128
    svg = (tmp_path / "fig.svg").read_text()
    assert len(re.findall(r"<line ", svg)) == 16 * 16
    assert 'href="fig.pgm"' in svg


@pytest.mark.slow
def test_stage_composability(tmp_path, capsys):
    common = ["--threads", "1", "--set", "grid.size=64"]
    sim = tmp_path / "sim"
    assert main(["simulate", "--scene", "straight90", "--frames", "3", "--seed", "5",
                 "--out", str(sim)] + common) == 0
    assert main(["beamform", "--input", str(sim / "channels.vfit"),
                 "--out", str(tmp_path / "iq.vfit")] + common) == 0
    iq = dataio.read_tensor(tmp_path / "iq.vfit")
    assert iq.shape == (3, 64, 64)
    assert main(["svd-filter", "--input", str(tmp_path / "iq.vfit"),
                 "--out", str(tmp_path / "iq_f.vfit")] + common) == 0
    assert main(["piv", "--input", str(tmp_path / "iq.vfit"),
                 "--out", str(tmp_path / "piv.vfit")] + common) == 0
    assert dataio.tensor_dims(tmp_path / "piv.vfit") == (2, 2, 64, 64)
    capsys.readouterr()
    assert main(["eval", "--truth", str(sim / "truth.vfit"), "--estimate", str(tmp_path / "piv.vfit"),
                 "--mask", str(sim / "mask.vfit")] + common) == 0
    rep = parse_report_line(capsys.readouterr().out.splitlines()[0])
    assert np.isfinite(rep["median"])
    assert main(["plot", "--input", str(tmp_path / "piv.vfit"), "--background", str(tmp_path / "iq.vfit"),
                 "--out", str(tmp_path / "q")] + common) == 0


@pytest.mark.slow
def test_train_infer_eval_via_manifest(tmp_path, capsys):
    common = ["--threads", "1", "--set", "grid.size=32",
              "--set", "net.encoder=5:4,4:4", "--set", "net.decoder=4:1,4:0"]
    assert main(["gen-data", "--scene", "disk", "--count", "2", "--seed", "3",
                 "--out", str(tmp_path / "d")] + common) == 0
    assert main(["train", "--manifest", str(tmp_path / "d" / "manifest.txt"), "--epochs", "1",
                 "--val-manifest", str(tmp_path / "d" / "manifest.txt"),
                 "--out", str(tmp_path / "model")] + common) == 0
    assert (tmp_path / "model" / "loss_curve.txt").read_text().startswith("epoch=0 loss=")
    est = tmp_path / "est"
    est.mkdir()
    man = dataio.load_manifest(tmp_path / "d" / "manifest.txt")
    for e in man.entries:
        out = est / (e.input.name.removesuffix(".vfit") + "_est.vfit")
        assert main(["infer", "--model", str(tmp_path / "model"), "--input", str(e.input),
                     "--out", str(out)] + common) == 0
    capsys.readouterr()
    assert main(["eval", "--manifest", str(tmp_path / "d" / "manifest.txt"),
                 "--estimates", str(est), "--tag", "cnn"] + common) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2
    assert parse_report_line(lines[0])["n"] == 8
