import os
import subprocess
import sys

import numpy as np
import pytest

from magr.cli import DEFAULTS, build_parser, fraction_rank_stats, main
from magr.pipeline import load_manifest
from magr.quant import QuantConfig, load_quantized, rtn_quantize


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "synth"
    assert main(["synth", "--layers", "4", "--m", "64", "--n", "32", "--seed", "7",
                 "--out-dir", str(out)]) == 0
    return out


def test_smoke(synth_dir, tmp_path, capsys):
    out = tmp_path / "q"
    rc = main(["quantize", "--manifest", str(synth_dir / "manifest.txt"), "--bits", "3",
               "--magr", "on", "--out-dir", str(out)])
    assert rc == 0
    rows = (out / "report.csv").read_text().splitlines()
    assert rows[0] == "layer,frac_rank,maxmag_before,maxmag_after,drift,err_rtn_raw,err_method_magr,seconds"
    assert len(rows) == 5
    for f in ("maxmag.csv", "summary.txt", "layer0.codes.magr", "layer3.meta.txt"):
        assert (out / f).exists()
    assert "layers: 4" in capsys.readouterr().out


def test_rtn_parity(synth_dir, tmp_path):
    out = tmp_path / "q"
    assert main(["quantize", "--manifest", str(synth_dir / "manifest.txt"), "--magr", "off",
                 "--method", "rtn", "--bits", "4", "--out-dir", str(out)]) == 0
    for rec in load_manifest(synth_dir / "manifest.txt"):
        ref = rtn_quantize(rec.W_hat, QuantConfig(bits=4))
        got = load_quantized(out, rec.name)
        np.testing.assert_array_equal(got.codes, ref.codes)
        assert got.dequantized.tobytes() == ref.dequantized.tobytes()


def test_analyze(synth_dir, capsys):
    assert main(["analyze", "--manifest", str(synth_dir / "manifest.txt")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[-2].split("\t") == ["Min", "Max", "Mean", "25% Percentile", "75% Percentile"]
    assert lines[-1].split("\t")[2] == "25.00"
    assert lines[0] == "layer0\t25.00"


def test_preprocess(synth_dir, tmp_path):
    out = tmp_path / "p"
    assert main(["preprocess", "--manifest", str(synth_dir / "manifest.txt"), "--iters", "20",
                 "--out-dir", str(out)]) == 0
    recs = load_manifest(out / "manifest.txt")
    assert len(recs) == 4
    assert len((out / "magr_report.csv").read_text().splitlines()) == 5


def test_default_table():
    assert DEFAULTS == {
        "alpha_channel": 1e-3, "alpha_group": 1e-4, "iters": 150, "cd_iters": 30,
        "damp": 0.01, "bits": 4, "group": 0,
    }
    args = build_parser().parse_args(["quantize"])
    assert (args.iters, args.cd_iters, args.bits, args.group, args.damp) == (150, 30, 4, 0, 0.01)
    assert args.alpha is None and args.beta is None and args.magr == "on"


def test_stats():
    s = fraction_rank_stats([0.25, 0.5, 0.75, 1.0])
    assert s["Min"] == 25 and s["Max"] == 100 and s["Mean"] == 62.5
    assert s["25% Percentile"] == 43.75 and s["75% Percentile"] == 81.25


def test_usage_errors(capsys):
    assert main(["quantize", "--bits", "5"]) == 2
    assert main(["frobnicate"]) == 2
    assert main([]) == 2
    assert main(["quantize", "--no-such-flag"]) == 2


def test_config_error(synth_dir, tmp_path):
    assert main(["quantize", "--manifest", str(synth_dir / "manifest.txt"), "--group", "5",
                 "--out-dir", str(tmp_path / "q")]) == 2
    assert main(["quantize", "--manifest", str(synth_dir / "manifest.txt"), "--alpha", "-1",
                 "--out-dir", str(tmp_path / "q")]) == 2


def test_io_error(tmp_path, capsys):
    assert main(["analyze", "--manifest", str(tmp_path / "missing.txt")]) == 3
    assert "missing.txt" in capsys.readouterr().err


def test_data_error_names_layer(tmp_path, capsys):
    (tmp_path / "w.magr").write_bytes(b"MAGRjunk")
    (tmp_path / "manifest.txt").write_text("attn_q, w=w.magr, h=w.magr\n")
    assert main(["quantize", "--manifest", str(tmp_path / "manifest.txt")]) == 4
    assert "attn_q" in capsys.readouterr().err


def _snapshot(d):
    return {f: (d / f).read_bytes() for f in sorted(os.listdir(d))}


def test_deterministic_out_dir(synth_dir, tmp_path):
    argv = ["quantize", "--manifest", str(synth_dir / "manifest.txt"), "--bits", "2",
            "--method", "optq_cd", "--cd-iters", "3", "--iters", "30"]
    assert main(argv + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(argv + ["--out-dir", str(tmp_path / "b"), "--workers", "3"]) == 0
    assert _snapshot(tmp_path / "a") == _snapshot(tmp_path / "b")


def test_synth_chain(tmp_path):
    out = tmp_path / "c"
    assert main(["synth", "--chain", "--layers", "3", "--m", "32", "--n", "16",
                 "--out-dir", str(out)]) == 0
    assert main(["quantize", "--manifest", str(out / "manifest.txt"), "--propagate",
                 "--iters", "10", "--out-dir", str(tmp_path / "q")]) == 0


def test_workers_env(synth_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("MAGR_WORKERS", "2")
    assert main(["quantize", "--manifest", str(synth_dir / "manifest.txt"), "--iters", "10",
                 "--out-dir", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("MAGR_WORKERS", "many")
    assert main(["quantize", "--manifest", str(synth_dir / "manifest.txt"), "--iters", "10",
                 "--out-dir", str(tmp_path / "b")]) == 2
    monkeypatch.delenv("MAGR_WORKERS")
    assert main(["quantize", "--manifest", str(synth_dir / "manifest.txt"), "--iters", "10",
                 "--out-dir", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "c" / "report.csv").read_bytes()


def test_console_module(tmp_path):
    r = subprocess.run([sys.executable, "-m", "magr", "synth", "--layers", "1", "--m", "8",
                        "--n", "4", "--samples", "16", "--out-dir", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
