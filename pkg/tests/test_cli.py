import csv
from pathlib import Path

import numpy as np
import pytest

from multidistill.ablation import LADDER, variant_config
from multidistill.cli import main, write_pgm
from multidistill.mole import mole_param_count

from conftest import tiny_config


def read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    assert parts[0] == b"P5" and parts[2] == b"255"
    w, h = (int(v) for v in parts[1].split())
    pix = np.frombuffer(parts[3], dtype=np.uint8)
    assert pix.size == w * h
    return pix.reshape(h, w)


@pytest.fixture
def cfg_file(tmp_path):
    def make(**overrides):
        cfg = tiny_config(out_dir=str(tmp_path / "run"), **overrides)
        path = tmp_path / "tiny.cfg"
        path.write_text(cfg.to_text())
        return path

    return make


def test_missing_config_flag_prints_usage(capsys):
    assert main(["distill"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["distill", "--config", str(tmp_path / "absent.cfg")]) == 5
    assert "absent.cfg" in capsys.readouterr().err


def test_config_errors(tmp_path, cfg_file, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("mole.num_experts = 0\n")
    assert main(["inspect-params", "--config", str(bad)]) == 3
    bad.write_text("steps = 1\nsteps = 2\n")
    assert main(["distill", "--config", str(bad)]) == 3
    assert "bad.cfg:2" in capsys.readouterr().err


def test_distill_writes_outputs(cfg_file, tmp_path, capsys):
    assert main(["distill", "--config", str(cfg_file()), "--steps", "2"]) == 0
    out = capsys.readouterr().out
    assert "L_text=" in out and "L_kd=" in out and "L_total=" in out
    run = tmp_path / "run"
    assert (run / "trace.csv").exists() and (run / "checkpoint.mvkd").exists() and (run / "config.txt").exists()


def test_resume_through_cli(cfg_file, tmp_path):
    path = str(cfg_file())
    assert main(["distill", "--config", path, "--steps", "4", "--out", str(tmp_path / "full")]) == 0
    assert main(["distill", "--config", path, "--steps", "1", "--out", str(tmp_path / "k")]) == 0
    ck = str(tmp_path / "k" / "checkpoint.mvkd")
    assert main(["distill", "--config", path, "--steps", "3", "--resume", ck, "--out", str(tmp_path / "n")]) == 0
    assert (tmp_path / "full" / "checkpoint.mvkd").read_bytes() == (tmp_path / "n" / "checkpoint.mvkd").read_bytes()


def test_resume_with_other_architecture_is_refused(cfg_file, tmp_path, capsys):
    path = str(cfg_file())
    assert main(["distill", "--config", path, "--steps", "0"]) == 0
    other = tmp_path / "other.cfg"
    other.write_text(tiny_config(mole_num_experts=4).to_text())
    ck = str(tmp_path / "run" / "checkpoint.mvkd")
    assert main(["distill", "--config", str(other), "--resume", ck, "--out", str(tmp_path / "x")]) == 3
    assert "fingerprint" in capsys.readouterr().err


def test_inspect_params_matches_formula(cfg_file, capsys):
    assert main(["inspect-params", "--config", str(cfg_file())]) == 0
    out = capsys.readouterr().out
    cfg = tiny_config()
    mole, total, ratio = mole_param_count(cfg.student, 3, 4)
    assert f"= {float(ratio):.4f}" in out
    assert f"closed form: {mole} / {total}; enumeration: {mole} / {total}; match" in out


def test_ratio_grows_with_rank(cfg_file, capsys):
    ratios = []
    for r in (2, 4, 8):
        assert main(["inspect-params", "--config", str(cfg_file(mole_rank=r))]) == 0
        line = next(ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("MoLE ratio"))
        ratios.append(float(line.split("=")[1].split()[0]))
    assert ratios == sorted(ratios) and len(set(ratios)) == 3


def test_export_attention(cfg_file, tmp_path):
    assert main(["distill", "--config", str(cfg_file()), "--steps", "1"]) == 0
    out = tmp_path / "maps"
    ck = str(tmp_path / "run" / "checkpoint.mvkd")
    assert main(["export-attention", "--checkpoint", ck, "--image-seed", "5", "--out", str(out)]) == 0
    g = tiny_config().student.grid
    for name in ("clip_attn", "student_attn"):
        assert read_pgm(out / f"{name}.pgm").shape == (g, g)
        with (out / f"{name}.csv").open() as fh:
            grid = np.array([[float(v) for v in row] for row in csv.reader(fh)])
        assert grid.shape == (g, g)
        assert abs(grid.sum() - 1.0) <= 1e-6


def test_export_attention_errors(cfg_file, tmp_path):
    path = str(cfg_file())
    junk = tmp_path / "junk.mvkd"
    junk.write_bytes(b"MVKD\x01")
    assert main(["export-attention", "--checkpoint", str(junk), "--image-seed", "0", "--out", str(tmp_path / "o"), "--config", path]) == 5
    assert main(["export-attention", "--checkpoint", str(tmp_path / "none.mvkd"), "--image-seed", "0", "--out", str(tmp_path / "o"), "--config", path]) == 5


def test_pgm_edge_rules(tmp_path):
    write_pgm(tmp_path / "flat.pgm", np.full((3, 3), 1 / 9))
    assert (read_pgm(tmp_path / "flat.pgm") == 128).all()
    write_pgm(tmp_path / "ramp.pgm", np.array([[0.1, 0.2], [0.3, 0.4]]))
    pix = read_pgm(tmp_path / "ramp.pgm")
    assert pix.min() == 0 and pix.max() == 255


def test_ablate_zero_steps(cfg_file, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg_file()), "--steps", "0", "--out", str(out)]) == 0
    with (out / "ablation.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == list(LADDER)
    assert len({r["final_l_text"] for r in rows}) == 1
    sums = {r["variant"]: float(r["token_weight_sum"]) for r in rows}
    assert sums["mse-baseline"] == pytest.approx(1.0, abs=1e-6)
    assert sums["+token-w"] == pytest.approx(2.0, abs=1e-6)


def test_ladder_is_cumulative():
    cfg = tiny_config()
    flags = [
        (c.adapter_kind, c.mole_enabled, c.token_weighting, c.teacher_weighting)
        for c in (variant_config(cfg, v) for v in LADDER)
    ]
    assert flags == [
        ("interp", False, False, False),
        ("mlp", False, False, False),
        ("mlp", True, False, False),
        ("mlp", True, True, False),
        ("mlp", True, True, True),
    ]


def test_verify_command(capsys):
    assert main(["verify"]) == 0
    assert "all passed" in capsys.readouterr().out
