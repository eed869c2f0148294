import csv
import io

import pytest

from ctdqn.cli import main, parse_arch


def _csv(text):
    return list(csv.reader(io.StringIO(text)))


def test_ldp_row(capsys):
    assert main(["ldp", "--lh", "1", "--lsigma", "1", "--k", "1", "--n", "1", "--t", "1", "--delta", "0.1", "--mc-trials", "200"]) == 0
    header, row = _csv(capsys.readouterr().out)
    assert header == ["c1", "c2", "c3", "r1", "bound", "empirical"]
    c1, c2, c3, r1, bound, emp = map(float, row)
    assert c1 == pytest.approx(806.857, rel=1e-3) and c2 == 0.0625 and r1 == pytest.approx(12.997, rel=1e-3)
    assert emp <= bound


def test_ldp_degenerate_is_an_error(capsys):
    assert main(["ldp", "--lh", "0", "--lsigma", "0", "--k", "1", "--n", "1", "--t", "1", "--delta", "0.1"]) == 2
    assert "error" in capsys.readouterr().err


def test_parse_arch():
    arch = parse_arch("hidden=4,blocks=3,activation=tanh,time_feature=true")
    assert (arch.hidden_dim, arch.n_blocks, arch.activation, arch.time_feature) == (4, 3, "tanh", True)
    assert parse_arch("mode=action_in").n_out == 1
    with pytest.raises(ValueError):
        parse_arch("hidden")


def test_gradcheck(capsys):
    assert main(["gradcheck", "--seed", "3", "--arch", "hidden=6,blocks=2,activation=tanh"]) == 0
    out = capsys.readouterr().out
    assert float(out.split()[0].split("=")[1]) < 1e-6


def test_uat_csv(tmp_path):
    out = tmp_path / "uat.csv"
    assert main(["uat", "--depths", "0,2", "--width", "4", "--budget", "640", "--out", str(out)]) == 0
    rows = _csv(out.read_text())
    assert rows[0] == ["depth", "width", "sup_error"] and [r[0] for r in rows[1:]] == ["0", "2"]
    assert main(["uat", "--target", "nope"]) == 2


def test_oracle_solve_and_contraction(tmp_path, capsys):
    out = tmp_path / "q.csv"
    assert main(["oracle", "--states", "21", "--out", str(out)]) == 0
    rows = _csv(out.read_text())
    assert rows[0] == ["s", "a", "q_star", "v_star"] and len(rows) == 1 + 21 * 3
    first = [list(map(float, r)) for r in rows[1:4]]
    assert max(r[2] for r in first) == first[0][3]
    assert main(["oracle", "contraction", "--states", "21", "--pairs", "10"]) == 0
    text = capsys.readouterr().out
    ratio = float(text.split()[0].split("=")[1])
    assert ratio <= 0.99 + 1e-12


def test_train_and_config_file(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "a"), "--episodes", "2", "--seed", "5"]) == 0
    cfg = tmp_path / "a" / "config.json"
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "episodes.csv").read_bytes() == (tmp_path / "b" / "episodes.csv").read_bytes()
    assert list((tmp_path / "a" / "checkpoints").glob("step_*.params"))
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "c")]) == 2
    assert "missing.json" in capsys.readouterr().err


def test_compare(tmp_path, capsys):
    assert main(["compare", "--configs", "Baseline,FewerResBlocks", "--episodes", "1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "comparison.csv").exists()
    assert main(["compare", "--configs", "frobnicate", "--out", str(tmp_path)]) == 2
