import json

import pytest

from latentmorse.cli import main

TINY = """[system]
name = bistable
dim = 3
[data]
n_traj = 400
[train]
epochs = 5
restarts = 0
[grid]
k = 4
"""

# small enough to run in seconds, large enough to find both attractors
SMALL = """[system]
name = bistable
dim = 3
[data]
n_traj = 2000
[train]
epochs = 150
restarts = 2
[morse]
lipschitz = 1
"""

CHAIN = ["gen", "train", "analyze", "eval"]


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def run(cmd, cfg, out, *extra):
    return main([cmd, "--config", str(cfg), "--out-dir", str(out), *extra])


def run_chain(cfg, out, workers):
    codes = [run(c, cfg, out, "--workers", str(workers)) for c in CHAIN]
    return codes, {f.name: f.read_bytes() for f in sorted(out.iterdir())}


def test_chain_outputs_and_determinism(tiny, tmp_path):
    codes1, files1 = run_chain(tiny, tmp_path / "a", 1)
    codes2, files2 = run_chain(tiny, tmp_path / "b", 2)
    assert codes1[0] == 0 and codes1[1] in (0, 4) and codes1 == codes2
    assert files1 == files2
    for name in ("train.csv", "test.csv", "model.json", "loss_history.csv", "valid_cells.txt",
                 "map_edges.txt", "morse_edges.txt", "morse_summary.json", "config.ini"):
        assert name in files1
    assert b"workers" not in files1["config.ini"]
    summary = json.loads(files1["morse_summary.json"])
    assert "lipschitz_estimate" in summary
    if codes1[2] == 0:
        header = files1["metrics.csv"].decode().splitlines()[0]
        assert header == "P,R,F,n_test,true_success,pred_success,hit,precision_undefined"


def test_config_errors(tmp_path, capsys):
    assert main(["gen", "--config", str(tmp_path / "missing.ini"), "--out-dir",
                 str(tmp_path)]) == 2
    assert main(["gen", "--fraction", "0", "--out-dir", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_conflicting_system(tiny, tmp_path):
    assert run("gen", tiny, tmp_path, "--system", "pendulum") == 2


def test_unwritable_out_dir(tiny, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("gen", tiny, blocker / "out") == 2


def test_missing_inputs_are_pipeline_failures(tiny, tmp_path):
    for cmd in ("train", "analyze", "eval", "plot"):
        assert run(cmd, tiny, tmp_path / cmd) == 3


def test_wrong_latent_dim_checkpoint(tiny, tmp_path):
    out = tmp_path / "o"
    run("gen", tiny, out)
    run("train", tiny, out)
    assert run("analyze", tiny, out, "--latent-dim", "1") == 3


def test_single_trajectory_warns_empty_test(tmp_path, caplog):
    p = tmp_path / "one.ini"
    p.write_text(TINY.replace("n_traj = 400", "n_traj = 1"))
    assert run("gen", p, tmp_path / "o") == 0
    assert "test split is empty" in caplog.text
    assert (tmp_path / "o" / "test.csv").read_text().count("\n") == 1


def test_pendulum_gen_success_rate(tmp_path, capsys):
    assert main(["gen", "--system", "pendulum", "--out-dir", str(tmp_path)]) == 0
    line = capsys.readouterr().out.splitlines()[0]
    assert "1024 trajectories, 20480 pairs" in line
    rate = float(line.rsplit(" ", 1)[1])
    assert 0.15 <= rate <= 0.35


def test_direct_command(tiny, tmp_path):
    two = tmp_path / "two.ini"
    two.write_text(TINY.replace("dim = 3", "dim = 2"))
    assert run("direct", two, tmp_path) == 0
    info = json.loads((tmp_path / "direct_summary.json").read_text())
    assert info["morse_nodes"] == 3 and len(info["morse_edges"]) == 2
    roa = (tmp_path / "direct_roa.csv").read_text().splitlines()
    assert roa[0] == "linear_index,attractor"


def test_plot_after_analyze(tmp_path):
    cfg = tmp_path / "small.ini"
    cfg.write_text(SMALL)
    out = tmp_path / "o"
    for c in ("gen", "train", "analyze", "eval", "plot"):
        assert run(c, cfg, out) == 0, c
    svg = (out / "roa.svg").read_text()
    assert svg.startswith("<?xml") and "<polyline" in svg
    f = float((out / "metrics.csv").read_text().splitlines()[1].split(",")[2])
    assert f > 0.5


def test_direct_refuses_huge_grid(tmp_path):
    assert main(["direct", "--system", "bistable", "--out-dir", str(tmp_path)]) == 3
