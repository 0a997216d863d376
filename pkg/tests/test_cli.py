import json

import pytest

from gssl.cli import main


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def last_log(capsys):
    lines = [l for l in capsys.readouterr().err.splitlines() if l.startswith("{")]
    return json.loads(lines[-1])


def test_graph_command_outputs(tmp_path):
    cfg = write_config(tmp_path, {"n": 300, "epsilon": 0.2})
    out = tmp_path / "run"
    assert main(["graph", "--config", cfg, "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["config.json", "edges.csv", "graph.gssl", "graph.json", "points.csv"]
    meta = json.loads((out / "graph.json").read_text())
    assert meta["n"] == 300 and meta["epsilon"] == 0.2
    assert json.loads((out / "config.json").read_text())["command"] == "graph"


def test_existing_run_requires_force(tmp_path, capsys):
    out = str(tmp_path / "run")
    args = ["graph", "--out", out, "--seed", "1"]
    assert main(args) == 0
    assert main(args) == 1
    assert last_log(capsys)["code"] == "usage"
    assert main(args + ["--force"]) == 0


def test_usage_errors(tmp_path, capsys):
    assert main(["graph", "--out", str(tmp_path), "--bogus"]) == 1
    assert main(["nope", "--out", str(tmp_path)]) == 1
    assert main(["graph"]) == 1
    assert main(["graph", "--out", str(tmp_path / "a"), "--threads", "0"]) == 1


def test_config_errors(tmp_path, capsys):
    bad = write_config(tmp_path, {"n": 100, "colour": "red"})
    assert main(["graph", "--config", bad, "--out", str(tmp_path / "a")]) == 1
    assert "colour" in last_log(capsys)["message"]
    assert main(["graph", "--config", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "b")]) == 1
    arr = write_config(tmp_path, [1, 2], "arr.json")
    assert main(["graph", "--config", arr, "--out", str(tmp_path / "c")]) == 1


def test_mnist_without_data(tmp_path, capsys):
    cfg = write_config(tmp_path, {"data_dir": str(tmp_path / "empty")})
    assert main(["mnist", "--config", cfg, "--out", str(tmp_path / "run")]) == 2
    err = last_log(capsys)
    assert err["level"] == "error" and err["code"] == "missing-idx"
    assert "missing IDX" in err["message"]


def test_beta_zero_is_data_error(tmp_path, capsys):
    cfg = write_config(tmp_path, {"model": "model1", "n_grid": [200, 400], "trials": 1,
                                  "beta_rule": {"kind": "constant", "value": 0.0}})
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "run")]) == 2
    assert last_log(capsys)["code"] == "empty-labels"


def test_all_censored_walks_exit_three(tmp_path, capsys):
    cfg = write_config(tmp_path, {"n": 300, "starts": 30, "trials": 20, "max_steps": 1,
                                  "beta": 0.5})
    assert main(["walk", "--config", cfg, "--out", str(tmp_path / "run")]) == 3
    assert last_log(capsys)["code"] == "all-censored"


def test_solve_methods(tmp_path):
    for method in ("hard", "soft", "plap"):
        cfg = write_config(tmp_path, {"n": 400, "method": method}, f"{method}.json")
        out = tmp_path / method
        assert main(["solve", "--config", cfg, "--out", str(out)]) == 0
        stats = json.loads((out / "stats.json").read_text())
        assert "degeneracy" in stats
        assert len((out / "solution.csv").read_text().splitlines()) == 401


def test_walk_command(tmp_path):
    cfg = write_config(tmp_path, {"n": 150, "starts": 4, "trials": 2000})
    out = tmp_path / "run"
    assert main(["walk", "--config", cfg, "--out", str(out)]) == 0
    assert len((out / "hitting.csv").read_text().splitlines()) == 5


def test_spike_and_rates_commands(tmp_path):
    spike = write_config(tmp_path, {"n_grid": [800], "label_counts": [5, 50]}, "s.json")
    assert main(["spike", "--config", spike, "--out", str(tmp_path / "s")]) == 0
    rows = (tmp_path / "s" / "spike_summary.csv").read_text().splitlines()
    assert len(rows) == 3
    rates = write_config(tmp_path, {"m_grid": [2, 3, 4], "trials": 100, "lattice_eps": 0.05},
                         "r.json")
    assert main(["rates", "--config", rates, "--out", str(tmp_path / "r")]) == 0
    fit = json.loads((tmp_path / "r" / "ratefit.json").read_text())
    assert set(fit) == {"error", "hitting_time"}


@pytest.mark.parametrize("command,extra", [
    ("sweep", {"n_grid": [256, 512], "trials": 2}),
    ("solve", {"n": 500}),
])
def test_outputs_independent_of_threads(tmp_path, command, extra):
    cfg = write_config(tmp_path, extra)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([command, "--config", cfg, "--out", str(a), "--threads", "1"]) == 0
    assert main([command, "--config", cfg, "--out", str(b), "--threads", "2"]) == 0
    for p in a.iterdir():
        if p.name != "timings.csv":
            assert p.read_bytes() == (b / p.name).read_bytes(), p.name
