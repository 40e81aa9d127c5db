import csv
import json

import numpy as np
import pytest

from ensembleiv.cli import main

SCHEMA = "y=y,x=x,w=w1,w2,v=v1,v2,v3"


def write_csv(path, cols: dict):
    names = list(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*cols.values()):
            w.writerow([f"{v:.6f}" for v in row])


@pytest.fixture(scope="module")
def csvs(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    g = np.random.default_rng(0)

    def draw(n):
        V = g.uniform(size=(n, 3))
        x = np.sin(3 * V[:, 0]) + V[:, 1] + g.normal(0, 0.3, n)
        W = g.normal(size=(n, 2))
        y = 1 + 0.5 * x + W @ [2.0, 1.0] + g.normal(size=n)
        return {"y": y, "x": x, "w1": W[:, 0], "w2": W[:, 1], "v1": V[:, 0], "v2": V[:, 1], "v3": V[:, 2]}

    lab = draw(200)
    unl = draw(400)
    del unl["x"]
    write_csv(d / "lab.csv", lab)
    write_csv(d / "unl.csv", unl)
    return d


def base(csvs, cmd):
    return [cmd, "--labeled", str(csvs / "lab.csv"), "--schema", SCHEMA, "--learners", "6", "--seed", "1"]


def test_estimate_json(csvs, capsys):
    rc = main(base(csvs, "estimate") + ["--unlabeled", str(csvs / "unl.csv"), "--format", "json"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert "x" in json.dumps(out)


def test_estimate_writes_out(csvs, tmp_path, capsys):
    rc = main(base(csvs, "estimate") + ["--unlabeled", str(csvs / "unl.csv"), "--format", "csv", "--crossfit",
                                        "--folds", "2", "--out", str(tmp_path)])
    assert rc == 0
    files = list(tmp_path.iterdir())
    assert len(files) == 1 and files[0].suffix == ".csv"
    assert files[0].read_text() == capsys.readouterr().out


def test_benchmark(csvs, capsys):
    rc = main(base(csvs, "benchmark") + ["--unlabeled", str(csvs / "unl.csv"), "--estimators", "biased,unbiased"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "biased" in out and "unbiased" in out


def test_diagnose(csvs, capsys):
    rc = main(base(csvs, "diagnose") + ["--permutations", "100", "--format", "json"])
    assert rc == 0
    assert 0 < json.loads(capsys.readouterr().out)["fisher_p_value"] <= 1


def test_simulate_peripheral(capsys):
    rc = main(["simulate", "--experiment", "peripheral-extended", "--sigmas", "0.2", "--reps", "2", "--format", "csv"])
    assert rc == 0
    assert len(capsys.readouterr().out.strip().splitlines()) >= 2


def test_missing_file_is_io_error(csvs, tmp_path):
    argv = base(csvs, "estimate") + ["--unlabeled", str(tmp_path / "nope.csv")]
    assert main(argv) == 4


def test_bad_column_is_config_error(csvs):
    argv = ["estimate", "--labeled", str(csvs / "lab.csv"), "--unlabeled", str(csvs / "unl.csv"),
            "--schema", "y=y,x=label,w=w1,v=v1"]
    assert main(argv) == 2


def test_bad_threads(csvs):
    assert main(base(csvs, "estimate") + ["--unlabeled", str(csvs / "unl.csv"), "--threads", "0"]) == 2


def test_bad_config(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("nonsense: 1\n")
    assert main(["simulate", "--config", str(p)]) == 2


def test_usage_error():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
