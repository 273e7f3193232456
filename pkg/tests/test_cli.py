import csv
import json
import math

import numpy as np
import pytest

from patentcoop import cli
from patentcoop.graph import to_days
from patentcoop.relational import TABLE1_MEANS, synthetic_graph
from patentcoop.graph import write_graph
from patentcoop.trend import TABLE3_MEANS, cumulative_difference, write_params_json

HEADER = "id,publication_date,applicant_countries\n"


def write(path, text):
    path.write_text(text)
    return path


def same_config(dir_a, dir_b):
    """Resolved configs agree apart from the output location."""
    a, b = (json.loads((d / "run_config.json").read_text()) for d in (dir_a, dir_b))
    a.pop("out_dir"), b.pop("out_dir")
    return a == b


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))[1:]


# -- build-graph ---------------------------------------------------------------

def test_build_graph_header_only(tmp_path, capsys):
    src = write(tmp_path / "r.csv", HEADER)
    assert cli.main(["build-graph", str(src), str(tmp_path / "out")]) == 2
    assert "no records" in capsys.readouterr().err


def test_build_graph_example_records(tmp_path, capsys):
    second = write(tmp_path / "one.csv", HEADER + "b,2020-03-01,DE;LU;DE;DE;BE;BE\n")
    assert cli.main(["build-graph", str(second), str(tmp_path / "g1")]) == 0
    assert len(rows(tmp_path / "g1" / "edges.csv")) == 3

    both = write(tmp_path / "two.csv", HEADER + "a,2020-01-01,FR;FR;BE;DE\nb,2020-03-01,DE;LU;DE;DE;BE;BE\n")
    assert cli.main(["build-graph", str(both), str(tmp_path / "g2")]) == 0
    edges = {(a, b): int(c) for a, b, c in rows(tmp_path / "g2" / "edges.csv")}
    assert edges == {("BE", "DE"): 2, ("BE", "FR"): 1, ("DE", "FR"): 1, ("BE", "LU"): 1, ("DE", "LU"): 1}
    nodes = {c: float(v) for c, v in rows(tmp_path / "g2" / "nodes.csv")}
    assert len(nodes) == 29 and sum(nodes.values()) == pytest.approx(2.0)
    events = (tmp_path / "g2" / "events.txt").read_text().split()
    assert [float(t) for t in events] == [to_days("2020-01-01"), to_days("2020-03-01")]
    assert (tmp_path / "g2" / "run_config.json").exists()


def test_build_graph_prints_share(tmp_path, capsys):
    src = write(tmp_path / "r.csv", HEADER + "1,2019-01-01,FR;DE\n2,2019-01-02,FR\n3,2019-01-03,IT\n4,2019-01-04,US;JP\n")
    assert cli.main(["build-graph", str(src), str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "records: 4" in out and "25.0%" in out


def test_build_graph_malformed_row(tmp_path, capsys):
    src = write(tmp_path / "r.csv", HEADER + "1,2019-01-01,FR\n2,2019-01-02,FR;X9\n")
    assert cli.main(["build-graph", str(src), str(tmp_path / "o")]) == 2
    assert "row 2" in capsys.readouterr().err


def test_missing_file_and_bad_flags(tmp_path):
    assert cli.main(["build-graph", str(tmp_path / "nope.csv"), str(tmp_path / "o")]) == 2
    assert cli.main(["fit-trend"]) == 2
    assert cli.main(["no-such-command"]) == 2


# -- simulate ------------------------------------------------------------------

@pytest.fixture
def params_file(tmp_path):
    path = tmp_path / "params.json"
    write_params_json(TABLE3_MEANS, path)
    return path


def test_simulate_reproducible(tmp_path, params_file):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert cli.main(["simulate", str(params_file), str(a), "--seed", "4"]) == 0
    assert cli.main(["simulate", str(params_file), str(b), "--seed", "4"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().split()) > 5000


def test_simulate_mean_count(tmp_path, params_file):
    start, end = "2017-01-01", "2018-01-01"
    expected = cumulative_difference(TABLE3_MEANS, to_days(start), to_days(end))
    counts = []
    for seed in range(100):
        out = tmp_path / f"e{seed}.txt"
        assert cli.main(["simulate", str(params_file), str(out), "--seed", str(seed),
                         "--start", start, "--end", end]) == 0
        counts.append(len(out.read_text().split()))
    assert abs(np.mean(counts) - expected) < 3 * math.sqrt(expected)


def test_simulate_empty_window(tmp_path, params_file):
    out = tmp_path / "e.txt"
    assert cli.main(["simulate", str(params_file), str(out), "--start", "2000-01-01", "--end", "2000-01-01"]) == 0
    assert out.read_text() == ""


def test_simulate_invalid_params(tmp_path):
    bad = write(tmp_path / "p.json", json.dumps({"capacity_L": -5, "midpoint_1": 0, "midpoint_2": 1,
                                                 "scale_1": 1, "scale_2": 1, "mix_logit": 0}))
    assert cli.main(["simulate", str(bad), str(tmp_path / "e.txt")]) == 2
    assert cli.main(["simulate", str(write(tmp_path / "q.json", "[1, 2]")), str(tmp_path / "e.txt")]) == 2


# -- fit-relational / classify ---------------------------------------------------

@pytest.fixture(scope="module")
def graph_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("graph")
    graph, _ = synthetic_graph(TABLE1_MEANS, np.random.default_rng(5))
    write_graph(graph, out)
    return out


SMALL_CHAINS = ["--chains", "2", "--samples", "150", "--warmup", "150"]


def fit_relational(graph_dir, out, *extra):
    return cli.main(["fit-relational", str(graph_dir / "nodes.csv"), str(graph_dir / "edges.csv"),
                     str(out), *SMALL_CHAINS, *extra])


def test_fit_relational_outputs_and_determinism(tmp_path, graph_dir):
    assert fit_relational(graph_dir, tmp_path / "a", "--seed", "3") in (0, 3)
    assert fit_relational(graph_dir, tmp_path / "b", "--seed", "3") in (0, 3)
    for name in ("posterior_summary.json", "draws.csv", "classification.csv", "next_prior.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert same_config(tmp_path / "a", tmp_path / "b")
    summary = json.loads((tmp_path / "a" / "posterior_summary.json").read_text())
    assert set(summary["parameters"]) == {"alpha1", "alpha2", "beta0", "beta1", "beta2", "logit0", "logit1", "logit2"}
    assert set(summary["parameters"]["alpha1"]) == {"mean", "sd", "q2.5", "q50", "q97.5", "r_hat"}
    assert len(rows(tmp_path / "a" / "classification.csv")) == 29 * 28 // 2
    assert len(rows(tmp_path / "a" / "draws.csv")) == 300


def test_fit_relational_rhat_failure_writes_outputs(tmp_path, graph_dir, monkeypatch, capsys):
    real = cli.summarize

    def inflated(samples, names):
        out = real(samples, names)
        out["beta0"]["r_hat"] = 1.2
        return out

    monkeypatch.setattr(cli, "summarize", inflated)
    assert fit_relational(graph_dir, tmp_path / "r") == 3
    assert (tmp_path / "r" / "posterior_summary.json").exists()
    assert "beta0" in capsys.readouterr().err


def test_fit_relational_prior_override(tmp_path, graph_dir):
    assert fit_relational(graph_dir, tmp_path / "p", "--beta0-mean", "-10") in (0, 3)
    cfg = json.loads((tmp_path / "p" / "run_config.json").read_text())
    assert cfg["beta0_mean"] == -10.0
    prior = tmp_path / "prior.json"
    prior.write_text("{\"alpha1\": {\"mean\": 0.5, \"sd\": -1}}")
    assert fit_relational(graph_dir, tmp_path / "q", "--prior", str(prior)) == 2


def test_classify_from_draws(tmp_path, graph_dir, capsys):
    assert fit_relational(graph_dir, tmp_path / "f", "--seed", "1") in (0, 3)
    out = tmp_path / "c" / "classes.csv"
    assert cli.main(["classify", str(graph_dir / "nodes.csv"), str(graph_dir / "edges.csv"),
                     str(tmp_path / "f" / "draws.csv"), str(out)]) == 0
    assert out.read_bytes() == (tmp_path / "f" / "classification.csv").read_bytes()
    assert "type 0" in capsys.readouterr().out


# -- fit-trend -----------------------------------------------------------------

@pytest.fixture(scope="module")
def events_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("events")
    write_params_json(TABLE3_MEANS, d / "p.json")
    assert cli.main(["simulate", str(d / "p.json"), str(d / "events.txt"), "--seed", "2",
                     "--start", "2005-01-01"]) == 0
    return d / "events.txt"


FAST_VI = ["--n-mc", "1024", "--grad-samples", "8", "--max-iters", "400", "--forecast-draws", "300"]


def test_fit_trend_outputs_and_determinism(tmp_path, events_file):
    for name in ("a", "b"):
        assert cli.main(["fit-trend", str(events_file), str(tmp_path / name), *FAST_VI, "--seed", "6"]) == 0
    for name in ("surrogate.json", "forecast.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert same_config(tmp_path / "a", tmp_path / "b")
    data = np.loadtxt(tmp_path / "a" / "forecast.csv", delimiter=",", skiprows=1)
    assert data.shape[1] == 11
    assert np.all(np.diff(data[:, 1]) >= 0)
    assert data[-1, 0] == to_days("2030-01-01")
    surrogate = json.loads((tmp_path / "a" / "surrogate.json").read_text())
    assert {"unconstrained", "constrained", "fit"} <= set(surrogate)


def test_fit_trend_divergence_exit_code(tmp_path, events_file):
    assert cli.main(["fit-trend", str(events_file), str(tmp_path / "d"), *FAST_VI,
                     "--learning-rate", "1e6", "--eval-interval", "20"]) == 3


def test_fit_trend_bad_cutoff(tmp_path, events_file):
    assert cli.main(["fit-trend", str(events_file), str(tmp_path / "d"), *FAST_VI, "--cutoff", "2040-01-01"]) == 2


def test_config_file_precedence(tmp_path, events_file):
    cfg = write(tmp_path / "c.toml", 'seed = 8\n[fit-trend]\nn-mc = 512\ngrad_samples = 4\nmax-iters = 200\n')
    assert cli.main(["fit-trend", str(events_file), str(tmp_path / "x"), "--config", str(cfg),
                     "--forecast-draws", "100"]) == 0
    resolved = json.loads((tmp_path / "x" / "run_config.json").read_text())
    assert (resolved["n_mc"], resolved["grad_samples"], resolved["seed"]) == (512, 4, 8)
    assert cli.main(["fit-trend", str(events_file), str(tmp_path / "y"), "--config", str(cfg),
                     "--forecast-draws", "100", "--n-mc", "256"]) == 0
    assert json.loads((tmp_path / "y" / "run_config.json").read_text())["n_mc"] == 256


def test_config_file_errors(tmp_path, events_file):
    bad_key = write(tmp_path / "b.toml", "bogus = 1\n")
    assert cli.main(["fit-trend", str(events_file), str(tmp_path / "o"), "--config", str(bad_key)]) == 2
    broken = write(tmp_path / "c.toml", "this is not toml ==\n")
    assert cli.main(["fit-trend", str(events_file), str(tmp_path / "o"), "--config", str(broken)]) == 2
