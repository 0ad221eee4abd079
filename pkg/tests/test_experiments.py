import csv
import io
import json

import numpy as np
import pytest

from sltlab.experiments import (CSV_COLUMNS, REGISTRY, ConfigError, ExperimentConfig, annulus_hitting,
                                golden_key, rep_rng, rep_seed, run)

TINY = dict(r=4, s=1, reps=4)


@pytest.mark.parametrize("bad", [
    dict(eps=0.3), dict(eps=-0.1), dict(s=5, r=4), dict(d=2), dict(shape="torus"),
    dict(u_prime=0.5), dict(u=-1.0), dict(reps=-1), dict(workers=0), dict(b_exponent=2.0),
    dict(c4=1.5),
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig(**bad)


def test_config_accepts_boundary_values():
    assert ExperimentConfig(eps=0.25).eps == 0.25
    assert ExperimentConfig(eps=0.0).eps == 0.0
    cfg = ExperimentConfig(b_exponent=1.2)
    assert cfg.a_exponent == pytest.approx(2 * 3 - 2 - 3 * 1.2)
    assert cfg.replace(seed=3).seed == 3 and cfg.seed == 0
    assert "a_exponent" in cfg.to_dict()


def test_rep_seeds_distinct_and_stable():
    seeds = {rep_seed(0, "sandwich", k) for k in range(100)}
    assert len(seeds) == 100
    assert rep_seed(0, "sandwich", 1) == rep_seed(0, "sandwich", 1)
    assert rep_seed(0, "sandwich", 1) != rep_seed(0, "concentration", 1)
    assert rep_rng(1, "x", 0).random() == rep_rng(1, "x", 0).random()


def test_unknown_experiment():
    with pytest.raises(ConfigError):
        run("nope", ExperimentConfig())


@pytest.mark.parametrize("name", ["vacant-law", "covariance", "sandwich", "concentration"])
def test_zero_reps_gives_empty_report(name):
    rep = run(name, ExperimentConfig(reps=0, r=4, s=1))
    assert rep.records == []
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)


def test_csv_sorted_and_deterministic():
    cfg = ExperimentConfig(reps=2000, seed=7)
    a = run("vacant-law", cfg).to_csv()
    b = run("vacant-law", cfg).to_csv()
    assert a == b
    rows = list(csv.DictReader(io.StringIO(a)))
    keys = [(int(r["rep"]), r["statistic"], int(r["seed"])) for r in rows]
    assert keys == sorted(keys)
    assert any(r["statistic"].startswith("flag:") for r in rows)
    c = run("vacant-law", cfg.replace(seed=8)).to_csv()
    assert c != a


def test_workers_do_not_change_results():
    one = run("sandwich", ExperimentConfig(**TINY, workers=1))
    two = run("sandwich", ExperimentConfig(**TINY, workers=2))
    assert one.to_csv() == two.to_csv()


def test_json_report_roundtrip():
    rep = run("vacant-law", ExperimentConfig(reps=500))
    data = json.loads(rep.to_json())
    assert data["name"] == "vacant-law" and data["passed"] == rep.passed
    assert set(data["flags"]) == set(rep.flags)


def test_coupled_runs_have_no_set_violations():
    rep = run("sandwich", ExperimentConfig(r=5, s=2, reps=6))
    assert rep.flags["no_implication_violations"]
    assert rep.flags["nested_in_eps"]


def test_one_sided_needs_larger_level():
    rep = run("one-sided", ExperimentConfig(r=4, s=1, reps=3, u_prime=1.5))
    assert rep.flags and all(isinstance(v, bool) for v in rep.flags.values())


def test_golden_key_format():
    cfg = ExperimentConfig()
    assert golden_key("sandwich", cfg, "frequency") == "sandwich|ball|d3|r12|s4|u1|eps0.25|frequency"


def test_annulus_exact_values_are_probabilities():
    res = annulus_hitting(4, 12, (6, 8))
    for p in res["points"]:
        assert 0 < p["exact"] < 1
    e = [p["exact"] for p in res["points"]]
    assert e[0] > e[1]


def test_registry_complete():
    assert {"vacant-law", "covariance", "slt-law", "expectation-identity", "density-oracle",
            "capacity-agreement", "green-check", "sandwich", "concentration", "one-sided",
            "monotone-statistics", "appendix-scalings"} <= set(REGISTRY)
    assert np.all([callable(f) for f in REGISTRY.values()])
