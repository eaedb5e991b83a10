import math

import pytest

import iccgee


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "trial.csv"
    count = iccgee.generate(path, clusters=120, n_min=20, n_max=30, seed=3)
    assert count == 120
    return path


def test_truth_parzen():
    t = iccgee.truth()
    assert t["method"] == "parzen"
    assert t["quadrature_change"] < 1e-4
    for key in ("beta0", "beta_A", "alpha0", "alpha_A"):
        assert math.isfinite(t[key])
    assert 0.0 < t["alpha0"] < 0.5


def test_generate_writes_long_csv(dataset):
    lines = dataset.read_text().splitlines()
    assert lines[0].split(",")[:3] == ["cluster_id", "treat", "y"]
    clusters = {line.split(",")[0] for line in lines[1:]}
    assert len(clusters) == 120


@pytest.mark.parametrize("estimator", ["cc", "g2", "dr"])
def test_fit_deterministic(dataset, estimator):
    r = iccgee.fit(dataset, estimator=estimator)
    tm = r["stages"]["tm"]
    assert tm["converged"]
    names = [p["name"] for p in tm["parameters"]]
    assert len(names) == 4
    for p in tm["parameters"]:
        assert math.isfinite(p["estimate"])
        assert p["se"] > 0
    assert -1.0 < tm["icc"]["control"] < 1.0


def test_fit_stochastic_is_seeded(dataset):
    a = iccgee.fit(dataset, solver="stochastic", seed=11, sandwich=False)
    b = iccgee.fit(dataset, solver="stochastic", seed=11, sandwich=False)
    est = lambda r: [p["estimate"] for p in r["stages"]["tm"]["parameters"]]
    assert est(a) == est(b)


def test_simulate_small():
    s = iccgee.simulate(replicates=3, clusters=80, n_min=15, n_max=25, estimators=["cc", "dr"],
                        sandwich=False, seed=5)
    assert s["replicates"] == 3
    assert [row["estimator"] for row in s["rows"]] == ["cc", "dr"]
    assert all(row["runs"] == 3 for row in s["rows"])


def test_bench_slopes():
    b = iccgee.bench(sizes=[20, 40, 80], repetitions=3, structures=["identity", "equicorrelated"])
    assert b["slopes"]
    assert all(s["points"] >= 0 for s in b["slopes"])


def test_errors_are_typed(tmp_path, dataset):
    with pytest.raises(iccgee.ConfigError):
        iccgee.fit(dataset, estimator="nope")
    bad = tmp_path / "bad.csv"
    bad.write_text("cluster_id,treat,y\n1,0,1\n1,x,0\n")
    with pytest.raises(iccgee.ParseError):
        iccgee.fit(bad)
    with pytest.raises(iccgee.Error):
        iccgee.fit(tmp_path / "missing.csv")
