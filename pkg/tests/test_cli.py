import json

import numpy as np
import pytest

import specteb.cli as cli
from specteb.cli import bands_from_csv, main, parse_dataset
from specteb.gmm import GmmPrior
from specteb.mle import fit_records
from specteb.modelsel import cv_from_csv
from specteb.sim import NoiseLaw, PriorSpec, sample_experiments
from specteb.spectral import SpectralPrior


def _write_data(path, dh, s):
    path.write_text("delta_hat,s\n" + "".join(f"{float(a)!r},{float(b)!r}\n" for a, b in zip(dh, s)))
    return str(path)


@pytest.fixture
def small_data(tmp_path):
    rng = np.random.default_rng(4)
    dh = rng.normal(0.3, 1.0, 10)
    s = rng.uniform(0.1, 0.5, 10)
    return _write_data(tmp_path / "d.csv", dh, s), dh, s


@pytest.fixture
def medium_data(tmp_path):
    rng = np.random.default_rng(8)
    d = np.where(rng.random(300) < 0.5, rng.normal(-1, 0.3, 300), rng.normal(1, 0.3, 300))
    s = rng.uniform(0.05, 0.3, 300)
    return _write_data(tmp_path / "m.csv", d + s * rng.standard_normal(300), s)


def test_fit_matches_library(small_data, tmp_path, capsys):
    path, dh, s = small_data
    out = tmp_path / "model.json"
    assert main(["fit", path, "--order", "2", "--out", str(out)]) == 0
    prior, _ = fit_records(dh, s, 2)
    assert out.read_text() == prior.to_json()
    report = json.loads(capsys.readouterr().out)
    assert report["records"] == 10 and report["converged"]
    assert SpectralPrior.from_json(out.read_text()).N == 2


def test_missing_column_is_input_error(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("delta_hat,sigma\n1,2\n")
    assert main(["fit", str(p), "--order", "2"]) == 2
    assert "'s'" in capsys.readouterr().err


def test_non_numeric_field_names_line(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("delta_hat,s\n1,0.1\n2,abc\n")
    assert main(["fit", str(p), "--order", "2"]) == 2
    err = capsys.readouterr().err
    assert "line 3" in err and "'s'" in err


def test_parse_dataset_rejects_negative_noise_and_empty():
    with pytest.raises(cli.InputError):
        parse_dataset("delta_hat,s\n1,-0.1\n")
    with pytest.raises(cli.InputError):
        parse_dataset("delta_hat,s\n")
    dh, s, truth = parse_dataset("delta_hat,s,delta_true\n1,0.5,0.9\n")
    assert truth.tolist() == [0.9]


def test_bad_flags_exit_2(small_data):
    path, _, _ = small_data
    assert main(["fit", path]) == 2
    assert main(["fit", path, "--order", "2", "--step-size", "big"]) == 2
    assert main(["nonsense"]) == 2


@pytest.fixture
def fitted_model(small_data, tmp_path):
    path, _, _ = small_data
    out = tmp_path / "model.json"
    assert main(["fit", path, "--order", "4", "--out", str(out)]) == 0
    return str(out)


def test_posterior_zero_noise_returns_observation(fitted_model, capsys):
    capsys.readouterr()
    assert main(["posterior", fitted_model, "--delta-hat", "0.4", "--s", "0"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["mean"] == pytest.approx(0.4, abs=1e-12) and out["variance"] == 0.0


def test_posterior_uniform_model_gives_noise_variance(tmp_path, capsys):
    from specteb.core import DomainSpec

    p = tmp_path / "u.json"
    p.write_text(SpectralPrior.uniform(6, DomainSpec(0.0, 20.0)).to_json())
    assert main(["posterior", str(p), "--delta-hat", "1.0", "--s", "0.5", "--cost", "0.5"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["mean"] == pytest.approx(1.0, abs=1e-9)
    assert out["variance"] == pytest.approx(0.25, rel=1e-9)
    assert out["launch"] is True


def test_posterior_out_of_domain(fitted_model, capsys):
    assert main(["posterior", fitted_model, "--delta-hat", "100", "--s", "0.1"]) == 2
    assert main(["posterior", fitted_model, "--delta-hat", "100", "--s", "0.1", "--project"]) == 0


def test_posterior_density_grid(fitted_model, capsys):
    capsys.readouterr()
    assert main(["posterior", fitted_model, "--delta-hat", "0.2", "--s", "0.3", "--grid", "64"]) == 0
    dens = json.loads(capsys.readouterr().out)["density"]
    x, p = np.array(dens["x"]), np.array(dens["p"])
    assert x.size == 64 and np.all(p >= 0)
    assert np.sum(p) * (x[1] - x[0]) == pytest.approx(1.0, abs=1e-3)


def test_posterior_gmm_model(tmp_path, capsys):
    p = tmp_path / "g.json"
    p.write_text(GmmPrior(2, [0.5, 0.5], [0.0, 2.0], [0.0, 1.0]).to_json())
    assert main(["posterior", str(p), "--delta-hat", "1.0", "--s", "0.5"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0 < out["null_probability"] < 1 and 0 < out["mean"] < 1


def test_shrinkage_curve(tmp_path, capsys):
    from specteb.core import DomainSpec
    from specteb.spectral import nodes

    N = 8
    f = np.exp(-0.5 * (nodes(N) / 0.6) ** 2)
    f *= 1 / (f.sum() * 2 * np.pi / (2 * N + 1))
    p = tmp_path / "sym.json"
    p.write_text(SpectralPrior(N, f, DomainSpec(0.0, 4.0)).to_json())
    assert main(["shrinkage", str(p), "--s", "0,0.5", "--grid", "41"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "s,delta_hat,shrinkage"
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    zero, half = rows[rows[:, 0] == 0], rows[rows[:, 0] == 0.5]
    assert np.allclose(zero[:, 2], 0.0, atol=1e-12)
    # symmetric prior gives an antisymmetric curve, pulled toward the center by no more than the offset
    assert np.allclose(half[:, 2], -half[::-1, 2], atol=1e-9)
    assert np.all(np.abs(half[:, 2]) <= np.abs(half[:, 1]) + 1e-12)


def test_shrinkage_rejects_gmm(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(GmmPrior(1, [1.0], [0.0], [1.0]).to_json())
    assert main(["shrinkage", str(p), "--s", "1"]) == 2


def test_simulate_matches_library(tmp_path):
    out = tmp_path / "sim.csv"
    assert main(["simulate", "--prior", "uniform:-2,3", "--noise", "uniform:0,1", "--n", "50",
                 "--seed", "3", "--out", str(out)]) == 0
    lib = sample_experiments(PriorSpec.uniform(-2, 3), 50, NoiseLaw.uniform(0, 1), seed=3)
    assert out.read_text() == lib.to_csv()
    dh, s, truth = parse_dataset(out.read_text())
    assert np.array_equal(dh, lib.delta_hat) and np.array_equal(truth, lib.delta)


def test_simulate_bad_prior(tmp_path):
    assert main(["simulate", "--prior", "beta:1,2", "--noise", "fixed:1", "--n", "5"]) == 2
    assert main(["simulate", "--prior", "gmm:1,0", "--noise", "fixed:1", "--n", "5"]) == 2
    assert main(["simulate", "--prior", "uniform:0,1", "--noise", "fixed:-1", "--n", "5"]) == 2


def test_cv_command_round_trip(medium_data, tmp_path, capsys):
    out = tmp_path / "cv.csv"
    assert main(["cv", medium_data, "--orders", "3,6", "--gmm-k", "2", "--splits", "2",
                 "--workers", "1", "--out", str(out)]) == 0
    rows = cv_from_csv(out.read_text())
    assert [r["candidate"] for r in rows] == ["3", "3", "6", "6", "K2", "K2"]
    assert "loglik selects" in capsys.readouterr().err


def test_bootstrap_deterministic_and_round_trip(medium_data, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert main(["bootstrap", medium_data, "--order", "6", "-B", "2", "--grid", "30",
                     "--workers", "1", "--out", str(p)]) == 0
    assert a.read_text() == b.read_text()
    x, est, lo, hi = bands_from_csv(a.read_text())
    assert x.size == 30 and np.all(lo <= hi)


def test_bootstrap_failures_exit_3(medium_data, monkeypatch):
    real = cli.fit_dataset
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] > 2:
            raise RuntimeError("solver diverged")
        return real(*args, **kw)

    monkeypatch.setattr(cli, "fit_dataset", flaky)
    assert main(["bootstrap", medium_data, "--order", "4", "-B", "5", "--workers", "1"]) == 3


def test_bootstrap_needs_two_replicates(medium_data):
    assert main(["bootstrap", medium_data, "--order", "4", "-B", "1"]) == 2


@pytest.mark.slow
def test_bootstrap_bands_narrow_with_more_data(tmp_path):
    from specteb.cli import bootstrap_bands
    from specteb.core import make_domain
    from specteb.mle import FitConfig

    widths = []
    for n in (200, 1600):
        data = sample_experiments(PriorSpec.uniform(-1, 1), n, NoiseLaw.uniform(0.05, 0.2), seed=1)
        dom = make_domain((data.delta_hat, data.s), 1.5, 0.0)
        _, _, lo, hi, _ = bootstrap_bands(data.delta_hat, data.s, dom, FitConfig(N=8), 40, seed=0,
                                          grid_size=50, workers=1)
        widths.append(float(np.mean(hi - lo)))
    assert widths[1] < widths[0]
