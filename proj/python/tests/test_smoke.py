import json
import math

import numpy as np
import pytest

import sdelab


def gaussian_target(mean=1.0, var=0.5, d=2):
    return sdelab.GaussianMixture([1.0], np.full((1, d), mean), [var])


def test_vp_schedule_closed_form():
    model = sdelab.DiffusionModel.from_config({"kind": "VP", "d": 2, "T": 1.0})
    assert model.kind == "VP"
    assert model.dim == 2
    # int_0^1 (0.1 + 19.9 t) dt
    assert model.beta_integral(1.0) == pytest.approx(10.05)
    assert model.mean_factor(1.0) == pytest.approx(math.exp(-10.05 / 2))


def test_oracle_score_of_gaussian():
    model = sdelab.DiffusionModel.from_config({"kind": "OU", "d": 2})
    field = sdelab.OracleScore(gaussian_target(mean=0.0, var=1.0), model)
    # OU with theta 1, sigma sqrt 2 keeps N(0, I) stationary
    x = np.array([[1.0, -2.0], [0.5, 0.0]])
    np.testing.assert_allclose(field(0.7, x), -x, atol=1e-12)


def test_exact_sampler_recovers_gaussian():
    model = sdelab.DiffusionModel.from_config({"kind": "VP", "d": 2})
    target = gaussian_target()
    field = sdelab.OracleScore(target, model)
    x = sdelab.sample(model, field, 20000, {"steps": 200, "seed": 3})
    assert x.shape == (20000, 2)
    w2 = sdelab.fitted_w2(x, np.full(2, 1.0), 0.5)
    assert w2["value"] < 0.1


def test_sampling_is_reproducible():
    model = sdelab.DiffusionModel.from_config({"kind": "VE", "d": 1})
    field = sdelab.OracleScore(gaussian_target(d=1), model)
    a = sdelab.sample(model, field, 100, {"steps": 50, "seed": 9})
    b = sdelab.sample(model, field, 100, {"steps": 50, "seed": 9})
    np.testing.assert_array_equal(a, b)


def test_training_reduces_esm():
    model = sdelab.DiffusionModel.from_config({"kind": "VP", "d": 1})
    target = gaussian_target(d=1)
    field = sdelab.LearnedScore.init(model, "raw", seed=1, width=16)
    before, _ = sdelab.weighted_esm(field, target, model, n=4000, seed=2)
    trace = sdelab.train(field, target, {"iterations": 300, "learning_rate": 3e-3, "seed": 4})
    after, _ = sdelab.weighted_esm(field, target, model, n=4000, seed=2)
    assert len(trace) > 0
    assert after < before


def test_metrics_closed_forms():
    assert sdelab.w2_gaussian(np.zeros(2), 1.0, np.ones(2), 1.0) == pytest.approx(math.sqrt(2.0))
    assert sdelab.kl_gaussian(np.zeros(1), 1.0, np.zeros(1), 1.0) == pytest.approx(0.0)
    x = gaussian_target().sample(5000, seed=1)
    assert sdelab.sliced_w2(x, x)["value"] == pytest.approx(0.0, abs=1e-12)
    assert sdelab.tv_histogram(x, x)["value"] == pytest.approx(0.0, abs=1e-12)


def test_coupling_sweep_report():
    report = sdelab.run_sweep({"experiment": "consistency_coupling", "values": [0.1, 0.2], "n": 2000, "seed": 1})
    assert report["rows"]
    assert all("value" in row for row in report["rows"])
    assert isinstance(report["passed"], bool)


def test_errors_carry_module_prefix():
    with pytest.raises(sdelab.SdelabError, match="unknown key"):
        sdelab.DiffusionModel.from_config({"knd": "VP"})
    with pytest.raises(sdelab.SdelabError):
        sdelab.DiffusionModel.from_config({"kind": "nope"})


def test_cli_in_process(tmp_path):
    code = sdelab.cli(["--out", str(tmp_path), "--set", "n=50", "--set", "steps=20", "--set",
                       "target_means=0,0", "--set", "target_weights=1", "--set", "target_variances=1", "sample"])
    assert code == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "sample"
    assert (tmp_path / "samples.csv").exists()
