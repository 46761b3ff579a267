from __future__ import annotations

import csv
import io
import json
import math

import jsonschema
import numpy as np
import pytest

from pcrlab import InvalidSpec
from pcrlab import experiments as ex
from pcrlab import models, pcrtest, rmt
from pcrlab.experiments import ExperimentConfig, Model, Variant
from pcrlab.linalg import chi1_upper_quantile

GOLDEN_HEADER = (
    "variant,model,exposure,n,p,k,alpha,tau0,beta_mode,theta_mode,h,reps,degenerate,"
    "rejections,rate,mc_se,theory_rate,seed"
)


def small(**kw) -> ExperimentConfig:
    base = dict(variant="out", model="spiked", n=40, p=30, reps=6, tau0_grid=(0.0, 0.5, 1.0))
    base.update(kw)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------- config


def test_default_modes():
    assert small().modes == (("fixed", "fixed"), ("fixed", "random"), ("random", "fixed"), ("random", "random"))
    assert small(variant="in").modes == (("fixed", "none"), ("random", "none"))


@pytest.mark.parametrize(
    "kw",
    [
        dict(k=30),
        dict(variant="in", model="gauss_mixture"),
        dict(variant="in", modes=[("fixed", "fixed")]),
        dict(modes=[("fixed", "none")]),
        dict(modes=[("fixed", "fixed"), ("fixed", "fixed")]),
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(InvalidSpec):
        small(**kw)


def test_dict_round_trip():
    cfg = small(angle_tau="inf", spike_strength=4.0, modes=[("random", "fixed")], h=0.5)
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.angle == math.inf


@pytest.mark.parametrize(
    "patch",
    [
        {"bogus": 1},
        {"n": "forty"},
        {"alpha": 1.5},
        {"model": "student"},
        {"tau0_grid": []},
        {"modes": [["fixed"]]},
    ],
)
def test_schema_rejects(patch):
    data = small().to_dict()
    data.update(patch)
    with pytest.raises(jsonschema.ValidationError):
        ExperimentConfig.from_dict(data)


def test_schema_minimal_document():
    cfg = ExperimentConfig.from_dict({"variant": "out", "model": "spiked", "n": 50, "p": 25})
    assert cfg.reps == 2000 and cfg.tau0_grid == ex.TAU0_GRID and cfg.master_seed == ex.DEFAULT_SEED


# ---------------------------------------------------------------- setups


def test_setup_spiked_fixed_coefficients():
    cfg = small(p=200, n=100)
    s = ex.make_setup(cfg, 0.5)
    assert s.strength == pytest.approx(200**0.5)
    assert np.allclose(s.fixed_beta, s.fixed_theta)
    assert models.subspace_distance(s.fixed_beta, s.directions[:, :1]) == pytest.approx(
        1 - models.angle_weight(200, 0.5) ** 2)
    # directions are shared across tau0 values
    assert np.array_equal(ex.make_setup(cfg, 0.9).directions, s.directions)


def test_setup_fixed_angle_and_strength():
    s = ex.make_setup(small(angle_tau="inf", spike_strength=4.0), 0.1)
    assert s.strength == 4.0
    assert np.allclose(s.fixed_beta, s.directions[:, 0])


def test_setup_in_variant_uses_population_ls():
    cfg = small(variant="in")
    s = ex.make_setup(cfg, 0.6)
    cov = s.spike.covariance()
    assert s.spike.p == cfg.p + 1
    assert np.allclose(s.fixed_beta, np.linalg.solve(cov[1:, 1:], cov[1:, 0]))


@pytest.mark.parametrize("model", ["gauss_mixture", "binom_mixture"])
def test_setup_mixture(model):
    s = ex.make_setup(small(model=model, exposure="linear"), 0.5)
    assert s.mixture.m == models.mixture_size(30, 0.5)
    assert np.allclose(s.directions.T @ s.directions, np.eye(2), atol=1e-12)


# ---------------------------------------------------------------- replications


def test_replication_matches_direct_test():
    cfg = small()
    setup = ex.make_setup(cfg, 0.5)
    draws = ex.simulate_replication(cfg, setup, 1, 3)
    # rebuild the fixed-fixed dataset from the documented streams
    w = models.gen_spiked(cfg.n, cfg.p, setup.spike, ex._rng(cfg.master_seed, 1, 3, 0))
    a = models.gen_exposure_linear(w, setup.fixed_theta, 1.0, ex._rng(cfg.master_seed, 1, 3, 1))
    y = w @ setup.fixed_beta + ex._rng(cfg.master_seed, 1, 3, 4).standard_normal(cfg.n)
    ref = pcrtest.run_test(y, a, w, 1, "out", beta=setup.fixed_beta)
    got = draws[0].outcome
    assert got.statistic == pytest.approx(ref.statistic, rel=1e-9)
    assert got.kappa2 == pytest.approx(ref.kappa2, rel=1e-9)
    assert got.reject == ref.reject


def test_modes_use_common_random_numbers():
    full = small()
    only = small(modes=[("random", "random")])
    r_full = ex.run_experiment(full, keep_draws=True)
    r_only = ex.run_experiment(only, keep_draws=True)
    for tau in full.tau0_grid:
        assert np.array_equal(r_full.cell(tau, "random", "random").statistics,
                              r_only.cell(tau, "random", "random").statistics)


def test_run_cell_matches_experiment():
    cfg = small()
    res = ex.run_experiment(cfg, keep_draws=True)
    out = ex.run_cell(cfg, 2, 4, ("fixed", "random"))
    assert out.statistic == res.cell(1.0, "fixed", "random").statistics[4]


def test_in_variant_runs_and_counts():
    res = ex.run_experiment(small(variant="in"))
    assert len(res.cells) == 6
    for c in res.cells:
        assert c.rejections + c.degenerate <= c.reps


def test_degenerate_draws_counted():
    # a zero exposure coefficient and no exposure noise leave A identically zero
    cfg = small(sigma_g=0.0, sigma_theta=0.0, modes=[("fixed", "random")], tau0_grid=(1.0,))
    c = ex.run_experiment(cfg).cells[0]
    assert c.degenerate == c.reps
    assert math.isnan(c.rate)


def test_null_model_has_nominal_size():
    cfg = small(n=100, p=50, reps=1500, sigma_beta=0.0, sigma_theta=0.0, modes=[("random", "random")],
                tau0_grid=(0.5,))
    c = ex.run_experiment(cfg).cells[0]
    assert abs(c.rate - 0.05) < 4 * math.sqrt(0.05 * 0.95 / c.valid)


# ---------------------------------------------------------------- determinism and output


def test_csv_format():
    text = ex.run_experiment(small()).to_csv()
    lines = text.split("\n")
    assert lines[0] == GOLDEN_HEADER
    assert text.endswith("\n") and "\r" not in text
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 12
    ff = rows[0]
    assert ff["theory_rate"] == "" and ff["seed"] == str(ex.DEFAULT_SEED)
    assert rows[2]["theory_rate"] != ""
    assert int(ff["rejections"]) <= int(ff["reps"])


def test_format_csv_values():
    row = {c: None for c in ex.CSV_COLUMNS}
    row.update(rate=1 / 3, n=np.int64(5), variant="out")
    line = ex.format_csv([row]).split("\n")[1]
    assert line.startswith("out,,,5,")
    assert ",0.333333," in line


def test_seed_determinism():
    a = ex.run_experiment(small()).to_csv()
    b = ex.run_experiment(small()).to_csv()
    c = ex.run_experiment(small(master_seed=7)).to_csv()
    assert a == b
    assert a != c


def test_threads_do_not_change_results():
    cfg = small(model="binom_mixture", exposure="binomial_logistic")
    assert ex.run_experiment(cfg, threads=1).to_csv() == ex.run_experiment(cfg, threads=3).to_csv()


def test_progress_callback():
    seen = []
    ex.run_experiment(small(), progress=lambda i, n: seen.append((i, n)))
    assert seen == [(1, 3), (2, 3), (3, 3)]


# ---------------------------------------------------------------- theory overlay


def test_overlay_only_for_random_beta_spiked():
    cfg = small()
    assert ex.overlay_theory(cfg, 0.5, ("fixed", "fixed")) is None
    assert ex.overlay_theory(small(model="gauss_mixture"), 0.5, ("random", "fixed")) is None
    assert ex.overlay_theory(small(variant="in"), 0.5, ("random", "none")) is None


def test_overlay_both_random_value():
    cfg = small(sigma_y=2.0, h=1.0)
    law = rmt.kappa2_limit_law("both_random", gamma=cfg.gamma, m1=1.0, m2=1.0 + cfg.gamma,
                               sigma2_beta=0.25, h=0.5)
    expected = rmt.asymptotic_power(chi1_upper_quantile(0.05), law)
    assert ex.overlay_theory(cfg, 0.3, ("random", "random")) == pytest.approx(expected)


def test_overlay_fixed_theta_uses_spike_projection():
    cfg = small(angle_tau="inf", spike_strength=4.0)
    law_h = rmt.SpectralLaw.point_mass(cfg.gamma)
    sc = rmt.scenario_constants([5.0], law_h, [1.0])
    law = rmt.kappa2_limit_law("beta_random_theta_fixed", gamma=cfg.gamma, m1=1.0, m2=1.0 + cfg.gamma,
                               c0=sc.c0, c4=sc.c4)
    assert ex.overlay_theory(cfg, 0.2, ("random", "fixed")) == pytest.approx(
        rmt.asymptotic_power(chi1_upper_quantile(0.05), law))


# ---------------------------------------------------------------- presets and manifest


def test_figure_presets():
    f1 = ex.figure_presets("fig1", "desk")
    assert len(f1) == 6
    for name, cfg in f1.items():
        assert cfg.p == 200 and cfg.reps == 500
        assert cfg.n == (100 if name.endswith("gamma2") else 400)
        assert len(cfg.tau0_grid) * len(cfg.modes) == 84
    assert f1["fig1_binom_mixture_binomial_logistic_gamma2"].exposure is ex.Exposure.BINOMIAL_LOGISTIC
    f2 = ex.figure_presets("fig2", "paper", reps=3)
    assert sorted(f2) == ["fig2_in_spiked_gamma0.5", "fig2_in_spiked_gamma2"]
    assert all(c.p == 1000 and c.reps == 3 and c.variant is Variant.IN for c in f2.values())
    with pytest.raises(InvalidSpec):
        ex.figure_presets("fig3", "desk")
    with pytest.raises(InvalidSpec):
        ex.figure_presets("fig1", "huge")


def test_manifest_hashes():
    cfgs = {"a": small()}
    m = ex.manifest(cfgs, {"a.csv": "x\n"})
    # git's blob hash of "x\n" (from `git hash-object`)
    assert m["outputs"]["a.csv"] == "587be6b4c3f93f93c489c0111bba5596147a26cb"
    assert m["master_seed"] == ex.DEFAULT_SEED
    assert m["config_sha1"] == ex.manifest({"a": small()}, {})["config_sha1"]
    assert m["config_sha1"] != ex.manifest({"a": small(reps=7)}, {})["config_sha1"]
