"""Fast invariant checks behind ``pcrlab selftest``."""

from __future__ import annotations

import sys
import time
from typing import Callable, TextIO

import numpy as np
from scipy import stats

from . import experiments, models, pcrtest, rmt
from .linalg import chi1_upper_quantile, noncentral_chi1_cdf, noncentral_chi1_sf

Check = Callable[[], tuple[bool, str]]


def check_quantile_inversion() -> tuple[bool, str]:
    alphas = np.linspace(0.001, 0.999, 50)
    err = max(abs(noncentral_chi1_sf(chi1_upper_quantile(a), 0.0) - a) for a in alphas)
    return err <= 1e-9, f"max |sf(quantile(a), 0) - a| = {err:.2e}"


def check_sf_against_scipy() -> tuple[bool, str]:
    ts = np.linspace(0.1, 20, 12)
    ks = np.linspace(0.0, 15, 12)
    tt, kk = np.meshgrid(ts, ks)
    ref = np.where(kk == 0, stats.chi2.sf(tt, 1), stats.ncx2.sf(tt, 1, np.maximum(kk, 1e-300)))
    err = float(np.max(np.abs(noncentral_chi1_sf(tt, kk) - ref)))
    return err <= 1e-8, f"max deviation from scipy ncx2 = {err:.2e}"


def check_conditional_law(variant: str) -> Callable[[], tuple[bool, str]]:
    def run() -> tuple[bool, str]:
        rng = np.random.default_rng(20240601)
        n, p, k = 200, 100, 1
        spec = models.SpikeSpec.single(4.0, models.random_unit_vector(p, rng))
        w = models.gen_spiked(n, p, spec, rng)
        theta = spec.vectors[:, 0]
        a = models.gen_exposure_linear(w, theta, 1.0, rng)
        beta = 0.3 * theta + 0.05 * rng.standard_normal(p)
        adj = pcrtest.adjust_exposure(a, w, k, variant)
        k2 = pcrtest.kappa2_from_adjusted(adj, w, a, beta, 0.0)
        ys = (w @ beta)[:, None] + rng.standard_normal((n, 2000))
        lr = pcrtest.statistic(ys, adj)
        res = stats.kstest(lr, lambda x: noncentral_chi1_cdf(x, k2))
        return res.pvalue > 0.01, f"kappa2={k2:.3g}, KS p-value={res.pvalue:.3f}"

    return run


def check_psi_prime() -> tuple[bool, str]:
    worst = 0.0
    for atoms in (((1.0, 1.0),), ((0.5, 0.3), (1.0, 0.5), (2.0, 0.2))):
        for gamma in (0.3, 1.0, 2.5):
            law = rmt.SpectralLaw(atoms, gamma)
            for alpha in (2.7, 4.0, 9.0, 30.0):
                h = 1e-6
                fd = (rmt.psi(alpha + h, law) - rmt.psi(alpha - h, law)) / (2 * h)
                an = rmt.psi_prime(alpha, law)
                worst = max(worst, abs(fd - an) / max(abs(an), 1e-12))
    return worst <= 1e-4, f"max relative gap to finite differences = {worst:.2e}"


def check_phi_paths() -> tuple[bool, str]:
    worst = 0.0
    for gamma in (0.5, 1.0, 2.0):
        law = rmt.SpectralLaw.point_mass(gamma)
        for lam in (3.0, 6.0, 20.0):
            if lam <= gamma**0.5:
                continue
            for r in (1, 2):
                worst = max(worst, abs(rmt.phi(r, 1 + lam, law) - rmt.phi_classical(r, lam, gamma)))
    return worst <= 1e-12, f"max |general - classical| = {worst:.2e}"


def check_power_identity() -> tuple[bool, str]:
    # for K = s (Z + mu)^2 the mixture is again a scaled noncentral chi-square,
    # P(chi2_1(K) > t) = P((1+s) chi2_1(s mu^2/(1+s)) > t)
    t = chi1_upper_quantile(0.05)
    worst = 0.0
    for scale, ncp in ((0.3, 0.0), (1.2, 0.5), (3.0, 4.0)):
        q = rmt.asymptotic_power(t, rmt.LimitLaw(scale, ncp))
        exact = noncentral_chi1_sf(t / (1 + scale), scale * ncp / (1 + scale))
        worst = max(worst, abs(q - exact))
    return worst <= 1e-6, f"max |quadrature - closed form| = {worst:.2e}"


def _small_config() -> experiments.ExperimentConfig:
    return experiments.ExperimentConfig(
        experiments.Variant.OUT, experiments.Model.SPIKED, 60, 40, reps=15, tau0_grid=(0.0, 0.5, 1.0)
    )


def check_determinism() -> tuple[bool, str]:
    cfg = _small_config()
    first = experiments.run_experiment(cfg).to_csv()
    second = experiments.run_experiment(cfg).to_csv()
    same = first == second
    return same, "repeated run is byte-identical" if same else "repeated run differs"


CHECKS: list[tuple[str, Check]] = [
    ("quantile_sf_inversion", check_quantile_inversion),
    ("noncentral_sf_reference", check_sf_against_scipy),
    ("conditional_law_out", check_conditional_law("out")),
    ("conditional_law_in", check_conditional_law("in")),
    ("psi_prime_finite_difference", check_psi_prime),
    ("phi_general_vs_classical", check_phi_paths),
    ("asymptotic_power_identity", check_power_identity),
    ("determinism", check_determinism),
]


def run_selftest(stream: TextIO = sys.stdout, checks: list[tuple[str, Check]] | None = None) -> bool:
    """Print one PASS/FAIL line per check; True iff every check passes."""
    ok = True
    for name, fn in CHECKS if checks is None else checks:
        start = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crash is a failure, reported not raised
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        ms = (time.perf_counter() - start) * 1000
        stream.write(f"{'PASS' if passed else 'FAIL'} {name}: {detail} [{ms:.0f} ms]\n")
        ok = ok and passed
    stream.write(("all checks passed" if ok else "some checks FAILED") + "\n")
    return ok
