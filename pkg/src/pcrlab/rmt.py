"""Asymptotic quantities for spiked sample covariance matrices.

The bulk law ``H`` of the non-spike population eigenvalues is restricted
to finitely many atoms, so every integral against ``H`` is a finite sum.
Spike arguments are *population eigenvalues* of Sigma (for the classical
model ``Sigma = I + lam v v^T`` the spike is ``alpha = 1 + lam``); the
``*_classical`` helpers take the additive strength ``lam`` instead.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate

from .errors import InvalidInput, NotApplicable, NotAvailable, SingularityError
from .linalg import noncentral_chi1_sf

__all__ = [
    "SpectralLaw",
    "SpikeClass",
    "psi",
    "psi_prime",
    "classify_spike",
    "bbp_threshold",
    "xi",
    "phi",
    "phi_bulk",
    "phi_classical",
    "mp_moments",
    "ScenarioConstants",
    "scenario_constants",
    "scenario_constants_random",
    "alternate_constants",
    "LimitLaw",
    "kappa2_limit_law",
    "asymptotic_power",
    "estimate_c1",
    "LimitCoefficients",
    "limit_coefficients",
]


@dataclass(frozen=True)
class SpectralLaw:
    """Atomic limiting spectral law ``H`` together with the aspect ratio ``gamma = p/n``."""

    atoms: tuple[tuple[float, float], ...]
    gamma: float

    def __post_init__(self):
        if self.gamma <= 0 or not math.isfinite(self.gamma):
            raise InvalidInput(f"gamma must be positive, got {self.gamma}")
        if not self.atoms:
            raise InvalidInput("spectral law needs at least one atom")
        vals = [float(v) for v, _ in self.atoms]
        ws = [float(w) for _, w in self.atoms]
        if any(v <= 0 for v in vals) or any(w < 0 for w in ws):
            raise InvalidInput("atom values must be positive and weights nonnegative")
        if abs(sum(ws) - 1.0) > 1e-9:
            raise InvalidInput(f"atom weights must sum to 1, got {sum(ws)}")
        object.__setattr__(self, "atoms", tuple(zip(vals, ws)))

    @classmethod
    def point_mass(cls, gamma: float, value: float = 1.0) -> "SpectralLaw":
        return cls(((value, 1.0),), gamma)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for v, _ in self.atoms])

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.atoms])

    @property
    def support_max(self) -> float:
        return float(self.values.max())

    def moment(self, r: int) -> float:
        return float(np.sum(self.weights * self.values**r))

    def is_unit_point_mass(self) -> bool:
        return len(self.atoms) == 1 and self.atoms[0][0] == 1.0


class SpikeClass(str, enum.Enum):
    DISTANT = "distant"
    CLOSE = "close"


def _gaps(alpha: float, law: SpectralLaw) -> np.ndarray:
    if alpha == 0:
        raise SingularityError("psi is undefined at 0")
    g = alpha - law.values
    if np.any(np.abs(g) <= 1e-12 * max(1.0, abs(alpha))):
        raise SingularityError(f"alpha={alpha} lies on an atom of H")
    return g


def psi(alpha: float, law: SpectralLaw) -> float:
    """``psi(a) = a + gamma a sum_i w_i l_i / (a - l_i)``: where a population spike lands."""
    g = _gaps(alpha, law)
    return float(alpha + law.gamma * alpha * np.sum(law.weights * law.values / g))


def psi_prime(alpha: float, law: SpectralLaw) -> float:
    g = _gaps(alpha, law)
    w, l = law.weights, law.values
    # d/da [a l/(a-l)] = -l^2/(a-l)^2
    return float(1.0 - law.gamma * np.sum(w * l * l / g**2))


def _psi_integrals(alpha: float, law: SpectralLaw) -> tuple[float, float]:
    g = _gaps(alpha, law)
    w, l = law.weights, law.values
    return float(np.sum(w * l / g)), float(np.sum(w * l / g**2))


def classify_spike(alpha: float, law: SpectralLaw) -> SpikeClass:
    """Distant when ``psi'(alpha) > 0``; the boundary itself counts as close."""
    return SpikeClass.DISTANT if psi_prime(alpha, law) > 0 else SpikeClass.CLOSE


def bbp_threshold(law: SpectralLaw) -> float:
    """Smallest population eigenvalue above ``sup H`` that is a distant spike.

    Root of ``psi'`` on ``(sup H, inf)`` found by bracketing; for ``H = delta_1``
    it equals ``1 + sqrt(gamma)``.
    """
    from scipy.optimize import brentq

    top = law.support_max
    lo = top * (1 + 1e-12) + 1e-300
    hi = top + 1.0
    while psi_prime(hi, law) <= 0:
        hi = top + 2 * (hi - top)
    while psi_prime(lo, law) > 0:
        lo = top + (lo - top) / 2
    return float(brentq(lambda a: psi_prime(a, law), lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps))


def _require_distant(alpha: float, law: SpectralLaw) -> None:
    if classify_spike(alpha, law) is not SpikeClass.DISTANT:
        raise NotApplicable(f"spike {alpha} is a close spike (psi' <= 0)")


def xi(r: int, alpha: float, law: SpectralLaw) -> float:
    """Limit of ``lhat_j^r <s1, vhat_j><vhat_j, s2> / <s1, v_j><v_j, s2>`` for a distant spike."""
    if r not in (1, 2):
        raise InvalidInput(f"r must be 1 or 2, got {r}")
    _require_distant(alpha, law)
    return alpha * psi(alpha, law) ** (r - 1) * psi_prime(alpha, law)


def phi_bulk(r: int, eigenvalue: float, law: SpectralLaw) -> float:
    """Non-spike branch: ``l`` for r=1 and ``l^2 + gamma l int x dH`` for r=2."""
    if r == 1:
        return float(eigenvalue)
    if r == 2:
        return float(eigenvalue**2 + law.gamma * eigenvalue * law.moment(1))
    raise InvalidInput(f"r must be 1 or 2, got {r}")


def phi(r: int, alpha: float, law: SpectralLaw) -> float:
    """Weight of the direction ``v_j`` in the limit of ``sum_{j>k*} lhat_j^r <s1,vhat_j><vhat_j,s2>``.

    For a distant spike the weight is what is left of ``s^T Sigma_hat^r s``
    after the top sample component takes its share ``xi``:
    ``r=1: alpha (1 - psi')`` and ``r=2: alpha^2 + gamma alpha int x dH - alpha psi psi'``.
    Close spikes are indistinguishable from the bulk and use the non-spike branch.
    """
    if r not in (1, 2):
        raise InvalidInput(f"r must be 1 or 2, got {r}")
    if classify_spike(alpha, law) is SpikeClass.CLOSE:
        return phi_bulk(r, alpha, law)
    dpsi = psi_prime(alpha, law)
    if r == 1:
        return alpha * (1.0 - dpsi)
    return alpha**2 + law.gamma * alpha * law.moment(1) - alpha * psi(alpha, law) * dpsi


def phi_classical(r: int, lam: float, gamma: float, spike: bool = True) -> float:
    """Closed forms for ``Sigma = I + lam v v^T`` (bulk ``delta_1``), additive strength ``lam``."""
    if not spike:
        return 1.0 if r == 1 else 1.0 + gamma
    base = gamma * (lam + 1.0) / lam**2
    if r == 1:
        return base
    if r == 2:
        return base + gamma**2 * (lam + 1.0) ** 2 / lam**3
    raise InvalidInput(f"r must be 1 or 2, got {r}")


def mp_moments(law: SpectralLaw) -> tuple[float, float]:
    """Limits of ``(1/p) sum lhat_j`` and ``(1/p) sum lhat_j^2``.

    Eigenvalues beyond rank ``n`` are zero, so the truncated sums divided
    by ``p`` equal the normalized traces for every gamma:
    ``m1 = int x dH`` and ``m2 = int x^2 dH + gamma (int x dH)^2``.
    """
    m1 = law.moment(1)
    return m1, law.moment(2) + law.gamma * m1 * m1


@dataclass(frozen=True)
class ScenarioConstants:
    c0: float
    c4: float


def scenario_constants(
    spikes: Sequence[float],
    law: SpectralLaw,
    spike_projections: Sequence[float],
    norm2: float = 1.0,
) -> ScenarioConstants:
    """``c0`` and ``c4`` for a fixed exposure coefficient ``theta``.

    ``spike_projections[j]`` is ``<theta, v_j>^2``.  The part of ``theta``
    outside the spike span is taken to spread over the bulk eigenspaces in
    proportion to ``H``; for ``H = delta_1`` this is exact.
    """
    spikes = list(spikes)
    proj = [float(x) for x in spike_projections]
    if len(proj) != len(spikes):
        raise InvalidInput("need one projection per spike")
    rest = float(norm2) - sum(proj)
    if rest < -1e-12:
        raise InvalidInput("spike projections exceed ||theta||^2")
    rest = max(rest, 0.0)
    m1, m2 = mp_moments(law)
    c0 = sum(phi(1, a, law) * q for a, q in zip(spikes, proj)) + m1 * rest
    s2 = sum(phi(2, a, law) * q for a, q in zip(spikes, proj)) + m2 * rest
    return ScenarioConstants(c0, s2 / law.gamma)


def scenario_constants_random(law: SpectralLaw, variance: float = 1.0) -> ScenarioConstants:
    """``c0, c4`` averaged over ``theta ~ (0, variance I/p)``: ``variance*m1`` and ``variance*m2/gamma``."""
    m1, m2 = mp_moments(law)
    return ScenarioConstants(variance * m1, variance * m2 / law.gamma)


def alternate_constants(lam: float, gamma: float) -> ScenarioConstants:
    """Alternative closed forms for ``Sigma = I + lam e1 e1^T`` with ``theta = e1``.

    They lack a factor of gamma in ``c0`` (and one of ``1/gamma`` in
    ``c4``) relative to the general coefficient formulas.  Kept so both can
    be reported next to simulation.
    """
    c0 = (lam + 1.0) / lam**2
    c4 = gamma * (lam + 1.0) / lam**2 + gamma**2 * (lam + 1.0) ** 2 / lam**3
    return ScenarioConstants(c0, c4)


@dataclass(frozen=True)
class LimitLaw:
    """``scale * chi2_1(ncp)``, the limiting law of the conditional noncentrality."""

    scale: float
    ncp: float

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        z = rng.standard_normal(size) + math.sqrt(self.ncp)
        return self.scale * z * z

    def mean(self) -> float:
        return self.scale * (1.0 + self.ncp)


SCENARIOS = ("beta_random_theta_fixed", "beta_fixed_theta_random", "both_random")


def _law_from_moments(mean: float, var: float, denom: float) -> LimitLaw:
    # T1/sqrt(n) -> N(mean, var), T2/n -> denom, kappa2 = T1^2/T2
    if denom <= 0:
        raise InvalidInput("denominator limit must be positive")
    if var <= 0:
        return LimitLaw(0.0, 0.0) if mean == 0 else LimitLaw(mean * mean / denom, 0.0)
    return LimitLaw(var / denom, mean * mean / var)


def kappa2_limit_law(
    scenario: str,
    *,
    gamma: float,
    m1: float,
    m2: float,
    sigma2_beta: float = 1.0,
    sigma2_theta: float = 1.0,
    sigma2_g: float = 1.0,
    h: float = 0.0,
    c0: float | None = None,
    c4: float | None = None,
    c1: float | None = None,
) -> LimitLaw:
    """Limit law of the conditional noncentrality of the out-of-PCA statistic.

    ``beta_random_theta_fixed`` needs ``c0, c4``; ``beta_fixed_theta_random``
    needs the empirical constant ``c1`` (limit of ``T3/n``) and raises
    ``NotAvailable`` without it.
    """
    if scenario == "beta_random_theta_fixed":
        if c0 is None or c4 is None:
            raise InvalidInput("beta_random_theta_fixed needs c0 and c4")
        denom = c0 + sigma2_g
        return _law_from_moments(h * denom, sigma2_beta * (sigma2_g * m1 + c4), denom)
    if scenario == "beta_fixed_theta_random":
        if c1 is None:
            raise NotAvailable(
                "beta_fixed_theta_random has no closed-form variance constant C1; "
                "supply an empirical estimate (see estimate_c1)"
            )
        denom = sigma2_theta * m1 + sigma2_g
        return _law_from_moments(h * denom, c1, denom)
    if scenario == "both_random":
        denom = sigma2_theta * m1 + sigma2_g
        var = sigma2_beta * (sigma2_g * m1 + sigma2_theta * m2 / gamma)
        return _law_from_moments(h * denom, var, denom)
    raise InvalidInput(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")


def asymptotic_power(t: float, law: LimitLaw, *, epsabs: float = 1e-10) -> float:
    """``E[P(chi2_1(K) > t)]`` for ``K ~ law`` by adaptive quadrature.

    Writes ``K = scale (Z + sqrt ncp)^2`` and integrates the smooth
    integrand against the normal density.
    """
    if t < 0:
        raise InvalidInput("t must be nonnegative")
    if law.scale == 0:
        return float(noncentral_chi1_sf(t, 0.0))
    mu = math.sqrt(law.ncp)
    rs, rt = math.sqrt(law.scale), math.sqrt(t)
    norm = 1.0 / math.sqrt(2 * math.pi)
    root2 = math.sqrt(2.0)

    def integrand(z):
        # the noncentral tail at ncp = s (z + mu)^2, written out in scalar math for speed
        rk = rs * abs(z + mu)
        sf = 0.5 * (math.erfc((rt - rk) / root2) + math.erfc((rt + rk) / root2))
        return norm * math.exp(-0.5 * z * z) * sf

    # centre the range on the kink-free bulk around -mu
    pts = (-mu,)
    lo, hi = -mu - 12.0, -mu + 12.0
    val, _ = integrate.quad(integrand, lo, hi, points=pts, epsabs=epsabs, epsrel=1e-10, limit=200)
    return float(min(max(val, 0.0), 1.0))


def estimate_c1(kappa2_draws: Sequence[float], *, m1: float, sigma2_theta: float = 1.0, sigma2_g: float = 1.0) -> float:
    """Moment estimate of ``C1`` from null draws of the noncentrality.

    At ``h = 0`` the limit law is ``C1/D chi2_1`` with ``D = sigma2_theta m1 + sigma2_g``,
    so ``C1 = D * mean(kappa2)``.
    """
    k = np.asarray(kappa2_draws, dtype=float)
    if k.size == 0:
        raise InvalidInput("need at least one draw")
    return float((sigma2_theta * m1 + sigma2_g) * k.mean())


@dataclass
class LimitCoefficients:
    gamma: float
    spikes: list[float]
    bulk: list[tuple[float, float]]
    psi_at_spikes: list[float]
    psi_prime_at_spikes: list[float]
    xi: list[list[float]]
    phi1_spikes: list[float]
    phi2_spikes: list[float]
    phi1_bulk: list[float]
    phi2_bulk: list[float]
    m1: float
    m2: float
    c0: float | None = None
    c4: float | None = None
    alternate: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "gamma": self.gamma,
            "spikes": self.spikes,
            "bulk": [list(a) for a in self.bulk],
            "psi_at_spikes": self.psi_at_spikes,
            "psi_prime_at_spikes": self.psi_prime_at_spikes,
            "xi": self.xi,
            "phi1": {"spikes": self.phi1_spikes, "bulk": self.phi1_bulk},
            "phi2": {"spikes": self.phi2_spikes, "bulk": self.phi2_bulk},
            "m1": self.m1,
            "m2": self.m2,
            "c0": self.c0,
            "c4": self.c4,
        }
        if self.alternate:
            out["alternate_closed_form"] = dict(self.alternate)
        return out


def limit_coefficients(
    spikes: Sequence[float],
    law: SpectralLaw,
    spike_projections: Sequence[float] | None = None,
    norm2: float = 1.0,
) -> LimitCoefficients:
    """Every coefficient for a set of distant spikes; raises ``NotApplicable`` on a close one."""
    spikes = [float(a) for a in spikes]
    for a in spikes:
        if a <= law.support_max:
            raise NotApplicable(f"spike {a} does not exceed sup H = {law.support_max}")
        _require_distant(a, law)
    m1, m2 = mp_moments(law)
    coeffs = LimitCoefficients(
        gamma=law.gamma,
        spikes=spikes,
        bulk=list(law.atoms),
        psi_at_spikes=[psi(a, law) for a in spikes],
        psi_prime_at_spikes=[psi_prime(a, law) for a in spikes],
        xi=[[xi(r, a, law) for a in spikes] for r in (1, 2)],
        phi1_spikes=[phi(1, a, law) for a in spikes],
        phi2_spikes=[phi(2, a, law) for a in spikes],
        phi1_bulk=[phi_bulk(1, v, law) for v in law.values],
        phi2_bulk=[phi_bulk(2, v, law) for v in law.values],
        m1=m1,
        m2=m2,
    )
    if spike_projections is not None:
        sc = scenario_constants(spikes, law, spike_projections, norm2)
        coeffs.c0, coeffs.c4 = sc.c0, sc.c4
    if law.is_unit_point_mass() and len(spikes) == 1:
        rc = alternate_constants(spikes[0] - 1.0, law.gamma)
        coeffs.alternate = {"c0_theta_e1": rc.c0, "c4_theta_e1": rc.c4}
    return coeffs
