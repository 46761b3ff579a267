"""Monte Carlo engine for the Type I error and power experiments.

A replication is identified by ``(tau0_index, rep_index)``.  Its random
streams come from ``SeedSequence(master_seed, spawn_key=(tau0_index,
rep_index, stream))`` and nothing else, so results do not depend on how
replications are scheduled across workers.  Within a replication every
coefficient-mode combination sees the same covariates and outcome noise
(common random numbers); only the coefficient draws differ.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import jsonschema
import numpy as np
from numpy.typing import NDArray
from threadpoolctl import threadpool_limits

from . import models
from .errors import DegenerateExposure, InvalidSpec, NotAvailable
from .linalg import chi1_upper_quantile
from .models import CoefficientSpec, MixtureKind, MixtureSpec, SpikeSpec
from .pcrtest import TestOutcome, Variant, adjust_with_basis, principal_scores
from .rmt import SpectralLaw, asymptotic_power, kappa2_limit_law, mp_moments, scenario_constants

TAU0_GRID = tuple(round(0.05 * i, 2) for i in range(21))

CSV_COLUMNS = (
    "variant", "model", "exposure", "n", "p", "k", "alpha", "tau0", "beta_mode", "theta_mode",
    "h", "reps", "degenerate", "rejections", "rate", "mc_se", "theory_rate", "seed",
)

# stream identifiers inside a replication
_S_COVARIATES, _S_EXPOSURE, _S_BETA, _S_THETA, _S_NOISE = range(5)
# spawn key for draws shared by the whole experiment (spike directions)
_SHARED_KEY = 2**31 - 1

DEFAULT_SEED = 1729


class Model(str, enum.Enum):
    SPIKED = "spiked"
    GAUSS_MIXTURE = "gauss_mixture"
    BINOM_MIXTURE = "binom_mixture"


class Exposure(str, enum.Enum):
    LINEAR = "linear"
    BINOMIAL_LOGISTIC = "binomial_logistic"


CONFIG_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ExperimentConfig",
    "type": "object",
    "additionalProperties": False,
    "required": ["variant", "model", "n", "p"],
    "properties": {
        "variant": {"enum": ["out", "in"]},
        "model": {"enum": [m.value for m in Model]},
        "exposure": {"enum": [e.value for e in Exposure]},
        "n": {"type": "integer", "minimum": 2},
        "p": {"type": "integer", "minimum": 2},
        "k": {"type": "integer", "minimum": 1},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "reps": {"type": "integer", "minimum": 1},
        "tau0_grid": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "modes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "array",
                "prefixItems": [{"enum": ["fixed", "random"]}, {"enum": ["fixed", "random", "none"]}],
                "minItems": 2,
                "maxItems": 2,
            },
        },
        "sigma_y": {"type": "number", "exclusiveMinimum": 0},
        "sigma_g": {"type": "number", "minimum": 0},
        "sigma_beta": {"type": "number", "minimum": 0},
        "sigma_theta": {"type": "number", "minimum": 0},
        "h": {"type": "number"},
        "spike_strength": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "angle_tau": {"oneOf": [{"type": "null"}, {"type": "number", "minimum": 0}, {"const": "inf"}]},
        "random_effect_distribution": {"enum": ["gaussian", "rademacher"]},
        "center": {"type": "boolean"},
        "master_seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One panel of an experiment: a model, an aspect ratio and a tau0 grid.

    ``spike_strength=None`` ties the spike to ``p ** tau0``; a number holds it
    fixed.  ``angle_tau=None`` couples the fixed coefficients' angle to
    ``tau0``; a number (or ``"inf"``, meaning exactly ``v1``) fixes it.
    """

    variant: Variant
    model: Model
    n: int
    p: int
    exposure: Exposure = Exposure.LINEAR
    k: int = 1
    alpha: float = 0.05
    reps: int = 2000
    tau0_grid: tuple[float, ...] = TAU0_GRID
    modes: tuple[tuple[str, str], ...] | None = None
    sigma_y: float = 1.0
    sigma_g: float = 1.0
    sigma_beta: float = 1.0
    sigma_theta: float = 1.0
    h: float = 0.0
    spike_strength: float | None = None
    angle_tau: float | str | None = None
    random_effect_distribution: str = "gaussian"
    center: bool = False
    master_seed: int = DEFAULT_SEED

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "model", Model(self.model))
        object.__setattr__(self, "exposure", Exposure(self.exposure))
        object.__setattr__(self, "tau0_grid", tuple(float(t) for t in self.tau0_grid))
        if self.modes is None:
            if self.variant is Variant.OUT:
                modes = (("fixed", "fixed"), ("fixed", "random"), ("random", "fixed"), ("random", "random"))
            else:
                modes = (("fixed", "none"), ("random", "none"))
        else:
            modes = tuple((str(b), str(t)) for b, t in self.modes)
        object.__setattr__(self, "modes", modes)
        self.validate()

    def validate(self) -> None:
        if self.k >= min(self.n, self.p):
            raise InvalidSpec(f"k={self.k} must be smaller than min(n, p)={min(self.n, self.p)}")
        if self.variant is Variant.IN:
            if self.model is not Model.SPIKED or self.exposure is not Exposure.LINEAR:
                raise InvalidSpec("the in-regression experiment is defined for the spiked model with a joint Gaussian exposure")
            if any(t != "none" for _, t in self.modes):
                raise InvalidSpec("in-regression modes take theta_mode 'none'")
        elif any(t == "none" for _, t in self.modes):
            raise InvalidSpec("out-regression modes need theta_mode 'fixed' or 'random'")
        if len(set(self.modes)) != len(self.modes):
            raise InvalidSpec("duplicate coefficient modes")

    @property
    def gamma(self) -> float:
        return self.p / self.n

    @property
    def angle(self) -> float | None:
        if self.angle_tau is None:
            return None
        return math.inf if self.angle_tau == "inf" else float(self.angle_tau)

    def to_dict(self) -> dict[str, Any]:
        return {
            "variant": self.variant.value,
            "model": self.model.value,
            "exposure": self.exposure.value,
            "n": self.n,
            "p": self.p,
            "k": self.k,
            "alpha": self.alpha,
            "reps": self.reps,
            "tau0_grid": list(self.tau0_grid),
            "modes": [list(m) for m in self.modes],
            "sigma_y": self.sigma_y,
            "sigma_g": self.sigma_g,
            "sigma_beta": self.sigma_beta,
            "sigma_theta": self.sigma_theta,
            "h": self.h,
            "spike_strength": self.spike_strength,
            "angle_tau": self.angle_tau,
            "random_effect_distribution": self.random_effect_distribution,
            "center": self.center,
            "master_seed": self.master_seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        """Validate against ``CONFIG_SCHEMA`` and build; raises ``jsonschema.ValidationError``."""
        jsonschema.validate(data, CONFIG_SCHEMA)
        d = dict(data)
        if "tau0_grid" in d:
            d["tau0_grid"] = tuple(d["tau0_grid"])
        if "modes" in d:
            d["modes"] = tuple(tuple(m) for m in d["modes"])
        return cls(**d)

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def git_blob_sha1(data: bytes) -> str:
    """Content hash in the form git uses for blobs."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# --------------------------------------------------------------------------
# per-tau0 setup


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass
class CellSetup:
    """Everything that is fixed across the replications of one tau0 value."""

    tau0: float
    strength: float | None = None
    spike: SpikeSpec | None = None
    mixture: MixtureSpec | None = None
    directions: NDArray[np.float64] | None = None
    fixed_beta: NDArray[np.float64] | None = None
    fixed_theta: NDArray[np.float64] | None = None


def spike_strength(config: ExperimentConfig, tau0: float) -> float:
    return float(config.spike_strength) if config.spike_strength is not None else float(config.p) ** tau0


def make_setup(config: ExperimentConfig, tau0: float) -> CellSetup:
    p = config.p
    shared = _rng(config.master_seed, _SHARED_KEY)
    setup = CellSetup(tau0)
    if config.variant is Variant.IN:
        lam = spike_strength(config, tau0)
        v = models.random_unit_vector(p + 1, shared)
        setup.strength = lam
        setup.spike = SpikeSpec.single(lam, v)
        setup.fixed_beta = models.make_beta(CoefficientSpec.population_ls(), setup.spike, p)
        return setup

    if config.model is Model.SPIKED:
        lam = spike_strength(config, tau0)
        dirs = models.random_orthonormal(p, 2, shared)
        setup.strength = lam
        setup.spike = SpikeSpec.single(lam, dirs[:, 0])
        setup.directions = dirs
    else:
        m = models.mixture_size(p, tau0)
        kind = MixtureKind.GAUSSIAN if config.model is Model.GAUSS_MIXTURE else MixtureKind.BINOMIAL
        setup.mixture = MixtureSpec(kind, m)
        moment = models.mixture_covariance(setup.mixture, p).second_moment()
        setup.directions = models.top_population_directions(moment, 2, shared)
    tau = tau0 if config.angle is None else config.angle
    fixed = models.make_beta(CoefficientSpec.angle(tau), setup.directions, p)
    setup.fixed_beta = fixed
    setup.fixed_theta = fixed
    return setup


# --------------------------------------------------------------------------
# one replication


@dataclass(frozen=True)
class ModeDraw:
    """Outcome of one coefficient mode in one replication; ``outcome`` is ``None`` when degenerate."""

    beta_mode: str
    theta_mode: str
    outcome: TestOutcome | None


def _covariates(config: ExperimentConfig, setup: CellSetup, rng: np.random.Generator) -> NDArray:
    n, p = config.n, config.p
    if config.variant is Variant.IN:
        return models.gen_spiked(n, p + 1, setup.spike, rng)
    if config.model is Model.SPIKED:
        return models.gen_spiked(n, p, setup.spike, rng)
    if config.model is Model.GAUSS_MIXTURE:
        return models.gen_gaussian_mixture(n, p, setup.mixture, rng)
    return models.gen_binomial_mixture(n, p, setup.mixture, rng)


def _random_effect(config: ExperimentConfig, variance: float, rng: np.random.Generator) -> NDArray:
    spec = CoefficientSpec.random(variance, config.random_effect_distribution)
    return models.make_beta(spec, None, config.p, rng)


def simulate_replication(
    config: ExperimentConfig,
    setup: CellSetup,
    tau_index: int,
    rep_index: int,
    modes: Sequence[tuple[str, str]] | None = None,
) -> list[ModeDraw]:
    """Draw one dataset per coefficient mode and run the test on each."""
    modes = config.modes if modes is None else modes
    seed = config.master_seed
    n, p = config.n, config.p
    t = chi1_upper_quantile(config.alpha)
    sigma2 = config.sigma_y**2
    delta = config.h / math.sqrt(n)

    x = _covariates(config, setup, _rng(seed, tau_index, rep_index, _S_COVARIATES))
    if config.variant is Variant.IN:
        a_shared, w = x[:, 0].copy(), x[:, 1:]
    else:
        a_shared, w = None, x
    if config.center:
        x = x - x.mean(axis=0)
        w = x[:, 1:] if config.variant is Variant.IN else x
    q = principal_scores(x, config.k)
    noise = config.sigma_y * _rng(seed, tau_index, rep_index, _S_NOISE).standard_normal(n)

    beta_r = theta_r = None
    if any(b == "random" for b, _ in modes):
        beta_r = _random_effect(config, config.sigma_beta**2, _rng(seed, tau_index, rep_index, _S_BETA))
    if any(th == "random" for _, th in modes):
        theta_r = _random_effect(config, config.sigma_theta**2, _rng(seed, tau_index, rep_index, _S_THETA))

    # modes sharing a coefficient share the draw built from it
    exposures: dict[str, NDArray] = {}
    signals: dict[str, NDArray] = {}
    out = []
    for bm, tm in modes:
        if bm not in signals:
            signals[bm] = w @ (setup.fixed_beta if bm == "fixed" else beta_r)
        if a_shared is not None:
            a = a_shared
        elif tm in exposures:
            a = exposures[tm]
        else:
            theta = setup.fixed_theta if tm == "fixed" else theta_r
            ex_rng = _rng(seed, tau_index, rep_index, _S_EXPOSURE)
            if config.exposure is Exposure.LINEAR:
                a = models.gen_exposure_linear(w, theta, config.sigma_g, ex_rng)
            else:
                a = models.gen_exposure_binomial(w, theta, ex_rng)
            exposures[tm] = a
        mean = signals[bm] + delta * a if delta else signals[bm]
        y = mean + noise
        try:
            adj = adjust_with_basis(a, q)
        except DegenerateExposure:
            out.append(ModeDraw(bm, tm, None))
            continue
        lr = float(adj.residual @ y) ** 2 / (adj.norm2 * sigma2)
        k2 = float(adj.residual @ mean) ** 2 / (adj.norm2 * sigma2)
        out.append(ModeDraw(bm, tm, TestOutcome(lr, k2, config.k, config.variant, t, lr > t)))
    return out


def run_cell(
    config: ExperimentConfig,
    tau_index: int,
    rep_index: int,
    mode: tuple[str, str] | None = None,
) -> TestOutcome | None:
    """One replication of one coefficient mode (the first configured mode by default)."""
    mode = config.modes[0] if mode is None else tuple(mode)
    setup = make_setup(config, config.tau0_grid[tau_index])
    return simulate_replication(config, setup, tau_index, rep_index, [mode])[0].outcome


# --------------------------------------------------------------------------
# aggregation


@dataclass
class CellResult:
    tau0: float
    beta_mode: str
    theta_mode: str
    reps: int
    degenerate: int
    rejections: int
    theory_rate: float | None
    runtime_ms: float = 0.0
    kappa2: NDArray[np.float64] | None = None
    statistics: NDArray[np.float64] | None = None

    @property
    def valid(self) -> int:
        return self.reps - self.degenerate

    @property
    def rate(self) -> float:
        return self.rejections / self.valid if self.valid else math.nan

    @property
    def mc_se(self) -> float:
        r = self.rate
        return math.sqrt(r * (1 - r) / self.valid) if self.valid else math.nan


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cells: list[CellResult] = field(default_factory=list)

    def cell(self, tau0: float, beta_mode: str, theta_mode: str) -> CellResult:
        for c in self.cells:
            if c.tau0 == tau0 and c.beta_mode == beta_mode and c.theta_mode == theta_mode:
                return c
        raise KeyError((tau0, beta_mode, theta_mode))

    def rows(self) -> list[dict[str, Any]]:
        cfg = self.config
        return [
            {
                "variant": cfg.variant.value,
                "model": cfg.model.value,
                "exposure": cfg.exposure.value,
                "n": cfg.n,
                "p": cfg.p,
                "k": cfg.k,
                "alpha": cfg.alpha,
                "tau0": c.tau0,
                "beta_mode": c.beta_mode,
                "theta_mode": c.theta_mode,
                "h": cfg.h,
                "reps": c.reps,
                "degenerate": c.degenerate,
                "rejections": c.rejections,
                "rate": c.rate,
                "mc_se": c.mc_se,
                "theory_rate": c.theory_rate,
                "seed": cfg.master_seed,
            }
            for c in self.cells
        ]

    def to_csv(self) -> str:
        return format_csv(self.rows())


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.6g" % value
    return str(value)


def format_csv(rows: Sequence[dict[str, Any]]) -> str:
    """CSV text with the frozen column order, ``%.6g`` floats and LF line endings."""
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(row[c]) for c in CSV_COLUMNS) + "\n")
    return buf.getvalue()


# --------------------------------------------------------------------------
# theory overlay


def overlay_theory(config: ExperimentConfig, tau0: float, mode: tuple[str, str]) -> float | None:
    """Asymptotic rejection probability for cells with a closed-form limit law.

    Available for the out-regression spiked model with a linear exposure
    when ``beta`` is a random effect; ``None`` elsewhere.
    """
    beta_mode, theta_mode = mode
    if (config.variant is not Variant.OUT or config.model is not Model.SPIKED
            or config.exposure is not Exposure.LINEAR or beta_mode != "random"):
        return None
    law = SpectralLaw.point_mass(config.gamma)
    m1, m2 = mp_moments(law)
    common = dict(gamma=config.gamma, m1=m1, m2=m2, sigma2_beta=config.sigma_beta**2,
                  sigma2_theta=config.sigma_theta**2, sigma2_g=config.sigma_g**2, h=config.h / config.sigma_y)
    # the statistic is scaled by sigma_y^2, so beta's contribution is too
    common["sigma2_beta"] /= config.sigma_y**2
    try:
        if theta_mode == "fixed":
            tau = tau0 if config.angle is None else config.angle
            a = models.angle_weight(config.p, tau)
            alpha_spike = 1.0 + spike_strength(config, tau0)
            sc = scenario_constants([alpha_spike], law, [a * a], 1.0)
            limit = kappa2_limit_law("beta_random_theta_fixed", c0=sc.c0, c4=sc.c4, **common)
        else:
            limit = kappa2_limit_law("both_random", **common)
    except NotAvailable:
        return None
    return asymptotic_power(chi1_upper_quantile(config.alpha), limit)


# --------------------------------------------------------------------------
# drivers


def _run_tau(config: ExperimentConfig, tau_index: int, keep_draws: bool) -> list[CellResult]:
    tau0 = config.tau0_grid[tau_index]
    start = time.perf_counter()
    setup = make_setup(config, tau0)
    nm = len(config.modes)
    deg = np.zeros(nm, dtype=np.int64)
    rej = np.zeros(nm, dtype=np.int64)
    k2 = np.full((nm, config.reps), np.nan) if keep_draws else None
    st = np.full((nm, config.reps), np.nan) if keep_draws else None
    for r in range(config.reps):
        for j, draw in enumerate(simulate_replication(config, setup, tau_index, r)):
            if draw.outcome is None:
                deg[j] += 1
                continue
            rej[j] += draw.outcome.reject
            if keep_draws:
                k2[j, r] = draw.outcome.kappa2
                st[j, r] = draw.outcome.statistic
    elapsed = (time.perf_counter() - start) * 1000.0 / nm
    return [
        CellResult(tau0, bm, tm, config.reps, int(deg[j]), int(rej[j]), None, elapsed,
                   None if k2 is None else k2[j], None if st is None else st[j])
        for j, (bm, tm) in enumerate(config.modes)
    ]


def _worker(args):
    config, tau_index, keep_draws = args
    with threadpool_limits(1):
        return _run_tau(config, tau_index, keep_draws)


def run_experiment(
    config: ExperimentConfig,
    threads: int = 1,
    *,
    keep_draws: bool = False,
    progress: Callable[[int, int], None] | None = None,
) -> ExperimentResult:
    """Run every (tau0, mode) cell.

    BLAS is pinned to one thread and ``threads > 1`` spreads tau0 values
    over worker processes; neither affects the numbers produced.
    """
    ntau = len(config.tau0_grid)
    tasks = [(config, i, keep_draws) for i in range(ntau)]
    per_tau: list[list[CellResult]] = []
    if threads <= 1 or ntau == 1:
        for i, task in enumerate(tasks):
            per_tau.append(_worker(task))
            if progress:
                progress(i + 1, ntau)
    else:
        with ProcessPoolExecutor(max_workers=min(threads, ntau)) as pool:
            for i, cells in enumerate(pool.map(_worker, tasks)):
                per_tau.append(cells)
                if progress:
                    progress(i + 1, ntau)
    result = ExperimentResult(config)
    for cells in per_tau:
        for c in cells:
            c.theory_rate = overlay_theory(config, c.tau0, (c.beta_mode, c.theta_mode))
            result.cells.append(c)
    return result


# --------------------------------------------------------------------------
# presets


SCALES = {
    "paper": {"p": 1000, "reps": 2000},
    "desk": {"p": 200, "reps": 500},
}

FIG1_PANELS = (
    ("spiked", "linear"),
    ("gauss_mixture", "linear"),
    ("binom_mixture", "binomial_logistic"),
)
GAMMAS = (2.0, 0.5)


def _gamma_tag(g: float) -> str:
    return "gamma2" if g == 2.0 else "gamma0.5"


def figure_presets(
    figure: str, scale: str, master_seed: int = DEFAULT_SEED, reps: int | None = None
) -> dict[str, ExperimentConfig]:
    """Panel name to config for ``fig1`` (out-regression) or ``fig2`` (in-regression).

    ``reps`` overrides the scale's replication count (used for smoke runs).
    """
    if scale not in SCALES:
        raise InvalidSpec(f"unknown scale {scale!r}")
    p = SCALES[scale]["p"]
    reps = SCALES[scale]["reps"] if reps is None else reps
    if reps < 1:
        raise InvalidSpec("reps must be at least 1")
    out: dict[str, ExperimentConfig] = {}
    for g in GAMMAS:
        n = int(round(p / g))
        if figure == "fig1":
            for model, exposure in FIG1_PANELS:
                name = f"fig1_{model}_{exposure}_{_gamma_tag(g)}"
                out[name] = ExperimentConfig(Variant.OUT, Model(model), n, p, Exposure(exposure), reps=reps,
                                             master_seed=master_seed)
        elif figure == "fig2":
            out[f"fig2_in_spiked_{_gamma_tag(g)}"] = ExperimentConfig(Variant.IN, Model.SPIKED, n, p, reps=reps,
                                                                       master_seed=master_seed)
        else:
            raise InvalidSpec(f"unknown figure {figure!r}")
    return dict(sorted(out.items()))


def manifest(configs: dict[str, ExperimentConfig], files: dict[str, str]) -> dict[str, Any]:
    """Reproducibility record: canonical configs, their content hashes and output hashes."""
    from . import __version__

    cfgs = {name: c.to_dict() for name, c in sorted(configs.items())}
    blob = canonical_json(cfgs).encode("utf-8")
    seeds = sorted({c.master_seed for c in configs.values()})
    return {
        "package_version": __version__,
        "master_seed": seeds[0] if len(seeds) == 1 else seeds,
        "configs": cfgs,
        "config_sha1": git_blob_sha1(blob),
        "outputs": {name: git_blob_sha1(text.encode("utf-8")) for name, text in sorted(files.items())},
    }
