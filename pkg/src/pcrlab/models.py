"""Synthetic covariates, exposures, coefficients and outcomes.

Every generator takes a ``seed`` that may be an integer, a
``numpy.random.SeedSequence`` or an existing ``numpy.random.Generator``;
identical seeds give bit-identical draws.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special

from .errors import InvalidInput, InvalidSpec
from .linalg import _sign_flips, as_matrix, as_vector
from .rmt import SpectralLaw

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]

ORTHO_TOL = 1e-10


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def random_unit_vector(p: int, seed: SeedLike) -> NDArray[np.float64]:
    """Normalized ``N(0, I/p)`` draw, i.e. a uniformly random direction."""
    z = _rng(seed).standard_normal(p)
    return z / np.linalg.norm(z)


def random_orthonormal(p: int, k: int, seed: SeedLike, against: ArrayLike | None = None) -> NDArray[np.float64]:
    """``k`` random orthonormal directions, orthogonal to the columns of ``against``."""
    rng = _rng(seed)
    z = rng.standard_normal((p, k))
    if against is not None:
        b = np.asarray(against, dtype=np.float64).reshape(p, -1)
        z = z - b @ (b.T @ z)
        z = z - b @ (b.T @ z)
    q, r = np.linalg.qr(z)
    return q * np.sign(np.diag(r))


# --------------------------------------------------------------------------
# covariate laws


@dataclass(frozen=True)
class SpikeSpec:
    """Population covariance with a few spikes over a bulk.

    ``strengths`` are the additive spike sizes ``lambda_j``: along ``v_j``
    the covariance has eigenvalue ``1 + lambda_j``.  With ``bulk=None`` every
    other eigenvalue is one, giving ``Sigma = I + sum_j lambda_j v_j v_j^T``.
    An explicit ``bulk`` lists the ``p - k`` remaining eigenvalues, placed on
    a fixed orthonormal completion of the spike directions.
    """

    strengths: tuple[float, ...]
    vectors: NDArray[np.float64]
    bulk: tuple[float, ...] | None = None

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        lam = tuple(float(x) for x in self.strengths)
        if v.ndim != 2 or v.shape[1] != len(lam):
            raise InvalidSpec("need exactly one vector per spike strength")
        if any(not (x > 0 and math.isfinite(x)) for x in lam):
            raise InvalidSpec("spike strengths must be positive and finite")
        if any(a <= b for a, b in zip(lam, lam[1:])):
            raise InvalidSpec("spike strengths must be strictly decreasing")
        if lam and np.max(np.abs(v.T @ v - np.eye(len(lam)))) > ORTHO_TOL:
            raise InvalidSpec("spike vectors must be orthonormal")
        if self.bulk is not None:
            b = tuple(float(x) for x in self.bulk)
            if len(b) != v.shape[0] - len(lam) or any(not (x > 0) for x in b):
                raise InvalidSpec(f"bulk needs {v.shape[0] - len(lam)} positive eigenvalues")
            object.__setattr__(self, "bulk", b)
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "strengths", lam)

    @classmethod
    def single(cls, strength: float, v: ArrayLike) -> "SpikeSpec":
        return cls((float(strength),), np.asarray(v, dtype=np.float64)[:, None])

    @classmethod
    def null(cls, p: int) -> "SpikeSpec":
        return cls((), np.zeros((p, 0)))

    @property
    def p(self) -> int:
        return self.vectors.shape[0]

    @property
    def k(self) -> int:
        return len(self.strengths)

    def population_spikes(self) -> list[float]:
        return [1.0 + x for x in self.strengths]

    def spectral_law(self, gamma: float) -> SpectralLaw:
        """Atomic law of the non-spike eigenvalues."""
        if self.bulk is None:
            return SpectralLaw.point_mass(gamma)
        counts = Counter(self.bulk)
        total = len(self.bulk)
        return SpectralLaw(tuple((v, c / total) for v, c in sorted(counts.items())), gamma)

    def _completion(self) -> NDArray[np.float64]:
        p, k = self.vectors.shape
        basis = np.hstack([self.vectors, np.eye(p)])
        q, _ = np.linalg.qr(basis)
        return q[:, k:p]

    def sqrt_covariance(self) -> NDArray[np.float64]:
        p = self.p
        if self.bulk is None:
            root = np.eye(p)
        else:
            c = self._completion()
            root = (c * np.sqrt(self.bulk)) @ c.T
        for lam, v in zip(self.strengths, self.vectors.T):
            s = math.sqrt(1.0 + lam)
            root = root + (s - (1.0 if self.bulk is None else 0.0)) * np.outer(v, v)
        return root

    def covariance(self) -> NDArray[np.float64]:
        r = self.sqrt_covariance()
        return r @ r


def gen_spiked(n: int, p: int, spec: SpikeSpec, seed: SeedLike) -> NDArray[np.float64]:
    """``n x p`` matrix with i.i.d. ``N(0, Sigma)`` rows, ``Sigma`` from ``spec``."""
    if spec.p != p:
        raise InvalidSpec(f"spec is {spec.p}-dimensional, asked for p={p}")
    z = _rng(seed).standard_normal((n, p))
    if spec.bulk is not None:
        return z @ spec.sqrt_covariance()
    # Sigma^{1/2} = I + sum (sqrt(1+lam) - 1) v v^T, applied without forming it
    if spec.k:
        v = spec.vectors
        coef = np.sqrt(1.0 + np.asarray(spec.strengths)) - 1.0
        z += ((z @ v) * coef) @ v.T
    return z


class MixtureKind(str, enum.Enum):
    GAUSSIAN = "gaussian_mean_shift"
    BINOMIAL = "binomial_two_group"


@dataclass(frozen=True)
class MixtureSpec:
    """Two equally weighted populations differing on the first ``m`` coordinates.

    Gaussian: component means ``+shift`` and ``-shift`` on those coordinates,
    identity covariance.  Binomial: ``Bin(2, q1)`` or ``Bin(2, q2)`` on them
    and ``Bin(2, q_null)`` elsewhere.  One population label per row.
    """

    kind: MixtureKind
    m: int
    shift: float = 1.0
    q1: float = 0.3
    q2: float = 0.7
    q_null: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", MixtureKind(self.kind))
        if self.m < 0:
            raise InvalidSpec("m must be nonnegative")
        for q in (self.q1, self.q2, self.q_null):
            if not (0.0 < q < 1.0):
                raise InvalidSpec("probabilities must lie in (0, 1)")

    def check(self, p: int) -> None:
        if self.m > p:
            raise InvalidSpec(f"m={self.m} exceeds p={p}")


def mixture_size(p: int, tau0: float) -> int:
    """``ceil(p ** tau0)``, guarded against round-off just above an integer."""
    return int(math.ceil(p**tau0 - 1e-9))


def _labels(n: int, rng: np.random.Generator) -> NDArray[np.bool_]:
    return rng.random(n) < 0.5


def gen_gaussian_mixture(n: int, p: int, spec: MixtureSpec, seed: SeedLike) -> NDArray[np.float64]:
    if spec.kind is not MixtureKind.GAUSSIAN:
        raise InvalidSpec("expected a Gaussian mean-shift mixture")
    spec.check(p)
    rng = _rng(seed)
    first = _labels(n, rng)
    w = rng.standard_normal((n, p))
    w[:, : spec.m] += np.where(first, spec.shift, -spec.shift)[:, None]
    return w


def gen_binomial_mixture(n: int, p: int, spec: MixtureSpec, seed: SeedLike) -> NDArray[np.float64]:
    if spec.kind is not MixtureKind.BINOMIAL:
        raise InvalidSpec("expected a binomial two-group mixture")
    spec.check(p)
    rng = _rng(seed)
    first = _labels(n, rng)
    q = np.full((n, p), spec.q_null)
    q[:, : spec.m] = np.where(first, spec.q1, spec.q2)[:, None]
    # Bin(2, q) as two Bernoulli thresholds; much faster than rng.binomial
    u = rng.random((2, n, p))
    return (u[0] < q).astype(np.float64) + (u[1] < q)


@dataclass(frozen=True)
class MixtureCovariance:
    """Exact second-order structure of a mixture law.

    ``covariance = diag(diagonal) + spike_strength * v v^T`` and
    ``second_moment = covariance + mean mean^T``.  ``sigma2`` is the noise
    variance of the undifferentiated coordinates.
    """

    sigma2: float
    spike_strength: float
    v: NDArray[np.float64]
    diagonal: NDArray[np.float64]
    mean: NDArray[np.float64]

    def covariance(self) -> NDArray[np.float64]:
        return np.diag(self.diagonal) + self.spike_strength * np.outer(self.v, self.v)

    def second_moment(self) -> NDArray[np.float64]:
        return self.covariance() + np.outer(self.mean, self.mean)

    @property
    def relative_strength(self) -> float:
        """Spike size in units of the bulk noise, comparable to a unit-bulk spiked model."""
        return self.spike_strength / self.sigma2


def mixture_covariance(spec: MixtureSpec, p: int) -> MixtureCovariance:
    spec.check(p)
    m = spec.m
    v = np.zeros(p)
    if m:
        v[:m] = 1.0 / math.sqrt(m)
    if spec.kind is MixtureKind.GAUSSIAN:
        # mean +-shift on S with probability 1/2 each: Cov adds shift^2 1_S 1_S^T
        return MixtureCovariance(1.0, spec.shift**2 * m, v, np.ones(p), np.zeros(p))
    # E[W|label] = 2q, Var[W|label] = 2q(1-q); the label term contributes
    # (2(q1-q2)/2)^2 = (q1-q2)^2 to every entry of the S block
    within = spec.q1 * (1 - spec.q1) + spec.q2 * (1 - spec.q2)
    null_var = 2 * spec.q_null * (1 - spec.q_null)
    diag = np.full(p, null_var)
    diag[:m] = within
    mean = np.full(p, 2 * spec.q_null)
    mean[:m] = spec.q1 + spec.q2
    return MixtureCovariance(null_var, (spec.q1 - spec.q2) ** 2 * m, v, diag, mean)


def top_population_directions(moment: ArrayLike, count: int = 2, seed: SeedLike = 0) -> NDArray[np.float64]:
    """Leading ``count`` eigenvectors of a symmetric moment matrix.

    When an eigenvalue is repeated the eigenvector is not unique; a seeded
    random vector projected onto the eigenspace picks one reproducibly.
    """
    s = as_matrix(moment, "moment")
    vals, vecs = np.linalg.eigh(s)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    rng = _rng(seed)
    scale = max(abs(vals[0]), 1.0)
    out: list[NDArray[np.float64]] = []
    for j in range(count):
        block = np.abs(vals - vals[j]) <= 1e-9 * scale
        if block.sum() == 1:
            u = vecs[:, j].copy()
        else:
            e = vecs[:, block]
            u = e @ (e.T @ rng.standard_normal(s.shape[0]))
            for w in out:
                u -= w * (w @ u)
            u /= np.linalg.norm(u)
        out.append(u)
    res = np.column_stack(out)
    return res * _sign_flips(res)


# --------------------------------------------------------------------------
# exposure and outcome


def gen_exposure_linear(W: ArrayLike, theta: ArrayLike, sigma_g: float, seed: SeedLike) -> NDArray[np.float64]:
    """``A = W theta + eta`` with ``eta ~ N(0, sigma_g^2 I)``."""
    w = np.asarray(W, dtype=np.float64)
    th = as_vector(theta, "theta")
    if w.shape[1] != th.shape[0]:
        raise InvalidInput("W and theta dimensions disagree")
    if sigma_g < 0:
        raise InvalidInput("sigma_g must be nonnegative")
    return w @ th + sigma_g * _rng(seed).standard_normal(w.shape[0])


def gen_exposure_binomial(W: ArrayLike, theta: ArrayLike, seed: SeedLike) -> NDArray[np.float64]:
    """``A_i ~ Bin(2, expit(theta^T W_i))``, returned as floats in {0, 1, 2}."""
    w = np.asarray(W, dtype=np.float64)
    th = as_vector(theta, "theta")
    if w.shape[1] != th.shape[0]:
        raise InvalidInput("W and theta dimensions disagree")
    return _rng(seed).binomial(2, special.expit(w @ th)).astype(np.float64)


def gen_outcome(
    A: ArrayLike, W: ArrayLike, beta: ArrayLike, delta: float, sigma_y: float, seed: SeedLike
) -> NDArray[np.float64]:
    """``Y = A delta + W beta + eps`` with ``eps ~ N(0, sigma_y^2 I)``.

    A local alternative is ``delta = h / sqrt(n)``.
    """
    a = as_vector(A, "A")
    w = np.asarray(W, dtype=np.float64)
    b = as_vector(beta, "beta")
    if w.shape != (a.shape[0], b.shape[0]):
        raise InvalidInput("A, W and beta dimensions disagree")
    if sigma_y < 0:
        raise InvalidInput("sigma_y must be nonnegative")
    return a * delta + w @ b + sigma_y * _rng(seed).standard_normal(a.shape[0])


# --------------------------------------------------------------------------
# coefficients


class CoefMode(str, enum.Enum):
    FIXED = "fixed"
    RANDOM = "random"


class FixedConstruction(str, enum.Enum):
    ANGLE_TO_SPIKE = "angle_to_spike"
    EXPLICIT = "explicit"
    POPULATION_LEAST_SQUARES = "population_least_squares"


@dataclass(frozen=True)
class CoefficientSpec:
    """A fixed vector or an i.i.d. random effect with coordinate variance ``variance / p``."""

    mode: CoefMode
    construction: FixedConstruction | None = None
    tau0: float = math.inf
    vector: NDArray[np.float64] | None = None
    variance: float = 1.0
    distribution: str = "gaussian"
    norm_bound: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", CoefMode(self.mode))
        if self.mode is CoefMode.FIXED:
            if self.construction is None:
                raise InvalidSpec("fixed coefficients need a construction")
            object.__setattr__(self, "construction", FixedConstruction(self.construction))
            if self.construction is FixedConstruction.EXPLICIT and self.vector is None:
                raise InvalidSpec("explicit construction needs a vector")
        else:
            if self.variance < 0:
                raise InvalidSpec("variance must be nonnegative")
            if self.distribution not in ("gaussian", "rademacher"):
                raise InvalidSpec("distribution must be 'gaussian' or 'rademacher'")

    @classmethod
    def angle(cls, tau0: float) -> "CoefficientSpec":
        return cls(CoefMode.FIXED, FixedConstruction.ANGLE_TO_SPIKE, tau0=tau0)

    @classmethod
    def explicit(cls, v: ArrayLike, norm_bound: float = 1.0) -> "CoefficientSpec":
        return cls(CoefMode.FIXED, FixedConstruction.EXPLICIT, vector=np.asarray(v, float), norm_bound=norm_bound)

    @classmethod
    def population_ls(cls, norm_bound: float = math.inf) -> "CoefficientSpec":
        return cls(CoefMode.FIXED, FixedConstruction.POPULATION_LEAST_SQUARES, norm_bound=norm_bound)

    @classmethod
    def random(cls, variance: float = 1.0, distribution: str = "gaussian") -> "CoefficientSpec":
        return cls(CoefMode.RANDOM, variance=variance, distribution=distribution)


def angle_weight(p: int, tau0: float) -> float:
    """``a = 1 - p^(-tau0)``; ``a = 1`` at ``tau0 = inf``."""
    return 1.0 if math.isinf(tau0) else 1.0 - p ** (-tau0)


def population_least_squares(cov: ArrayLike) -> NDArray[np.float64]:
    """``Sigma_22^{-1} Sigma_21`` for a covariance partitioned after its first coordinate."""
    s = as_matrix(cov, "covariance")
    if s.shape[0] != s.shape[1] or s.shape[0] < 2:
        raise InvalidSpec("need a square covariance of size >= 2")
    return np.linalg.solve(s[1:, 1:], s[1:, 0])


def population_least_squares_single_spike(strength: float, v: ArrayLike) -> NDArray[np.float64]:
    """Closed form for ``Sigma = I + lam v v^T``: ``lam v(1) / (1 + lam ||v_-1||^2) v_-1``."""
    v = as_vector(v, "v")
    rest = v[1:]
    return strength * v[0] / (1.0 + strength * rest @ rest) * rest


def make_beta(
    spec: CoefficientSpec,
    context: SpikeSpec | ArrayLike | None,
    p: int,
    seed: SeedLike = None,
) -> NDArray[np.float64]:
    """Build a coefficient vector of length ``p``.

    ``context`` supplies the directions ``(v1, v2)`` for the angle
    construction (a ``SpikeSpec`` with two spikes, or a ``p x 2`` array)
    and the full ``(p+1) x (p+1)`` covariance (or a single-spike
    ``SpikeSpec`` in dimension ``p+1``) for population least squares.
    """
    if spec.mode is CoefMode.RANDOM:
        rng = _rng(seed)
        sd = math.sqrt(spec.variance / p)
        if spec.distribution == "rademacher":
            return sd * (2.0 * rng.integers(0, 2, p) - 1.0)
        return sd * rng.standard_normal(p)

    if spec.construction is FixedConstruction.EXPLICIT:
        b = as_vector(spec.vector, "beta")
        if b.shape[0] != p:
            raise InvalidSpec(f"explicit vector has length {b.shape[0]}, expected {p}")
    elif spec.construction is FixedConstruction.ANGLE_TO_SPIKE:
        dirs = context.vectors if isinstance(context, SpikeSpec) else context
        if dirs is None:
            raise InvalidSpec("angle construction needs two directions")
        d = np.asarray(dirs, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != p or d.shape[1] < 2:
            raise InvalidSpec("angle construction needs two orthonormal p-vectors")
        v1, v2 = d[:, 0], d[:, 1]
        if abs(v1 @ v2) > ORTHO_TOL or abs(v1 @ v1 - 1) > ORTHO_TOL or abs(v2 @ v2 - 1) > ORTHO_TOL:
            raise InvalidSpec("angle directions must be orthonormal")
        a = angle_weight(p, spec.tau0)
        b = a * v1 + math.sqrt(max(0.0, 1.0 - a * a)) * v2
    else:
        if isinstance(context, SpikeSpec):
            if context.p != p + 1:
                raise InvalidSpec("population least squares needs the joint (p+1)-dim law")
            if context.bulk is None and context.k == 1:
                b = population_least_squares_single_spike(context.strengths[0], context.vectors[:, 0])
            else:
                b = population_least_squares(context.covariance())
        elif context is None:
            raise InvalidSpec("population least squares needs a covariance")
        else:
            b = population_least_squares(context)
        if b.shape[0] != p:
            raise InvalidSpec("covariance size does not match p + 1")

    if np.linalg.norm(b) > spec.norm_bound * (1 + 1e-12):
        raise InvalidSpec(f"fixed coefficient norm {np.linalg.norm(b):.4g} exceeds bound {spec.norm_bound}")
    return np.array(b, dtype=np.float64)


def subspace_distance(beta: ArrayLike, basis: ArrayLike) -> float:
    """``1 - ||P_V beta||^2 / ||beta||^2`` with ``V`` the column span of ``basis``."""
    b = as_vector(beta, "beta")
    nb = b @ b
    if nb == 0:
        raise InvalidInput("beta must be nonzero")
    v = np.asarray(basis, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    q, _ = np.linalg.qr(v)
    proj = q.T @ b
    return float(min(1.0, max(0.0, 1.0 - (proj @ proj) / nb)))


@dataclass
class Dataset:
    """One simulated draw together with the truth that generated it."""

    W: NDArray[np.float64]
    A: NDArray[np.float64]
    Y: NDArray[np.float64]
    true_delta: float
    beta: NDArray[np.float64]
    theta: NDArray[np.float64] | None
    rng_seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n, p = self.W.shape
        if self.A.shape != (n,) or self.Y.shape != (n,) or self.beta.shape != (p,):
            raise InvalidInput("dataset dimensions are inconsistent")
        if self.theta is not None and self.theta.shape != (p,):
            raise InvalidInput("theta has the wrong length")
