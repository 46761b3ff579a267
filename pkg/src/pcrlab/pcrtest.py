"""PC-adjusted likelihood-ratio tests for a single exposure coefficient.

The outcome variance is treated as known and equal to ``sigma2`` (default
one).  Passing ``sigma2=None`` replaces it by the residual mean square of
the regression of ``Y`` on ``A`` and the retained components.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DegenerateExposure, InvalidInput
from .linalg import as_matrix, as_vector, chi1_upper_quantile, leading_right_vectors
from .models import SpikeSpec
from .rmt import SpectralLaw, phi

DEGENERACY_TOL = 1e-10


class Variant(str, enum.Enum):
    """Whether the exposure column enters the PCA (``IN``) or not (``OUT``)."""

    IN = "in"
    OUT = "out"


@dataclass(frozen=True)
class AdjustedExposure:
    """The exposure after projecting out the retained component scores.

    ``residual`` is ``(I - P) A`` and ``scores`` an orthonormal basis of the
    removed column space, kept for the plug-in variance estimate.
    """

    residual: NDArray[np.float64]
    scores: NDArray[np.float64]
    norm2: float


def _design(A: NDArray, W: NDArray, variant: Variant) -> NDArray:
    return np.column_stack([A, W]) if variant is Variant.IN else W


def adjust_exposure(A: ArrayLike, W: ArrayLike, k: int, variant: Variant | str = Variant.OUT) -> AdjustedExposure:
    """Residualize ``A`` on the top-``k`` principal component scores.

    Raises ``DegenerateExposure`` when less than ``1e-10`` of ``A``'s norm
    survives the projection.
    """
    variant = Variant(variant)
    a = as_vector(A, "A")
    w = as_matrix(W, "W")
    if w.shape[0] != a.shape[0]:
        raise InvalidInput(f"A has length {a.shape[0]} but W has {w.shape[0]} rows")
    x = _design(a, w, variant)
    return adjust_with_basis(a, principal_scores(x, k))


def principal_scores(x: ArrayLike, k: int) -> NDArray[np.float64]:
    """Orthonormal basis of the span of ``x V_k`` (the top-``k`` normalized scores)."""
    d, v = leading_right_vectors(x, k)
    # X v_j = d_j u_j, so dividing by d_j gives orthonormal columns without another SVD
    keep = d > 1e-10 * max(d[0], np.finfo(float).tiny)
    return (np.asarray(x) @ v[:, keep]) / d[keep]


def adjust_with_basis(A: NDArray[np.float64], q: NDArray[np.float64]) -> AdjustedExposure:
    """Residualize ``A`` against an orthonormal basis ``q``; see ``adjust_exposure``."""
    resid = A - q @ (q.T @ A)
    nrm = float(np.linalg.norm(A))
    rn2 = float(resid @ resid)
    if nrm == 0.0 or np.sqrt(rn2) <= DEGENERACY_TOL * nrm:
        raise DegenerateExposure("residualized exposure vanishes; A lies in the span of the retained components")
    return AdjustedExposure(resid, q, rn2)


def _plugin_sigma2(Y: NDArray, adj: AdjustedExposure) -> NDArray | float:
    # residual of Y on [A-tilde, scores]; the two blocks are orthogonal
    y = Y if Y.ndim == 2 else Y[:, None]
    r = y - adj.scores @ (adj.scores.T @ y)
    r = r - np.outer(adj.residual, adj.residual @ r) / adj.norm2
    dof = y.shape[0] - adj.scores.shape[1] - 1
    if dof < 1:
        raise InvalidInput("not enough observations for the plug-in variance")
    s2 = np.sum(r * r, axis=0) / dof
    return s2 if Y.ndim == 2 else float(s2[0])


def statistic(Y: ArrayLike, adj: AdjustedExposure, sigma2: float | None = 1.0):
    """``<Y, A~>^2 / (sigma2 ||A~||^2)``; ``Y`` may be an ``n x m`` batch of outcomes."""
    y = np.asarray(Y, dtype=np.float64)
    if y.shape[0] != adj.residual.shape[0]:
        raise InvalidInput("Y has the wrong length")
    proj = adj.residual @ y
    lr = proj * proj / adj.norm2
    if sigma2 is None:
        lr = lr / _plugin_sigma2(y, adj)
    else:
        lr = lr / sigma2
    return float(lr) if np.ndim(lr) == 0 else lr


def lr_out(Y: ArrayLike, A: ArrayLike, W: ArrayLike, k: int, sigma2: float | None = 1.0) -> float:
    """Statistic after removing the top-``k`` PCs of ``W`` (exposure excluded)."""
    return statistic(as_vector(Y, "Y"), adjust_exposure(A, W, k, Variant.OUT), sigma2)


def lr_in(Y: ArrayLike, A: ArrayLike, W: ArrayLike, k: int, sigma2: float | None = 1.0) -> float:
    """Statistic after removing the top-``k`` PCs of ``[A : W]`` (exposure included)."""
    return statistic(as_vector(Y, "Y"), adjust_exposure(A, W, k, Variant.IN), sigma2)


def kappa2_from_adjusted(adj: AdjustedExposure, W: ArrayLike, A: ArrayLike, beta: ArrayLike, delta: float,
                         sigma2: float = 1.0) -> float:
    mean = np.asarray(W, dtype=np.float64) @ np.asarray(beta, dtype=np.float64) + delta * np.asarray(A, float)
    c = float(adj.residual @ mean)
    return c * c / (adj.norm2 * sigma2)


def kappa2(
    A: ArrayLike,
    W: ArrayLike,
    beta: ArrayLike,
    delta: float,
    k: int,
    variant: Variant | str = Variant.OUT,
    sigma2: float = 1.0,
) -> float:
    """Conditional noncentrality ``((W beta + A delta)^T (I-P) A)^2 / A^T (I-P) A``.

    Given the design, the statistic is distributed as ``chi2_1(kappa2)``.
    The exposure coefficient ``theta`` does not enter once ``A`` is observed.
    """
    adj = adjust_exposure(A, W, k, variant)
    b = as_vector(beta, "beta")
    if b.shape[0] != np.asarray(W).shape[1]:
        raise InvalidInput("beta has the wrong length")
    return kappa2_from_adjusted(adj, W, A, b, delta, sigma2)


@dataclass(frozen=True)
class TestOutcome:
    statistic: float
    kappa2: float | None
    k: int
    variant: Variant
    cutoff: float
    reject: bool

    __test__ = False  # keep pytest from collecting this class


def run_test(
    Y: ArrayLike,
    A: ArrayLike,
    W: ArrayLike,
    k: int,
    variant: Variant | str = Variant.OUT,
    alpha: float = 0.05,
    *,
    beta: ArrayLike | None = None,
    delta: float = 0.0,
    sigma2: float | None = 1.0,
) -> TestOutcome:
    """Reject when the statistic exceeds the upper-``alpha`` point of ``chi2_1``.

    ``kappa2`` is filled in only when the true ``beta`` is supplied.
    """
    variant = Variant(variant)
    t = chi1_upper_quantile(alpha)
    adj = adjust_exposure(A, W, k, variant)
    lr = statistic(as_vector(Y, "Y"), adj, sigma2)
    k2 = None
    if beta is not None:
        k2 = kappa2_from_adjusted(adj, W, A, beta, delta, 1.0 if sigma2 is None else sigma2)
    return TestOutcome(lr, k2, k, variant, t, bool(lr > t))


def c_star_p(beta0: ArrayLike, spike: SpikeSpec, gamma: float) -> float:
    """``sum_j phi_1j beta0^T v_j v_j^T e_1`` for a unit-bulk spiked law on ``(A, W)``.

    Bulk directions carry weight one, so the sum equals ``beta0^T Phi e_1``
    with ``Phi = I + sum_spikes (phi_1j - 1) v_j v_j^T``.
    """
    b = as_vector(beta0, "beta0")
    if spike.bulk is not None:
        raise InvalidInput("c_star_p needs the unit bulk")
    if b.shape[0] != spike.p:
        raise InvalidInput("beta0 must live in the same space as the spikes")
    law = SpectralLaw.point_mass(gamma)
    out = float(b[0])
    for alpha, v in zip(spike.population_spikes(), spike.vectors.T):
        out += (phi(1, alpha, law) - 1.0) * float(b @ v) * float(v[0])
    return out
