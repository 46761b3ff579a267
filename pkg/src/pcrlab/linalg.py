"""Dense linear algebra and chi-square distribution functions.

Everything here is a pure function of its inputs.  Matrices are plain
``numpy.ndarray`` objects of dtype float64; the helpers validate shape and
finiteness at the boundary and never mutate their arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from numpy.typing import ArrayLike, NDArray
from scipy import special

from .errors import InvalidInput, RankError

__all__ = [
    "ThinSVD",
    "as_matrix",
    "as_vector",
    "thin_svd",
    "top_right_vectors",
    "leading_right_vectors",
    "residualize",
    "normal_sf",
    "normal_cdf",
    "chi1_upper_quantile",
    "noncentral_chi1_sf",
    "noncentral_chi1_cdf",
    "log_noncentral_chi1_cdf",
]

RANK_TOL = 1e-10


def as_matrix(m: ArrayLike, name: str = "matrix") -> NDArray[np.float64]:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInput(f"{name} must be a non-empty 2-d array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return a


def as_vector(x: ArrayLike, name: str = "vector") -> NDArray[np.float64]:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise InvalidInput(f"{name} must be 1-d, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class ThinSVD:
    """Thin factorization ``m = U diag(d) V^T`` with r = min(n, p) terms.

    Each right singular vector is signed so that its largest-magnitude
    entry is positive (lowest index wins ties, where magnitudes within a
    relative 1e-10 of each other are tied); the matching left vector is
    flipped with it.
    """

    singular_values: NDArray[np.float64]
    left_vectors: NDArray[np.float64]
    right_vectors: NDArray[np.float64]

    @property
    def rank_bound(self) -> int:
        return int(self.singular_values.shape[0])

    def sample_eigenvalues(self, n: int | None = None) -> NDArray[np.float64]:
        """Eigenvalues of ``m^T m / n``, i.e. ``d_j**2 / n``."""
        n = self.left_vectors.shape[0] if n is None else n
        return self.singular_values**2 / n


def _sign_flips(v: NDArray[np.float64]) -> NDArray[np.float64]:
    # magnitudes within a relative 1e-10 of the column maximum count as tied,
    # so round-off cannot reorder them; argmax then picks the lowest index
    a = np.abs(v)
    idx = np.argmax(a >= a.max(axis=0) * (1.0 - 1e-10), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return signs


def thin_svd(m: ArrayLike) -> ThinSVD:
    """Thin SVD with the package sign convention applied."""
    a = as_matrix(m)
    u, d, vt = np.linalg.svd(a, full_matrices=False)
    v = vt.T
    s = _sign_flips(v)
    return ThinSVD(d, u * s, v * s)


def top_right_vectors(svd: ThinSVD, k: int) -> NDArray[np.float64]:
    """First ``k`` right singular vectors as a p x k matrix."""
    r = svd.rank_bound
    if k < 1:
        raise InvalidInput(f"k must be >= 1, got {k}")
    if k >= r:
        raise RankError(f"k={k} must be smaller than min(n, p)={r}")
    return svd.right_vectors[:, :k].copy()


def leading_right_vectors(m: ArrayLike, k: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Top-``k`` singular values and right singular vectors of ``m``.

    Same contract as ``top_right_vectors(thin_svd(m), k)`` but only the
    leading eigenpairs of the smaller Gram matrix are computed, which is
    what the Monte Carlo loops need.  Returns ``(d, V)`` with ``V`` of
    shape p x k.
    """
    a = as_matrix(m)
    n, p = a.shape
    if k < 1:
        raise InvalidInput(f"k must be >= 1, got {k}")
    if k >= min(n, p):
        raise RankError(f"k={k} must be smaller than min(n, p)={min(n, p)}")
    if p <= n:
        evals, vecs = sla.eigh(a.T @ a, subset_by_index=[p - k, p - 1], driver="evr",
                                overwrite_a=True, check_finite=False)
        evals = evals[::-1]
        v = vecs[:, ::-1]
        d = np.sqrt(np.clip(evals, 0.0, None))
    else:
        evals, vecs = sla.eigh(a @ a.T, subset_by_index=[n - k, n - 1], driver="evr",
                                overwrite_a=True, check_finite=False)
        evals = evals[::-1]
        u = vecs[:, ::-1]
        d = np.sqrt(np.clip(evals, 0.0, None))
        v = a.T @ u
        norms = np.linalg.norm(v, axis=0)
        norms[norms == 0] = 1.0
        v = v / norms
    return d, v * _sign_flips(v)


def residualize(target: ArrayLike, basis: ArrayLike) -> NDArray[np.float64]:
    """Return ``(I - P_C(basis)) target``.

    The column space is taken numerically: directions whose singular value
    falls below ``1e-10`` times the largest are dropped, so rank-deficient
    bases are handled without error.
    """
    y = as_vector(target, "target")
    b = np.asarray(basis, dtype=np.float64)
    if b.ndim == 1:
        b = b[:, None]
    if b.shape[0] != y.shape[0]:
        raise InvalidInput(f"basis has {b.shape[0]} rows, target has length {y.shape[0]}")
    if b.shape[1] == 0:
        return y.copy()
    if not np.all(np.isfinite(b)):
        raise InvalidInput("basis contains non-finite entries")
    u, d, _ = np.linalg.svd(b, full_matrices=False)
    if d.size == 0 or d[0] == 0.0:
        return y.copy()
    q = u[:, d > RANK_TOL * d[0]]
    return y - q @ (q.T @ y)


def normal_sf(x):
    """Upper tail of the standard normal via ``erfc``."""
    return 0.5 * special.erfc(np.asarray(x, dtype=np.float64) / np.sqrt(2.0))


def normal_cdf(x):
    return 0.5 * special.erfc(-np.asarray(x, dtype=np.float64) / np.sqrt(2.0))


def _check_prob(alpha: float) -> float:
    alpha = float(alpha)
    if not (0.0 < alpha < 1.0):
        raise InvalidInput(f"alpha must lie in (0, 1), got {alpha}")
    return alpha


def chi1_upper_quantile(alpha: float) -> float:
    """Cutoff ``t`` with ``P(chi2_1 > t) = alpha``."""
    alpha = _check_prob(alpha)
    # -ndtri(alpha/2) avoids the cancellation in ndtri(1 - alpha/2)
    z = -special.ndtri(alpha / 2.0)
    return float(z * z)


def _check_nonneg(t, ncp):
    t = np.asarray(t, dtype=np.float64)
    ncp = np.asarray(ncp, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0):
        raise InvalidInput("t must be finite and nonnegative")
    if np.any(np.isnan(ncp)) or np.any(ncp < 0):
        raise InvalidInput("ncp must be nonnegative")
    return t, ncp


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def noncentral_chi1_sf(t, ncp):
    """``P(chi2_1(ncp) > t) = Phibar(sqrt t - sqrt ncp) + Phibar(sqrt t + sqrt ncp)``.

    Broadcasts over array arguments.
    """
    t, ncp = _check_nonneg(t, ncp)
    rt, rk = np.sqrt(t), np.sqrt(ncp)
    return _scalar_or_array(normal_sf(rt - rk) + normal_sf(rt + rk))


def noncentral_chi1_cdf(t, ncp):
    """``P(chi2_1(ncp) <= t)``, computed without subtracting from one."""
    t, ncp = _check_nonneg(t, ncp)
    rt, rk = np.sqrt(t), np.sqrt(ncp)
    # Phi(rt - rk) - Phi(-rt - rk) as a difference of upper tails; stays
    # relatively accurate when ncp is large and the cdf is tiny
    return _scalar_or_array(normal_sf(rk - rt) - normal_sf(rk + rt))


def log_noncentral_chi1_cdf(t, ncp):
    """Natural log of ``noncentral_chi1_cdf``, accurate when the cdf underflows."""
    t, ncp = _check_nonneg(t, ncp)
    rt, rk = np.sqrt(t), np.sqrt(ncp)
    hi = special.log_ndtr(rt - rk)
    lo = special.log_ndtr(-rt - rk)
    with np.errstate(divide="ignore"):
        out = hi + np.log1p(-np.exp(lo - hi))
    return _scalar_or_array(out)
