"""Numerical kernel: OLS with robust covariance, distribution functions, RNG streams."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DimensionMismatch, InvalidDf, InvalidParams, RankDeficient

RANK_TOL = 1e-10
HC_VARIANTS = ("HC0", "HC1")


@dataclass(frozen=True)
class OlsFit:
    """Least-squares coefficients with a heteroskedasticity-robust covariance."""

    coefficients: np.ndarray
    robust_cov: np.ndarray
    residuals: np.ndarray
    n: int
    k: int
    hc_variant: str = "HC1"

    def se(self, j: int) -> float:
        return float(np.sqrt(max(self.robust_cov[j, j], 0.0)))


def as_design(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DimensionMismatch(f"design must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidParams("design contains non-finite entries")
    return X


def check_rank(X: np.ndarray, tol: float = RANK_TOL) -> None:
    """Raise RankDeficient unless smallest/largest singular value exceeds ``tol``."""
    s = np.linalg.svd(X, compute_uv=False)
    if s.size == 0 or s[0] == 0.0 or s[-1] <= tol * s[0] or X.shape[0] < X.shape[1]:
        raise RankDeficient(
            f"design of shape {X.shape} is not of full column rank"
        )


def ols_fit(X, y, hc_variant: str = "HC1") -> OlsFit:
    """Ordinary least squares with Huber-White sandwich covariance.

    Parameters
    ----------
    X : array-like, shape (n, k)
        Design matrix; must have full column rank.
    y : array-like, shape (n,)
        Response.
    hc_variant : {"HC0", "HC1"}
        ``HC1`` scales the HC0 sandwich by ``n / (n - k)``.

    Returns
    -------
    OlsFit
    """
    if hc_variant not in HC_VARIANTS:
        raise InvalidParams(f"unknown HC variant {hc_variant!r}")
    X = as_design(X)
    y = np.asarray(y, dtype=float).ravel()
    n, k = X.shape
    if y.shape[0] != n:
        raise DimensionMismatch(f"len(y)={y.shape[0]} but X has {n} rows")
    check_rank(X)

    q, r = np.linalg.qr(X, mode="reduced")
    beta = np.linalg.solve(r, q.T @ y)
    resid = y - X @ beta
    r_inv = np.linalg.solve(r, np.eye(k))
    bread = r_inv @ r_inv.T  # (X'X)^{-1}
    xe = X * resid[:, None]
    meat = xe.T @ xe
    cov = bread @ meat @ bread
    if hc_variant == "HC1":
        cov *= n / (n - k) if n > k else np.nan
    cov = 0.5 * (cov + cov.T)
    return OlsFit(beta, cov, resid, n, k, hc_variant)


# -- distribution functions -------------------------------------------------


def _check_df(df) -> float:
    df = float(df)
    if not df > 0 or not np.isfinite(df):
        raise InvalidDf(f"degrees of freedom must be positive, got {df}")
    return df


def t_cdf(x, df):
    """Student-t CDF via the regularized incomplete beta function."""
    df = _check_df(df)
    x = np.asarray(x, dtype=float)
    tail = 0.5 * special.betainc(0.5 * df, 0.5, df / (df + x * x))
    out = np.where(x < 0, tail, 1.0 - tail)
    out = np.where(np.isinf(x), np.where(x > 0, 1.0, 0.0), out)
    return out if out.ndim else float(out)


def t_sf2(t, df):
    """Two-sided p-value ``P(|T| >= |t|)``, computed without cancellation."""
    df = _check_df(df)
    t = np.asarray(t, dtype=float)
    with np.errstate(invalid="ignore"):
        p = special.betainc(0.5 * df, 0.5, df / (df + t * t))
    p = np.where(np.isinf(t), 0.0, p)
    return p if p.ndim else float(p)


def t_quantile(prob: float, df, tol: float = 1e-10) -> float:
    """Quantile of the t distribution by bisection on :func:`t_cdf`."""
    df = _check_df(df)
    if not 0.0 < prob < 1.0:
        raise InvalidParams(f"probability must lie in (0, 1), got {prob}")
    if prob == 0.5:
        return 0.0
    lo, hi = -1.0, 1.0
    while t_cdf(lo, df) > prob:
        lo *= 2.0
    while t_cdf(hi, df) < prob:
        hi *= 2.0
    while hi - lo > tol * max(1.0, abs(lo), abs(hi)):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < prob:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def chisq_sf(x, df):
    """Chi-square survival function via the regularized upper incomplete gamma."""
    df = _check_df(df)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise InvalidParams("chi-square argument must be non-negative")
    out = special.gammaincc(0.5 * df, 0.5 * x)
    return out if out.ndim else float(out)


def norm_cdf(x):
    out = special.ndtr(np.asarray(x, dtype=float))
    return out if np.ndim(out) else float(out)


def norm_sf2(z):
    """Two-sided standard-normal p-value."""
    out = special.erfc(np.abs(np.asarray(z, dtype=float)) / np.sqrt(2.0))
    return out if np.ndim(out) else float(out)


# -- random streams ---------------------------------------------------------

_MASK64 = (1 << 64) - 1


@dataclass
class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Streams with distinct ids are statistically independent, so per-task
    streams can be handed out in any order without changing results.
    """

    seed: int
    stream_id: int = 0
    path: tuple = ()
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        key = tuple(int(v) & _MASK64 for v in (self.stream_id, *self.path))
        ss = np.random.SeedSequence(entropy=int(self.seed) & _MASK64, spawn_key=key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, stream_id: int) -> "RngStream":
        """Independent stream derived from this one's seed (not its state)."""
        return RngStream(self.seed, self.stream_id, (*self.path, int(stream_id)))

    def uniform(self, a: float = 0.0, b: float = 1.0, size=None):
        if not a < b:
            raise InvalidParams(f"uniform requires a < b, got a={a}, b={b}")
        return self._gen.uniform(a, b, size)

    def normal(self, mean: float = 0.0, sd: float = 1.0, size=None):
        if not sd > 0:
            raise InvalidParams(f"normal requires sd > 0, got {sd}")
        return self._gen.normal(mean, sd, size)

    def uniform_int(self, low: int, high: int, size=None):
        """Integers uniform on the closed range ``[low, high]``."""
        if not low <= high:
            raise InvalidParams(f"uniform_int requires low <= high, got {low}, {high}")
        return self._gen.integers(low, high, size=size, endpoint=True)
