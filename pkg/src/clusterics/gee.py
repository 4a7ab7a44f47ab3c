"""Gaussian/identity GEE with independence or exchangeable working correlation.

For a cluster of size ``n`` the exchangeable working covariance is
``s2 * ((1 - rho) I + rho J)`` whose inverse is
``(I - c J) / (s2 (1 - rho))`` with ``c = rho / (1 - rho + n rho)``. Every
quantity the fit needs is therefore a function of per-cluster column sums,
so no per-cluster matrix is ever formed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numstats
from .data import Dataset
from .errors import InvalidParams, SingularSubCov

log = logging.getLogger(__name__)

CORRELATIONS = ("independence", "exchangeable")


def default_design(ds: Dataset):
    return np.column_stack([np.ones(ds.n_obs), ds.a.astype(float)]), ["(Intercept)", "A"]


@dataclass(frozen=True)
class GeeSpec:
    """Model terms and fitting controls.

    ``design_builder`` maps a dataset to ``(X, names)``. ``rho`` fixes the
    exchangeable correlation instead of estimating it.
    """

    design_builder: Callable = default_design
    correlation: str = "exchangeable"
    max_iter: int = 50
    tol: float = 1e-8
    rho: float | None = None

    def __post_init__(self):
        if self.correlation not in CORRELATIONS:
            raise InvalidParams(f"unknown correlation {self.correlation!r}")
        if not self.tol > 0:
            raise InvalidParams("tol must be positive")
        if self.max_iter < 1:
            raise InvalidParams("max_iter must be at least 1")


@dataclass(frozen=True)
class GeeFit:
    coefficients: np.ndarray
    sandwich_cov: np.ndarray
    rho_hat: float
    n_iter: int
    converged: bool
    names: tuple = ()
    correlation: str = "exchangeable"
    sigma2: float = float("nan")
    rho_clamped: bool = False
    notes: tuple = field(default=())

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class WaldResult:
    stat: float
    df: int
    p_value: float
    kind: str  # "z" or "chi2"


class _Clustered:
    """Rows sorted by cluster with per-cluster summation helpers."""

    def __init__(self, X, y, codes):
        order = np.argsort(codes, kind="stable")
        self.X = X[order]
        self.y = y[order]
        c = codes[order]
        self.starts = np.flatnonzero(np.r_[True, c[1:] != c[:-1]])
        self.sizes = np.diff(np.r_[self.starts, c.size]).astype(float)

    def csum(self, v):
        return np.add.reduceat(v, self.starts, axis=0)


def fit_gee(
    X,
    y,
    groups,
    correlation: str = "exchangeable",
    max_iter: int = 50,
    tol: float = 1e-8,
    rho: float | None = None,
    names: Sequence[str] = (),
) -> GeeFit:
    """Fit a GEE from a stacked design; ``groups`` labels clusters row-wise."""
    if correlation not in CORRELATIONS:
        raise InvalidParams(f"unknown correlation {correlation!r}")
    X = numstats.as_design(X)
    y = np.asarray(y, dtype=float).ravel()
    _, codes = np.unique(np.asarray(groups), return_inverse=True)
    numstats.check_rank(X)
    cl = _Clustered(X, y, codes.ravel())
    n, k = X.shape
    S = cl.csum(cl.X)  # (M, k) column sums per cluster
    T = cl.csum(cl.y)
    xtx = cl.X.T @ cl.X
    xty = cl.X.T @ cl.y

    beta = np.linalg.solve(xtx, xty)
    c = np.zeros_like(cl.sizes)
    rho_hat, n_iter, converged, clamped = 0.0, 0, True, False
    sigma2 = float(np.sum((cl.y - cl.X @ beta) ** 2) / max(n - k, 1))
    notes = []

    if correlation == "exchangeable":
        converged = False
        max_n = cl.sizes.max()
        lo = -1.0 / (max_n - 1.0) if max_n > 1 else -np.inf
        npairs = float(np.sum(cl.sizes * (cl.sizes - 1.0)) / 2.0)
        for n_iter in range(1, max_iter + 1):
            if rho is None:
                e = cl.y - cl.X @ beta
                sigma2 = float(np.sum(e * e) / max(n - k, 1))
                if npairs > 0 and sigma2 > 0:
                    E = cl.csum(e)
                    Q = cl.csum(e * e)
                    r = float(np.sum(E * E - Q) / 2.0) / (sigma2 * npairs)
                else:
                    r = 0.0
                eps = 1e-6
                if r <= lo + eps or r >= 1.0 - eps:
                    clamped = True
                    r = float(np.clip(r, lo + eps, 1.0 - eps))
                rho_hat = r
            else:
                rho_hat = float(rho)
            c = rho_hat / (1.0 - rho_hat + cl.sizes * rho_hat)
            bread = xtx - (S * c[:, None]).T @ S
            rhs = xty - (S * c[:, None]).T @ T
            new = np.linalg.solve(bread, rhs)
            step = float(np.max(np.abs(new - beta)))
            beta = new
            if step < tol:
                converged = True
                break
        if not converged:
            log.warning("GEE did not converge in %d iterations", max_iter)
            notes.append("not converged")
        if clamped:
            notes.append("rho clamped into valid range")

    bread = xtx - (S * c[:, None]).T @ S
    e = cl.y - cl.X @ beta
    U = cl.csum(cl.X * e[:, None]) - S * (c * cl.csum(e))[:, None]
    meat = U.T @ U
    b_inv = np.linalg.inv(bread)
    cov = b_inv @ meat @ b_inv
    cov = 0.5 * (cov + cov.T)
    return GeeFit(
        coefficients=beta,
        sandwich_cov=cov,
        rho_hat=float(rho_hat),
        n_iter=n_iter,
        converged=converged,
        names=tuple(names),
        correlation=correlation,
        sigma2=sigma2,
        rho_clamped=clamped,
        notes=tuple(notes),
    )


def gee_fit(ds: Dataset, spec: GeeSpec = GeeSpec()) -> GeeFit:
    X, names = spec.design_builder(ds)
    return fit_gee(
        X, ds.y, ds.codes, spec.correlation, spec.max_iter, spec.tol, spec.rho, names
    )


def wald_test(fit: GeeFit, coef_indices) -> WaldResult:
    """Robust Wald test that the indexed coefficients are all zero.

    One index gives a two-sided z test; several give a chi-square test
    with as many degrees of freedom as indices.
    """
    idx = [fit.index(i) if isinstance(i, str) else int(i) for i in np.atleast_1d(coef_indices)]
    if not idx or len(set(idx)) != len(idx):
        raise InvalidParams("coefficient indices must be non-empty and distinct")
    k = fit.coefficients.size
    if any(i < 0 or i >= k for i in idx):
        raise InvalidParams(f"coefficient index out of range for {k} coefficients")
    b = fit.coefficients[idx]
    V = fit.sandwich_cov[np.ix_(idx, idx)]
    if len(idx) == 1:
        v = V[0, 0]
        if not v > 0:
            raise SingularSubCov("non-positive variance for tested coefficient")
        z = float(b[0] / np.sqrt(v))
        return WaldResult(z, 1, float(numstats.norm_sf2(z)), "z")
    s = np.linalg.svd(V, compute_uv=False)
    if s[-1] <= 1e-12 * s[0]:
        raise SingularSubCov("covariance sub-block is singular")
    stat = float(b @ np.linalg.solve(V, b))
    return WaldResult(stat, len(idx), float(numstats.chisq_sf(stat, len(idx))), "chi2")
