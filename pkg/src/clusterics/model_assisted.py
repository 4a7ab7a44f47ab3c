"""Model-assisted ICS tests: OLS of size-weighted cluster means.

The response for cluster ``i`` is ``M * pi_i * ybar_i``; its OLS slope on the
treatment indicator estimates the difference between the individual-average
and cluster-average treatment effects. Covariate adjustment adds centered
cluster-level covariates and their interactions with treatment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numstats
from .data import Dataset, compute_weights
from .errors import DegenerateResult, InsufficientClusters, InvalidParams

log = logging.getLogger(__name__)

METHOD_NAME = "Model-Assisted Test"
SIZE_COLUMN = "cluster_size"
# HC0 reproduces the small-sample behaviour reported for these tests; HC1 is selectable
DEFAULT_HC = "HC0"


@dataclass(frozen=True)
class MatResult:
    delta_hat: float
    se: float
    t_stat: float
    df: float
    p_value: float
    ci_95: tuple
    adjusted: bool
    p_covariates: int
    covariate_names: tuple = ()
    degenerate: bool = False
    hc_variant: str = DEFAULT_HC
    residual_df: int = 0
    method: str = METHOD_NAME
    notes: tuple = field(default=())


@dataclass(frozen=True)
class MatDesign:
    """Cluster-level pieces of the model-assisted regression."""

    y_tilde: np.ndarray
    arm: np.ndarray
    centered: np.ndarray  # (M, p) centered covariates, constant columns dropped
    names: tuple
    degenerate: bool
    dropped: tuple = ()

    @property
    def n_clusters(self) -> int:
        return int(self.y_tilde.size)

    @property
    def p(self) -> int:
        return int(self.centered.shape[1])

    @property
    def df(self) -> int:
        m = self.n_clusters
        return m - 1 if self.p == 0 else m - 2 * self.p - 1

    def design(self, arm=None) -> np.ndarray:
        a = (self.arm if arm is None else np.asarray(arm)).astype(float)
        cc = self.centered
        return np.column_stack([np.ones_like(a), a, cc, a[:, None] * cc])


def prepare_design(
    ds: Dataset, covariates: Sequence[str] | None = None, adjust_size: bool = True
) -> MatDesign:
    """Build the weighted-mean response and centered covariate block."""
    names = list(covariates or [])
    m = ds.n_clusters
    pi = compute_weights(ds.sizes)
    ybar = ds.cluster_means(ds.y)
    y_tilde = m * pi * ybar
    degenerate = bool(np.all(ds.sizes == ds.sizes[0]))

    cols = [ds.covariate_means(names)] if names else []
    if adjust_size:
        cols.append(ds.sizes.astype(float)[:, None])
        names.append(SIZE_COLUMN)
    raw = np.hstack(cols) if cols else np.empty((m, 0))
    centered = raw - raw.mean(axis=0)
    keep, dropped = [], []
    for j, name in enumerate(names):
        scale = 1.0 + np.max(np.abs(raw[:, j]))
        if np.max(np.abs(centered[:, j])) <= 1e-12 * scale:
            dropped.append(name)
            log.warning("covariate %r is constant across clusters; dropped", name)
        else:
            keep.append(j)
    return MatDesign(
        y_tilde=y_tilde,
        arm=ds.arm.copy(),
        centered=centered[:, keep],
        names=tuple(names[j] for j in keep),
        degenerate=degenerate,
        dropped=tuple(dropped),
    )


def studentize(delta, se, scale):
    """t-ratio with 0/0 resolved to 0 (response constant up to rounding)."""
    delta = np.asarray(delta, dtype=float)
    se = np.asarray(se, dtype=float)
    tiny = 1e-12 * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        t = delta / se
        zero_se = se <= tiny
        t = np.where(zero_se & (np.abs(delta) <= tiny), 0.0, t)
        t = np.where(zero_se & (np.abs(delta) > tiny), np.sign(delta) * np.inf, t)
    return t


def batched_statistics(md: MatDesign, arms: np.ndarray, hc_variant: str = DEFAULT_HC):
    """Treatment coefficient, robust SE and t-ratio for many assignments at once.

    Parameters
    ----------
    md : MatDesign
    arms : ndarray, shape (D, M)
        Cluster-level 0/1 assignments.

    Returns
    -------
    delta, se, t : ndarray, shape (D,)
    ok : ndarray of bool
        False where the design for that assignment is rank deficient.
    """
    arms = np.atleast_2d(np.asarray(arms, dtype=float))
    d, m = arms.shape
    cc = md.centered
    p = cc.shape[1]
    k = 2 + 2 * p
    X = np.empty((d, m, k))
    X[:, :, 0] = 1.0
    X[:, :, 1] = arms
    if p:
        X[:, :, 2 : 2 + p] = cc[None, :, :]
        X[:, :, 2 + p :] = arms[:, :, None] * cc[None, :, :]
    if m <= k:
        ok = np.zeros(d, dtype=bool)
    else:
        s = np.linalg.svd(X, compute_uv=False)
        ok = s[:, -1] > numstats.RANK_TOL * s[:, 0]
    xtx = np.einsum("dmk,dml->dkl", X, X)
    xtx[~ok] = np.eye(k)
    bread = np.linalg.inv(xtx)
    y = md.y_tilde
    beta = np.einsum("dkl,dml,m->dk", bread, X, y)
    resid = y[None, :] - np.einsum("dmk,dk->dm", X, beta)
    xe = X * resid[:, :, None]
    meat = np.einsum("dmk,dml->dkl", xe, xe)
    b1 = bread[:, 1, :]
    var = np.einsum("dk,dkl,dl->d", b1, meat, b1)
    if hc_variant == "HC1":
        var = var * (m / (m - k)) if m > k else np.full(d, np.nan)
    se = np.sqrt(np.maximum(var, 0.0))
    delta = beta[:, 1]
    scale = 1.0 + float(np.max(np.abs(y)))
    t = studentize(delta, se, scale)
    delta = np.where(ok, delta, np.nan)
    se = np.where(ok, se, np.nan)
    t = np.where(ok, t, np.nan)
    return delta, se, t, ok


def model_assisted_test(
    ds: Dataset,
    covariates: Sequence[str] | None = None,
    adjust_size: bool = True,
    hc_variant: str = DEFAULT_HC,
) -> MatResult:
    """Model-assisted test of ``H0: i-ATE = c-ATE``.

    With no covariates and ``adjust_size=False`` this is the unadjusted test,
    referred to a t distribution on ``M - 1`` degrees of freedom. Otherwise
    ``p`` centered cluster-level covariates (cluster size included when
    ``adjust_size``) and their treatment interactions enter the regression and
    the reference distribution has ``M - 2p - 1`` degrees of freedom.
    """
    md = prepare_design(ds, covariates, adjust_size)
    return _test_from_design(md, hc_variant)


def _test_from_design(md: MatDesign, hc_variant: str) -> MatResult:
    m = md.n_clusters
    adjusted = md.p > 0
    df = md.df
    k = 2 + 2 * md.p
    notes = ("df follows M-1 / M-2p-1; residual df is reported separately",)
    if md.degenerate:
        return MatResult(
            delta_hat=0.0, se=0.0, t_stat=0.0, df=float(max(df, 1)), p_value=1.0,
            ci_95=(0.0, 0.0), adjusted=adjusted, p_covariates=md.p,
            covariate_names=md.names, degenerate=True, hc_variant=hc_variant,
            residual_df=m - k, notes=notes + ("all cluster sizes equal",),
        )
    if df <= 0 or m <= k:
        raise InsufficientClusters(
            f"{m} clusters cannot support {md.p} adjustment covariates"
        )
    fit = numstats.ols_fit(md.design(), md.y_tilde, hc_variant)
    delta = float(fit.coefficients[1])
    se = fit.se(1)
    t = float(studentize(delta, se, 1.0 + float(np.max(np.abs(md.y_tilde)))))
    p = float(numstats.t_sf2(t, df)) if np.isfinite(t) else 0.0
    res = MatResult(
        delta_hat=delta, se=se, t_stat=t, df=float(df), p_value=p, ci_95=(np.nan, np.nan),
        adjusted=adjusted, p_covariates=md.p, covariate_names=md.names,
        hc_variant=hc_variant, residual_df=m - k, notes=notes,
    )
    return _replace_ci(res, delta_ci(res, 0.95))


def _replace_ci(res: MatResult, ci) -> MatResult:
    from dataclasses import replace

    return replace(res, ci_95=tuple(ci))


def delta_ci(res: MatResult, level: float = 0.95) -> tuple[float, float]:
    """Wald interval ``delta_hat +/- q * se`` with a bisection t quantile."""
    if res.degenerate:
        raise DegenerateResult("no interval for a degenerate (equal-size) result")
    if not 0.0 < level < 1.0:
        raise InvalidParams(f"level must lie in (0, 1), got {level}")
    q = numstats.t_quantile(0.5 * (1.0 + level), res.df)
    half = q * res.se
    return (res.delta_hat - half, res.delta_hat + half)
