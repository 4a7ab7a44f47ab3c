"""Trial data structures, size weights, cluster summaries and estimand oracles."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, InvalidTreatment, SchemaViolation

log = logging.getLogger(__name__)


def compute_weights(sizes) -> np.ndarray:
    """Size-deviation weights ``N_i / N_+ - 1/M``.

    The numerator ``M * N_i - N_+`` is formed in integer arithmetic so that
    equal sizes yield weights that are exactly zero.
    """
    sizes = np.asarray(sizes)
    if sizes.ndim != 1 or sizes.size < 2:
        raise EmptyInput("need at least two cluster sizes")
    if np.any(sizes < 1) or np.any(sizes != np.round(sizes)):
        raise EmptyInput("cluster sizes must be positive integers")
    sizes = sizes.astype(np.int64)
    m = sizes.size
    total = int(sizes.sum())
    return (m * sizes - total) / float(m * total)


@dataclass(frozen=True)
class Dataset:
    """Individual-level trial data.

    ``a`` must be constant within each cluster. Cluster labels are ordered by
    ``np.unique`` (numeric order for numbers, lexicographic for strings).
    """

    y: np.ndarray
    a: np.ndarray
    cluster_id: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    # derived
    labels: np.ndarray = field(init=False, repr=False)
    codes: np.ndarray = field(init=False, repr=False)
    sizes: np.ndarray = field(init=False, repr=False)
    arm: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        a = np.asarray(self.a).ravel()
        cid = np.asarray(self.cluster_id).ravel()
        n = y.size
        if n == 0:
            raise EmptyInput("dataset has no rows")
        if a.size != n or cid.size != n:
            raise DimensionMismatch("y, a and cluster_id must have equal length")
        if not np.all(np.isfinite(y)):
            raise SchemaViolation("outcome contains missing or non-finite values")
        a_num = np.asarray(a, dtype=float)
        if not np.all(np.isin(a_num, (0.0, 1.0))):
            raise InvalidTreatment("treatment must be coded 0/1")
        covs = {}
        for name, col in dict(self.covariates).items():
            col = np.asarray(col, dtype=float).ravel()
            if col.size != n:
                raise DimensionMismatch(f"covariate {name!r} has wrong length")
            if not np.all(np.isfinite(col)):
                raise SchemaViolation(f"covariate {name!r} has missing values")
            covs[str(name)] = col
        labels, codes = np.unique(cid, return_inverse=True)
        codes = codes.ravel()
        m = labels.size
        if m < 2:
            raise EmptyInput("need at least two clusters")
        sizes = np.bincount(codes, minlength=m)
        a_sum = np.bincount(codes, weights=a_num, minlength=m)
        if np.any((a_sum != 0) & (a_sum != sizes)):
            raise InvalidTreatment("treatment varies within a cluster")
        arm = (a_sum > 0).astype(np.int64)
        if arm.sum() == 0 or arm.sum() == m:
            raise InvalidTreatment("need at least one cluster in each arm")
        set_ = object.__setattr__
        set_(self, "y", y)
        set_(self, "a", a_num.astype(np.int64))
        set_(self, "cluster_id", cid)
        set_(self, "covariates", covs)
        set_(self, "labels", labels)
        set_(self, "codes", codes)
        set_(self, "sizes", sizes)
        set_(self, "arm", arm)

    @property
    def n_clusters(self) -> int:
        return int(self.labels.size)

    @property
    def n_obs(self) -> int:
        return int(self.y.size)

    def cluster_means(self, values) -> np.ndarray:
        return np.bincount(self.codes, weights=values, minlength=self.n_clusters) / self.sizes

    def covariate_means(self, names: Sequence[str]) -> np.ndarray:
        """Cluster means of the named covariates, shape ``(M, len(names))``."""
        out = np.empty((self.n_clusters, len(names)))
        for j, name in enumerate(names):
            if name not in self.covariates:
                raise SchemaViolation(f"unknown covariate {name!r}")
            col = self.covariates[name]
            means = self.cluster_means(col)
            if np.any(np.abs(col - means[self.codes]) > 1e-12 * (1 + np.abs(col))):
                log.info("covariate %r varies within clusters; using cluster means", name)
            out[:, j] = means
        return out

    def with_arm(self, arm) -> "Dataset":
        """Copy with a new cluster-level assignment (for re-randomization)."""
        arm = np.asarray(arm, dtype=np.int64)
        return Dataset(self.y, arm[self.codes], self.cluster_id, self.covariates)


@dataclass(frozen=True)
class ClusterSummary:
    cluster_id: object
    n_i: int
    a_i: int
    y_bar: float
    pi_i: float
    y_tilde: float
    cov_means: dict


def summarize(ds: Dataset, covariates: Sequence[str] | None = None) -> list[ClusterSummary]:
    """One :class:`ClusterSummary` per cluster, in label order."""
    names = list(ds.covariates) if covariates is None else list(covariates)
    ybar = ds.cluster_means(ds.y)
    pi = compute_weights(ds.sizes)
    ytilde = ds.n_clusters * pi * ybar
    cmeans = ds.covariate_means(names) if names else np.empty((ds.n_clusters, 0))
    out = []
    for i, label in enumerate(ds.labels):
        out.append(
            ClusterSummary(
                cluster_id=label.item() if hasattr(label, "item") else label,
                n_i=int(ds.sizes[i]),
                a_i=int(ds.arm[i]),
                y_bar=float(ybar[i]),
                pi_i=float(pi[i]),
                y_tilde=float(ytilde[i]),
                cov_means={nm: float(cmeans[i, j]) for j, nm in enumerate(names)},
            )
        )
    return out


@dataclass(frozen=True)
class PotentialOutcomeTable:
    """Both potential outcomes for every individual (simulation only)."""

    y0: np.ndarray
    y1: np.ndarray
    cluster_id: np.ndarray

    def __post_init__(self):
        y0 = np.asarray(self.y0, dtype=float).ravel()
        y1 = np.asarray(self.y1, dtype=float).ravel()
        cid = np.asarray(self.cluster_id).ravel()
        if not (y0.size == y1.size == cid.size) or y0.size == 0:
            raise DimensionMismatch("potential outcomes and cluster ids must align")
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "y1", y1)
        object.__setattr__(self, "cluster_id", cid)

    def realize(self, arm_by_cluster) -> Dataset:
        """Observed dataset under a cluster-level assignment (label order)."""
        _, codes = np.unique(self.cluster_id, return_inverse=True)
        a = np.asarray(arm_by_cluster, dtype=np.int64)[codes.ravel()]
        y = np.where(a == 1, self.y1, self.y0)
        return Dataset(y, a, self.cluster_id)


@dataclass(frozen=True)
class Estimands:
    i_ate: float
    c_ate: float
    delta: float
    delta_weighted: float
    delta_cov: float


def estimand_oracle(pot: PotentialOutcomeTable, check: bool = True) -> Estimands:
    """Finite-population i-ATE, c-ATE and their difference, three ways.

    ``delta`` is the direct difference, ``delta_weighted`` the size-weighted sum
    of cluster contrasts, and ``delta_cov`` the finite-population covariance
    between size and contrast divided by the mean size.
    """
    _, codes = np.unique(pot.cluster_id, return_inverse=True)
    codes = codes.ravel()
    m = int(codes.max()) + 1
    sizes = np.bincount(codes, minlength=m)
    diff = pot.y1 - pot.y0
    n_tot = diff.size
    i_ate = diff.sum() / n_tot
    tau = np.bincount(codes, weights=diff, minlength=m) / sizes
    c_ate = tau.mean()
    delta = i_ate - c_ate
    delta_w = float(np.sum(compute_weights(sizes) * tau))
    cov = np.mean((sizes - sizes.mean()) * (tau - tau.mean()))
    delta_cov = float(cov * m / n_tot)
    if check:
        scale = 1e-10 * max(1.0, float(np.max(np.abs(tau))))
        if abs(delta - delta_w) > scale or abs(delta - delta_cov) > scale:
            raise ArithmeticError("estimand identities disagree")
    return Estimands(float(i_ate), float(c_ate), float(delta), delta_w, delta_cov)
