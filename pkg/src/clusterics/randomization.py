"""Cluster-level randomization tests built on the model-assisted statistic."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import (
    AllStatisticsUndefined,
    InsufficientClusters,
    InvalidParams,
    RankDeficient,
    TooManyAssignments,
)
from .model_assisted import DEFAULT_HC, MatDesign, batched_statistics, prepare_design
from .numstats import RngStream

METHOD_NAME = "Randomization-Based Test"
DEFAULT_N_PERMS = 5000
ENUMERATION_CAP = 100_000
_CHUNK = 2048
# mathematically tied statistics (e.g. an assignment and its complement under
# balanced arms) can differ in the last bits; they still count as extreme
TIE_RTOL = 1e-10


@dataclass(frozen=True)
class RandTestResult:
    observed_stat: float
    p_value: float
    n_perms: int
    n_extreme: int
    adjusted: bool
    seed: int | None
    enumerated: bool = False
    n_degenerate: int = 0
    add_one: bool = False
    degenerate: bool = False
    p_covariates: int = 0
    covariate_names: tuple = ()
    method: str = METHOD_NAME


def enumerate_assignments(m: int, m1: int, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """All 0/1 vectors of length ``m`` with ``m1`` ones, in lexicographic
    order of the treated positions."""
    if not 0 <= m1 <= m:
        raise InvalidParams(f"need 0 <= m1 <= m, got m={m}, m1={m1}")
    total = math.comb(m, m1)
    if total > cap:
        raise TooManyAssignments(f"C({m},{m1}) = {total} exceeds cap {cap}")
    out = np.zeros((total, m), dtype=np.int64)
    for row, idx in enumerate(itertools.combinations(range(m), m1)):
        out[row, list(idx)] = 1
    return out


def randomization_test(
    ds: Dataset,
    covariates: Sequence[str] | None = None,
    adjust_size: bool = True,
    n_perms: int = DEFAULT_N_PERMS,
    seed: int | None = None,
    *,
    rng: RngStream | np.random.Generator | None = None,
    enumerate_if_small: bool = True,
    enumeration_cap: int = ENUMERATION_CAP,
    add_one: bool = False,
    hc_variant: str = DEFAULT_HC,
) -> RandTestResult:
    """Permutation test of ``H0: i-ATE = c-ATE``.

    The observed cluster-level assignment is re-shuffled ``n_perms`` times
    (treated count preserved) and the model-assisted t-ratio is recomputed
    each time. The p-value is the share of permuted ratios with
    ``|T_d| >= |T_obs|``, with ties inside a relative ``TIE_RTOL`` counted as
    extreme. When the number of distinct assignments does not
    exceed ``n_perms`` every assignment is enumerated instead.

    A permutation whose adjusted design is rank deficient counts as
    non-extreme and is tallied in ``n_degenerate``.
    """
    if n_perms < 1:
        raise InvalidParams("n_perms must be at least 1")
    md = prepare_design(ds, covariates, adjust_size)
    return _randomization_from_design(
        md, n_perms, seed, rng, enumerate_if_small, enumeration_cap, add_one, hc_variant
    )


def _generator(seed, rng) -> np.random.Generator:
    if rng is None:
        return RngStream(0 if seed is None else int(seed)).generator
    if isinstance(rng, RngStream):
        return rng.generator
    return rng


def _randomization_from_design(
    md: MatDesign, n_perms, seed, rng, enumerate_if_small, cap, add_one, hc_variant
) -> RandTestResult:
    m = md.n_clusters
    m1 = int(md.arm.sum())
    common = dict(
        adjusted=md.p > 0, seed=seed, add_one=add_one, p_covariates=md.p,
        covariate_names=md.names,
    )
    if md.degenerate:
        return RandTestResult(0.0, 1.0, n_perms, n_perms, degenerate=True, **common)
    if md.df <= 0 or m <= 2 + 2 * md.p:
        raise InsufficientClusters(f"{m} clusters cannot support {md.p} covariates")

    _, _, t_obs_arr, ok_obs = batched_statistics(md, md.arm[None, :], hc_variant)
    if not ok_obs[0]:
        raise RankDeficient("observed design is rank deficient")
    t_obs = abs(float(t_obs_arr[0]))

    total = math.comb(m, m1)
    enumerated = enumerate_if_small and total <= min(n_perms, cap)
    if enumerated:
        arms = enumerate_assignments(m, m1, cap)
        _, _, t, ok = batched_statistics(md, arms, hc_variant)
        # the enumerated copy of the observed assignment supplies T_obs
        hit = np.flatnonzero((arms == md.arm[None, :]).all(axis=1))
        t_obs = abs(float(t[hit[0]]))
        draws = [(t, ok, t_obs)]
        n_total = total
    else:
        gen = _generator(seed, rng)
        draws = []
        done = 0
        while done < n_perms:
            size = min(_CHUNK, n_perms - done)
            arms = gen.permuted(np.broadcast_to(md.arm, (size + 1, m)), axis=1)
            # row 0 carries the observed assignment through the same batch
            arms[0] = md.arm
            _, _, t, ok = batched_statistics(md, arms, hc_variant)
            draws.append((t[1:], ok[1:], abs(float(t[0]))))
            done += size
        n_total = n_perms

    n_extreme = 0
    n_bad = 0
    for t, ok, ref in draws:
        n_extreme += int(np.sum(ok & (np.abs(t) >= ref * (1.0 - TIE_RTOL))))
        n_bad += int(np.sum(~ok))
    if n_bad == n_total:
        raise AllStatisticsUndefined(
            f"all {n_total} permuted designs were rank deficient"
        )
    if add_one:
        p = (n_extreme + 1) / (n_total + 1)
    else:
        p = n_extreme / n_total
    return RandTestResult(
        observed_stat=float(t_obs_arr[0]),
        p_value=float(p),
        n_perms=n_total,
        n_extreme=n_extreme,
        enumerated=enumerated,
        n_degenerate=n_bad,
        **common,
    )
