"""Data-generating processes and the Monte-Carlo replication harness."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, PotentialOutcomeTable, estimand_oracle
from .errors import IcsError, InvalidParams, InvalidScenario
from .gee import GeeSpec, gee_fit, wald_test
from .model_assisted import model_assisted_test
from .model_based import model_based_test, naive_ics_test
from .numstats import RngStream
from .randomization import randomization_test

log = logging.getLogger(__name__)

SCENARIOS = ("sim1", "sim2", "sim3", "typeI_sweep")
SIM_N_PERMS = 500


@dataclass(frozen=True)
class SimData:
    dataset: Dataset
    potential: PotentialOutcomeTable
    arm: np.ndarray  # cluster level
    sizes: np.ndarray
    stratum: np.ndarray  # 0 = lower size stratum, 1 = upper
    threshold: float


def icc_to_tau2(icc: float) -> float:
    """Random-intercept variance giving ``icc`` when the residual variance is 1."""
    if not 0.0 < icc < 1.0:
        raise InvalidScenario(f"icc must lie in (0, 1), got {icc}")
    return icc / (1.0 - icc)


def round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def _check(m: int, k: int, icc: float) -> None:
    if m < 2 or m % 2:
        raise InvalidScenario(f"number of clusters must be even and >= 2, got {m}")
    if not 1 <= k <= 9 or int(k) != k:
        raise InvalidScenario(f"k must be an integer in 1..9, got {k}")
    icc_to_tau2(icc)


def _draw_structure(m, icc, stream: RngStream, low, mid, high):
    half = m // 2
    sizes = np.concatenate(
        [
            round_half_up(stream.uniform(low, mid, half)),
            round_half_up(stream.uniform(mid, high, half)),
        ]
    )
    stratum = np.repeat([0, 1], half)
    arm = stream.generator.permutation(np.repeat([0, 1], half))
    alpha0 = stream.normal(0.0, np.sqrt(icc_to_tau2(icc)), m)
    cid = np.repeat(np.arange(m), sizes)
    n_tot = int(sizes.sum())
    eps0 = stream.normal(0.0, 1.0, n_tot)
    eps1 = stream.normal(0.0, 1.0, n_tot)
    return sizes, stratum, arm, alpha0, cid, eps0, eps1


def _finish(y0, y1, cid, arm, sizes, stratum, threshold, covariates=None) -> SimData:
    a = arm[cid]
    y = np.where(a == 1, y1, y0)
    ds = Dataset(y, a, cid, covariates or {})
    pot = PotentialOutcomeTable(y0, y1, cid)
    return SimData(ds, pot, arm, sizes, stratum, threshold)


def gen_sim1(m: int, k: int, icc: float, stream: RngStream, *, c_coef: float | None = None) -> SimData:
    """Step-function effect modification at size 50.

    Sizes: half rounded Uniform(20, 50), half rounded Uniform(50, 80).
    ``Y(0) = I(N>50) + e0 + u`` and ``Y(1) = 0.5 + (k-4) I(N>50) + e1 + u``
    with a shared cluster intercept ``u``. With ``c_coef`` set, a cluster
    covariate ``C ~ N(0,1)`` is drawn last and added with that coefficient to
    both potential outcomes (this is the sim2 design).
    """
    _check(m, k, icc)
    sizes, stratum, arm, alpha0, cid, eps0, eps1 = _draw_structure(m, icc, stream, 20, 50, 80)
    big = (sizes > 50).astype(float)[cid]
    y0 = big + eps0 + alpha0[cid]
    y1 = 0.5 + big * (k - 4) + eps1 + alpha0[cid]
    covs = None
    if c_coef is not None:
        c = stream.normal(0.0, 1.0, m)
        y0 = y0 + c_coef * c[cid]
        y1 = y1 + c_coef * c[cid]
        covs = {"C": c[cid], "C2": (c * c)[cid]}
    return _finish(y0, y1, cid, arm, sizes, stratum, 50.0, covs)


def gen_sim2(m: int, k: int, icc: float, stream: RngStream, *, c_coef: float = 1.0) -> SimData:
    """Sim-1 design plus a prognostic cluster covariate ``C`` (and ``C2 = C**2``)."""
    return gen_sim1(m, k, icc, stream, c_coef=c_coef)


def sim3_scale(sizes, threshold: float = 20.0, literal: bool = False) -> float:
    """Multiplier for the small-cluster effect in the sim-3 design.

    The default is the ratio of total individuals in large clusters to total
    individuals in small clusters, which makes the individual-average effect
    exactly zero. ``literal=True`` uses the ratio of cluster counts instead.
    """
    sizes = np.asarray(sizes)
    big = sizes > threshold
    if literal:
        num, den = big.sum(), (~big).sum()
    else:
        num, den = sizes[big].sum(), sizes[~big].sum()
    return float(num) / float(den) if den else 0.0


def gen_sim3(
    m: int, k: int, icc: float, stream: RngStream, *, literal_s: bool = False
) -> SimData:
    """Two-stage-analyst design with zero individual-average effect.

    Sizes: half rounded Uniform(5, 20), half rounded Uniform(20, 35).
    ``Y(0) = I(N>20) + C + e0 + u``;
    ``Y(1) = I(N>20)(1 + 0.1(k-1)) - I(N<=20) 0.1(k-1) S + C + e1 + u``.
    """
    _check(m, k, icc)
    sizes, stratum, arm, alpha0, cid, eps0, eps1 = _draw_structure(m, icc, stream, 5, 20, 35)
    c = stream.normal(0.0, 1.0, m)
    s = sim3_scale(sizes, 20.0, literal_s)
    big_c = (sizes > 20).astype(float)
    effect = 0.1 * (k - 1)
    base0 = big_c + c + alpha0
    base1 = big_c * (1.0 + effect) - (1.0 - big_c) * effect * s + c + alpha0
    y0 = base0[cid] + eps0
    y1 = base1[cid] + eps1
    return _finish(y0, y1, cid, arm, sizes, stratum, 20.0, {"C": c[cid]})


def expected_contrasts_sim3(sizes, k: int, literal_s: bool = False):
    """Noise-free cluster contrasts ``E[Y(1) - Y(0)]`` for given sizes."""
    sizes = np.asarray(sizes)
    s = sim3_scale(sizes, 20.0, literal_s)
    big = sizes > 20
    effect = 0.1 * (k - 1)
    return np.where(big, effect, -effect * s)


GENERATORS: dict[str, Callable] = {
    "sim1": gen_sim1,
    "sim2": gen_sim2,
    "sim3": gen_sim3,
    "typeI_sweep": gen_sim2,
}


# -- two-stage procedure ---------------------------------------------------


@dataclass(frozen=True)
class TwoStageResult:
    estimate: float
    se: float
    p_value: float
    rejected_primary_null: bool
    used_independence: bool
    ics_p_value: float


def _treatment_effect_fit(ds: Dataset, covariates: Sequence[str], correlation: str):
    X = np.column_stack(
        [np.ones(ds.n_obs), ds.a.astype(float)] + [ds.covariates[c] for c in covariates]
    )
    names = ["(Intercept)", "A", *covariates]
    fit = gee_fit(ds, GeeSpec(design_builder=lambda _ds: (X, names), correlation=correlation))
    w = wald_test(fit, ["A"])
    j = fit.index("A")
    return float(fit.coefficients[j]), float(np.sqrt(fit.sandwich_cov[j, j])), w.p_value


def independence_analyst(ds: Dataset, alpha: float = 0.05, covariates: Sequence[str] = ("C",)):
    est, se, p = _treatment_effect_fit(ds, covariates, "independence")
    return TwoStageResult(est, se, p, p < alpha, True, float("nan"))


def two_stage_analyst(
    ds: Dataset, alpha: float = 0.05, covariates: Sequence[str] = ("C",)
) -> TwoStageResult:
    """Pick the working correlation by a preliminary ICS test.

    A covariate- and size-adjusted model-assisted test runs first; rejection
    at ``alpha`` selects independence GEE, otherwise exchangeable GEE. Both
    GEE fits adjust for ``covariates``.
    """
    ics = model_assisted_test(ds, covariates=list(covariates), adjust_size=True)
    use_ind = (not ics.degenerate) and ics.p_value < alpha
    corr = "independence" if use_ind else "exchangeable"
    est, se, p = _treatment_effect_fit(ds, covariates, corr)
    return TwoStageResult(est, se, p, p < alpha, use_ind, ics.p_value)


# -- method registry -------------------------------------------------------


def _mat(cov, adjust):
    def run(sd: SimData, rng, sc):
        return model_assisted_test(sd.dataset, cov, adjust_size=adjust).p_value < sc.alpha, None

    return run


def _rbt(cov, adjust):
    def run(sd: SimData, rng, sc):
        res = randomization_test(
            sd.dataset, cov, adjust_size=adjust, n_perms=sc.n_perms, rng=rng
        )
        return res.p_value < sc.alpha, None

    return run


def _mb(kind):
    def run(sd: SimData, rng, sc):
        tr = f"threshold:{sd.threshold:g}" if kind == "threshold" else kind
        return model_based_test(sd.dataset, tr, correlation=sc.correlation).p_value < sc.alpha, None

    return run


def _naive(sd, rng, sc):
    return naive_ics_test(sd.dataset, sc.correlation).p_value < sc.alpha, None


def _analyst(fn):
    def run(sd: SimData, rng, sc):
        r = fn(sd.dataset, sc.alpha, ("C",))
        return r.rejected_primary_null, r.estimate

    return run


METHODS: dict[str, Callable] = {
    "mat": _mat(None, False),
    "mat_adj": _mat(["C"], True),
    "mat_adj_sq": _mat(["C2"], True),
    "rbt": _rbt(None, False),
    "rbt_adj": _rbt(["C"], True),
    "rbt_adj_sq": _rbt(["C2"], True),
    "mb_threshold": _mb("threshold"),
    "mb_log": _mb("log"),
    "mb_linear": _mb("linear"),
    "naive": _naive,
    "analyst1": _analyst(independence_analyst),
    "analyst2": _analyst(two_stage_analyst),
}

METHOD_LABELS = {
    "mat": "Unadjusted Model-Assisted Test",
    "mat_adj": "Adjusted Model-Assisted Test",
    "mat_adj_sq": "Misspecified Adjusted Model-Assisted Test",
    "rbt": "Unadjusted Randomization-Based Test",
    "rbt_adj": "Adjusted Randomization-Based Test",
    "rbt_adj_sq": "Misspecified Adjusted Randomization-Based Test",
    "mb_threshold": "Model-Based Test (threshold)",
    "mb_log": "Model-Based Test (log)",
    "mb_linear": "Model-Based Test (linear)",
    "naive": "Model-Based Naive",
    "analyst1": "Analyst 1 (independence GEE)",
    "analyst2": "Analyst 2 (two-stage)",
}

DEFAULT_METHODS = {
    "sim1": ("mat", "rbt", "mb_threshold", "mb_log", "naive"),
    "sim2": ("mat", "mat_adj", "mat_adj_sq", "rbt", "rbt_adj", "rbt_adj_sq"),
    "sim3": ("analyst1", "analyst2"),
    "typeI_sweep": ("mat", "mat_adj", "mat_adj_sq", "rbt", "rbt_adj", "rbt_adj_sq"),
}

ESTIMATING_METHODS = {"analyst1", "analyst2"}


@dataclass(frozen=True)
class SimulationScenario:
    scenario_id: str = "sim1"
    M: int = 100
    k: int = 5
    icc: float = 0.1
    n_sims: int = 2000
    n_perms: int = SIM_N_PERMS
    alpha: float = 0.05
    seed: int = 1
    methods: tuple = ()
    correlation: str = "exchangeable"
    literal_s: bool = False
    threads: int | None = None

    def __post_init__(self):
        if self.scenario_id not in SCENARIOS:
            raise InvalidScenario(f"unknown scenario {self.scenario_id!r}")
        if self.scenario_id == "typeI_sweep" and self.k != 5:
            raise InvalidScenario("typeI_sweep runs under the null (k = 5)")
        _check(self.M, self.k, self.icc)
        if self.n_sims < 1 or self.n_perms < 1:
            raise InvalidScenario("n_sims and n_perms must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidScenario("alpha must lie in (0, 1)")
        methods = tuple(self.methods) or DEFAULT_METHODS[self.scenario_id]
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            raise InvalidScenario(f"unknown methods {unknown}")
        needs_c = {"mat_adj", "mat_adj_sq", "rbt_adj", "rbt_adj_sq", "analyst1", "analyst2"}
        if self.scenario_id == "sim1" and needs_c.intersection(methods):
            raise InvalidScenario("sim1 has no covariate; adjusted methods need sim2/sim3")
        object.__setattr__(self, "methods", methods)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d


def parse_scenario_file(text: str) -> dict:
    """Flat ``key = value`` scenario file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidScenario(f"line {lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return coerce_scenario_fields(out)


_INT_KEYS = {"M", "k", "n_sims", "n_perms", "seed", "threads"}
_FLOAT_KEYS = {"icc", "alpha"}


def coerce_scenario_fields(raw: dict) -> dict:
    known = set(SimulationScenario.__dataclass_fields__)
    out = {}
    for key, value in raw.items():
        if key == "scenario":
            key = "scenario_id"
        if key not in known:
            raise InvalidScenario(f"unknown scenario key {key!r}")
        try:
            if key in _INT_KEYS:
                value = int(value)
            elif key in _FLOAT_KEYS:
                value = float(value)
            elif key == "methods":
                value = tuple(v.strip() for v in str(value).split(",") if v.strip())
            elif key == "literal_s":
                value = str(value).lower() in ("1", "true", "yes")
        except ValueError:
            raise InvalidScenario(f"bad value for {key!r}: {value!r}") from None
        out[key] = value
    return out


@dataclass
class MethodSummary:
    method: str
    label: str
    rejection_rate: float
    mc_se: float
    n_ok: int
    n_failed: int
    bias: float | None = None
    bias_mc_se: float | None = None
    bias_mc_ci: tuple | None = None


@dataclass
class SimReport:
    scenario: dict
    methods: dict
    true_delta: float
    true_delta_mc_se: float
    elapsed: float
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "scenario": self.scenario,
                "true_delta": self.true_delta,
                "true_delta_mc_se": self.true_delta_mc_se,
                "elapsed_seconds": self.elapsed,
                "methods": {k: asdict(v) for k, v in self.methods.items()},
                "extras": self.extras,
            },
            indent=2,
            sort_keys=True,
        )

    def csv_rows(self) -> list[dict]:
        rows = []
        for name, s in self.methods.items():
            lo, hi = s.bias_mc_ci if s.bias_mc_ci else ("", "")
            rows.append(
                {
                    "scenario": self.scenario["scenario_id"],
                    "method": name,
                    "k": self.scenario["k"],
                    "M": self.scenario["M"],
                    "icc": self.scenario["icc"],
                    "n_sims": self.scenario["n_sims"],
                    "rejection_rate": s.rejection_rate,
                    "mc_se": s.mc_se,
                    "bias": "" if s.bias is None else s.bias,
                    "bias_ci_lo": lo,
                    "bias_ci_hi": hi,
                    "n_failed": s.n_failed,
                    "true_delta": self.true_delta,
                }
            )
        return rows


CSV_FIELDS = [
    "scenario", "method", "k", "M", "icc", "n_sims", "rejection_rate", "mc_se",
    "bias", "bias_ci_lo", "bias_ci_hi", "n_failed", "true_delta",
]


def reports_to_csv(reports: Sequence[SimReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for rep in reports:
        w.writerows(rep.csv_rows())
    return buf.getvalue()


def generate(sc: SimulationScenario, stream: RngStream) -> SimData:
    gen = GENERATORS[sc.scenario_id]
    if sc.scenario_id == "sim3":
        return gen(sc.M, sc.k, sc.icc, stream, literal_s=sc.literal_s)
    return gen(sc.M, sc.k, sc.icc, stream)


def run_replicate(sc: SimulationScenario, rep: int):
    """One replicate: ``(delta, {method: (reject, estimate, used_ind)})``.

    The dataset comes from stream ``(seed, rep)`` child 0 and method ``j``
    draws from child ``j + 1``, so replicates are order-independent.
    """
    stream = RngStream(sc.seed, rep)
    sd = generate(sc, stream.child(0))
    delta = estimand_oracle(sd.potential, check=False).delta
    out = {}
    for j, name in enumerate(sc.methods):
        try:
            reject, est = METHODS[name](sd, stream.child(j + 1), sc)
            out[name] = (bool(reject), est)
        except (IcsError, np.linalg.LinAlgError) as exc:
            log.debug("replicate %d method %s failed: %s", rep, name, exc)
            out[name] = None
    return delta, out


def _run_chunk(sc: SimulationScenario, reps: Sequence[int]):
    return [run_replicate(sc, r) for r in reps]


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("ICS_THREADS", "1") or 1)
    return max(1, int(threads))


def run_scenario(sc: SimulationScenario, progress: Callable | None = None) -> SimReport:
    """Run all replicates of ``sc`` and aggregate per-method summaries.

    Results depend only on the scenario (seed included), not on the number of
    worker processes.
    """
    start = time.perf_counter()
    reps = list(range(sc.n_sims))
    threads = resolve_threads(sc.threads)
    if threads > 1 and sc.n_sims > 1:
        chunks = [reps[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_chunk, [sc] * len(chunks), chunks))
        results = [None] * sc.n_sims
        for chunk, part in zip(chunks, parts):
            for r, res in zip(chunk, part):
                results[r] = res
    else:
        results = []
        for r in reps:
            results.append(run_replicate(sc, r))
            if progress is not None:
                progress(r + 1, sc.n_sims)
    return aggregate(sc, results, time.perf_counter() - start)


def aggregate(sc: SimulationScenario, results, elapsed: float) -> SimReport:
    deltas = np.array([d for d, _ in results])
    summaries = {}
    extras = {}
    for name in sc.methods:
        vals = [r[name] for _, r in results if r[name] is not None]
        n_ok = len(vals)
        n_failed = len(results) - n_ok
        rate = float(np.mean([v[0] for v in vals])) if n_ok else float("nan")
        s = MethodSummary(
            method=name,
            label=METHOD_LABELS[name],
            rejection_rate=rate,
            mc_se=mc_se(rate, n_ok) if n_ok else float("nan"),
            n_ok=n_ok,
            n_failed=n_failed,
        )
        if name in ESTIMATING_METHODS and n_ok:
            est = np.array([v[1] for v in vals])
            # true individual-average effect is zero by construction
            s.bias = float(est.mean())
            s.bias_mc_se = float(est.std(ddof=1) / np.sqrt(n_ok)) if n_ok > 1 else float("nan")
            s.bias_mc_ci = (s.bias - 1.96 * s.bias_mc_se, s.bias + 1.96 * s.bias_mc_se)
        summaries[name] = s
    return SimReport(
        scenario=sc.to_dict(),
        methods=summaries,
        true_delta=float(deltas.mean()),
        true_delta_mc_se=float(deltas.std(ddof=1) / np.sqrt(deltas.size)) if deltas.size > 1 else 0.0,
        elapsed=float(elapsed),
        extras=extras,
    )


def mc_se(rate: float, n_sims: int) -> float:
    """Monte-Carlo standard error of a rejection proportion."""
    if n_sims < 1:
        raise InvalidParams("n_sims must be positive")
    return float(np.sqrt(rate * (1.0 - rate) / n_sims))
