"""Discrete-time survival math and evaluation statistics.

Hazards live on T discrete bins; survival is the running product of
(1 - hazard).  Evaluation covers the censored concordance index, the
Kaplan-Meier product-limit estimator, and the two-group log-rank test with
an analytic chi-square(1) tail.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bags import SurvivalRecord
from .errors import DataError, MetricUndefinedError, ParameterError

# Probability floor inside logs; keeps the loss finite at saturated hazards.
PROB_EPS = 1e-7


@dataclass(frozen=True)
class SurvivalCurve:
    hazards: np.ndarray
    survival: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.hazards.size


@dataclass(frozen=True)
class KMCurve:
    event_times: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    survival: np.ndarray


@dataclass(frozen=True)
class LogrankResult:
    statistic: float
    p_value: float
    group_sizes: tuple[int, int]


def survival_from_hazard(hazards: np.ndarray) -> SurvivalCurve:
    """S[t] = prod_{z<=t} (1 - h[z]).

    Hazards must lie in [0, 1]; boundary values are nudged inside by the
    probability floor so the curve stays in (0, 1].
    """
    h = np.asarray(hazards, dtype=np.float64).ravel()
    if h.size == 0 or not np.all(np.isfinite(h)) or np.any(h < 0) or np.any(h > 1):
        raise DataError(f"hazards must be finite and within [0, 1], got {hazards!r}")
    h = np.clip(h, PROB_EPS, 1.0 - PROB_EPS)
    return SurvivalCurve(h, np.cumprod(1.0 - h))


def nll_loss(curve: SurvivalCurve, record: SurvivalRecord, weight: float = 1.0) -> float:
    """Negative log likelihood of one record under a survival curve.

    Censored records contribute -w log S[t]; observed events contribute
    -w (log S[t-1] + log h[t]), with S[-1] = 1.  Probabilities are floored
    before the log.
    """
    if weight <= 0:
        raise ParameterError(f"weight must be > 0, got {weight}")
    t = record.bin
    if t is None or not (0 <= t < curve.n_bins):
        raise DataError(f"record bin {t} outside [0, {curve.n_bins})")
    S = curve.survival
    if record.censor == 1:
        return -weight * math.log(max(S[t], PROB_EPS))
    s_prev = S[t - 1] if t >= 1 else 1.0
    return -weight * (math.log(max(s_prev, PROB_EPS))
                      + math.log(max(curve.hazards[t], PROB_EPS)))


def risk_score(curve: SurvivalCurve) -> float:
    """Negative area under the discrete survival curve; higher = riskier."""
    return -float(curve.survival.sum())


def c_index(risks, records: list[SurvivalRecord]) -> float:
    """Concordance over comparable pairs (i uncensored, t_i < t_j).

    A pair is concordant when the earlier event carries the higher risk;
    tied risks earn half credit.  Pairs tied in time are not comparable.
    """
    risks = np.asarray(risks, dtype=np.float64).ravel()
    if risks.size != len(records):
        raise DataError(f"{risks.size} risks vs {len(records)} records")
    times = np.asarray([r.time_months for r in records])
    events = np.asarray([r.censor == 0 for r in records])
    concordant = 0.0
    comparable = 0
    for i in np.flatnonzero(events):
        later = times > times[i]
        comparable += int(later.sum())
        concordant += np.sum(risks[i] > risks[later])
        concordant += 0.5 * np.sum(risks[i] == risks[later])
    if comparable == 0:
        raise MetricUndefinedError("no comparable pairs: c-index undefined")
    return float(concordant / comparable)


def km_estimate(records: list[SurvivalRecord]) -> KMCurve:
    """Product-limit estimator; deaths precede censorings at equal times."""
    if not records:
        raise DataError("cannot estimate a survival curve from no records")
    times = np.asarray([r.time_months for r in records])
    events = np.asarray([r.censor == 0 for r in records])
    event_times = np.unique(times[events])
    at_risk = np.empty(event_times.size, dtype=np.int64)
    deaths = np.empty(event_times.size, dtype=np.int64)
    surv = np.empty(event_times.size)
    s = 1.0
    for k, t in enumerate(event_times):
        at_risk[k] = int(np.sum(times >= t))
        deaths[k] = int(np.sum(events & (times == t)))
        s *= 1.0 - deaths[k] / at_risk[k]
        surv[k] = s
    return KMCurve(event_times, at_risk, deaths, surv)


def chi2_sf_1df(x: float) -> float:
    """Upper tail of chi-square with 1 dof: Q(x) = erfc(sqrt(x/2)).

    This is the regularized upper incomplete gamma Q(1/2, x/2) in closed
    form; the test suite cross-checks it against an independent
    series/continued-fraction evaluation.
    """
    if x < 0:
        raise ParameterError(f"chi-square statistic must be >= 0, got {x}")
    return math.erfc(math.sqrt(x / 2.0))


def logrank(records_a: list[SurvivalRecord], records_b: list[SurvivalRecord]
            ) -> LogrankResult:
    """Two-group log-rank test with chi-square(1) p-value."""
    if not records_a or not records_b:
        raise DataError("both groups must be nonempty")
    ta = np.asarray([r.time_months for r in records_a])
    ea = np.asarray([r.censor == 0 for r in records_a])
    tb = np.asarray([r.time_months for r in records_b])
    eb = np.asarray([r.censor == 0 for r in records_b])
    event_times = np.unique(np.concatenate([ta[ea], tb[eb]]))
    observed_minus_expected = 0.0
    variance = 0.0
    for t in event_times:
        na = int(np.sum(ta >= t))
        nb = int(np.sum(tb >= t))
        da = int(np.sum(ea & (ta == t)))
        db = int(np.sum(eb & (tb == t)))
        n = na + nb
        d = da + db
        if n < 1 or d < 1:
            continue
        observed_minus_expected += da - d * na / n
        if n > 1:
            variance += d * (na / n) * (nb / n) * (n - d) / (n - 1)
    if variance <= 0:
        return LogrankResult(0.0, 1.0, (len(records_a), len(records_b)))
    stat = observed_minus_expected**2 / variance
    return LogrankResult(float(stat), chi2_sf_1df(stat),
                         (len(records_a), len(records_b)))


def median_split(risks) -> tuple[np.ndarray, np.ndarray]:
    """Indices of (low-risk, high-risk) groups split at the median.

    Ties at the median go to the low-risk group.  If that leaves one group
    empty (all risks equal), falls back to a stable sort-order split.
    """
    risks = np.asarray(risks, dtype=np.float64).ravel()
    if risks.size < 2:
        raise DataError("need at least 2 cases to split")
    med = float(np.median(risks))
    low = np.flatnonzero(risks <= med)
    high = np.flatnonzero(risks > med)
    if low.size == 0 or high.size == 0:
        warnings.warn("degenerate median split (all risks tied at the median); "
                      "falling back to a sort-order split", stacklevel=2)
        order = np.argsort(risks, kind="stable")
        half = risks.size - risks.size // 2
        return np.sort(order[:half]), np.sort(order[half:])
    return low, high


def write_km_outputs(curves: dict[str, KMCurve], result: LogrankResult,
                     out_prefix) -> list[Path]:
    """CSV step data per group plus a JSON log-rank summary."""
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, curve in curves.items():
        path = prefix.with_name(f"{prefix.name}_km_{name}.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("time,at_risk,events,survival\n")
            for t, n, d, s in zip(curve.event_times, curve.at_risk,
                                  curve.events, curve.survival):
                fh.write(f"{t:.9g},{n},{d},{s:.9g}\n")
        paths.append(path)
    jpath = prefix.with_name(f"{prefix.name}_logrank.json")
    with open(jpath, "w", encoding="utf-8") as fh:
        json.dump({"statistic": result.statistic, "p_value": result.p_value,
                   "group_sizes": list(result.group_sizes)}, fh, indent=1,
                  sort_keys=True)
        fh.write("\n")
    paths.append(jpath)
    return paths
