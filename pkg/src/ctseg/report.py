"""Cohort statistics, boxplot data and outlier listings over per-case metrics."""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .metrics import METRIC_FIELDS, METRIC_NAMES, format_value

# metrics shown as boxplots, one panel each
BOXPLOT_FIELDS = ("dsc", "jc", "me", "mae", "rel_mean_hu_pct", "rel_vol_pct")
WHISKER_K = 1.5

SUMMARY_HEADER = ("cohort", "metric", "n", "n_missing", "min", "max", "mean", "sd")
BOXPLOT_HEADER = ("cohort", "metric", "n", "q1", "median", "q3", "whisker_low", "whisker_high", "outliers")


@dataclass
class MetricStats:
    n: int
    n_missing: int
    min: float = math.nan
    max: float = math.nan
    mean: float = math.nan
    sd: float = math.nan  # NaN when fewer than two values


@dataclass
class CohortSummary:
    cohort: str
    n: int
    stats: dict = field(default_factory=dict)  # field name -> MetricStats


@dataclass
class BoxplotData:
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: list
    inliers: list

    @property
    def iqr(self):
        return self.q3 - self.q1


def _finite(values):
    vals = np.asarray([float(v) for v in values], dtype=np.float64)
    keep = ~np.isnan(vals)
    return vals[keep], int((~keep).sum())


def summarize(cases, cohort=None):
    """Min/max/mean/sample-sd per metric; missing values are excluded and counted."""
    cases = list(cases)
    if not cases:
        raise DataError("cannot summarize an empty cohort")
    if cohort is None:
        cohort = cases[0].cohort
    out = CohortSummary(cohort=cohort, n=len(cases))
    for name in METRIC_FIELDS:
        vals, missing = _finite(getattr(c, name) for c in cases)
        st = MetricStats(n=vals.size, n_missing=missing)
        if vals.size:
            # sorting first makes the float sums independent of case order
            vals = np.sort(vals)
            st.min = float(vals[0])
            st.max = float(vals[-1])
            st.mean = float(math.fsum(vals) / vals.size)
            if vals.size >= 2:
                st.sd = float(math.sqrt(math.fsum((vals - st.mean) ** 2) / (vals.size - 1)))
        out.stats[name] = st
    return out


def boxplot_data(values, k=WHISKER_K):
    """Linear-interpolation quartiles and Tukey whiskers."""
    vals, _ = _finite(values)
    if vals.size < 4:
        raise DataError(f"boxplot needs at least 4 values, got {vals.size}")
    vals = np.sort(vals)
    q1, med, q3 = np.percentile(vals, [25, 50, 75], method="linear")
    lo_fence = q1 - k * (q3 - q1)
    hi_fence = q3 + k * (q3 - q1)
    inside = (vals >= lo_fence) & (vals <= hi_fence)
    inl = vals[inside]
    return BoxplotData(
        q1=float(q1), median=float(med), q3=float(q3),
        whisker_low=float(inl.min()), whisker_high=float(inl.max()),
        outliers=[float(v) for v in vals[~inside]],
        inliers=[float(v) for v in inl],
    )


@dataclass(frozen=True)
class OutlierEntry:
    case_id: str
    cohort: str
    metric: str
    value: float
    bound: float  # the whisker the value lies beyond


def by_cohort(cases):
    groups = {}
    for c in cases:
        groups.setdefault(c.cohort, []).append(c)
    return {k: groups[k] for k in sorted(groups)}


def outlier_report(cases, fields=METRIC_FIELDS, k=WHISKER_K):
    """Cases whose metrics fall outside their cohort's whiskers, sorted by case id.

    Cohorts with fewer than four defined values for a metric are skipped for
    that metric.
    """
    found = []
    for cohort, members in by_cohort(cases).items():
        for name in fields:
            vals, _ = _finite(getattr(c, name) for c in members)
            if vals.size < 4:
                continue
            box = boxplot_data(vals, k)
            for c in members:
                v = float(getattr(c, name))
                if math.isnan(v):
                    continue
                if v < box.whisker_low:
                    found.append(OutlierEntry(c.case_id, cohort, name, v, box.whisker_low))
                elif v > box.whisker_high:
                    found.append(OutlierEntry(c.case_id, cohort, name, v, box.whisker_high))
    order = {n: i for i, n in enumerate(METRIC_FIELDS)}
    found.sort(key=lambda e: (e.case_id, e.cohort, order.get(e.metric, len(order))))
    return found


# ----------------------------------------------------------------------------
# writers
# ----------------------------------------------------------------------------


def write_summary(summaries, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for s in summaries:
            for name in METRIC_FIELDS:
                st = s.stats[name]
                w.writerow([s.cohort, METRIC_NAMES[name], st.n, st.n_missing]
                           + [format_value(x) for x in (st.min, st.max, st.mean, st.sd)])


def write_boxplot(cases, path, fields=BOXPLOT_FIELDS):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOXPLOT_HEADER)
        for cohort, members in by_cohort(cases).items():
            for name in fields:
                vals, _ = _finite(getattr(c, name) for c in members)
                if vals.size < 4:
                    w.writerow([cohort, METRIC_NAMES[name], vals.size] + [""] * 6)
                    continue
                b = boxplot_data(vals)
                w.writerow([cohort, METRIC_NAMES[name], vals.size]
                           + [format_value(x) for x in (b.q1, b.median, b.q3, b.whisker_low, b.whisker_high)]
                           + [";".join(format_value(x) for x in b.outliers)])


def write_outliers(entries, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("case_id\tcohort\tmetric\tvalue\twhisker\n")
        for e in entries:
            fh.write(f"{e.case_id}\t{e.cohort}\t{e.metric}\t{format_value(e.value)}\t{format_value(e.bound)}\n")


def read_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_report(cases, out_dir):
    """Writes summary.csv, boxplot.csv and outliers.txt; returns their paths."""
    cases = sorted(cases, key=lambda c: (c.cohort, c.case_id))
    if not cases:
        raise DataError("no cases to report")
    os.makedirs(out_dir, exist_ok=True)
    paths = {n: os.path.join(out_dir, n) for n in ("summary.csv", "boxplot.csv", "outliers.txt")}
    summaries = [summarize(m, cohort) for cohort, m in by_cohort(cases).items()]
    write_summary(summaries, paths["summary.csv"])
    write_boxplot(cases, paths["boxplot.csv"])
    write_outliers(outlier_report(cases), paths["outliers.txt"])
    return paths
