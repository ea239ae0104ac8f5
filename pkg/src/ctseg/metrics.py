"""Per-case agreement metrics between a reference and a predicted lung mask."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ShapeError, UndefinedMetric

# fixed column order for CSVs and report rows
METRIC_FIELDS = (
    "dsc", "jc", "me", "mae", "fpr", "fnr",
    "rel_mean_hu_pct", "abs_rel_mean_hu_pct", "rel_vol_pct", "abs_rel_vol_pct",
)
METRIC_NAMES = {
    "dsc": "Dice Coefficient",
    "jc": "Jaccard Index",
    "me": "ME",
    "mae": "MAE",
    "fpr": "False Positive Ratio",
    "fnr": "False Negative Ratio",
    "rel_mean_hu_pct": "Relative Mean HU Diff (%)",
    "abs_rel_mean_hu_pct": "Absolute Relative Mean HU Diff (%)",
    "rel_vol_pct": "Relative Volume Diff (%)",
    "abs_rel_vol_pct": "Absolute Relative Volume Diff (%)",
}
CSV_FIELDS = ("case_id", "cohort") + METRIC_FIELDS + ("flags",)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def domain_size(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class CaseMetrics:
    case_id: str = ""
    cohort: str = ""
    dsc: float = math.nan
    jc: float = math.nan
    me: float = math.nan
    mae: float = math.nan
    fpr: float = math.nan
    fnr: float = math.nan
    rel_mean_hu_pct: float = math.nan
    abs_rel_mean_hu_pct: float = math.nan
    rel_vol_pct: float = math.nan
    abs_rel_vol_pct: float = math.nan
    flags: list = field(default_factory=list)  # names of undefined metrics

    def values(self):
        return {k: getattr(self, k) for k in METRIC_FIELDS}


def _data(m):
    return np.asarray(getattr(m, "data", m))


def _aligned(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ShapeError(f"grids are not aligned: {shape} vs {a.shape}")


def confusion(ref, pred, domain=None):
    """Voxel confusion counts restricted to ``domain`` (whole grid when None)."""
    r = _data(ref).astype(bool, copy=False)
    p = _data(pred).astype(bool, copy=False)
    d = np.ones(r.shape, dtype=bool) if domain is None else _data(domain).astype(bool, copy=False)
    _aligned(r, p, d)
    return ConfusionCounts(*kernels.confusion_counts(r, p, d))


def dsc(counts):
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        raise UndefinedMetric("Dice undefined: both masks empty")
    return 2 * counts.tp / denom


def jc(counts):
    denom = counts.tp + counts.fp + counts.fn
    if denom == 0:
        raise UndefinedMetric("Jaccard undefined: both masks empty")
    return counts.tp / denom


def fp_fn_ratios(counts):
    if counts.fp + counts.tn == 0:
        raise UndefinedMetric("false positive ratio undefined: no reference-negative voxels")
    if counts.fn + counts.tp == 0:
        raise UndefinedMetric("false negative ratio undefined: empty reference mask")
    return counts.fp / (counts.fp + counts.tn), counts.fn / (counts.fn + counts.tp)


def me_mae(ref, pred, volume):
    """Mean signed / absolute difference of the mask-weighted intensity images.

    Both averages run over the union of the two masks.
    """
    r = _data(ref).astype(bool, copy=False)
    p = _data(pred).astype(bool, copy=False)
    v = _data(volume).astype(np.float64, copy=False)
    _aligned(r, p, v)
    union = r | p
    n = int(np.count_nonzero(union))
    if n == 0:
        raise UndefinedMetric("ME/MAE undefined: empty mask union")
    diff = v[union] * (p[union].astype(np.float64) - r[union].astype(np.float64))
    return float(diff.sum() / n), float(np.abs(diff).sum() / n)


def relative_volume_pct(ref, pred, spacing=(1.0, 1.0, 1.0)):
    r = _data(ref).astype(bool, copy=False)
    p = _data(pred).astype(bool, copy=False)
    _aligned(r, p)
    voxel = float(np.prod(spacing))
    vol_r = np.count_nonzero(r) * voxel
    if vol_r == 0:
        raise UndefinedMetric("reference mask is empty")
    return 100.0 * (np.count_nonzero(p) * voxel - vol_r) / vol_r


def relative_mean_hu_pct(ref, pred, hu_volume):
    r = _data(ref).astype(bool, copy=False)
    p = _data(pred).astype(bool, copy=False)
    hu = _data(hu_volume).astype(np.float64, copy=False)
    _aligned(r, p, hu)
    if not r.any():
        raise UndefinedMetric("reference mask is empty")
    if not p.any():
        raise UndefinedMetric("predicted mask is empty; mean HU undefined")
    mu_r = float(hu[r].mean())
    if mu_r == 0.0:
        raise UndefinedMetric("reference mean HU is zero")
    return 100.0 * (float(hu[p].mean()) - mu_r) / mu_r


def hu_volume_diffs(ref, pred, hu_volume, spacing=(1.0, 1.0, 1.0)):
    """Signed/absolute relative mean-HU and volume differences in percent.

    Returns ``(rel_mean_hu_pct, abs_rel_mean_hu_pct, rel_vol_pct, abs_rel_vol_pct)``.
    The mean-HU difference is relative to the signed reference mean.
    """
    rel_hu = relative_mean_hu_pct(ref, pred, hu_volume)
    rel_vol = relative_volume_pct(ref, pred, spacing)
    return rel_hu, abs(rel_hu), rel_vol, abs(rel_vol)


def evaluate_case(ref, pred, hu_volume, normalized_volume, domain=None, spacing=None,
                  case_id="", cohort=""):
    """Every metric for one case; undefined ones stay NaN and are named in ``flags``."""
    if spacing is None:
        spacing = getattr(ref, "spacing", (1.0, 1.0, 1.0))
    out = CaseMetrics(case_id=case_id, cohort=cohort)
    counts = confusion(ref, pred, domain)
    for name, fn in (("dsc", dsc), ("jc", jc)):
        try:
            setattr(out, name, fn(counts))
        except UndefinedMetric:
            out.flags.append(name)
    # the two ratios are reported independently of each other
    if counts.fp + counts.tn > 0:
        out.fpr = counts.fp / (counts.fp + counts.tn)
    else:
        out.flags.append("fpr")
    if counts.fn + counts.tp > 0:
        out.fnr = counts.fn / (counts.fn + counts.tp)
    else:
        out.flags.append("fnr")
    try:
        out.me, out.mae = me_mae(ref, pred, normalized_volume)
    except UndefinedMetric:
        out.flags += ["me", "mae"]
    try:
        out.rel_mean_hu_pct = relative_mean_hu_pct(ref, pred, hu_volume)
        out.abs_rel_mean_hu_pct = abs(out.rel_mean_hu_pct)
    except UndefinedMetric:
        out.flags += ["rel_mean_hu_pct", "abs_rel_mean_hu_pct"]
    try:
        out.rel_vol_pct = relative_volume_pct(ref, pred, spacing)
        out.abs_rel_vol_pct = abs(out.rel_vol_pct)
    except UndefinedMetric:
        out.flags += ["rel_vol_pct", "abs_rel_vol_pct"]
    return out


# ----------------------------------------------------------------------------
# CSV
# ----------------------------------------------------------------------------


def format_value(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def write_csv(cases, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for c in cases:
            w.writerow([c.case_id, c.cohort] + [format_value(getattr(c, k)) for k in METRIC_FIELDS]
                       + [";".join(c.flags)])


def read_csv(path):
    cases = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ShapeError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            c = CaseMetrics(case_id=row["case_id"], cohort=row["cohort"])
            for k in METRIC_FIELDS:
                setattr(c, k, float(row[k]) if row[k] != "" else math.nan)
            c.flags = [f for f in row["flags"].split(";") if f]
            cases.append(c)
    return cases
