"""Revolution-period regression and mapping assessment criteria.

The box classifier cannot count revolutions geometrically, so period
boundaries come from a least-squares fit of point-wise revolution times
against periapsis radius (sqrt or log shape). Two scores compare a box
mapping against a point-wise oracle: consistency (area fraction never
declared inconsistent) and quality (fraction of oracle points whose
containing box carries the matching label).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .dynamics import MARS_UNITS, UnitSystem

SHAPE_SQRT = "sqrt"
SHAPE_LOG = "log"

# Wilson score at 95%
_Z95 = 1.959963984540054


def _shape_basis(shape: str, rp_km):
    if shape == SHAPE_SQRT:
        return np.sqrt(rp_km)
    if shape == SHAPE_LOG:
        return np.log(rp_km)
    raise ValueError(f"unknown period shape {shape!r}")


@dataclass(frozen=True)
class PeriodModel:
    """T(r_p) = A_i + B_i * f(r_p) per revolution count i.

    Declared convention: r_p in km, T in units of ``time_unit_s`` seconds
    (days for the shipped defaults, TU for refitted models).
    """

    shape: str
    table: Mapping[int, Tuple[float, float]]
    time_unit_s: float = 86400.0

    def __post_init__(self):
        if self.shape not in (SHAPE_SQRT, SHAPE_LOG):
            raise ValueError(f"unknown period shape {self.shape!r}")
        if not self.table:
            raise ValueError("period model needs at least one (A, B) entry")
        for i in self.table:
            if not isinstance(i, int) or i < 1:
                raise ValueError("table keys are revolution counts >= 1")
        if self.time_unit_s <= 0:
            raise ValueError("time_unit_s must be positive")

    def raw_time(self, rp_km: float, count: int) -> float:
        """Elapsed model-unit time to the count-th boundary (unsigned)."""
        if count in self.table:
            a, b = self.table[count]
            return a + b * _shape_basis(self.shape, rp_km)
        if 1 in self.table:
            a, b = self.table[1]
            return count * (a + b * _shape_basis(self.shape, rp_km))
        raise ValueError(
            f"no fit stored for {count} revolutions and none to scale from"
        )

    def validate(self, rp_min_km: float, rp_max_km: float) -> None:
        """Reject models that go non-positive anywhere on [rp_min, rp_max].

        Both shapes are monotone in r_p, so the endpoints suffice.
        """
        for count in self.table:
            for rp in (rp_min_km, rp_max_km):
                if self.raw_time(rp, count) <= 0:
                    raise ValueError(
                        f"period fit for {count} revolutions is non-positive "
                        f"at r_p = {rp} km"
                    )


# Shipped defaults (log preferred over sqrt by the original regression);
# kept for provenance, every pipeline run refits on its own oracle data.
# Their unit conventions are mutually inconsistent — see period_time.
DEFAULT_LOG_MODEL = PeriodModel(SHAPE_LOG, {1: (-7.35410, 1.44254)})
DEFAULT_SQRT_MODEL = PeriodModel(SHAPE_SQRT, {1: (-0.19329, 2.10555)})


def fit_period_model(oracle, shape: str, rev_count: int):
    """Least squares of elapsed-time-to-rev_count against sqrt/ln(r_p).

    Uses every oracle point that completed at least ``rev_count``
    revolutions; times are taken as magnitudes so backward runs fit the
    same curve. Returns (A, B, rms_residual) in the oracle's time unit.
    """
    if rev_count < 1:
        raise ValueError("rev_count must be >= 1")
    rps, times = [], []
    for pt in oracle:
        if len(pt.rev_times_tu) >= rev_count:
            rps.append(pt.ic[0])
            times.append(abs(pt.rev_times_tu[rev_count - 1]))
    if len(set(rps)) < 2:
        raise ValueError(
            f"need >= 2 distinct r_p values with {rev_count} completed "
            f"revolutions, got {len(set(rps))}"
        )
    rps = np.asarray(rps)
    times = np.asarray(times)
    design = np.column_stack([np.ones_like(rps), _shape_basis(shape, rps)])
    coeffs, *_ = np.linalg.lstsq(design, times, rcond=None)
    a, b = float(coeffs[0]), float(coeffs[1])
    resid = float(np.sqrt(np.mean((design @ coeffs - times) ** 2)))
    trial = PeriodModel(shape, {rev_count: (a, b)}, time_unit_s=1.0)
    trial.validate(float(rps.min()), float(rps.max()))
    return a, b, resid


def build_period_model(oracle, shape: str, rev_counts: Sequence[int],
                       units: UnitSystem = MARS_UNITS) -> PeriodModel:
    """Fit one (A, B) row per requested revolution count, times in TU."""
    table = {}
    for count in rev_counts:
        a, b, _ = fit_period_model(oracle, shape, count)
        table[int(count)] = (a, b)
    return PeriodModel(shape, table, time_unit_s=units.time_scale_s)


def period_time(rp_km: float, i: int, model: PeriodModel,
                units: UnitSystem = MARS_UNITS) -> float:
    """Elapsed TU to the |i|-th period boundary; negative for i < 0."""
    if i == 0:
        raise ValueError("period index must be non-zero")
    raw = model.raw_time(rp_km, abs(i))
    tu = raw * model.time_unit_s / units.time_scale_s
    if tu <= 0:
        raise ValueError(
            f"period model gives non-positive time at r_p = {rp_km} km; refit"
        )
    return math.copysign(tu, i)


def wilson_interval(matched: int, total: int) -> Tuple[float, float]:
    """95% interval on a proportion; rule of three at the extremes."""
    if total == 0:
        return (1.0, 1.0)  # empty-set convention: q = 1
    if matched == total:
        return (max(0.0, 1.0 - 3.0 / total), 1.0)
    if matched == 0:
        return (0.0, min(1.0, 3.0 / total))
    p = matched / total
    denom = 1.0 + _Z95 ** 2 / total
    center = (p + _Z95 ** 2 / (2 * total)) / denom
    half = _Z95 * math.sqrt(
        p * (1 - p) / total + _Z95 ** 2 / (4 * total ** 2)
    ) / denom
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass(frozen=True)
class QualityReport:
    name: str
    n_points: int
    n_matched: int
    q: float
    ci_low: float
    ci_high: float

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "n_points": self.n_points,
            "n_matched": self.n_matched,
            "q": self.q,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }


def _leaf_arrays(result):
    doms = result.domains
    lo_rp = np.empty(len(doms))
    hi_rp = np.empty(len(doms))
    lo_om = np.empty(len(doms))
    hi_om = np.empty(len(doms))
    ids = np.empty(len(doms), dtype=np.int64)
    for k, d in enumerate(doms):
        lo_rp[k] = d.rp_center_km - d.rp_halfwidth_km
        hi_rp[k] = d.rp_center_km + d.rp_halfwidth_km
        lo_om[k] = d.omega_center_rad - d.omega_halfwidth_rad
        hi_om[k] = d.omega_center_rad + d.omega_halfwidth_rad
        ids[k] = d.id
    return lo_rp, hi_rp, lo_om, hi_om, ids


def _locate_index(rp, om, arrays):
    lo_rp, hi_rp, lo_om, hi_om, ids = arrays
    # split arithmetic can leave ulp-wide slivers between neighboring
    # boxes; treat a point within a few ulps of an edge as on it
    eps_rp = 64.0 * np.spacing(max(abs(rp), 1.0))
    eps_om = 64.0 * np.spacing(max(abs(om), 1.0))
    mask = ((rp >= lo_rp - eps_rp) & (rp <= hi_rp + eps_rp)
            & (om >= lo_om - eps_om) & (om <= hi_om + eps_om))
    if not mask.any():
        raise ValueError(f"point ({rp}, {om}) lies outside the mapped space")
    hits = np.flatnonzero(mask)
    return hits[np.argmin(ids[hits])]  # boundary tie: lowest id wins


def locate(point: Tuple[float, float], result):
    """Final sub-domain containing the point; edge ties -> lowest id."""
    arrays = _leaf_arrays(result)
    return result.domains[_locate_index(point[0], point[1], arrays)]


def _bridge_match(point_label, box_label) -> bool:
    # Inconsistent boxes map to nothing; Acrobatic has no box counterpart.
    if box_label is None or box_label.kind.value == "inconsistent":
        return False
    if point_label.kind.value == "acrobatic":
        return False
    return (point_label.kind == box_label.kind
            and point_label.period_index == box_label.period_index)


def quality(oracle, result,
            set_selector: Union[None, Callable, object] = None,
            name: Optional[str] = None) -> QualityReport:
    """Fraction of oracle points in a set whose containing box matches.

    ``set_selector`` is a predicate over oracle points, a label to compare
    equal to, or None for the whole sample (the global score).
    """
    if set_selector is None:
        member = lambda pt: True
        label = "omega"
    elif callable(set_selector):
        member = set_selector
        label = name or "custom"
    else:
        member = lambda pt: pt.label == set_selector
        label = name or str(set_selector)
    arrays = _leaf_arrays(result)
    total = 0
    matched = 0
    for pt in oracle:
        if not member(pt):
            continue
        total += 1
        dom = result.domains[_locate_index(pt.ic[0], pt.ic[1], arrays)]
        if _bridge_match(pt.label, dom.label):
            matched += 1
    q = 1.0 if total == 0 else matched / total
    lo, hi = wilson_interval(matched, total)
    return QualityReport(name or label, total, matched, q, lo, hi)


def quality_by_set(oracle, result) -> Dict[str, QualityReport]:
    """One report per point-wise label present, plus the global 'omega'."""
    reports = {}
    labels = sorted({pt.label for pt in oracle},
                    key=lambda lb: (lb.kind.value, lb.period_index))
    for lb in labels:
        key = f"{lb.kind.value}_{lb.period_index}"
        reports[key] = quality(oracle, result, lb, name=key)
    reports["omega"] = quality(oracle, result, None)
    return reports


def consistency(result, up_to: int) -> float:
    """Area fraction not declared inconsistent within |up_to| periods."""
    if abs(up_to) > result.n_max:
        raise ValueError("up_to exceeds the classified period count")
    total = sum(d.area for d in result.domains)
    omega = result.space.area
    if abs(total - omega) > 1e-9 * omega:
        raise ValueError("labeled domains do not tile the search space")
    bad = sum(
        d.area for d in result.domains
        if d.label is not None
        and d.label.kind.value == "inconsistent"
        and abs(d.label.period_index) <= abs(up_to)
    )
    return 1.0 - bad / omega


def regression_diagnostics(oracle, model: PeriodModel, rev_count: int,
                           n_bins: int = 20, n_curve: int = 100) -> dict:
    """Scatter + fit-curve samples + per-bin spread, ready for CSV export."""
    rps, times = [], []
    for pt in oracle:
        if len(pt.rev_times_tu) >= rev_count:
            rps.append(pt.ic[0])
            times.append(abs(pt.rev_times_tu[rev_count - 1]))
    rps = np.asarray(rps)
    times = np.asarray(times)
    if rps.size == 0:
        raise ValueError(f"no oracle point completed {rev_count} revolutions")
    lo, hi = float(rps.min()), float(rps.max())
    curve_rp = np.linspace(lo, hi, n_curve)
    curve_t = np.array([
        model.raw_time(rp, rev_count) * model.time_unit_s for rp in curve_rp
    ])
    edges = np.linspace(lo, hi, n_bins + 1)
    hist, _ = np.histogram(rps, bins=edges)
    bin_min = np.full(n_bins, np.nan)
    bin_med = np.full(n_bins, np.nan)
    bin_max = np.full(n_bins, np.nan)
    which = np.clip(np.digitize(rps, edges) - 1, 0, n_bins - 1)
    for b in range(n_bins):
        sel = times[which == b]
        if sel.size:
            bin_min[b] = sel.min()
            bin_med[b] = float(np.median(sel))
            bin_max[b] = sel.max()
    return {
        "scatter_rp_km": rps,
        "scatter_time_tu": times,
        "curve_rp_km": curve_rp,
        "curve_time_s": curve_t,
        "bin_edges_km": edges,
        "bin_count": hist,
        "bin_min_tu": bin_min,
        "bin_median_tu": bin_med,
        "bin_max_tu": bin_max,
    }
