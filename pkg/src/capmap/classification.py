"""Capture-set classification: the box propagation loop and its oracle.

Boxes cannot track revolutions geometrically, so the box classifier walks
period boundaries T_1, T_2, ... taken from a fitted period model and sorts
every box after each leg: split-budget exhaustion and integrator failures
are inconsistent, certified events are crash / moon-crash / escape, and
whatever survives all n_max legs is weakly stable. The point-wise oracle
integrates single states, counts revolutions by accumulated in-plane angle,
and adds the acrobatic label that boxes cannot produce. A capture set is
the geometric intersection of the forward weakly-stable boxes with the
backward first-period escapers.
"""

from __future__ import annotations

import enum
import heapq
import math
import time as _time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import algebra
from .criteria import PeriodModel, period_time
from .dynamics import DynamicsModel, compiled_pointwise_rhs, keplerian_to_cartesian
from .integrator import (
    IntegratorConfig,
    PropagationError,
    Scheme,
    integrate,
    rk_step,
)
from .mapping import (
    AdsConfig,
    DomainStatus,
    SearchSpaceSpec,
    SplitRefused,
    SubDomain,
    propagate_domain,
    split,
)

FORWARD = "forward"
BACKWARD = "backward"


class ClassKind(enum.Enum):
    WEAKLY_STABLE = "weakly_stable"
    UNSTABLE = "unstable"
    TARGET_CRASH = "target_crash"
    MOON_CRASH = "moon_crash"
    ACROBATIC = "acrobatic"
    INCONSISTENT = "inconsistent"


@dataclass(frozen=True)
class ClassLabel:
    """Outcome kind plus the signed period/revolution index it occurred at."""

    kind: ClassKind
    period_index: int

    def __post_init__(self):
        if self.period_index == 0:
            raise ValueError("period_index is signed and non-zero")

    def __str__(self):
        return f"{self.kind.value}[{self.period_index}]"


@dataclass(frozen=True)
class EventThresholds:
    """Terminal radii in LU; escape also needs positive two-body energy."""

    r_crash_lu: float = 1.0
    r_escape_lu: float = 170.0

    def __post_init__(self):
        if not 0 < self.r_crash_lu < self.r_escape_lu:
            raise ValueError("need 0 < r_crash < r_escape")


@dataclass
class MappingResult:
    """Final labeled partition of the search space for one direction."""

    direction: str
    n_max: int
    domains: List[SubDomain]
    space: SearchSpaceSpec
    metadata: dict = field(default_factory=dict)

    def select(self, kind: ClassKind, period_index: int) -> List[SubDomain]:
        want = ClassLabel(kind, period_index)
        return [d for d in self.domains if d.label == want]


@dataclass(frozen=True)
class OraclePoint:
    """One point-wise classification: IC, label, and trajectory summary."""

    ic: Tuple[float, float]  # (r_p km, omega rad)
    label: ClassLabel
    rev_times_tu: Tuple[float, ...]
    final_time_tu: float
    failed: bool = False

    def __post_init__(self):
        if self.label.kind is ClassKind.INCONSISTENT:
            raise ValueError("point-wise labels cannot be inconsistent")


# ---------------------------------------------------------------------------
# certified event detection on a box


def _moon_entries(model: DynamicsModel):
    entries = []
    for idx, body in enumerate(model.perturbers):
        if body.center == model.target and body.radius > 0:
            entries.append((idx, body.radius / model.units.LU))
    return entries


def _interval_sqrt(iv: algebra.Interval) -> Tuple[float, float]:
    lo = math.sqrt(max(iv.lo, 0.0))
    hi = math.sqrt(max(iv.hi, 0.0))
    return lo, hi


def _event_verdict(ymat, t_tu, model, tab, thresholds, moons) -> str:
    mi, mj, mo = tab.mul_i, tab.mul_j, tab.mul_o
    r_lo, r_hi = _interval_sqrt(
        algebra.bound_coeffs(algebra.square_sum_rows(ymat[:3], mi, mj, mo))
    )
    if r_hi < thresholds.r_crash_lu:
        return "crash"
    if r_lo < thresholds.r_crash_lu:
        return "mixed"
    if moons:
        pos = model.perturber_positions_nd(t_tu)
        for idx, radius_lu in moons:
            shifted = ymat[:3].copy()
            shifted[:, 0] -= pos[idx]
            d_lo, d_hi = _interval_sqrt(
                algebra.bound_coeffs(algebra.square_sum_rows(shifted, mi, mj, mo))
            )
            if d_hi < radius_lu:
                return "moon_crash"
            if d_lo < radius_lu:
                return "mixed"
    if r_hi <= thresholds.r_escape_lu:
        return "none"
    v2 = algebra.bound_coeffs(algebra.square_sum_rows(ymat[3:], mi, mj, mo))
    mu = model.mu_t_nd
    energy_lo = 0.5 * v2.lo - mu / r_lo
    energy_hi = 0.5 * v2.hi - mu / r_hi
    if r_lo > thresholds.r_escape_lu:
        if energy_lo > 0.0:
            return "escape"
        if energy_hi <= 0.0:
            return "none"
        return "mixed"
    # radius straddles the escape sphere: only worth splitting if the box
    # could actually satisfy the energy condition
    if energy_hi <= 0.0:
        return "none"
    return "mixed"


_CERTIFIED = {
    "crash": "certified_crash",
    "moon_crash": "certified_moon_crash",
    "escape": "certified_escape",
}


def domain_event_check(d: SubDomain, model: DynamicsModel,
                       thresholds: EventThresholds = EventThresholds()) -> str:
    """Certify the domain's current map against the terminal conditions."""
    tab = d.flow_map.config.tables()
    verdict = _event_verdict(
        d.flow_map.matrix, d.last_time, model, tab, thresholds,
        _moon_entries(model),
    )
    return _CERTIFIED.get(verdict, verdict)


# ---------------------------------------------------------------------------
# box classification loop

_EVENT_KIND = {
    "crash": ClassKind.TARGET_CRASH,
    "moon_crash": ClassKind.MOON_CRASH,
    "escape": ClassKind.UNSTABLE,
}


def _infer_space(grid: Sequence[SubDomain]) -> SearchSpaceSpec:
    return SearchSpaceSpec(
        rp_min_km=min(d.rp_center_km - d.rp_halfwidth_km for d in grid),
        rp_max_km=max(d.rp_center_km + d.rp_halfwidth_km for d in grid),
        omega_min_rad=min(d.omega_center_rad - d.omega_halfwidth_rad for d in grid),
        omega_max_rad=max(d.omega_center_rad + d.omega_halfwidth_rad for d in grid),
    )


def classify_da(grid: Sequence[SubDomain], n_max: int, direction: str,
                period_model: PeriodModel, model: DynamicsModel,
                cfg: AdsConfig, space: Optional[SearchSpaceSpec] = None,
                thresholds: EventThresholds = EventThresholds(),
                progress: Optional[Callable] = None) -> MappingResult:
    """Propagate the grid period by period and label every final box.

    Each period leg runs from the box's own last time to the fitted
    boundary T_i at the box center's r_p. Extraction order within a leg:
    inconsistent (split refused or integrator failure), then certified
    crash, moon crash, escape; survivors of the last leg are weakly
    stable. Boxes are processed in id order, so the outcome does not
    depend on scheduling.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if direction not in (FORWARD, BACKWARD):
        raise ValueError(f"direction must be forward|backward, got {direction!r}")
    sign = 1 if direction == FORWARD else -1
    if not grid:
        raise ValueError("empty grid")
    if space is None:
        space = _infer_space(grid)
    moons = _moon_entries(model)
    tab = grid[0].flow_map.config.tables()

    def check(ymat, t):
        return _event_verdict(ymat, t, model, tab, thresholds, moons)

    terminal: List[SubDomain] = []
    heap = [(d.id, d) for d in grid]
    heapq.heapify(heap)
    started = _time.perf_counter()
    period_wall = []

    for leg in range(1, n_max + 1):
        index = sign * leg
        leg_started = _time.perf_counter()
        survivors = []
        while heap:
            _, d = heapq.heappop(heap)
            t_target = period_time(
                d.rp_center_km, index, period_model, units=model.units
            )
            if sign * (t_target - d.last_time) <= 0:
                survivors.append(d)  # already past this boundary
                continue
            out = propagate_domain(d, d.last_time, t_target, model, cfg,
                                   event_check=check)
            if out.kind == "reached_end":
                survivors.append(d)
            elif out.kind == "needs_split":
                try:
                    lo, hi = split(d, out.direction, cfg.max_splits)
                except SplitRefused:
                    d.label = ClassLabel(ClassKind.INCONSISTENT, index)
                    d.status = DomainStatus.INCONSISTENT
                    terminal.append(d)
                else:
                    heapq.heappush(heap, (lo.id, lo))
                    heapq.heappush(heap, (hi.id, hi))
            elif out.kind == "event":
                d.label = ClassLabel(_EVENT_KIND[out.event_kind], index)
                d.status = DomainStatus.CLASSIFIED
                terminal.append(d)
            else:  # failure
                d.label = ClassLabel(ClassKind.INCONSISTENT, index)
                terminal.append(d)
        heap = [(d.id, d) for d in survivors]
        heapq.heapify(heap)
        period_wall.append(_time.perf_counter() - leg_started)
        if progress is not None:
            progress(index, len(survivors))

    for _, d in heap:
        d.label = ClassLabel(ClassKind.WEAKLY_STABLE, sign * n_max)
        d.status = DomainStatus.CLASSIFIED
        terminal.append(d)

    terminal.sort(key=lambda d: d.id)
    metadata = {
        "direction": direction,
        "n_max": n_max,
        "order": cfg.order,
        "tolerance": cfg.tolerance,
        "max_splits": cfg.max_splits,
        "grid": list(cfg.grid),
        "thresholds": {
            "r_crash_lu": thresholds.r_crash_lu,
            "r_escape_lu": thresholds.r_escape_lu,
        },
        "period_model": {
            "shape": period_model.shape,
            "table": {str(k): list(v) for k, v in period_model.table.items()},
            "time_unit_s": period_model.time_unit_s,
        },
        "target": model.target,
        "perturbers": [b.name for b in model.perturbers],
        "srp": model.srp_enabled,
        "epoch_tdb_s": model.epoch_tdb_s,
        "time_scale_s": model.units.time_scale_s,
        "wall_s": _time.perf_counter() - started,
        "wall_per_period_s": period_wall,
        "n_domains": len(terminal),
    }
    return MappingResult(direction, n_max, terminal, space, metadata)


# ---------------------------------------------------------------------------
# point-wise oracle


@dataclass(frozen=True)
class OracleConfig:
    """Point-wise classification settings.

    ``period_model`` feeds the acrobatic time cap (cap = factor * |T_n|);
    without one the cap falls back to the osculating two-body period.
    ``eccentricity_override`` bypasses the search-space eccentricity —
    intended for injecting hyperbolic states in tests.
    """

    space: SearchSpaceSpec = SearchSpaceSpec()
    period_model: Optional[PeriodModel] = None
    integrator: Optional[IntegratorConfig] = None
    time_cap_factor: float = 3.0
    thresholds: EventThresholds = EventThresholds()
    eccentricity_override: Optional[float] = None
    rev_time_tol_tu: float = 1e-9

    def integrator_config(self) -> IntegratorConfig:
        if self.integrator is not None:
            return self.integrator
        return IntegratorConfig(
            initial_step=1e-3,
            min_step=1e-14,
            max_step=1e3,
            rel_tol=1e-12,
            abs_tol=1e-12,
            scheme=Scheme.RK8_POINTWISE,
        )


class _PointStop(Exception):
    def __init__(self, label, final_time):
        self.label = label
        self.final_time = final_time


def _wrap_pi(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def _bisect_time(f, ta, tb, tol):
    """Root of f on [ta, tb] given a sign change; |tb - ta| may be signed."""
    fa = f(ta)
    for _ in range(200):
        if abs(tb - ta) < tol:
            break
        tm = 0.5 * (ta + tb)
        fm = f(tm)
        if (fm < 0) == (fa < 0):
            ta, fa = tm, fm
        else:
            tb = tm
    return 0.5 * (ta + tb)


def classify_pointwise(ic: Tuple[float, float], n_max: int, direction: str,
                       model: DynamicsModel, cfg: OracleConfig) -> OraclePoint:
    """Integrate one IC and label it by geometric revolution counting.

    Revolutions accumulate as the position angle on the initial osculating
    orbital plane; each 2 pi of accumulated angle completes one. Crash and
    revolution times are bisected inside the bracketing step; moon-crash
    and escape are checked at accepted step ends. Integrator failure
    yields an acrobatic label with the failure flag set.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if direction not in (FORWARD, BACKWARD):
        raise ValueError(f"direction must be forward|backward, got {direction!r}")
    sign = 1 if direction == FORWARD else -1
    space = cfg.space
    rp_km, omega = ic
    if not (space.rp_min_km <= rp_km <= space.rp_max_km
            and space.omega_min_rad <= omega <= space.omega_max_rad):
        raise ValueError(f"IC {ic} outside the search space")
    ecc = space.e if cfg.eccentricity_override is None else cfg.eccentricity_override

    r_pf, v_pf = keplerian_to_cartesian(
        rp_km, ecc, space.i_rad, space.raan_rad, omega, space.M_rad, model.mu_t
    )
    t0 = space.t0_tdb_s if space.t0_tdb_s is not None else model.epoch_tdb_s
    rot = model.rtn_frame(t0).rotation
    y0 = np.concatenate([
        rot @ np.array(r_pf) / model.units.LU,
        rot @ np.array(v_pf) / model.units.velocity_scale_km_s,
    ])

    if cfg.period_model is not None:
        cap = abs(period_time(rp_km, sign * n_max, cfg.period_model,
                              units=model.units))
    else:
        a_nd = (rp_km / model.units.LU) / (1.0 - min(ecc, 0.99))
        cap = n_max * 2.0 * math.pi * a_nd ** 1.5 / math.sqrt(model.mu_t_nd)
    t_end = sign * cap * cfg.time_cap_factor

    rhs = compiled_pointwise_rhs(model)
    thresholds = cfg.thresholds
    moons = _moon_entries(model)
    mu = model.mu_t_nd

    # revolution-counting basis: initial osculating plane
    h_vec = np.cross(y0[:3], y0[3:])
    h_norm = np.linalg.norm(h_vec)
    if h_norm == 0.0:
        raise ValueError("degenerate IC: zero angular momentum")
    normal = h_vec / h_norm
    e1 = y0[:3] / np.linalg.norm(y0[:3])
    e2 = np.cross(normal, e1)

    def plane_angle(y):
        return math.atan2(float(y[:3] @ e2), float(y[:3] @ e1))

    def moon_hit(y, t):
        if not moons:
            return False
        pos = model.perturber_positions_nd(t)
        for idx, radius_lu in moons:
            if np.linalg.norm(y[:3] - pos[idx]) < radius_lu:
                return True
        return False

    state = {"t": 0.0, "y": y0, "theta": 0.0, "acc": 0.0}
    revs: List[float] = []

    def on_step(record, y):
        if not record.accepted:
            return
        ta, ya = state["t"], state["y"]
        tb, yb = record.t, y

        def state_at(t):
            if t == ta:
                return ya
            return rk_step(rhs, ta, ya, t - ta)[0]

        theta_b = plane_angle(yb)
        delta = _wrap_pi(theta_b - state["theta"])
        acc_a, acc_b = state["acc"], state["acc"] + delta
        items = []

        k = len(revs) + 1
        while abs(acc_b) >= 2.0 * math.pi * k:
            target = 2.0 * math.pi * k

            def rev_gap(t, _target=target):
                d = _wrap_pi(plane_angle(state_at(t)) - state["theta"])
                return abs(acc_a + d) - _target

            items.append((_bisect_time(rev_gap, ta, tb, cfg.rev_time_tol_tu),
                          "rev"))
            k += 1

        r_b = float(np.linalg.norm(yb[:3]))
        if r_b < thresholds.r_crash_lu:
            def crash_gap(t):
                return (float(np.linalg.norm(state_at(t)[:3]))
                        - thresholds.r_crash_lu)

            items.append((_bisect_time(crash_gap, ta, tb,
                                       cfg.rev_time_tol_tu), "crash"))
        if moon_hit(yb, tb):
            items.append((tb, "moon_crash"))
        if r_b > thresholds.r_escape_lu:
            energy = 0.5 * float(yb[3:] @ yb[3:]) - mu / r_b
            if energy > 0.0:
                items.append((tb, "escape"))

        items.sort(key=lambda it: sign * it[0])
        for t_i, what in items:
            if what == "rev":
                revs.append(t_i)
                if len(revs) == n_max:
                    raise _PointStop(
                        ClassLabel(ClassKind.WEAKLY_STABLE, sign * n_max), t_i
                    )
            else:
                raise _PointStop(
                    ClassLabel(_EVENT_KIND[what], sign * (len(revs) + 1)), t_i
                )

        state["t"], state["y"] = tb, yb
        state["theta"], state["acc"] = theta_b, acc_b

    try:
        integrate(rhs, y0, 0.0, t_end, cfg.integrator_config(),
                  step_callback=on_step)
    except _PointStop as stop:
        return OraclePoint(ic, stop.label, tuple(revs), stop.final_time)
    except PropagationError as err:
        return OraclePoint(
            ic, ClassLabel(ClassKind.ACROBATIC, sign * (len(revs) + 1)),
            tuple(revs), err.last_time, failed=True,
        )
    return OraclePoint(
        ic, ClassLabel(ClassKind.ACROBATIC, sign * (len(revs) + 1)),
        tuple(revs), t_end,
    )


# ---------------------------------------------------------------------------
# capture sets


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in (r_p km, omega rad)."""

    rp_min_km: float
    rp_max_km: float
    omega_min_rad: float
    omega_max_rad: float

    @property
    def area(self) -> float:
        return ((self.rp_max_km - self.rp_min_km)
                * (self.omega_max_rad - self.omega_min_rad))

    @classmethod
    def of_domain(cls, d: SubDomain) -> "Box":
        return cls(
            d.rp_center_km - d.rp_halfwidth_km,
            d.rp_center_km + d.rp_halfwidth_km,
            d.omega_center_rad - d.omega_halfwidth_rad,
            d.omega_center_rad + d.omega_halfwidth_rad,
        )

    def intersect(self, other: "Box") -> Optional["Box"]:
        rp_lo = max(self.rp_min_km, other.rp_min_km)
        rp_hi = min(self.rp_max_km, other.rp_max_km)
        om_lo = max(self.omega_min_rad, other.omega_min_rad)
        om_hi = min(self.omega_max_rad, other.omega_max_rad)
        if rp_lo >= rp_hi or om_lo >= om_hi:
            return None  # empty or measure-zero touch
        return Box(rp_lo, rp_hi, om_lo, om_hi)


def capture_set(forward: MappingResult, backward: MappingResult) -> List[Box]:
    """Intersections of forward weakly-stable boxes with backward escapers."""
    if forward.direction != FORWARD or backward.direction != BACKWARD:
        raise ValueError("capture_set needs one forward and one backward result")
    if forward.space != backward.space:
        raise ValueError("results cover different search spaces")
    stable = [Box.of_domain(d) for d in
              forward.select(ClassKind.WEAKLY_STABLE, forward.n_max)]
    escaped = [Box.of_domain(d) for d in backward.select(ClassKind.UNSTABLE, -1)]
    out = []
    for a in stable:
        for b in escaped:
            hit = a.intersect(b)
            if hit is not None:
                out.append(hit)
    return out


def capture_ratio(oracle: Sequence[OraclePoint], n: int) -> float:
    """Fraction of oracle ICs weakly stable forward AND escaping backward."""
    if not oracle:
        raise ValueError("empty oracle")
    if n < 1:
        raise ValueError("n must be >= 1")
    forward: Dict[Tuple[float, float], ClassLabel] = {}
    backward: Dict[Tuple[float, float], ClassLabel] = {}
    for pt in oracle:
        (forward if pt.label.period_index > 0 else backward)[pt.ic] = pt.label
    ics = set(forward) | set(backward)
    missing = [ic for ic in ics if ic not in forward or ic not in backward]
    if missing:
        raise ValueError(
            f"{len(missing)} ICs lack one propagation direction"
        )
    want_fwd = ClassLabel(ClassKind.WEAKLY_STABLE, n)
    want_bwd = ClassLabel(ClassKind.UNSTABLE, -1)
    captured = sum(
        1 for ic in ics
        if forward[ic] == want_fwd and backward[ic] == want_bwd
    )
    return captured / len(ics)
