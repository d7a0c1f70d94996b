"""Search-space grid, sub-domain boxes, and the automatic splitting mechanism.

A sub-domain is a rectangle in (periapsis radius [km], argument of periapsis
[rad]) carrying a 6-component flow map over local coordinates in [-1, 1]^2.
When the flow map's top-order coefficient mass exceeds the tolerance, the
domain rolls back to the last compliant step and splits in half; children
re-expand the map by exact affine substitution.

Sub-domain ids are heap-style lineage codes: the initial cells C .. 2C-1
(row-major), a child = 2*parent (lower half) or 2*parent + 1 (upper half).
Ids therefore depend only on lineage, never on processing order.
"""

import enum
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import algebra
from .algebra import AlgebraConfig, PolyVector
from .dynamics import DynamicsModel, FlowMapDynamics, keplerian_to_cartesian
from .integrator import IntegratorConfig, PropagationError, Scheme, integrate

RP_DIRECTION = 0
OMEGA_DIRECTION = 1


class SplitRefused(RuntimeError):
    """Split requested on a domain whose depth budget is exhausted."""


@dataclass(frozen=True)
class SearchSpaceSpec:
    """Annular slice of periapsis states: r_p crown x full omega circle."""

    rp_min_km: float = 3396.0 + 100.0
    rp_max_km: float = 5.0 * 3396.0
    omega_min_rad: float = -math.pi
    omega_max_rad: float = math.pi
    e: float = 0.99
    i_rad: float = 0.6283
    raan_rad: float = 0.6283
    M_rad: float = 0.0
    t0_tdb_s: Optional[float] = None  # None: the model's epoch

    def __post_init__(self):
        if not 0 < self.rp_min_km < self.rp_max_km:
            raise ValueError("need 0 < rp_min < rp_max")
        if not self.omega_min_rad < self.omega_max_rad:
            raise ValueError("need omega_min < omega_max")
        if not 0 <= self.e < 1:
            raise ValueError("search space must be elliptic (0 <= e < 1)")

    @property
    def area(self) -> float:
        return (self.rp_max_km - self.rp_min_km) * (
            self.omega_max_rad - self.omega_min_rad
        )


@dataclass(frozen=True)
class AdsConfig:
    """Polynomial order, split tolerance/budget, and the initial grid."""

    tolerance: float
    order: int = 20
    max_splits: int = 9
    grid: Tuple[int, int] = (32, 32)
    integrator: Optional[IntegratorConfig] = None

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive (inf disables splits)")
        if self.order < 2:
            raise ValueError("order must be >= 2 (error estimate needs it)")
        if self.max_splits < 0:
            raise ValueError("max_splits must be >= 0")
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ValueError("grid must be at least 1x1")

    def integrator_config(self) -> IntegratorConfig:
        if self.integrator is not None:
            return self.integrator
        return IntegratorConfig(
            initial_step=1e-2,
            min_step=1e-13,
            max_step=1e4,
            rel_tol=1e-12,
            abs_tol=1e-12,
            scheme=Scheme.RK8_DA,
        )


class DomainStatus(enum.Enum):
    ACTIVE = "active"
    CLASSIFIED = "classified"
    INCONSISTENT = "inconsistent"


@dataclass
class SubDomain:
    """One box of the search space with its current flow map."""

    id: int
    parent_id: Optional[int]
    rp_center_km: float
    rp_halfwidth_km: float
    omega_center_rad: float
    omega_halfwidth_rad: float
    depth: int
    flow_map: PolyVector
    last_time: float = 0.0  # TU past the mapping epoch
    status: DomainStatus = DomainStatus.ACTIVE
    label: Optional[object] = None  # ClassLabel once classified

    @property
    def area(self) -> float:
        return 4.0 * self.rp_halfwidth_km * self.omega_halfwidth_rad

    def contains(self, rp_km: float, omega_rad: float) -> bool:
        return (
            abs(rp_km - self.rp_center_km) <= self.rp_halfwidth_km
            and abs(omega_rad - self.omega_center_rad) <= self.omega_halfwidth_rad
        )

    def local_point(self, rp_km: float, omega_rad: float) -> np.ndarray:
        """Box coordinates mapped to [-1, 1]^2."""
        return np.array([
            (rp_km - self.rp_center_km) / self.rp_halfwidth_km,
            (omega_rad - self.omega_center_rad) / self.omega_halfwidth_rad,
        ])


@dataclass
class Outcome:
    """Result of propagating one domain over one period leg."""

    kind: str  # reached_end | needs_split | event | failure
    direction: Optional[int] = None  # split direction for needs_split
    event_kind: Optional[str] = None  # crash | moon_crash | escape
    event_time: Optional[float] = None


def initial_state_polys(spec, order, rp_center, rp_half, om_center, om_half,
                        model: DynamicsModel):
    """Flow map at t0 for one box: periapsis state over the box variables."""
    cfg = AlgebraConfig(order=order, nvars=2)
    rp = algebra.variable(cfg, RP_DIRECTION, rp_center, rp_half)
    om = algebra.variable(cfg, OMEGA_DIRECTION, om_center, om_half)
    r_rtn, v_rtn = keplerian_to_cartesian(
        rp, spec.e, spec.i_rad, spec.raan_rad, om, spec.M_rad, model.mu_t
    )
    t0 = spec.t0_tdb_s if spec.t0_tdb_s is not None else model.epoch_tdb_s
    rot = model.rtn_frame(t0).rotation
    comps = []
    for row in range(3):
        comps.append(
            (rot[row, 0] * r_rtn[0] + rot[row, 1] * r_rtn[1]
             + rot[row, 2] * r_rtn[2]) * (1.0 / model.units.LU)
        )
    for row in range(3):
        comps.append(
            (rot[row, 0] * v_rtn[0] + rot[row, 1] * v_rtn[1]
             + rot[row, 2] * v_rtn[2]) * (1.0 / model.units.velocity_scale_km_s)
        )
    return PolyVector(comps)


def build_initial_grid(spec: SearchSpaceSpec, cfg: AdsConfig,
                       model: DynamicsModel):
    """Regular n_rp x n_omega tiling with identity-in-box flow maps."""
    if spec.rp_min_km <= model.bodies[model.target].radius:
        raise ValueError("search space reaches below the target surface")
    n_rp, n_om = cfg.grid
    rp_half = (spec.rp_max_km - spec.rp_min_km) / (2.0 * n_rp)
    om_half = (spec.omega_max_rad - spec.omega_min_rad) / (2.0 * n_om)
    n_cells = n_rp * n_om
    domains = []
    for i_rp in range(n_rp):
        rp_center = spec.rp_min_km + (2 * i_rp + 1) * rp_half
        for i_om in range(n_om):
            om_center = spec.omega_min_rad + (2 * i_om + 1) * om_half
            cell = i_rp * n_om + i_om
            fm = initial_state_polys(
                spec, cfg.order, rp_center, rp_half, om_center, om_half, model
            )
            domains.append(SubDomain(
                id=n_cells + cell,
                parent_id=None,
                rp_center_km=rp_center,
                rp_halfwidth_km=rp_half,
                omega_center_rad=om_center,
                omega_halfwidth_rad=om_half,
                depth=0,
                flow_map=fm,
            ))
    return domains


def split(d: SubDomain, direction: int, max_splits: int):
    """Halve the domain along ``direction``; exact map re-expansion.

    Returns (lower, upper) children. Raises SplitRefused when the depth
    budget is exhausted — the caller then marks the domain inconsistent.
    """
    if direction not in (RP_DIRECTION, OMEGA_DIRECTION):
        raise ValueError(f"unknown split direction {direction}")
    if d.depth >= max_splits:
        raise SplitRefused(
            f"domain {d.id} at depth {d.depth} (budget {max_splits})"
        )
    tab = d.flow_map.config.tables()
    children = []
    for side_idx, side in enumerate(("lo", "hi")):
        mat = tab.half_substitution(direction, side)
        child_matrix = d.flow_map.matrix @ mat.T
        shift = side_idx - 0.5  # -1/2 for lo, +1/2 for hi, in halfwidths
        if direction == RP_DIRECTION:
            rp_c = d.rp_center_km + shift * d.rp_halfwidth_km
            rp_h = d.rp_halfwidth_km / 2.0
            om_c, om_h = d.omega_center_rad, d.omega_halfwidth_rad
        else:
            rp_c, rp_h = d.rp_center_km, d.rp_halfwidth_km
            om_c = d.omega_center_rad + shift * d.omega_halfwidth_rad
            om_h = d.omega_halfwidth_rad / 2.0
        children.append(SubDomain(
            id=2 * d.id + side_idx,
            parent_id=d.id,
            rp_center_km=rp_c,
            rp_halfwidth_km=rp_h,
            omega_center_rad=om_c,
            omega_halfwidth_rad=om_h,
            depth=d.depth + 1,
            flow_map=PolyVector.from_matrix(d.flow_map.config, child_matrix),
            last_time=d.last_time,
            status=DomainStatus.ACTIVE,
        ))
    return children[0], children[1]


class _Stop(Exception):
    def __init__(self, outcome):
        self.outcome = outcome


def propagate_domain(d: SubDomain, t_from: float, t_to: float,
                     model: DynamicsModel, cfg: AdsConfig,
                     event_check=None) -> Outcome:
    """Advance the domain's flow map from t_from to t_to under the model.

    After every accepted step the truncation-error estimate is compared to
    the tolerance and, if given, ``event_check(matrix, t)`` may certify a
    terminal event ('crash' | 'moon_crash' | 'escape') or report 'mixed'.
    On a split request the domain rolls back to the last compliant step.
    """
    if t_from == t_to:
        return Outcome(kind="reached_end")
    fm_dyn = FlowMapDynamics(model, d.flow_map.config)
    tab = d.flow_map.config.tables()
    int_cfg = cfg.integrator_config()

    good = {"t": t_from, "matrix": d.flow_map.matrix.copy()}

    def on_step(record, ymat):
        if not record.accepted:
            return
        estimate, direction = algebra.estimate_from_matrix(ymat, tab)
        if not math.isfinite(estimate) or estimate > cfg.tolerance:
            raise _Stop(Outcome(kind="needs_split", direction=direction))
        if event_check is not None:
            verdict = event_check(ymat, record.t)
            if verdict in ("crash", "moon_crash", "escape"):
                good["t"] = record.t
                good["matrix"] = ymat.copy()
                raise _Stop(Outcome(
                    kind="event", event_kind=verdict, event_time=record.t
                ))
            if verdict == "mixed":
                raise _Stop(Outcome(kind="needs_split", direction=direction))
        good["t"] = record.t
        good["matrix"] = ymat.copy()

    try:
        final = integrate(fm_dyn, d.flow_map.matrix, t_from, t_to,
                          int_cfg, step_callback=on_step)
    except _Stop as stop:
        d.flow_map = PolyVector.from_matrix(d.flow_map.config, good["matrix"])
        d.last_time = good["t"]
        return stop.outcome
    except PropagationError:
        d.flow_map = PolyVector.from_matrix(d.flow_map.config, good["matrix"])
        d.last_time = good["t"]
        d.status = DomainStatus.INCONSISTENT
        return Outcome(kind="failure")

    d.flow_map = PolyVector.from_matrix(d.flow_map.config, final)
    d.last_time = t_to
    return Outcome(kind="reached_end")
