"""Restricted N-body + solar-radiation-pressure field around a target planet.

Covers units, spacecraft and body data, Keplerian/tabulated ephemeris
providers, the epoch-frozen RTN frame, periapsis-state generation (real or
polynomial), and the acceleration in three interchangeable routes:

* a generic scalar route (floats or truncated polynomials) for tests and
  reference use,
* a compiled point-wise route for mass trajectory classification,
* a coefficient-matrix route driving flow-map propagation.

Positions inside the field are nondimensional (LU, TU centered on the
target); ephemeris providers work in km and TDB seconds past J2000.
"""

import csv
import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Optional

import numpy as np
from numba import njit

from . import algebra
from .algebra import SingularityError, TruncatedPolynomial

SPEED_OF_LIGHT_M_S = 299792458.0
SOLAR_FLUX_W_M2 = 1367.5
AU_M = 149597870613.6889
AU_KM = AU_M / 1000.0
UTC_TDB_OFFSET_S = 69.184  # fixed offset, valid for epochs after 2017
_J2000_UTC = datetime(2000, 1, 1, 12, 0, 0, tzinfo=timezone.utc)

DEFAULT_CAPTURE_UTC = "2023-12-09T00:45:18.363"


def utc_to_tdb(stamp: str) -> float:
    """TDB seconds past J2000 for an ISO UTC timestamp."""
    dt = datetime.fromisoformat(stamp)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return (dt - _J2000_UTC).total_seconds() + UTC_TDB_OFFSET_S


@dataclass(frozen=True)
class UnitSystem:
    """Nondimensionalization constants of the target planet.

    TU and VU hold the published (rounded) values; conversions go through
    ``time_scale_s`` / ``velocity_scale_km_s``, derived exactly from LU and
    MU, so the nondimensional equations of motion stay self-consistent.
    """

    MU: float = 42828.376  # km^3/s^2
    LU: float = 3396.0  # km
    TU: float = 956.28142  # s
    VU: float = 3.5512558  # km/s

    def __post_init__(self):
        if abs(self.TU - math.sqrt(self.LU ** 3 / self.MU)) > 1e-6 * self.TU:
            raise ValueError("TU inconsistent with (LU^3/MU)^0.5")
        if abs(self.VU - self.LU / self.TU) > 1e-6 * self.VU:
            raise ValueError("VU inconsistent with LU/TU")

    @property
    def time_scale_s(self) -> float:
        return math.sqrt(self.LU ** 3 / self.MU)

    @property
    def velocity_scale_km_s(self) -> float:
        return self.LU / self.time_scale_s


MARS_UNITS = UnitSystem()


@dataclass(frozen=True)
class SpacecraftSpec:
    """Mass, SRP-exposed area, reflectivity coefficient."""

    m: float = 24.0  # kg
    A: float = 0.32  # m^2
    Cr: float = 1.3

    def __post_init__(self):
        if self.m <= 0 or self.A <= 0 or self.Cr < 0:
            raise ValueError("spacecraft mass/area must be positive, Cr >= 0")


def srp_q(spec: SpacecraftSpec) -> float:
    """Radiation-pressure strength Q = L * Cr / (4 pi c), in kg m^3/s^2.

    L is the solar luminosity reconstructed from the flux at 1 au.
    """
    luminosity = SOLAR_FLUX_W_M2 * 4.0 * math.pi * AU_M ** 2
    return luminosity * spec.Cr / (4.0 * math.pi * SPEED_OF_LIGHT_M_S)


@dataclass(frozen=True)
class KeplerianElements:
    """Two-body elements about a center body at a fixed epoch."""

    a_km: float
    e: float
    i_rad: float
    raan_rad: float
    argp_rad: float
    M_rad: float
    epoch_tdb_s: float


class StateTable:
    """Tabulated states with cubic Hermite interpolation between nodes."""

    def __init__(self, times, states):
        times = np.asarray(times, dtype=float)
        states = np.asarray(states, dtype=float)
        if times.ndim != 1 or states.shape != (times.size, 6):
            raise ValueError("need matching t (n,) and state (n, 6) arrays")
        if times.size < 2 or np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing, >= 2 nodes")
        self.times = times
        self.states = states

    def state(self, t: float) -> np.ndarray:
        if not (self.times[0] <= t <= self.times[-1]):
            raise ValueError(
                f"time {t} outside tabulated window "
                f"[{self.times[0]}, {self.times[-1]}]"
            )
        idx = min(np.searchsorted(self.times, t, side="right"), self.times.size - 1)
        i0 = idx - 1 if idx > 0 else 0
        t0, t1 = self.times[i0], self.times[i0 + 1]
        h = t1 - t0
        s = (t - t0) / h
        p0, v0 = self.states[i0, :3], self.states[i0, 3:]
        p1, v1 = self.states[i0 + 1, :3], self.states[i0 + 1, 3:]
        h00 = 2 * s ** 3 - 3 * s ** 2 + 1
        h10 = s ** 3 - 2 * s ** 2 + s
        h01 = -2 * s ** 3 + 3 * s ** 2
        h11 = s ** 3 - s ** 2
        pos = h00 * p0 + h10 * h * v0 + h01 * p1 + h11 * h * v1
        d00 = (6 * s ** 2 - 6 * s) / h
        d10 = 3 * s ** 2 - 4 * s + 1
        d01 = (-6 * s ** 2 + 6 * s) / h
        d11 = 3 * s ** 2 - 2 * s
        vel = d00 * p0 + d10 * v0 + d01 * p1 + d11 * v1
        return np.concatenate([pos, vel])


@dataclass(frozen=True)
class Body:
    """A gravitating body with one ephemeris provider about its center.

    ``center`` is None for the ephemeris root (the Sun). ``radius`` doubles
    as the crash radius for bodies that terminate trajectories.
    """

    name: str
    mu: float  # km^3/s^2
    radius: float  # km
    center: Optional[str] = None
    elements: Optional[KeplerianElements] = None
    table: Optional[StateTable] = None

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError(f"{self.name}: mu must be positive")
        if self.radius < 0:
            raise ValueError(f"{self.name}: radius must be >= 0")
        if self.center is not None and self.elements is None and self.table is None:
            raise ValueError(f"{self.name}: non-root body needs elements or a table")


def solve_kepler(M: float, e: float, tol: float = 1e-14) -> float:
    """Eccentric anomaly from mean anomaly, elliptic case."""
    if not 0 <= e < 1:
        raise ValueError(f"eccentricity {e} outside [0, 1)")
    M = math.remainder(M, 2.0 * math.pi)
    # Danby starter keeps Newton convergent at high eccentricity
    E = M + 0.85 * e * math.copysign(1.0, math.sin(M))
    for _ in range(60):
        f = E - e * math.sin(E) - M
        E -= f / (1.0 - e * math.cos(E))
        if abs(f) < tol:
            break
    return E


def elements_to_state(el: KeplerianElements, mu_center: float, t: float) -> np.ndarray:
    """Two-body state (km, km/s) about the center at TDB second ``t``."""
    n = math.sqrt(mu_center / el.a_km ** 3)
    M = el.M_rad + n * (t - el.epoch_tdb_s)
    E = solve_kepler(M, el.e)
    cosE, sinE = math.cos(E), math.sin(E)
    r = el.a_km * (1.0 - el.e * cosE)
    b_over_a = math.sqrt(1.0 - el.e * el.e)
    x_pf = el.a_km * (cosE - el.e)
    y_pf = el.a_km * b_over_a * sinE
    dE = n * el.a_km / r
    vx_pf = -el.a_km * sinE * dE
    vy_pf = el.a_km * b_over_a * cosE * dE
    rot = _rotation_313(el.raan_rad, el.i_rad, el.argp_rad)
    pos = rot @ np.array([x_pf, y_pf, 0.0])
    vel = rot @ np.array([vx_pf, vy_pf, 0.0])
    return np.concatenate([pos, vel])


def _rotation_313(raan, inc, argp):
    cO, sO = math.cos(raan), math.sin(raan)
    ci, si = math.cos(inc), math.sin(inc)
    co, so = math.cos(argp), math.sin(argp)
    return np.array([
        [cO * co - sO * so * ci, -cO * so - sO * co * ci, sO * si],
        [sO * co + cO * so * ci, -sO * so + cO * co * ci, -cO * si],
        [so * si, co * si, ci],
    ])


# ---------------------------------------------------------------------------
# built-in body catalog: mean heliocentric ecliptic elements at J2000 for the
# planets, target-centered elements for the moons; fixed (no secular rates)

_DEG = math.pi / 180.0


def _planet(name, mu, radius, a_au, e, i_deg, L_deg, peri_deg, node_deg):
    M = math.remainder((L_deg - peri_deg) * _DEG, 2 * math.pi)
    argp = math.remainder((peri_deg - node_deg) * _DEG, 2 * math.pi)
    return Body(
        name=name,
        mu=mu,
        radius=radius,
        center="sun",
        elements=KeplerianElements(
            a_km=a_au * AU_KM,
            e=e,
            i_rad=i_deg * _DEG,
            raan_rad=math.remainder(node_deg * _DEG, 2 * math.pi),
            argp_rad=argp,
            M_rad=M,
            epoch_tdb_s=0.0,
        ),
    )


def _moon(name, mu, radius, a_km, e, i_deg):
    return Body(
        name=name,
        mu=mu,
        radius=radius,
        center="mars",
        elements=KeplerianElements(
            a_km=a_km, e=e, i_rad=i_deg * _DEG, raan_rad=0.0, argp_rad=0.0,
            M_rad=0.0, epoch_tdb_s=0.0,
        ),
    )


def built_in_bodies() -> dict:
    sun = Body(name="sun", mu=1.32712440018e11, radius=695700.0, center=None)
    bodies = {
        "sun": sun,
        "mercury": _planet("mercury", 22031.78, 2439.7, 0.38709927,
                           0.20563593, 7.00497902, 252.25032350,
                           77.45779628, 48.33076593),
        "venus": _planet("venus", 324858.592, 6051.8, 0.72333566, 0.00677672,
                         3.39467605, 181.97909950, 131.60246718, 76.67984255),
        "earth_barycenter": _planet("earth_barycenter", 403503.2355, 6371.0,
                                    1.00000261, 0.01671123, -0.00001531,
                                    100.46457166, 102.93768193, 0.0),
        "mars": _planet("mars", 42828.376, 3396.0, 1.52371034, 0.09339410,
                        1.84969142, -4.55343205, -23.94362959, 49.55953891),
        "jupiter_barycenter": _planet("jupiter_barycenter", 1.26712764e8,
                                      69911.0, 5.20288700, 0.04838624,
                                      1.30439695, 34.39644051, 14.72847983,
                                      100.47390909),
        "saturn_barycenter": _planet("saturn_barycenter", 3.79405852e7,
                                     58232.0, 9.53667594, 0.05386179,
                                     2.48599187, 49.95424423, 92.59887831,
                                     113.66242448),
        # moon crash radii: maximum extent of the enclosing ellipsoids
        "phobos": _moon("phobos", 7.11e-4, 14.0, 9376.0, 0.0151, 1.075),
        "deimos": _moon("deimos", 9.85e-5, 8.0, 23463.2, 0.00033, 1.788),
    }
    return bodies


DEFAULT_PERTURBERS = (
    "sun", "mercury", "venus", "earth_barycenter", "jupiter_barycenter",
    "saturn_barycenter", "phobos", "deimos",
)


def load_element_sets(path) -> dict:
    """Read bodies from a JSON element-set file."""
    with open(path) as fh:
        records = json.load(fh)
    bodies = {}
    for rec in records:
        center = rec.get("center")
        elements = None
        if center is not None:
            elements = KeplerianElements(
                a_km=rec["a_km"], e=rec["e"], i_rad=rec["i_rad"],
                raan_rad=rec["raan_rad"], argp_rad=rec["argp_rad"],
                M_rad=rec["M_rad"], epoch_tdb_s=rec["epoch_tdb_s"],
            )
        bodies[rec["name"]] = Body(
            name=rec["name"], mu=rec["mu_km3s2"], radius=rec["radius_km"],
            center=center, elements=elements,
        )
    return bodies


def dump_element_sets(bodies, path):
    """Write bodies (Keplerian providers only) to a JSON element-set file."""
    records = []
    for body in bodies.values():
        rec = {
            "name": body.name,
            "mu_km3s2": body.mu,
            "radius_km": body.radius,
            "center": body.center,
        }
        if body.elements is not None:
            el = body.elements
            rec.update(
                epoch_tdb_s=el.epoch_tdb_s, a_km=el.a_km, e=el.e,
                i_rad=el.i_rad, raan_rad=el.raan_rad, argp_rad=el.argp_rad,
                M_rad=el.M_rad,
            )
        records.append(rec)
    with open(path, "w") as fh:
        json.dump(records, fh, indent=1)


def load_state_table(path) -> StateTable:
    """Read one body's tabulated ephemeris CSV."""
    times, states = [], []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            times.append(float(row["t_tdb_s"]))
            states.append([
                float(row["x_km"]), float(row["y_km"]), float(row["z_km"]),
                float(row["vx_kms"]), float(row["vy_kms"]), float(row["vz_kms"]),
            ])
    return StateTable(times, states)


class Ephemeris:
    """Resolves body states relative to any other body by chaining centers."""

    def __init__(self, bodies: dict):
        self.bodies = bodies
        for body in bodies.values():
            if body.center is not None and body.center not in bodies:
                raise ValueError(f"{body.name}: unknown center {body.center}")

    def state_about_root(self, name: str, t: float) -> np.ndarray:
        body = self.bodies[name]
        if body.center is None:
            return np.zeros(6)
        if body.table is not None:
            local = body.table.state(t)
        else:
            local = elements_to_state(body.elements, self.bodies[body.center].mu, t)
        return local + self.state_about_root(body.center, t)

    def state_relative(self, name: str, target: str, t: float) -> np.ndarray:
        if name == target:
            return np.zeros(6)
        return self.state_about_root(name, t) - self.state_about_root(target, t)


@dataclass(frozen=True)
class FrameRTN:
    """Rotation from the epoch-frozen RTN axes to the base inertial axes."""

    epoch_tdb_s: float
    rotation: np.ndarray  # columns: x (radial), y (transverse), z (normal)

    def __post_init__(self):
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-12:
            raise ValueError(f"rotation not orthonormal (deviation {err:.2e})")


class DynamicsModel:
    """Immutable bundle: target, perturbers, SRP, units, epoch.

    ``srp_q`` is Q in kg km^3/s^2; the nondimensional field strength used in
    the equations of motion is Q*A/m scaled by MU.
    """

    def __init__(self, target="mars", perturbers=DEFAULT_PERTURBERS,
                 spacecraft=SpacecraftSpec(), srp=True, units=MARS_UNITS,
                 epoch_tdb_s=None, bodies=None):
        self.units = units
        self.spacecraft = spacecraft
        self.bodies = dict(bodies) if bodies is not None else built_in_bodies()
        self.target = target
        self.mu_t = self.bodies[target].mu
        self.perturbers = tuple(self.bodies[n] for n in perturbers)
        self.srp_enabled = bool(srp)
        if srp and "sun" not in perturbers:
            raise ValueError("SRP requires the sun among the perturbers")
        self.srp_q = (srp_q(spacecraft) * 1e-9) if srp else 0.0  # kg km^3/s^2
        self.epoch_tdb_s = (
            utc_to_tdb(DEFAULT_CAPTURE_UTC) if epoch_tdb_s is None else float(epoch_tdb_s)
        )
        self.ephemeris = Ephemeris(self.bodies)
        # nondimensional constants
        u = self.units
        self.mu_t_nd = self.mu_t / u.MU
        self.pert_mu_nd = np.array([b.mu / u.MU for b in self.perturbers])
        self.q_nd = self.srp_q * spacecraft.A / spacecraft.m / u.MU
        self._params = None

    # -- time and scaling helpers

    def t_tdb(self, t_tu: float) -> float:
        return self.epoch_tdb_s + t_tu * self.units.time_scale_s

    def nondim_state(self, state_km: np.ndarray) -> np.ndarray:
        u = self.units
        out = np.asarray(state_km, dtype=float).copy()
        out[:3] /= u.LU
        out[3:] /= u.velocity_scale_km_s
        return out

    def dim_state(self, state_nd: np.ndarray) -> np.ndarray:
        u = self.units
        out = np.asarray(state_nd, dtype=float).copy()
        out[:3] *= u.LU
        out[3:] *= u.velocity_scale_km_s
        return out

    # -- ephemeris in model coordinates

    def ephemeris_state(self, body, t_tdb_s: float) -> np.ndarray:
        """Target-centered state (km, km/s) of a body at a TDB second."""
        name = body if isinstance(body, str) else body.name
        return self.ephemeris.state_relative(name, self.target, t_tdb_s)

    def perturber_positions_nd(self, t_tu: float) -> np.ndarray:
        """(n_pert, 3) nondimensional target-centered perturber positions."""
        t = self.t_tdb(t_tu)
        out = np.empty((len(self.perturbers), 3))
        for i, body in enumerate(self.perturbers):
            out[i] = self.ephemeris.state_relative(body.name, self.target, t)[:3]
        return out / self.units.LU

    def sun_index(self) -> int:
        for i, b in enumerate(self.perturbers):
            if b.name == "sun":
                return i
        return -1

    def rtn_frame(self, t0_tdb_s: float) -> FrameRTN:
        """Axes from Sun->target geometry at the epoch; x radial, z normal."""
        rel = self.ephemeris.state_relative(self.target, "sun", t0_tdb_s)
        r, v = rel[:3], rel[3:]
        h = np.cross(r, v)
        if np.linalg.norm(h) == 0.0:
            raise ValueError("degenerate geometry: zero angular momentum")
        x = r / np.linalg.norm(r)
        z = h / np.linalg.norm(h)
        y = np.cross(z, x)
        return FrameRTN(t0_tdb_s, np.column_stack([x, y, z]))

    # -- acceleration, generic scalar route

    def acceleration(self, t_tu: float, r):
        """Nondimensional acceleration at position r (3 floats or polys)."""
        pos = self.perturber_positions_nd(t_tu)
        return _acceleration_generic(
            r, self.mu_t_nd, self.pert_mu_nd, pos, self.q_nd, self.sun_index()
        )

    def pointwise_rhs(self):
        """RHS closure over plain state vectors, for the generic integrator."""

        def rhs(t, y):
            acc = self.acceleration(t, y[:3])
            return np.concatenate([y[3:], acc])

        return rhs

    # -- compiled parameter bundle (shared by fast point-wise and DA routes)

    def compiled_params(self):
        """Constant arrays consumed by the compiled ephemeris/field kernels."""
        if self._params is not None:
            return self._params
        u = self.units
        n = len(self.perturbers)
        elems = np.zeros((n, 7))
        rots = np.zeros((n, 3, 3))
        kinds = np.zeros(n, dtype=np.int64)
        for i, body in enumerate(self.perturbers):
            if body.name == "sun":
                kinds[i] = 2
                rots[i] = np.eye(3)
                elems[i, 0] = 1.0  # placeholder semi-axis
                continue
            el = body.elements
            if el is None:
                raise ValueError(
                    f"{body.name}: compiled route needs Keplerian elements"
                )
            kinds[i] = 1 if body.center == self.target else 0
            mu_c = self.bodies[body.center].mu
            n_rad_s = math.sqrt(mu_c / el.a_km ** 3)
            # fold the element epoch into M0 so kernels use absolute time
            elems[i] = [
                el.a_km / u.LU, el.e, 0.0, 0.0, 0.0,
                el.M_rad - n_rad_s * el.epoch_tdb_s, n_rad_s * u.time_scale_s,
            ]
            rots[i] = _rotation_313(el.raan_rad, el.i_rad, el.argp_rad)
        tgt = self.bodies[self.target].elements
        mu_sun = self.bodies["sun"].mu
        tn = math.sqrt(mu_sun / tgt.a_km ** 3)
        tgt_elems = np.array([
            tgt.a_km / u.LU, tgt.e, 0.0, 0.0, 0.0,
            tgt.M_rad - tn * tgt.epoch_tdb_s, tn * u.time_scale_s,
        ])
        tgt_rot = _rotation_313(tgt.raan_rad, tgt.i_rad, tgt.argp_rad)
        epoch_tu = self.epoch_tdb_s / u.time_scale_s
        self._params = (
            self.mu_t_nd, self.pert_mu_nd, elems, rots, kinds,
            tgt_elems, tgt_rot, self.q_nd, epoch_tu,
        )
        return self._params


def _inv_norm3(x, y, z):
    """1/|r|^3 for float or polynomial components."""
    s = x * x + y * y + z * z
    if isinstance(s, TruncatedPolynomial):
        return algebra.intrinsic("pow", s, exponent=-1.5)
    if s == 0.0:
        raise SingularityError("zero-norm denominator in acceleration")
    return s ** -1.5


def _acceleration_generic(r, mu_t, pert_mu, pert_pos, q_nd, sun_idx):
    x, y, z = r[0], r[1], r[2]
    inv3 = _inv_norm3(x, y, z)
    ax = -mu_t * x * inv3
    ay = -mu_t * y * inv3
    az = -mu_t * z * inv3
    for i in range(pert_mu.size):
        px, py, pz = pert_pos[i]
        dn3 = (px * px + py * py + pz * pz) ** -1.5
        dx, dy, dz = x - px, y - py, z - pz
        inv3i = _inv_norm3(dx, dy, dz)
        mu_i = pert_mu[i]
        ax = ax - mu_i * (px * dn3 + dx * inv3i)
        ay = ay - mu_i * (py * dn3 + dy * inv3i)
        az = az - mu_i * (pz * dn3 + dz * inv3i)
        if i == sun_idx and q_nd != 0.0:
            ax = ax + q_nd * dx * inv3i
            ay = ay + q_nd * dy * inv3i
            az = az + q_nd * dz * inv3i
    return [ax, ay, az]


# ---------------------------------------------------------------------------
# periapsis state generation (real or polynomial scalars)


def keplerian_to_cartesian(r_p, e, i, raan, argp, M, mu):
    """State from periapsis radius and angles; r_p and argp may be polynomials.

    Returns (r, v) as 3-lists of scalars in the units of r_p and mu. M must
    be 0 when any input is a polynomial (periapsis departure is exact).
    """
    poly_mode = isinstance(r_p, TruncatedPolynomial) or isinstance(
        argp, TruncatedPolynomial
    )
    e_val = e.constant_part if isinstance(e, TruncatedPolynomial) else e
    if e_val < 0:
        raise ValueError(f"eccentricity {e_val} is negative")
    if e_val >= 1 and M != 0.0:
        raise ValueError("e >= 1 supported only at periapsis (M = 0)")
    if poly_mode and M != 0.0:
        raise ValueError("polynomial inputs require M = 0 (periapsis)")

    if M == 0.0:
        nu_cos, nu_sin, radius = 1.0, 0.0, r_p
        # speed at periapsis: sqrt(mu (1+e) / r_p)
        if isinstance(r_p, TruncatedPolynomial):
            vmag = algebra.intrinsic("pow", r_p * (1.0 / (mu * (1.0 + e))), exponent=-0.5)
        else:
            vmag = math.sqrt(mu * (1.0 + e) / r_p)
        r_pf = [radius, 0.0 * radius, 0.0 * radius]
        v_pf = [0.0 * vmag, vmag, 0.0 * vmag]
    else:
        a = r_p / (1.0 - e)
        E = solve_kepler(M, e)
        cosE, sinE = math.cos(E), math.sin(E)
        radius = a * (1.0 - e * cosE)
        b_over_a = math.sqrt(1.0 - e * e)
        n = math.sqrt(mu / a ** 3)
        dE = n * a / radius
        r_pf = [a * (cosE - e), a * b_over_a * sinE, 0.0]
        v_pf = [-a * sinE * dE, a * b_over_a * cosE * dE, 0.0]

    co = algebra.generic_cos(argp)
    so = algebra.generic_sin(argp)
    cO, sO = math.cos(raan), math.sin(raan)
    ci, si = math.cos(i), math.sin(i)

    def rotate(vec):
        # Rz(raan) Rx(i) Rz(argp) applied with argp possibly polynomial
        x1 = vec[0] * co - vec[1] * so
        y1 = vec[0] * so + vec[1] * co
        z1 = vec[2]
        x2 = x1
        y2 = y1 * ci - z1 * si
        z2 = y1 * si + z1 * ci
        return [x2 * cO - y2 * sO, x2 * sO + y2 * cO, z2]

    return rotate(r_pf), rotate(v_pf)


# ---------------------------------------------------------------------------
# compiled point-wise route


@njit(cache=True)
def _solve_kepler_nb(M, e):
    M = (M + math.pi) % (2.0 * math.pi) - math.pi
    E = M + 0.85 * e * (1.0 if math.sin(M) >= 0.0 else -1.0)
    for _ in range(60):
        f = E - e * math.sin(E) - M
        E -= f / (1.0 - e * math.cos(E))
        if abs(f) < 1e-14:
            break
    return E


@njit(cache=True)
def _body_pos_nb(elems, rot, t_tu):
    # elems: a_nd, e, _, _, _, M0, n_per_tu; t_tu absolute (past J2000)
    a, e, M0, n = elems[0], elems[1], elems[5], elems[6]
    E = _solve_kepler_nb(M0 + n * t_tu, e)
    x_pf = a * (math.cos(E) - e)
    y_pf = a * math.sqrt(1.0 - e * e) * math.sin(E)
    px = rot[0, 0] * x_pf + rot[0, 1] * y_pf
    py = rot[1, 0] * x_pf + rot[1, 1] * y_pf
    pz = rot[2, 0] * x_pf + rot[2, 1] * y_pf
    return px, py, pz


@njit(cache=True)
def perturber_positions_nb(t_tu, elems, rots, kinds, tgt_elems, tgt_rot, epoch_tu):
    """Target-centered nondimensional perturber positions, compiled route."""
    t_abs = epoch_tu + t_tu
    mx, my, mz = _body_pos_nb(tgt_elems, tgt_rot, t_abs)
    n = kinds.size
    out = np.empty((n, 3))
    for i in range(n):
        if kinds[i] == 2:  # the root body itself
            out[i, 0], out[i, 1], out[i, 2] = -mx, -my, -mz
        elif kinds[i] == 1:  # already target-centered
            px, py, pz = _body_pos_nb(elems[i], rots[i], t_abs)
            out[i, 0], out[i, 1], out[i, 2] = px, py, pz
        else:  # root-centered: shift to the target
            px, py, pz = _body_pos_nb(elems[i], rots[i], t_abs)
            out[i, 0], out[i, 1], out[i, 2] = px - mx, py - my, pz - mz
    return out


@njit(cache=True)
def nbody_rhs_nb(t, y, mu_t, pert_mu, elems, rots, kinds, tgt_elems, tgt_rot,
                 q_nd, epoch_tu, sun_idx):
    """Point-wise equations of motion; y = (x, y, z, vx, vy, vz) nondim."""
    pos = perturber_positions_nb(t, elems, rots, kinds, tgt_elems, tgt_rot,
                                 epoch_tu)
    x, yy, z = y[0], y[1], y[2]
    r3 = (x * x + yy * yy + z * z) ** -1.5
    ax = -mu_t * x * r3
    ay = -mu_t * yy * r3
    az = -mu_t * z * r3
    for i in range(pert_mu.size):
        px, py, pz = pos[i, 0], pos[i, 1], pos[i, 2]
        dn3 = (px * px + py * py + pz * pz) ** -1.5
        dx, dy, dz = x - px, yy - py, z - pz
        di3 = (dx * dx + dy * dy + dz * dz) ** -1.5
        mu_i = pert_mu[i]
        ax -= mu_i * (px * dn3 + dx * di3)
        ay -= mu_i * (py * dn3 + dy * di3)
        az -= mu_i * (pz * dn3 + dz * di3)
        if i == sun_idx and q_nd != 0.0:
            ax += q_nd * dx * di3
            ay += q_nd * dy * di3
            az += q_nd * dz * di3
    out = np.empty(6)
    out[0], out[1], out[2] = y[3], y[4], y[5]
    out[3], out[4], out[5] = ax, ay, az
    return out


def compiled_pointwise_rhs(model: DynamicsModel):
    """RHS closure calling the compiled field (still usable by integrate)."""
    (mu_t, pert_mu, elems, rots, kinds, tgt_elems, tgt_rot, q_nd,
     epoch_tu) = model.compiled_params()
    sun_idx = model.sun_index()

    def rhs(t, y):
        return nbody_rhs_nb(t, y, mu_t, pert_mu, elems, rots, kinds,
                            tgt_elems, tgt_rot, q_nd, epoch_tu, sun_idx)

    return rhs


# ---------------------------------------------------------------------------
# flow-map (coefficient matrix) route


class FlowMapDynamics:
    """RHS over (6, ncoeffs) coefficient matrices for one algebra config."""

    def __init__(self, model: DynamicsModel, config):
        self.model = model
        self.config = config
        self.tab = config.tables()
        (self.mu_t, self.pert_mu, self.elems, self.rots, self.kinds,
         self.tgt_elems, self.tgt_rot, self.q_nd,
         self.epoch_tu) = model.compiled_params()
        self.sun_idx = model.sun_index()

    def __call__(self, t, ymat):
        tab = self.tab
        mi, mj, mo = tab.mul_i, tab.mul_j, tab.mul_o
        pos = perturber_positions_nb(
            t, self.elems, self.rots, self.kinds, self.tgt_elems,
            self.tgt_rot, self.epoch_tu,
        )
        r = ymat[:3]
        s = algebra.square_sum_rows(r, mi, mj, mo)
        if s[0] <= 0.0:
            raise SingularityError("flow map touched the target center")
        inv3 = algebra.pow_coeffs(s, -1.5, tab)
        acc = -self.mu_t * algebra.mul_rows(r, inv3, mi, mj, mo)
        for i in range(self.pert_mu.size):
            d = r.copy()
            d[:, 0] -= pos[i]
            dn3 = float(pos[i] @ pos[i]) ** -1.5
            s_i = algebra.square_sum_rows(d, mi, mj, mo)
            if s_i[0] <= 0.0:
                raise SingularityError("flow map touched a perturber center")
            inv3_i = algebra.pow_coeffs(s_i, -1.5, tab)
            indirect = algebra.mul_rows(d, inv3_i, mi, mj, mo)
            mu_i = self.pert_mu[i]
            coeff = mu_i
            if i == self.sun_idx:
                # SRP shares the Sun-relative geometry: net factor mu - q
                coeff = mu_i - self.q_nd
            acc -= coeff * indirect
            acc[:, 0] -= mu_i * pos[i] * dn3
        out = np.empty_like(ymat)
        out[:3] = ymat[3:]
        out[3:] = acc
        return out
