"""Step control, order, reversibility, and flow-map propagation checks."""

import math

import numpy as np
import pytest
from scipy.linalg import expm

from capmap.algebra import (
    AlgebraConfig,
    PolyVector,
    TruncatedPolynomial,
    multiply,
    variable,
)
from capmap.integrator import (
    IntegratorConfig,
    PropagationError,
    Scheme,
    StepRecord,
    integrate,
    rk_step,
)

MU = 1.0


def kepler_rhs(t, y):
    r = y[:3]
    rn = np.linalg.norm(r)
    out = np.empty(6)
    out[:3] = y[3:]
    out[3:] = -MU * r / rn ** 3
    return out


def circular_state(radius):
    v = math.sqrt(MU / radius)
    return np.array([radius, 0.0, 0.0, 0.0, v, 0.0])


def default_cfg(**kw):
    base = dict(initial_step=0.1, min_step=1e-14, max_step=10.0)
    base.update(kw)
    return IntegratorConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        default_cfg(min_step=0.0)
    with pytest.raises(ValueError):
        default_cfg(min_step=1.0, max_step=0.5)
    with pytest.raises(ValueError):
        default_cfg(rel_tol=0.0)
    with pytest.raises(ValueError):
        default_cfg(initial_step=-1.0)
    with pytest.raises(ValueError):
        integrate(lambda t, y: y, np.ones(1), 1.0, 1.0, default_cfg())


def test_exponential_growth():
    y = integrate(lambda t, y: y, np.array([1.0]), 0.0, 1.0, default_cfg())
    assert abs(y[0] - math.e) / math.e < 1e-12


def test_exponential_backward():
    y = integrate(lambda t, y: y, np.array([1.0]), 0.0, -1.0, default_cfg())
    assert abs(y[0] - math.exp(-1.0)) < 1e-12


def test_kepler_two_radii_closure():
    # period from the cube of the orbit radius; closure to 1e-9
    for radius in (1.0, 2.0):
        period = 2.0 * math.pi * radius ** 1.5
        y0 = circular_state(radius)
        y = integrate(kepler_rhs, y0, 0.0, period, default_cfg())
        assert np.linalg.norm(y[:3] - y0[:3]) < 1e-9


def test_forward_backward_round_trip():
    y0 = np.array([1.0, 0.0, 0.2, 0.1, 1.1, 0.05])
    cfg = default_cfg()
    mid = integrate(kepler_rhs, y0, 0.0, 7.3, cfg)
    back = integrate(kepler_rhs, mid, 7.3, 0.0, cfg)
    assert np.linalg.norm(back - y0) < 1e-9


def _invariants(y):
    r, v = y[:3], y[3:]
    energy = 0.5 * v @ v - MU / np.linalg.norm(r)
    angmom = np.linalg.norm(np.cross(r, v))
    return energy, angmom


def test_energy_and_momentum_conservation():
    # circular a=2 orbit, ten revolutions, default tolerances
    y0 = circular_state(2.0)
    period = 2.0 * math.pi * 2.0 ** 1.5
    e0, h0 = _invariants(y0)
    y = integrate(kepler_rhs, y0, 0.0, 10.0 * period, default_cfg())
    e1, h1 = _invariants(y)
    assert abs((e1 - e0) / e0) < 1e-11
    assert abs((h1 - h0) / h0) < 1e-11


def test_energy_conservation_eccentric_orbit():
    # e = 0.5 ellipse needs a tighter tolerance for the same drift budget
    y0 = np.array([1.0, 0.0, 0.0, 0.0, math.sqrt(1.5), 0.0])
    period = 2.0 * math.pi * 2.0 ** 1.5
    e0, h0 = _invariants(y0)
    y = integrate(
        kepler_rhs, y0, 0.0, 10.0 * period, default_cfg(rel_tol=1e-13, abs_tol=1e-13)
    )
    e1, h1 = _invariants(y)
    assert abs((e1 - e0) / e0) < 1e-11
    assert abs((h1 - h0) / h0) < 1e-11


def test_fixed_step_order_eight():
    # global error on a circular orbit falls by ~2^8 per step halving;
    # reference state is the closed-form circular solution
    radius = 2.0
    omega = math.sqrt(MU / radius ** 3)
    speed = math.sqrt(MU / radius)
    y0 = circular_state(radius)
    t1 = 2.0 * math.pi * radius ** 1.5 / 4.0
    ref = np.array([
        radius * math.cos(omega * t1), radius * math.sin(omega * t1), 0.0,
        -speed * math.sin(omega * t1), speed * math.cos(omega * t1), 0.0,
    ])
    errs, hs = [], []
    for div in (1, 2, 4, 8, 16):
        h = t1 / div
        y = integrate(kepler_rhs, y0, 0.0, t1, default_cfg(fixed_step=h))
        errs.append(np.linalg.norm(y - ref))
        hs.append(h)
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(slope - 8.0) < 0.3


def test_fixed_step_hits_endpoint_exactly():
    seen = []
    integrate(
        lambda t, y: np.zeros_like(y),
        np.zeros(2),
        0.0,
        1.0,
        default_cfg(fixed_step=0.3),
        step_callback=lambda rec, y: seen.append(rec.t),
    )
    assert seen[-1] == 1.0
    assert len(seen) == 4  # 0.3, 0.6, 0.9, 1.0


def test_step_callback_sees_monotone_accepted_steps():
    records = []
    integrate(
        kepler_rhs,
        circular_state(1.0),
        0.0,
        5.0,
        default_cfg(),
        step_callback=lambda rec, y: records.append((rec, y.copy())),
    )
    accepted = [r for r, _ in records if r.accepted]
    assert accepted, "no accepted steps recorded"
    times = [r.t for r in accepted]
    assert times == sorted(times)
    assert times[-1] == 5.0
    assert all(r.error_norm <= 1.0 for r in accepted)
    # callback states are genuine trajectory samples
    for rec, y in records:
        if rec.accepted:
            assert abs(np.linalg.norm(y[:3]) - 1.0) < 1e-9


def test_max_step_is_respected():
    times = [0.0]
    integrate(
        lambda t, y: y,
        np.ones(1),
        0.0,
        1.0,
        default_cfg(max_step=0.05),
        step_callback=lambda rec, y: times.append(rec.t) if rec.accepted else None,
    )
    gaps = np.diff(times)
    assert gaps.max() <= 0.05 + 1e-12


def test_singular_path_raises_with_last_good_time():
    # dy/dt = -1/y from y(0)=1 hits y=0 at t=0.5: y(t) = sqrt(1-2t)
    def rhs(t, y):
        return -1.0 / y

    with pytest.raises(PropagationError) as info:
        integrate(rhs, np.array([1.0]), 0.0, 1.0, default_cfg())
    assert info.value.last_time == pytest.approx(0.5, abs=1e-3)
    assert info.value.last_state[0] >= 0.0


def test_flow_map_of_linear_system_matches_matrix_exponential():
    # d/dt x = A x: after unit time the polynomial state is expm(A) @ x(0)
    rng = np.random.default_rng(42)
    amat = rng.standard_normal((3, 3)) * 0.6
    cfg = AlgebraConfig(order=4, nvars=3)
    x0 = PolyVector(
        [variable(cfg, i, c, w) for i, (c, w) in enumerate([(1.0, 0.2), (-0.5, 0.1), (2.0, 0.3)])]
    )

    out = integrate(
        lambda t, ymat: amat @ ymat,
        x0,
        0.0,
        1.0,
        default_cfg(scheme=Scheme.RK8_DA),
    )
    assert isinstance(out, PolyVector)
    expected = expm(amat) @ x0.matrix
    np.testing.assert_allclose(out.matrix, expected, atol=1e-10)


def test_da_norm_controls_coefficients_not_just_centers():
    # a zero-centered box through a nonlinear field still adapts its steps:
    # constant parts stay 0, so only the coefficient-mass term can drive h
    cfg = AlgebraConfig(order=3, nvars=1)
    x0 = PolyVector([variable(cfg, 0, 0.0, 1.0)])

    def rhs(t, ymat):
        # dx/dt = x^3 - x, odd field keeping the center at zero
        p = TruncatedPolynomial(cfg, ymat[0])
        out = multiply(multiply(p, p), p) - p
        return np.vstack([out.coeffs])

    records = []
    out = integrate(
        rhs,
        x0,
        0.0,
        1.0,
        default_cfg(scheme=Scheme.RK8_DA, rel_tol=1e-10, abs_tol=1e-10),
        step_callback=lambda rec, y: records.append(rec),
    )
    assert out[0].constant_part == pytest.approx(0.0, abs=1e-14)
    assert sum(1 for r in records if r.accepted) > 3
    # exact solution x(t) = w e^-t / sqrt(1 - w^2 + w^2 e^-2t), sampled at an
    # interior point where order-3 truncation is mild
    w = 0.5
    exact = w * math.exp(-1.0) / math.sqrt(1.0 - w * w + (w * math.exp(-1.0)) ** 2)
    got = out[0].evaluate(np.array([w]))
    assert got == pytest.approx(exact, abs=5e-3)


def test_rk_step_single_step_accuracy():
    y0 = np.array([1.0])
    y1, k = rk_step(lambda t, y: y, 0.0, y0, 0.1)
    assert y1[0] == pytest.approx(math.exp(0.1), abs=1e-14)
    assert len(k) == 12


def test_step_record_fields():
    rec = StepRecord(t=1.0, accepted=True, error_norm=0.5)
    assert rec.t == 1.0 and rec.accepted and rec.error_norm == 0.5
