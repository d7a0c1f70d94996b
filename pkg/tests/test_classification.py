import math
from collections import Counter

import numpy as np
import pytest

from capmap.algebra import AlgebraConfig, PolyVector
from capmap.classification import (
    BACKWARD,
    FORWARD,
    Box,
    ClassKind,
    ClassLabel,
    EventThresholds,
    MappingResult,
    OracleConfig,
    OraclePoint,
    capture_ratio,
    capture_set,
    classify_da,
    classify_pointwise,
    domain_event_check,
)
from capmap.criteria import PeriodModel
from capmap.dynamics import DynamicsModel
from capmap.integrator import IntegratorConfig, Scheme
from capmap.mapping import (
    AdsConfig,
    DomainStatus,
    SearchSpaceSpec,
    SubDomain,
    build_initial_grid,
)


def _two_body():
    return DynamicsModel(perturbers=(), srp=False)


def _flat_periods(t1_tu, n_max, units):
    # constant boundary per index: log shape with zero slope
    table = {i: (i * t1_tu, 0.0) for i in range(1, n_max + 1)}
    return PeriodModel(shape="log", table=table, time_unit_s=units.time_scale_s)


def assert_partition(result):
    """Labeled boxes tile the search space with no interior overlap."""
    total = sum(d.area for d in result.domains)
    assert total == pytest.approx(result.space.area, rel=1e-9)
    boxes = [Box.of_domain(d) for d in result.domains]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            hit = boxes[i].intersect(boxes[j])
            if hit is not None:
                # shared edges may wobble by an ulp; only real interior
                # overlap counts
                assert hit.area <= 1e-9 * min(boxes[i].area, boxes[j].area)


def _covered_by(box, covers, eps=1e-9):
    for c in covers:
        if (c.rp_min_km - eps <= box.rp_min_km
                and box.rp_max_km <= c.rp_max_km + eps
                and c.omega_min_rad - eps <= box.omega_min_rad
                and box.omega_max_rad <= c.omega_max_rad + eps):
            return True
    return False


def assert_weakly_stable_nested(shallow, deep):
    """Every deep weakly-stable box lies inside a shallow one."""
    outer = [Box.of_domain(d)
             for d in shallow.select(ClassKind.WEAKLY_STABLE,
                                     shallow.n_max * (1 if shallow.direction == FORWARD else -1))]
    sign = 1 if deep.direction == FORWARD else -1
    for d in deep.select(ClassKind.WEAKLY_STABLE, sign * deep.n_max):
        assert _covered_by(Box.of_domain(d), outer)


# ---------------------------------------------------------------------------
# labels and thresholds


def test_label_validation():
    lab = ClassLabel(ClassKind.WEAKLY_STABLE, 2)
    assert str(lab) == "weakly_stable[2]"
    with pytest.raises(ValueError):
        ClassLabel(ClassKind.UNSTABLE, 0)
    with pytest.raises(ValueError):
        OraclePoint((4000.0, 0.0), ClassLabel(ClassKind.INCONSISTENT, 1), (), 0.0)
    with pytest.raises(ValueError):
        EventThresholds(r_crash_lu=0.0)
    with pytest.raises(ValueError):
        EventThresholds(r_crash_lu=2.0, r_escape_lu=1.0)


# ---------------------------------------------------------------------------
# box classification on an unperturbed model


def test_two_body_grid_all_weakly_stable():
    model = _two_body()
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=4400.0,
                            omega_min_rad=0.0, omega_max_rad=0.1, e=0.3)
    pm = _flat_periods(15.0, 2, model.units)
    cfg = AdsConfig(tolerance=1e-4, order=8, max_splits=3, grid=(2, 2))
    res = classify_da(build_initial_grid(space, cfg, model), 2, FORWARD,
                      pm, model, cfg, space=space)
    assert res.direction == FORWARD and res.n_max == 2
    want = ClassLabel(ClassKind.WEAKLY_STABLE, 2)
    assert all(d.label == want for d in res.domains)
    assert all(d.status == DomainStatus.CLASSIFIED for d in res.domains)
    assert all(d.last_time == pytest.approx(30.0, abs=1e-12) for d in res.domains)
    assert_partition(res)
    assert res.metadata["n_domains"] == len(res.domains)


def test_backward_run_labels_negative():
    model = _two_body()
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=4400.0,
                            omega_min_rad=0.0, omega_max_rad=0.1, e=0.3)
    pm = _flat_periods(15.0, 1, model.units)
    cfg = AdsConfig(tolerance=1e-4, order=8, max_splits=3, grid=(2, 2))
    res = classify_da(build_initial_grid(space, cfg, model), 1, BACKWARD,
                      pm, model, cfg, space=space)
    want = ClassLabel(ClassKind.WEAKLY_STABLE, -1)
    assert all(d.label == want for d in res.domains)
    assert all(d.last_time == pytest.approx(-15.0, abs=1e-12) for d in res.domains)
    assert_partition(res)


def test_crash_extraction_and_split_budget():
    # crash sphere raised to 1.25 LU: the two low-r_p columns start inside
    # it, the straddling column cannot split (budget 0), the top survives
    model = _two_body()
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=4400.0,
                            omega_min_rad=0.0, omega_max_rad=0.05, e=0.3)
    pm = _flat_periods(15.0, 1, model.units)
    cfg = AdsConfig(tolerance=1e-4, order=6, max_splits=0, grid=(4, 1))
    th = EventThresholds(r_crash_lu=1.25)
    res = classify_da(build_initial_grid(space, cfg, model), 1, FORWARD,
                      pm, model, cfg, space=space, thresholds=th)
    by_rp = {d.rp_center_km: d for d in res.domains}
    assert by_rp[4050.0].label == ClassLabel(ClassKind.TARGET_CRASH, 1)
    assert by_rp[4150.0].label == ClassLabel(ClassKind.TARGET_CRASH, 1)
    assert by_rp[4250.0].label == ClassLabel(ClassKind.INCONSISTENT, 1)
    assert by_rp[4250.0].status == DomainStatus.INCONSISTENT
    assert by_rp[4350.0].label == ClassLabel(ClassKind.WEAKLY_STABLE, 1)
    assert 0.0 < by_rp[4050.0].last_time < 1.0
    assert_partition(res)


def test_weakly_stable_nesting_across_depths():
    model = _two_body()
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=4400.0,
                            omega_min_rad=0.0, omega_max_rad=0.1, e=0.3)
    cfg = AdsConfig(tolerance=1e-4, order=8, max_splits=3, grid=(2, 2))
    runs = {}
    for n in (1, 2):
        pm = _flat_periods(15.0, n, model.units)
        runs[n] = classify_da(build_initial_grid(space, cfg, model), n,
                              FORWARD, pm, model, cfg, space=space)
    assert_weakly_stable_nested(runs[1], runs[2])


def test_classify_da_is_deterministic():
    model = _two_body()
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=4400.0,
                            omega_min_rad=0.0, omega_max_rad=0.1, e=0.3)
    pm = _flat_periods(15.0, 2, model.units)
    cfg = AdsConfig(tolerance=5e-5, order=8, max_splits=3, grid=(2, 2))

    def run():
        res = classify_da(build_initial_grid(space, cfg, model), 2, FORWARD,
                          pm, model, cfg, space=space)
        return [(d.id, d.parent_id, d.depth, str(d.label), d.last_time,
                 d.rp_center_km, d.rp_halfwidth_km, d.omega_center_rad,
                 d.omega_halfwidth_rad) for d in res.domains]

    assert run() == run()


def test_classify_da_validation():
    model = _two_body()
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=4400.0,
                            omega_min_rad=0.0, omega_max_rad=0.1, e=0.3)
    pm = _flat_periods(15.0, 1, model.units)
    cfg = AdsConfig(tolerance=1e-4, order=4, max_splits=1, grid=(1, 1))
    grid = build_initial_grid(space, cfg, model)
    with pytest.raises(ValueError):
        classify_da(grid, 0, FORWARD, pm, model, cfg)
    with pytest.raises(ValueError):
        classify_da(grid, 1, "sideways", pm, model, cfg)
    with pytest.raises(ValueError):
        classify_da([], 1, FORWARD, pm, model, cfg)


def test_randomized_mini_configs_keep_invariants():
    model = _two_body()
    rng = np.random.default_rng(20260825)
    for _ in range(6):
        rp_min = float(rng.uniform(3600.0, 5000.0))
        rp_w = float(rng.uniform(200.0, 1000.0))
        om_min = float(rng.uniform(-3.0, 2.7))
        om_w = float(rng.uniform(0.05, 0.3))
        space = SearchSpaceSpec(rp_min_km=rp_min, rp_max_km=rp_min + rp_w,
                                omega_min_rad=om_min, omega_max_rad=om_min + om_w,
                                e=float(rng.uniform(0.1, 0.6)))
        cfg = AdsConfig(
            tolerance=float(10.0 ** rng.uniform(-6.0, -3.0)),
            order=int(rng.choice([4, 6, 8])),
            max_splits=int(rng.integers(0, 3)),
            grid=(int(rng.integers(1, 4)), int(rng.integers(1, 4))),
        )
        n_max = int(rng.integers(1, 3))
        direction = FORWARD if rng.random() < 0.5 else BACKWARD
        t1 = float(rng.uniform(5.0, 15.0))
        runs = []
        for n in range(1, n_max + 1):
            pm = _flat_periods(t1, n, model.units)
            runs.append(classify_da(build_initial_grid(space, cfg, model), n,
                                    direction, pm, model, cfg, space=space))
        for res in runs:
            assert_partition(res)
        for shallow, deep in zip(runs, runs[1:]):
            assert_weakly_stable_nested(shallow, deep)


# ---------------------------------------------------------------------------
# certified event detection on synthetic boxes


def _synthetic_domain(position, velocity, slopes=(), order=4):
    """Constant box plus optional (row, var, coeff) linear terms."""
    config = AlgebraConfig(order=order, nvars=2)
    exps = [tuple(e) for e in config.tables().exponents]
    m = np.zeros((6, config.size))
    m[:3, 0] = position
    m[3:, 0] = velocity
    for row, var, coeff in slopes:
        want = (1, 0) if var == 0 else (0, 1)
        m[row, exps.index(want)] = coeff
    return SubDomain(
        id=1, parent_id=None, rp_center_km=4000.0, rp_halfwidth_km=50.0,
        omega_center_rad=0.0, omega_halfwidth_rad=0.1, depth=0,
        flow_map=PolyVector.from_matrix(config, m),
    )


def test_event_check_certifies_crash():
    model = _two_body()
    d = _synthetic_domain([0.5, 0.0, 0.0], [0.0, 0.5, 0.0])
    assert domain_event_check(d, model) == "certified_crash"


def test_event_check_mixed_on_crash_straddle():
    model = _two_body()
    d = _synthetic_domain([1.0, 0.0, 0.0], [0.0, 0.5, 0.0],
                          slopes=[(0, 0, 0.1)])
    assert domain_event_check(d, model) == "mixed"


def test_event_check_certifies_escape_only_with_positive_energy():
    model = _two_body()
    fast = _synthetic_domain([200.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    assert domain_event_check(fast, model) == "certified_escape"
    slow = _synthetic_domain([200.0, 0.0, 0.0], [0.0, 0.01, 0.0])
    assert domain_event_check(slow, model) == "none"


def test_event_check_escape_sphere_straddle():
    model = _two_body()
    # radius interval [160, 180]: worth splitting only if the box can
    # actually hold positive energy
    fast = _synthetic_domain([170.0, 0.0, 0.0], [0.0, 2.0, 0.0],
                             slopes=[(0, 0, 10.0)])
    assert domain_event_check(fast, model) == "mixed"
    bound = _synthetic_domain([170.0, 0.0, 0.0], [0.0, 0.01, 0.0],
                              slopes=[(0, 0, 10.0)])
    assert domain_event_check(bound, model) == "none"


def test_event_check_moon_crash_and_precedence():
    model = DynamicsModel(perturbers=("phobos",), srp=False)
    radius_lu = model.perturbers[0].radius / model.units.LU
    pos = model.perturber_positions_nd(0.0)[0]
    on_moon = _synthetic_domain(pos, [0.0, 0.1, 0.0])
    assert domain_event_check(on_moon, model) == "certified_moon_crash"
    straddle = _synthetic_domain(pos, [0.0, 0.1, 0.0],
                                 slopes=[(0, 0, 2.0 * radius_lu)])
    assert domain_event_check(straddle, model) == "mixed"
    # target crash outranks the moon check
    inside = _synthetic_domain([0.5, 0.0, 0.0], [0.0, 0.1, 0.0])
    assert domain_event_check(inside, model) == "certified_crash"


# ---------------------------------------------------------------------------
# point-wise oracle


def test_pointwise_revolutions_match_kepler():
    model = _two_body()
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=4400.0, e=0.3)
    cfg = OracleConfig(space=space,
                       period_model=_flat_periods(15.0, 2, model.units))
    rp = 4200.0
    pt = classify_pointwise((rp, 0.05), 2, FORWARD, model, cfg)
    assert pt.label == ClassLabel(ClassKind.WEAKLY_STABLE, 2)
    assert not pt.failed
    a_nd = (rp / model.units.LU) / (1.0 - 0.3)
    period = 2.0 * math.pi * a_nd ** 1.5 / math.sqrt(model.mu_t_nd)
    assert len(pt.rev_times_tu) == 2
    assert pt.rev_times_tu[0] == pytest.approx(period, abs=1e-9)
    assert pt.rev_times_tu[1] == pytest.approx(2.0 * period, abs=1e-9)
    assert pt.final_time_tu == pt.rev_times_tu[-1]


def test_pointwise_backward_revolution():
    model = _two_body()
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=4400.0, e=0.3)
    cfg = OracleConfig(space=space,
                       period_model=_flat_periods(15.0, 1, model.units))
    pt = classify_pointwise((4200.0, 0.05), 1, BACKWARD, model, cfg)
    assert pt.label == ClassLabel(ClassKind.WEAKLY_STABLE, -1)
    a_nd = (4200.0 / model.units.LU) / (1.0 - 0.3)
    period = 2.0 * math.pi * a_nd ** 1.5 / math.sqrt(model.mu_t_nd)
    assert pt.rev_times_tu[0] == pytest.approx(-period, abs=1e-9)


def test_pointwise_hyperbolic_override_escapes():
    model = _two_body()
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=4400.0, e=0.3)
    cfg = OracleConfig(space=space,
                       period_model=_flat_periods(15.0, 2, model.units),
                       eccentricity_override=1.2,
                       thresholds=EventThresholds(r_escape_lu=20.0))
    pt = classify_pointwise((4200.0, 0.05), 2, FORWARD, model, cfg)
    assert pt.label == ClassLabel(ClassKind.UNSTABLE, 1)
    assert pt.rev_times_tu == ()
    assert pt.final_time_tu > 0.0


def test_pointwise_crash_against_raised_threshold():
    model = _two_body()
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=4400.0, e=0.3)
    cfg = OracleConfig(space=space,
                       period_model=_flat_periods(15.0, 1, model.units),
                       thresholds=EventThresholds(r_crash_lu=1.25))
    pt = classify_pointwise((4100.0, 0.05), 1, FORWARD, model, cfg)
    assert pt.label == ClassLabel(ClassKind.TARGET_CRASH, 1)
    assert pt.final_time_tu < 1.0


def test_pointwise_time_cap_is_acrobatic():
    model = _two_body()
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=4400.0, e=0.3)
    cfg = OracleConfig(space=space,
                       period_model=_flat_periods(15.0, 1, model.units),
                       time_cap_factor=1e-3)
    pt = classify_pointwise((4200.0, 0.05), 1, FORWARD, model, cfg)
    assert pt.label == ClassLabel(ClassKind.ACROBATIC, 1)
    assert not pt.failed
    assert pt.rev_times_tu == ()
    assert pt.final_time_tu == pytest.approx(15.0e-3, rel=1e-12)


def test_pointwise_integrator_failure_sets_flag():
    model = _two_body()
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=4400.0, e=0.3)
    bad = IntegratorConfig(initial_step=0.5, min_step=0.4, max_step=0.5,
                           rel_tol=1e-16, abs_tol=1e-16,
                           scheme=Scheme.RK8_POINTWISE)
    cfg = OracleConfig(space=space,
                       period_model=_flat_periods(15.0, 1, model.units),
                       integrator=bad)
    pt = classify_pointwise((4200.0, 0.05), 1, FORWARD, model, cfg)
    assert pt.failed
    assert pt.label.kind is ClassKind.ACROBATIC


def test_pointwise_validation():
    model = _two_body()
    cfg = OracleConfig(space=SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=4400.0))
    with pytest.raises(ValueError):
        classify_pointwise((3000.0, 0.0), 1, FORWARD, model, cfg)
    with pytest.raises(ValueError):
        classify_pointwise((4200.0, 0.0), 0, FORWARD, model, cfg)
    with pytest.raises(ValueError):
        classify_pointwise((4200.0, 0.0), 1, "sideways", model, cfg)


def test_bridge_soundness_on_certified_crash_boxes():
    # any point sampled inside a certified-crash box must crash point-wise
    # with the same period index
    model = _two_body()
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=4400.0,
                            omega_min_rad=0.0, omega_max_rad=0.05, e=0.3)
    pm = _flat_periods(15.0, 1, model.units)
    cfg = AdsConfig(tolerance=1e-4, order=6, max_splits=0, grid=(4, 1))
    th = EventThresholds(r_crash_lu=1.25)
    res = classify_da(build_initial_grid(space, cfg, model), 1, FORWARD,
                      pm, model, cfg, space=space, thresholds=th)
    ocfg = OracleConfig(space=space, period_model=pm, thresholds=th)
    rng = np.random.default_rng(7)
    for d in res.select(ClassKind.TARGET_CRASH, 1):
        for _ in range(3):
            rp = d.rp_center_km + d.rp_halfwidth_km * rng.uniform(-0.9, 0.9)
            om = d.omega_center_rad + d.omega_halfwidth_rad * rng.uniform(-0.9, 0.9)
            pt = classify_pointwise((rp, om), 1, FORWARD, model, ocfg)
            assert pt.label == d.label


# ---------------------------------------------------------------------------
# capture sets


def test_box_intersections():
    a = Box(4000.0, 4500.0, 0.0, 1.0)
    assert a.intersect(a) == a
    assert a.intersect(Box(4500.0, 4600.0, 0.0, 1.0)) is None  # touch
    assert a.intersect(Box(4600.0, 4700.0, 0.0, 1.0)) is None
    hit = a.intersect(Box(4250.0, 4750.0, 0.25, 0.75))
    assert hit == Box(4250.0, 4500.0, 0.25, 0.75)
    assert hit.area <= min(a.area, Box(4250.0, 4750.0, 0.25, 0.75).area)


def _leaf(label, rp_lo, rp_hi, om_lo, om_hi, ident=1):
    return SubDomain(
        id=ident, parent_id=None,
        rp_center_km=0.5 * (rp_lo + rp_hi), rp_halfwidth_km=0.5 * (rp_hi - rp_lo),
        omega_center_rad=0.5 * (om_lo + om_hi),
        omega_halfwidth_rad=0.5 * (om_hi - om_lo),
        depth=0, flow_map=None, status=DomainStatus.CLASSIFIED, label=label,
    )


def test_capture_set_intersects_stable_with_backward_escape():
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=5000.0,
                            omega_min_rad=0.0, omega_max_rad=1.0)
    fwd = MappingResult(FORWARD, 2, [
        _leaf(ClassLabel(ClassKind.WEAKLY_STABLE, 2), 4000.0, 4500.0, 0.0, 1.0),
        _leaf(ClassLabel(ClassKind.TARGET_CRASH, 1), 4500.0, 5000.0, 0.0, 1.0, 2),
    ], space)
    bwd = MappingResult(BACKWARD, 1, [
        _leaf(ClassLabel(ClassKind.UNSTABLE, -1), 4250.0, 4750.0, 0.25, 0.75),
        _leaf(ClassLabel(ClassKind.UNSTABLE, -1), 4600.0, 4900.0, 0.0, 0.2, 2),
        _leaf(ClassLabel(ClassKind.WEAKLY_STABLE, -1), 4000.0, 4250.0, 0.0, 1.0, 3),
    ], space)
    got = capture_set(fwd, bwd)
    assert got == [Box(4250.0, 4500.0, 0.25, 0.75)]
    assert got[0].area <= min(
        sum(Box.of_domain(d).area for d in fwd.select(ClassKind.WEAKLY_STABLE, 2)),
        sum(Box.of_domain(d).area for d in bwd.select(ClassKind.UNSTABLE, -1)),
    )


def test_capture_set_validation():
    space = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=5000.0,
                            omega_min_rad=0.0, omega_max_rad=1.0)
    other = SearchSpaceSpec(rp_min_km=4000.0, rp_max_km=6000.0,
                            omega_min_rad=0.0, omega_max_rad=1.0)
    fwd = MappingResult(FORWARD, 1, [], space)
    bwd = MappingResult(BACKWARD, 1, [], space)
    with pytest.raises(ValueError):
        capture_set(bwd, bwd)
    with pytest.raises(ValueError):
        capture_set(fwd, MappingResult(BACKWARD, 1, [], other))
    assert capture_set(fwd, bwd) == []


def test_capture_ratio_cases():
    w2 = ClassLabel(ClassKind.WEAKLY_STABLE, 2)
    x1b = ClassLabel(ClassKind.UNSTABLE, -1)
    w1b = ClassLabel(ClassKind.WEAKLY_STABLE, -1)

    def pt(ic, label):
        return OraclePoint(ic, label, (), 0.0)

    both = [pt((4000.0, 0.1), w2), pt((4000.0, 0.1), x1b),
            pt((4100.0, 0.2), w2), pt((4100.0, 0.2), x1b)]
    assert capture_ratio(both, 2) == 1.0
    half = both[:2] + [pt((4100.0, 0.2), w2), pt((4100.0, 0.2), w1b)]
    assert capture_ratio(half, 2) == 0.5
    none = [pt((4000.0, 0.1), ClassLabel(ClassKind.TARGET_CRASH, 1)),
            pt((4000.0, 0.1), x1b)]
    assert capture_ratio(none, 2) == 0.0
    with pytest.raises(ValueError):
        capture_ratio([], 1)
    with pytest.raises(ValueError):
        capture_ratio(both, 0)
    with pytest.raises(ValueError):
        capture_ratio(both[:1], 2)  # forward only
