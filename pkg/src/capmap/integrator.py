"""Adaptive 8th-order Runge-Kutta propagation, generic over the state algebra.

One Prince-Dormand 8(5,3) tableau serves two modes: point-wise states are
flat real vectors, flow-map states are (components x coefficients) matrices
whose rows are truncated-polynomial coefficient vectors. The step controller
is identical; only the error norm differs between the two schemes.
"""

import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .algebra import PolyVector, SingularityError

# Prince-Dormand 8(5,3) coefficients (Hairer, Norsett & Wanner, "Solving
# Ordinary Differential Equations I", DOP853). E5/E3 weight the embedded
# 5th- and 3rd-order error estimates; index 12 is reserved for the
# derivative at the step end and carries no weight here.

_C = np.array([
    0.0, 0.05260015195876773, 0.0789002279381516, 0.1183503419072274,
    0.2816496580927726, 0.3333333333333333, 0.25, 0.3076923076923077,
    0.6512820512820513, 0.6, 0.8571428571428571, 1.0,
])

_A = np.array([
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.05260015195876773, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
     0.0],
    [0.0197250569845379, 0.0591751709536137, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
     0.0, 0.0, 0.0, 0.0],
    [0.02958758547680685, 0.0, 0.08876275643042054, 0.0, 0.0, 0.0, 0.0, 0.0,
     0.0, 0.0, 0.0, 0.0],
    [0.2413651341592667, 0.0, -0.8845494793282861, 0.924834003261792, 0.0,
     0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.037037037037037035, 0.0, 0.0, 0.17082860872947386,
     0.12546768756682242, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.037109375, 0.0, 0.0, 0.17025221101954405, 0.06021653898045596,
     -0.017578125, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.03709200011850479, 0.0, 0.0, 0.17038392571223998,
     0.10726203044637328, -0.015319437748624402, 0.008273789163814023, 0.0,
     0.0, 0.0, 0.0, 0.0],
    [0.6241109587160757, 0.0, 0.0, -3.3608926294469414, -0.868219346841726,
     27.59209969944671, 20.154067550477894, -43.48988418106996, 0.0, 0.0,
     0.0, 0.0],
    [0.47766253643826434, 0.0, 0.0, -2.4881146199716677, -0.590290826836843,
     21.230051448181193, 15.279233632882423, -33.28821096898486,
     -0.020331201708508627, 0.0, 0.0, 0.0],
    [-0.9371424300859873, 0.0, 0.0, 5.186372428844064, 1.0914373489967295,
     -8.149787010746927, -18.52006565999696, 22.739487099350505,
     2.4936055526796523, -3.0467644718982196, 0.0, 0.0],
    [2.273310147516538, 0.0, 0.0, -10.53449546673725, -2.0008720582248625,
     -17.9589318631188, 27.94888452941996, -2.8589982771350235,
     -8.87285693353063, 12.360567175794303, 0.6433927460157636, 0.0],
])

_B = np.array([
    0.054293734116568765, 0.0, 0.0, 0.0, 0.0, 4.450312892752409,
    1.8915178993145003, -5.801203960010585, 0.3111643669578199,
    -0.1521609496625161, 0.20136540080403034, 0.04471061572777259,
])

_E3 = np.array([
    -0.18980075407240762, 0.0, 0.0, 0.0, 0.0, 4.450312892752409,
    1.8915178993145003, -5.801203960010585, -0.4226823213237919,
    -0.1521609496625161, 0.20136540080403034, 0.02265179219836082, 0.0,
])

_E5 = np.array([
    0.01312004499419488, 0.0, 0.0, 0.0, 0.0, -1.2251564463762044,
    -0.4957589496572502, 1.6643771824549864, -0.35032884874997366,
    0.3341791187130175, 0.08192320648511571, -0.022355307863886294, 0.0,
])

N_STAGES = 12
SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
ERROR_EXPONENT = -1.0 / 8.0


class Scheme(enum.Enum):
    RK8_POINTWISE = "RK8_POINTWISE"
    RK8_DA = "RK8_DA"


@dataclass(frozen=True)
class IntegratorConfig:
    """Step-control settings; tolerances apply per accepted step."""

    initial_step: float
    min_step: float
    max_step: float
    rel_tol: float = 1e-12
    abs_tol: float = 1e-12
    scheme: Scheme = Scheme.RK8_POINTWISE
    fixed_step: float = 0.0  # > 0 disables error control (convergence studies)

    def __post_init__(self):
        if not (0 < self.min_step <= self.max_step):
            raise ValueError(
                f"need 0 < min_step <= max_step, got {self.min_step}, {self.max_step}"
            )
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.initial_step <= 0:
            raise ValueError("initial_step must be positive")


@dataclass(frozen=True)
class StepRecord:
    """Outcome of one attempted step ending at time t."""

    t: float
    accepted: bool
    error_norm: float


class PropagationError(RuntimeError):
    """Integration could not continue; carries the last good time and state."""

    def __init__(self, message, last_time, last_state):
        super().__init__(f"{message} (last good time {last_time})")
        self.last_time = last_time
        self.last_state = last_state


def rk_stages(dynamics, t, y, h):
    """The 12 stage derivatives for one step of size h from (t, y)."""
    k = [dynamics(t, y)]
    for i in range(1, N_STAGES):
        acc = _A[i, 0] * k[0]
        for j in range(1, i):
            if _A[i, j] != 0.0:
                acc = acc + _A[i, j] * k[j]
        k.append(dynamics(t + _C[i] * h, y + h * acc))
    return k


def rk_step(dynamics, t, y, h):
    """One fixed step; returns (y_new, stages)."""
    k = rk_stages(dynamics, t, y, h)
    acc = _B[0] * k[0]
    for j in range(1, N_STAGES):
        if _B[j] != 0.0:
            acc = acc + _B[j] * k[j]
    return y + h * acc, k


def _error_combination(n5sq, n3sq, h):
    if n5sq == 0.0 and n3sq == 0.0:
        return 0.0
    return abs(h) * n5sq / math.sqrt(n5sq + 0.01 * n3sq)


def _error_norm_pointwise(k, y, y_new, h, cfg):
    scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
    e5 = sum(_E5[j] * k[j] for j in range(N_STAGES) if _E5[j] != 0.0)
    e3 = sum(_E3[j] * k[j] for j in range(N_STAGES) if _E3[j] != 0.0)
    n5sq = float(np.sum((e5 / scale) ** 2))
    n3sq = float(np.sum((e3 / scale) ** 2))
    return _error_combination(n5sq, n3sq, h) / math.sqrt(y.size)


def _error_norm_da(k, y, y_new, h, cfg):
    # per component: total coefficient mass of the error polynomial, scaled
    # by tolerance * (1 + |constant part of the state|); worst component wins
    scale = cfg.abs_tol + cfg.rel_tol * np.maximum(
        np.abs(y[:, 0]), np.abs(y_new[:, 0])
    )
    e5 = sum(_E5[j] * k[j] for j in range(N_STAGES) if _E5[j] != 0.0)
    e3 = sum(_E3[j] * k[j] for j in range(N_STAGES) if _E3[j] != 0.0)
    n5 = float(np.max(np.abs(e5).sum(axis=1) / scale))
    n3 = float(np.max(np.abs(e3).sum(axis=1) / scale))
    return _error_combination(n5 * n5, n3 * n3, h)


def integrate(
    dynamics: Callable,
    state,
    t0: float,
    t1: float,
    cfg: IntegratorConfig,
    step_callback: Optional[Callable] = None,
):
    """Propagate ``state`` from t0 to t1 under ``dynamics(t, state)``.

    Direction follows the sign of t1 - t0. ``step_callback(record, state)``
    is invoked after every attempted step (accepted and rejected; check
    ``record.accepted``) so callers can localize events or monitor flow-map
    growth. Raises PropagationError on step underflow or a persistent
    intrinsic singularity; the exception carries the last good time/state.
    """
    if t1 == t0:
        raise ValueError("t1 must differ from t0")

    wrap = isinstance(state, PolyVector)
    if wrap:
        config = state.config
        y = state.matrix.copy()
    else:
        y = np.array(state, dtype=float)

    err_norm = (
        _error_norm_da if cfg.scheme is Scheme.RK8_DA else _error_norm_pointwise
    )
    direction = 1.0 if t1 > t0 else -1.0
    t = t0

    if cfg.fixed_step > 0.0:
        h_mag = cfg.fixed_step
        while (t1 - t) * direction > 0.0:
            last = h_mag >= abs(t1 - t)
            h = direction * (abs(t1 - t) if last else h_mag)
            y, _ = rk_step(dynamics, t, y, h)
            t = t1 if last else t + h
            if step_callback is not None:
                step_callback(StepRecord(t, True, 0.0), y)
        return PolyVector.from_matrix(config, y) if wrap else y

    h_mag = min(cfg.initial_step, cfg.max_step)
    rejected = False
    while (t1 - t) * direction > 0.0:
        h_mag = min(h_mag, cfg.max_step)
        if h_mag < cfg.min_step:
            raise PropagationError(
                "step size underflow",
                t,
                PolyVector.from_matrix(config, y) if wrap else y,
            )
        last = h_mag >= abs(t1 - t)
        h = direction * (abs(t1 - t) if last else h_mag)
        t_new = t1 if last else t + h

        try:
            y_new, k = rk_step(dynamics, t, y, h)
            err = err_norm(k, y, y_new, h, cfg)
        except SingularityError:
            err = math.inf

        if not math.isfinite(err):
            # singular or wildly wrong trial step: retry shorter
            h_mag *= MIN_FACTOR
            rejected = True
            if step_callback is not None:
                step_callback(StepRecord(t_new, False, math.inf), y)
            continue

        if err < 1.0:
            factor = (
                MAX_FACTOR
                if err == 0.0
                else min(MAX_FACTOR, SAFETY * err ** ERROR_EXPONENT)
            )
            if rejected:
                factor = min(1.0, factor)
            t, y = t_new, y_new
            rejected = False
            h_mag *= factor
            if step_callback is not None:
                step_callback(StepRecord(t, True, err), y)
        else:
            h_mag *= max(MIN_FACTOR, SAFETY * err ** ERROR_EXPONENT)
            rejected = True
            if step_callback is not None:
                step_callback(StepRecord(t_new, False, err), y)

    return PolyVector.from_matrix(config, y) if wrap else y
