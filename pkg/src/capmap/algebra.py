"""Truncated multivariate Taylor polynomial arithmetic.

The scalar type of the flow-map engine: polynomials of total degree <= k in v
local variables, each variable ranging over [-1, 1]. Coefficients are stored
densely in graded-lexicographic order (ascending total degree, then descending
lexicographic exponent order, so x0**d comes first within each degree).

All index bookkeeping for a given (order, nvars) pair is precomputed once and
cached; the multiply/compose kernels run over those tables in compiled loops.
"""

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit


class AlgebraError(ValueError):
    """Bad operand for a polynomial operation (config mismatch, bad index)."""


class SingularityError(ArithmeticError):
    """Constant part of an intrinsic's argument is outside the real domain."""


@dataclass(frozen=True)
class AlgebraConfig:
    """Order and variable count of a truncated polynomial algebra."""

    order: int
    nvars: int

    def __post_init__(self):
        if self.order < 1:
            raise AlgebraError(f"order must be >= 1, got {self.order}")
        if not 1 <= self.nvars <= 6:
            raise AlgebraError(f"nvars must be in 1..6, got {self.nvars}")

    @property
    def size(self) -> int:
        """Number of monomials of total degree <= order in nvars variables."""
        return math.comb(self.order + self.nvars, self.nvars)

    def tables(self) -> "_Tables":
        return _tables(self.order, self.nvars)


def _graded_lex_exponents(order, nvars):
    """All exponent tuples with total degree <= order, graded-lex ordered."""
    rows = []

    def fill(prefix, remaining, slots):
        if slots == 1:
            rows.append(prefix + (remaining,))
            return
        for e in range(remaining, -1, -1):
            fill(prefix + (e,), remaining - e, slots - 1)

    for deg in range(order + 1):
        fill((), deg, nvars)
    return np.array(rows, dtype=np.int64)


class _Tables:
    """Precomputed index structures for one (order, nvars) configuration."""

    def __init__(self, order, nvars):
        self.order = order
        self.nvars = nvars
        self.exponents = _graded_lex_exponents(order, nvars)
        self.size = self.exponents.shape[0]
        self.index = {tuple(row): i for i, row in enumerate(self.exponents)}

        mi, mj, mo = [], [], []
        for i, a in enumerate(self.exponents):
            for j, b in enumerate(self.exponents):
                s = a + b
                if s.sum() <= order:
                    mi.append(i)
                    mj.append(j)
                    mo.append(self.index[tuple(s)])
        self.mul_i = np.array(mi, dtype=np.int64)
        self.mul_j = np.array(mj, dtype=np.int64)
        self.mul_o = np.array(mo, dtype=np.int64)

        degrees = self.exponents.sum(axis=1)
        self.degrees = degrees
        self.top_slots = np.flatnonzero(degrees == order)
        self._subst_cache = {}

    def eval_basis(self, point):
        """Monomial values at one local point, as a length-``size`` vector."""
        point = np.asarray(point, dtype=float)
        return np.prod(point[None, :] ** self.exponents, axis=1)

    def half_substitution(self, direction, side):
        """Matrix re-expanding coefficients onto one half of the box.

        ``side`` is 'lo' or 'hi'; the parent local coordinate in ``direction``
        becomes (child - 1)/2 or (child + 1)/2. Exact on polynomials.
        """
        key = (direction, side)
        if key not in self._subst_cache:
            shift = -1.0 if side == "lo" else 1.0
            mat = np.zeros((self.size, self.size))
            for col, alpha in enumerate(self.exponents):
                d = alpha[direction]
                scale = 0.5 ** d
                for m in range(d + 1):
                    target = alpha.copy()
                    target[direction] = m
                    row = self.index[tuple(target)]
                    mat[row, col] += math.comb(d, m) * shift ** (d - m) * scale
            self._subst_cache[key] = mat
        return self._subst_cache[key]


@lru_cache(maxsize=None)
def _tables(order, nvars):
    return _Tables(order, nvars)


# ---------------------------------------------------------------------------
# compiled kernels on raw coefficient arrays


@njit(cache=True)
def mul_coeffs(a, b, mi, mj, mo, n):
    """Truncated product of two coefficient vectors."""
    out = np.zeros(n)
    for t in range(mi.size):
        out[mo[t]] += a[mi[t]] * b[mj[t]]
    return out


@njit(cache=True)
def mul_rows(rows, b, mi, mj, mo):
    """Truncated product of each row of ``rows`` with ``b``."""
    m, n = rows.shape
    out = np.zeros((m, n))
    for r in range(m):
        for t in range(mi.size):
            out[r, mo[t]] += rows[r, mi[t]] * b[mj[t]]
    return out


@njit(cache=True)
def square_sum_rows(rows, mi, mj, mo):
    """Sum of the truncated squares of the rows (e.g. |r|^2 from x, y, z)."""
    m, n = rows.shape
    out = np.zeros(n)
    for r in range(m):
        for t in range(mi.size):
            out[mo[t]] += rows[r, mi[t]] * rows[r, mj[t]]
    return out


@njit(cache=True)
def compose_series(series, nonconst, mi, mj, mo):
    """Horner evaluation of a univariate Taylor series at a polynomial.

    ``series[j]`` is the coefficient of (p - const(p))**j; ``nonconst`` is the
    coefficient vector of p with its constant slot zeroed.
    """
    n = nonconst.size
    out = np.zeros(n)
    out[0] = series[-1]
    for s in range(series.size - 2, -1, -1):
        tmp = np.zeros(n)
        for t in range(mi.size):
            tmp[mo[t]] += out[mi[t]] * nonconst[mj[t]]
        tmp[0] += series[s]
        out = tmp
    return out


# ---------------------------------------------------------------------------
# univariate series generators for the intrinsic functions


def _series_reciprocal(c, order):
    if c == 0.0:
        raise SingularityError("reciprocal of polynomial with zero constant part")
    j = np.arange(order + 1)
    return (-1.0) ** j / c ** (j + 1)


def _series_sqrt(c, order):
    if c <= 0.0:
        raise SingularityError(f"sqrt of polynomial with constant part {c} <= 0")
    return _series_pow(c, 0.5, order)


def _series_log(c, order):
    if c <= 0.0:
        raise SingularityError(f"log of polynomial with constant part {c} <= 0")
    out = np.empty(order + 1)
    out[0] = math.log(c)
    for j in range(1, order + 1):
        out[j] = (-1.0) ** (j + 1) / (j * c ** j)
    return out


def _series_exp(c, order):
    ec = math.exp(c)
    out = np.empty(order + 1)
    fact = 1.0
    for j in range(order + 1):
        out[j] = ec / fact
        fact *= j + 1
    return out


def _series_sin(c, order):
    s, co = math.sin(c), math.cos(c)
    cycle = (s, co, -s, -co)
    out = np.empty(order + 1)
    fact = 1.0
    for j in range(order + 1):
        out[j] = cycle[j % 4] / fact
        fact *= j + 1
    return out


def _series_cos(c, order):
    s, co = math.sin(c), math.cos(c)
    cycle = (co, -s, -co, s)
    out = np.empty(order + 1)
    fact = 1.0
    for j in range(order + 1):
        out[j] = cycle[j % 4] / fact
        fact *= j + 1
    return out


def _series_pow(c, exponent, order):
    """Generalized binomial series for (c + u)**exponent."""
    if c <= 0.0:
        raise SingularityError(f"pow of polynomial with constant part {c} <= 0")
    out = np.empty(order + 1)
    coeff = 1.0
    for j in range(order + 1):
        out[j] = coeff * c ** (exponent - j)
        coeff *= (exponent - j) / (j + 1)
    return out


_SERIES = {
    "reciprocal": _series_reciprocal,
    "sqrt": _series_sqrt,
    "sin": _series_sin,
    "cos": _series_cos,
    "exp": _series_exp,
    "log": _series_log,
}


def compose_on_coeffs(coeffs, series, tab):
    """Apply a univariate series to a raw coefficient vector."""
    nonconst = coeffs.copy()
    nonconst[0] = 0.0
    return compose_series(series, nonconst, tab.mul_i, tab.mul_j, tab.mul_o)


def pow_coeffs(coeffs, exponent, tab):
    """Raw-array fractional power, used by the flow-map dynamics."""
    series = _series_pow(coeffs[0], exponent, tab.order)
    return compose_on_coeffs(coeffs, series, tab)


# ---------------------------------------------------------------------------
# public value types


@dataclass(frozen=True)
class Interval:
    """Closed real interval; conservative range enclosure result."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (self.lo <= self.hi):
            raise AlgebraError(f"empty interval [{self.lo}, {self.hi}]")

    def contains(self, x) -> bool:
        return self.lo <= x <= self.hi

    @property
    def width(self) -> float:
        return self.hi - self.lo


class TruncatedPolynomial:
    """A truncated Taylor polynomial over local coordinates in [-1, 1]^v.

    Immutable after construction; arithmetic returns new instances. The
    coefficient vector follows the config's graded-lex monomial order.
    """

    __slots__ = ("config", "coeffs")

    def __init__(self, config, coeffs):
        tab = config.tables()
        coeffs = np.array(coeffs, dtype=float)
        if coeffs.shape != (tab.size,):
            raise AlgebraError(
                f"expected {tab.size} coefficients for order {config.order}, "
                f"nvars {config.nvars}; got shape {coeffs.shape}"
            )
        if not np.isfinite(coeffs).all():
            raise AlgebraError("non-finite coefficient")
        super().__setattr__("config", config)
        super().__setattr__("coeffs", coeffs)
        coeffs.setflags(write=False)

    def __setattr__(self, name, value):
        raise AttributeError("TruncatedPolynomial is immutable")

    @classmethod
    def constant(cls, config, value):
        coeffs = np.zeros(config.size)
        coeffs[0] = value
        return cls(config, coeffs)

    @property
    def constant_part(self) -> float:
        return float(self.coeffs[0])

    def coefficient(self, alpha) -> float:
        """Coefficient of the monomial with exponent tuple ``alpha``."""
        tab = self.config.tables()
        key = tuple(int(a) for a in alpha)
        if key not in tab.index:
            raise AlgebraError(f"no monomial {key} at order {self.config.order}")
        return float(self.coeffs[tab.index[key]])

    def _coerce(self, other):
        if isinstance(other, TruncatedPolynomial):
            if other.config != self.config:
                raise AlgebraError("operands use different algebra configs")
            return other.coeffs
        if isinstance(other, (int, float, np.floating, np.integer)):
            c = np.zeros(self.config.size)
            c[0] = float(other)
            return c
        return None

    def __add__(self, other):
        oc = self._coerce(other)
        if oc is None:
            return NotImplemented
        return TruncatedPolynomial(self.config, self.coeffs + oc)

    __radd__ = __add__

    def __sub__(self, other):
        oc = self._coerce(other)
        if oc is None:
            return NotImplemented
        return TruncatedPolynomial(self.config, self.coeffs - oc)

    def __rsub__(self, other):
        oc = self._coerce(other)
        if oc is None:
            return NotImplemented
        return TruncatedPolynomial(self.config, oc - self.coeffs)

    def __neg__(self):
        return TruncatedPolynomial(self.config, -self.coeffs)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return TruncatedPolynomial(self.config, self.coeffs * float(other))
        if isinstance(other, TruncatedPolynomial):
            return multiply(self, other)
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return TruncatedPolynomial(self.config, self.coeffs / float(other))
        if isinstance(other, TruncatedPolynomial):
            return multiply(self, intrinsic("reciprocal", other))
        return NotImplemented

    def __rtruediv__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return float(other) * intrinsic("reciprocal", self)
        return NotImplemented

    def __pow__(self, n):
        if not isinstance(n, int) or n < 0:
            return NotImplemented
        out = TruncatedPolynomial.constant(self.config, 1.0)
        base = self
        while n:
            if n & 1:
                out = out * base
            base_needed = n >> 1
            if base_needed:
                base = base * base
            n = base_needed
        return out

    def evaluate(self, local_point) -> float:
        basis = _checked_basis(self.config, local_point)
        return float(self.coeffs @ basis)

    def nonconstant_mass(self) -> float:
        """Sum of absolute values of all non-constant coefficients."""
        return float(np.abs(self.coeffs[1:]).sum())

    def __repr__(self):
        return (
            f"TruncatedPolynomial(order={self.config.order}, "
            f"nvars={self.config.nvars}, const={self.constant_part:.6g}, "
            f"mass={self.nonconstant_mass():.3g})"
        )


class PolyVector:
    """Ordered components sharing one algebra config; the flow-map state.

    Stored as an (ncomponents, ncoeffs) matrix; ``components`` exposes the
    rows as TruncatedPolynomial values.
    """

    __slots__ = ("config", "matrix")

    def __init__(self, components):
        components = list(components)
        if not components:
            raise AlgebraError("PolyVector needs at least one component")
        config = components[0].config
        for p in components[1:]:
            if p.config != config:
                raise AlgebraError("PolyVector components use different configs")
        matrix = np.array([p.coeffs for p in components])
        matrix.setflags(write=False)
        super().__setattr__("config", config)
        super().__setattr__("matrix", matrix)

    def __setattr__(self, name, value):
        raise AttributeError("PolyVector is immutable")

    @classmethod
    def from_matrix(cls, config, matrix):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[1] != config.size:
            raise AlgebraError(f"bad flow-map matrix shape {matrix.shape}")
        obj = object.__new__(cls)
        matrix = matrix.copy()
        matrix.setflags(write=False)
        object.__setattr__(obj, "config", config)
        object.__setattr__(obj, "matrix", matrix)
        return obj

    def __len__(self):
        return self.matrix.shape[0]

    @property
    def components(self):
        return [TruncatedPolynomial(self.config, row.copy()) for row in self.matrix]

    def __getitem__(self, i):
        return TruncatedPolynomial(self.config, self.matrix[i].copy())


# ---------------------------------------------------------------------------
# module-level operations (the published surface)


def variable(config, index, center, halfwidth) -> TruncatedPolynomial:
    """Degree-1 polynomial ``center + halfwidth * x_index``.

    Evaluating at local coordinate +/-1 yields center +/- halfwidth.
    """
    if not 0 <= index < config.nvars:
        raise AlgebraError(f"variable index {index} out of range 0..{config.nvars - 1}")
    if halfwidth < 0:
        raise AlgebraError(f"halfwidth must be >= 0, got {halfwidth}")
    tab = config.tables()
    coeffs = np.zeros(tab.size)
    coeffs[0] = center
    alpha = tuple(1 if i == index else 0 for i in range(config.nvars))
    coeffs[tab.index[alpha]] = halfwidth
    return TruncatedPolynomial(config, coeffs)


def multiply(p, q) -> TruncatedPolynomial:
    """Truncated product; terms above the config order are discarded."""
    if p.config != q.config:
        raise AlgebraError("multiply operands use different algebra configs")
    tab = p.config.tables()
    out = mul_coeffs(p.coeffs, q.coeffs, tab.mul_i, tab.mul_j, tab.mul_o, tab.size)
    return TruncatedPolynomial(p.config, out)


def intrinsic(name, p, exponent=None) -> TruncatedPolynomial:
    """Taylor expansion of an elementary function composed with ``p``.

    ``name`` is one of reciprocal, sqrt, sin, cos, exp, log, pow; ``pow``
    additionally takes the real ``exponent``. Raises SingularityError when the
    constant part of ``p`` is outside the function's real domain.
    """
    tab = p.config.tables()
    c = p.constant_part
    if name == "pow":
        if exponent is None:
            raise AlgebraError("intrinsic 'pow' needs an exponent")
        series = _series_pow(c, float(exponent), tab.order)
    elif name in _SERIES:
        if exponent is not None:
            raise AlgebraError(f"intrinsic '{name}' takes no exponent")
        series = _SERIES[name](c, tab.order)
    else:
        raise AlgebraError(f"unknown intrinsic '{name}'")
    return TruncatedPolynomial(p.config, compose_on_coeffs(p.coeffs, series, tab))


def _checked_basis(config, local_point):
    tab = config.tables()
    local_point = np.asarray(local_point, dtype=float)
    if local_point.shape != (config.nvars,):
        raise AlgebraError(
            f"local point must have {config.nvars} coordinates, got shape"
            f" {local_point.shape}"
        )
    if np.any(np.abs(local_point) > 1.0):
        warnings.warn(
            "evaluating outside the unit box; accuracy not guaranteed",
            stacklevel=3,
        )
    return tab.eval_basis(local_point)


def evaluate(pv, local_point) -> np.ndarray:
    """Numerical value of each component at a local point in [-1, 1]^v."""
    basis = _checked_basis(pv.config, local_point)
    return pv.matrix @ basis


def bound(p) -> Interval:
    """Interval guaranteed to enclose the range of ``p`` over [-1, 1]^v.

    Exact for affine polynomials; higher orders contribute their absolute
    coefficient sum (conservative).
    """
    c = p.constant_part
    mass = p.nonconstant_mass()
    return Interval(c - mass, c + mass)


def bound_coeffs(coeffs) -> Interval:
    """bound() on a raw coefficient vector (constant slot first)."""
    mass = float(np.abs(coeffs[1:]).sum())
    return Interval(float(coeffs[0]) - mass, float(coeffs[0]) + mass)


def truncation_error_estimate(pv):
    """Top-order coefficient mass and the dominant split direction.

    Returns (estimate, direction): the estimate is the max over components of
    the summed absolute top-order coefficients; the direction maximizes the
    degree-weighted top-order mass, summed over all components. Accepts a
    single polynomial or a vector.
    """
    if isinstance(pv, TruncatedPolynomial):
        pv = PolyVector([pv])
    if pv.config.order < 2:
        raise AlgebraError("error estimation needs order >= 2")
    tab = pv.config.tables()
    top = np.abs(pv.matrix[:, tab.top_slots])
    estimate = float(top.sum(axis=1).max()) if tab.top_slots.size else 0.0
    weights = tab.exponents[tab.top_slots].astype(float) / tab.order
    direction = int(np.argmax(top.sum(axis=0) @ weights))
    return estimate, direction


def estimate_from_matrix(matrix, tab):
    """truncation_error_estimate on a raw (m, n) coefficient matrix."""
    top = np.abs(matrix[:, tab.top_slots])
    estimate = float(top.sum(axis=1).max())
    weights = tab.exponents[tab.top_slots].astype(float) / tab.order
    direction = int(np.argmax(top.sum(axis=0) @ weights))
    return estimate, direction


# generic scalar helpers: accept floats or polynomials, used by code that is
# written once for both point-wise and flow-map inputs


def generic_sqrt(x):
    if isinstance(x, TruncatedPolynomial):
        return intrinsic("sqrt", x)
    return math.sqrt(x)


def generic_sin(x):
    if isinstance(x, TruncatedPolynomial):
        return intrinsic("sin", x)
    return math.sin(x)


def generic_cos(x):
    if isinstance(x, TruncatedPolynomial):
        return intrinsic("cos", x)
    return math.cos(x)
