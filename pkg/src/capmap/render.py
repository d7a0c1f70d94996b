"""Rasterization of mapping results onto the r_p x omega plane.

Renders are pure functions of (result, spec). Images are ASCII netpbm
(P2 grayscale for density/last-step, P3 color for classification) so
goldens stay bit-exact without an image dependency; the exact per-pixel
numbers ride along as CSV. Pixel (0, 0) is the top-left corner: columns
sweep r_p left to right, rows sweep omega top (max) to bottom (min).
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .classification import MappingResult, OraclePoint
from .criteria import PeriodModel
from .mapping import SearchSpaceSpec

RENDER_KINDS = (
    "density",
    "last_step",
    "classification",
    "simplified_classification",
)

_CLASS_KINDS = ("classification", "simplified_classification")

# family base colors; per-index shades lighten toward white
_FAMILY_RGB = {
    "weakly_stable": (0, 0, 255),
    "unstable": (0, 170, 0),
    "target_crash": (220, 0, 0),
    "moon_crash": (255, 0, 255),
    "inconsistent": (128, 128, 128),
    "acrobatic": (128, 128, 128),  # shares the inconsistent gray
}


@dataclass(frozen=True)
class RenderSpec:
    """Raster kind and pixel grid; the grid covers the space exactly."""

    kind: str
    nx: int = 512
    ny: int = 512

    def __post_init__(self):
        if self.kind not in RENDER_KINDS:
            raise ValueError(
                f"kind must be one of {RENDER_KINDS}, got {self.kind!r}"
            )
        if self.nx < 1 or self.ny < 1:
            raise ValueError("pixel grid must be at least 1x1")


@dataclass(frozen=True)
class RenderOutput:
    spec: RenderSpec
    image: str
    csv: str
    extension: str  # pgm | ppm


def label_color(kind: str, period_index: int,
                simplified: bool = False) -> Tuple[int, int, int]:
    """Fixed color table; lighter shades for higher period indices."""
    base = _FAMILY_RGB[kind]
    if simplified:
        return base
    t = min(0.15 * (abs(period_index) - 1), 0.6)
    return tuple(int(round(c + (255 - c) * t)) for c in base)


# ---------------------------------------------------------------------------
# pixel geometry


def _axes(space: SearchSpaceSpec, spec: RenderSpec):
    dx = (space.rp_max_km - space.rp_min_km) / spec.nx
    dy = (space.omega_max_rad - space.omega_min_rad) / spec.ny
    cols = space.rp_min_km + (np.arange(spec.nx) + 0.5) * dx
    rows = space.omega_max_rad - (np.arange(spec.ny) + 0.5) * dy
    return cols, rows, dx, dy


def _paint_domains(result: MappingResult, spec: RenderSpec) -> np.ndarray:
    """Index of the owning domain per pixel; edge ties go to the lowest id.

    Boxes are painted in descending id order so the lowest id wins where
    centers land exactly on a shared edge, matching point location.
    """
    space = result.space
    _, _, dx, dy = _axes(space, spec)
    owner = np.full((spec.ny, spec.nx), -1, dtype=np.int64)
    order = sorted(range(len(result.domains)),
                   key=lambda k: result.domains[k].id, reverse=True)
    for k in order:
        d = result.domains[k]
        x0 = math.ceil((d.rp_center_km - d.rp_halfwidth_km
                        - space.rp_min_km) / dx - 0.5)
        x1 = math.floor((d.rp_center_km + d.rp_halfwidth_km
                         - space.rp_min_km) / dx - 0.5)
        # rows run from omega_max down
        y0 = math.ceil((space.omega_max_rad - d.omega_center_rad
                        - d.omega_halfwidth_rad) / dy - 0.5)
        y1 = math.floor((space.omega_max_rad - d.omega_center_rad
                         + d.omega_halfwidth_rad) / dy - 0.5)
        x0, x1 = max(x0, 0), min(x1, spec.nx - 1)
        y0, y1 = max(y0, 0), min(y1, spec.ny - 1)
        if x0 <= x1 and y0 <= y1:
            owner[y0:y1 + 1, x0:x1 + 1] = k
    if (owner < 0).any():
        # centers caught in an ulp crack between boxes: nearest center wins
        cols, rows, _, _ = _axes(space, spec)
        ctr_rp = np.array([d.rp_center_km for d in result.domains])
        ctr_om = np.array([d.omega_center_rad for d in result.domains])
        rp_scale = space.rp_max_km - space.rp_min_km
        om_scale = space.omega_max_rad - space.omega_min_rad
        for y, x in zip(*np.nonzero(owner < 0)):
            dist = (((cols[x] - ctr_rp) / rp_scale) ** 2
                    + ((rows[y] - ctr_om) / om_scale) ** 2)
            owner[y, x] = int(np.argmin(dist))
    return owner


# ---------------------------------------------------------------------------
# netpbm + CSV writers


def _wrap_tokens(tokens: Sequence[str], per_line: int) -> List[str]:
    return [" ".join(tokens[i:i + per_line])
            for i in range(0, len(tokens), per_line)]


def _pgm(values: np.ndarray, kind: str) -> str:
    lines = ["P2", f"# {kind}", f"{values.shape[1]} {values.shape[0]}", "255"]
    lines += _wrap_tokens([str(int(v)) for v in values.ravel()], 17)
    return "\n".join(lines) + "\n"


def _ppm(rgb: np.ndarray, kind: str) -> str:
    lines = ["P3", f"# {kind}", f"{rgb.shape[1]} {rgb.shape[0]}", "255"]
    lines += _wrap_tokens([str(int(v)) for v in rgb.reshape(-1)], 15)
    return "\n".join(lines) + "\n"


def parse_pgm(text: str) -> np.ndarray:
    tokens = [t for line in text.splitlines()
              for t in ([] if line.startswith("#") else line.split())]
    if tokens[0] != "P2":
        raise ValueError("not an ASCII PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("unexpected maxval")
    return np.array(tokens[4:4 + w * h], dtype=np.int64).reshape(h, w)


def parse_ppm(text: str) -> np.ndarray:
    tokens = [t for line in text.splitlines()
              for t in ([] if line.startswith("#") else line.split())]
    if tokens[0] != "P3":
        raise ValueError("not an ASCII PPM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + 3 * w * h], dtype=np.int64).reshape(h, w, 3)


def _value_csv(cols, rows, grid: np.ndarray, column: str) -> str:
    out = [f"rp_km,omega_rad,{column}"]
    for y in range(grid.shape[0]):
        om = float(rows[y])
        for x in range(grid.shape[1]):
            out.append(f"{float(cols[x])!r},{om!r},{float(grid[y, x])!r}")
    return "\n".join(out) + "\n"


def _label_csv(cols, rows, kinds, indices) -> str:
    out = ["rp_km,omega_rad,label_kind,period_index"]
    for y in range(kinds.shape[0]):
        om = float(rows[y])
        for x in range(kinds.shape[1]):
            out.append(f"{float(cols[x])!r},{om!r},"
                       f"{kinds[y, x]},{int(indices[y, x])}")
    return "\n".join(out) + "\n"


def parse_value_csv(text: str):
    lines = text.strip().splitlines()
    data = np.array([[float(v) for v in line.split(",")]
                     for line in lines[1:]])
    return data[:, 0], data[:, 1], data[:, 2]


# ---------------------------------------------------------------------------
# the four raster kinds


def _period_model_from(result: MappingResult) -> Optional[PeriodModel]:
    info = result.metadata.get("period_model")
    if not info:
        return None
    table = {int(k): tuple(v) for k, v in info["table"].items()}
    return PeriodModel(info["shape"], table, time_unit_s=info["time_unit_s"])


def _density(result: MappingResult, spec: RenderSpec) -> RenderOutput:
    space = result.space
    cols, rows, dx, dy = _axes(space, spec)
    counts = np.zeros((spec.ny, spec.nx))
    for d in result.domains:
        x = min(int((d.rp_center_km - space.rp_min_km) / dx), spec.nx - 1)
        y = min(int((space.omega_max_rad - d.omega_center_rad) / dy),
                spec.ny - 1)
        counts[y, x] += 1
    percent = counts * (100.0 / len(result.domains))
    peak = percent.max()
    img = np.zeros_like(percent) if peak == 0 else np.rint(
        percent * (255.0 / peak))
    return RenderOutput(spec, _pgm(img, "density"),
                        _value_csv(cols, rows, percent, "percent"), "pgm")


def _last_step(result: MappingResult, spec: RenderSpec) -> RenderOutput:
    space = result.space
    cols, rows, _, _ = _axes(space, spec)
    model = _period_model_from(result)
    time_scale = result.metadata.get("time_scale_s")
    n_max = result.n_max
    fractions = np.empty(len(result.domains))
    if model is not None and time_scale:
        for k, d in enumerate(result.domains):
            raw = model.raw_time(d.rp_center_km, n_max)
            span = abs(raw * model.time_unit_s / time_scale)
            fractions[k] = abs(d.last_time) / span
    else:
        # synthetic results without run metadata: scale to the deepest time
        top = max((abs(d.last_time) for d in result.domains), default=0.0)
        for k, d in enumerate(result.domains):
            fractions[k] = 0.0 if top == 0 else abs(d.last_time) / top
    owner = _paint_domains(result, spec)
    percent = np.clip(fractions[owner], 0.0, 1.0) * 100.0
    img = np.rint(percent * (255.0 / 100.0))
    return RenderOutput(spec, _pgm(img, "last_step"),
                        _value_csv(cols, rows, percent, "percent"), "pgm")


def _classification(result: MappingResult, spec: RenderSpec,
                    simplified: bool) -> RenderOutput:
    space = result.space
    cols, rows, _, _ = _axes(space, spec)
    owner = _paint_domains(result, spec)
    palette = np.empty((len(result.domains), 3), dtype=np.int64)
    kind_names = []
    indices = np.empty(len(result.domains), dtype=np.int64)
    for k, d in enumerate(result.domains):
        palette[k] = label_color(d.label.kind.value, d.label.period_index,
                                 simplified)
        kind_names.append(d.label.kind.value)
        indices[k] = d.label.period_index
    rgb = palette[owner]
    kinds = np.array(kind_names, dtype=object)[owner]
    name = "simplified_classification" if simplified else "classification"
    return RenderOutput(spec, _ppm(rgb, name),
                        _label_csv(cols, rows, kinds, indices[owner]), "ppm")


def render(result: MappingResult, spec: RenderSpec) -> RenderOutput:
    """Rasterize a mapping result; see the module docstring for layout."""
    if not result.domains:
        raise ValueError("cannot render an empty mapping result")
    if spec.kind == "density":
        return _density(result, spec)
    if spec.kind == "last_step":
        return _last_step(result, spec)
    return _classification(result, spec,
                           spec.kind == "simplified_classification")


def render_oracle(points: Sequence[OraclePoint], space: SearchSpaceSpec,
                  spec: RenderSpec) -> RenderOutput:
    """Classification raster of point-wise labels, nearest point per pixel."""
    if spec.kind not in _CLASS_KINDS:
        raise ValueError("oracle renders support classification kinds only")
    if not points:
        raise ValueError("cannot render an empty oracle")
    cols, rows, _, _ = _axes(space, spec)
    rp = np.array([pt.ic[0] for pt in points])
    om = np.array([pt.ic[1] for pt in points])
    rp_n = (rp - space.rp_min_km) / (space.rp_max_km - space.rp_min_km)
    om_n = ((om - space.omega_min_rad)
            / (space.omega_max_rad - space.omega_min_rad))
    cols_n = ((cols - space.rp_min_km)
              / (space.rp_max_km - space.rp_min_km))
    rows_n = ((rows - space.omega_min_rad)
              / (space.omega_max_rad - space.omega_min_rad))
    simplified = spec.kind == "simplified_classification"
    palette = np.array([
        label_color(pt.label.kind.value, pt.label.period_index, simplified)
        for pt in points], dtype=np.int64)
    kind_names = np.array([pt.label.kind.value for pt in points],
                          dtype=object)
    indices = np.array([pt.label.period_index for pt in points],
                       dtype=np.int64)
    owner = np.empty((spec.ny, spec.nx), dtype=np.int64)
    for y in range(spec.ny):
        dist = (cols_n[:, None] - rp_n[None, :]) ** 2 \
            + (rows_n[y] - om_n[None, :]) ** 2
        owner[y] = np.argmin(dist, axis=1)
    rgb = palette[owner]
    return RenderOutput(spec, _ppm(rgb, spec.kind),
                        _label_csv(cols, rows, kind_names[owner],
                                   indices[owner]), "ppm")
