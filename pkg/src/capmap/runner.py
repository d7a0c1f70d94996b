"""Run orchestration: config ingestion, the mapping pipeline, artifacts.

A run is described by one JSON document (see DEFAULT_CONFIG for the full
key set). The pipeline classifies a point-wise oracle grid in both time
directions, refits the period model on it, runs the box classification
forward to n_max and backward to -1, intersects the two into capture
boxes, scores consistency/quality, and persists everything under the
output directory:

    oracle.csv      one row per propagated oracle point
    periods.json    the period model used for classification
    domains.jsonl   one JSON object per final sub-domain, both directions
    criteria.json   consistency, per-set quality, capture summary
    renders/        density/last-step/classification rasters + CSV grids
    run.json        config echo, resolved settings, timings, status

Everything except run.json is a pure function of the config, so reruns
are byte-identical; wall-clock timings only ever appear in run.json.
"""

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .classification import (
    BACKWARD,
    FORWARD,
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
)
from .criteria import (
    PeriodModel,
    build_period_model,
    consistency,
    fit_period_model,
    quality_by_set,
)
from .dynamics import DEFAULT_PERTURBERS, DynamicsModel, load_element_sets
from .integrator import IntegratorConfig, Scheme
from .mapping import AdsConfig, SearchSpaceSpec, SubDomain, build_initial_grid
from .render import RENDER_KINDS, RenderSpec, render


class ConfigError(ValueError):
    """Invalid run configuration; the message lists every diagnostic."""


class ComputeError(RuntimeError):
    """Pipeline failure after configuration was accepted."""


# every key a config may carry, with its default
DEFAULT_CONFIG = {
    "space": {
        "rp_min_km": 3496.0,
        "rp_max_km": 16980.0,
        "omega_min_rad": -math.pi,
        "omega_max_rad": math.pi,
        "e": 0.99,
        "i_rad": 0.6283,
        "raan_rad": 0.6283,
        "M_rad": 0.0,
    },
    "ads": {
        "tolerance": None,  # required
        "order": 20,
        "max_splits": 9,
        "grid": [32, 32],
    },
    "integrator": None,  # optional overrides for the flow-map integrator
    "model": {
        "target": "mars",
        "perturbers": list(DEFAULT_PERTURBERS),
        "srp": True,
        "elements_file": None,
    },
    "n_max": 2,
    "directions": ["forward", "backward"],
    "periods": {
        "source": "refit",  # refit | file
        "shape": "log",
        "file": None,
        "rev_counts": None,  # default 1..n_max
    },
    "oracle": {"grid": [50, 40]},
    "render": {"nx": 512, "ny": 512, "kinds": list(RENDER_KINDS)},
    "out": None,
    "seed": 0,
    "workers": 1,
    "emit_maps": False,
}

_INTEGRATOR_KEYS = ("initial_step", "min_step", "max_step",
                    "rel_tol", "abs_tol")

PRESETS = {
    # paper-scale grids; hours of compute, kept for completeness
    "low": {
        "ads": {"tolerance": 1e-5, "order": 20, "max_splits": 9,
                "grid": [32, 32]},
        "n_max": 6,
    },
    "high": {
        "ads": {"tolerance": 1e-5, "order": 20, "max_splits": 10,
                "grid": [128, 128]},
        "n_max": 6,
    },
    # minutes-scale configuration: Sun + SRP only, Keplerian ephemerides.
    # The window covers one apsidal quadrant above the close-periapsis chaos
    # band, where order-10 / 6-split certification stays sharp; the numbers
    # below are frozen together with the seed-0 oracle sample.
    "desk": {
        "space": {"rp_min_km": 7000.0, "rp_max_km": 16980.0,
                  "omega_min_rad": 0.2618, "omega_max_rad": 1.309},
        "ads": {"tolerance": 2e-2, "order": 10, "max_splits": 6,
                "grid": [16, 16]},
        "model": {"target": "mars", "perturbers": ["sun"], "srp": True,
                  "elements_file": None},
        "n_max": 2,
        "oracle": {"grid": [20, 100]},
        "render": {"nx": 128, "ny": 128, "kinds": list(RENDER_KINDS)},
    },
}


def merge_config(base: dict, override: dict) -> dict:
    """Key-wise deep merge; override wins, dicts recurse."""
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = value
    return out


def _check(diags, cond, path, msg):
    if not cond:
        diags.append(f"{path}: {msg}")


def _is_num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def validate_config(raw: dict) -> dict:
    """Fill defaults, reject unknown keys/wrong types, return the resolved
    document. Raises ConfigError listing every problem at once."""
    diags: List[str] = []
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    for key in raw:
        _check(diags, key in DEFAULT_CONFIG, key, "unknown key")
    resolved = merge_config(DEFAULT_CONFIG, raw)

    space = resolved["space"]
    if isinstance(space, dict):
        for key, value in space.items():
            _check(diags, key in DEFAULT_CONFIG["space"],
                   f"space.{key}", "unknown key")
            if key in DEFAULT_CONFIG["space"]:
                _check(diags, _is_num(value), f"space.{key}",
                       "expected a number")
    else:
        diags.append("space: expected an object")

    ads = resolved["ads"]
    if isinstance(ads, dict):
        for key in ads:
            _check(diags, key in DEFAULT_CONFIG["ads"],
                   f"ads.{key}", "unknown key")
        _check(diags, _is_num(ads.get("tolerance")), "ads.tolerance",
               "required number (ADS split tolerance)")
        for key in ("order", "max_splits"):
            _check(diags, isinstance(ads.get(key), int),
                   f"ads.{key}", "expected an integer")
        grid = ads.get("grid")
        _check(diags,
               isinstance(grid, (list, tuple)) and len(grid) == 2
               and all(isinstance(g, int) and g >= 1 for g in grid),
               "ads.grid", "expected [n_rp, n_omega] positive integers")
    else:
        diags.append("ads: expected an object")

    integ = resolved["integrator"]
    if integ is not None:
        if isinstance(integ, dict):
            for key, value in integ.items():
                _check(diags, key in _INTEGRATOR_KEYS,
                       f"integrator.{key}", "unknown key")
                _check(diags, _is_num(value), f"integrator.{key}",
                       "expected a number")
        else:
            diags.append("integrator: expected an object or null")

    model = resolved["model"]
    if isinstance(model, dict):
        for key in model:
            _check(diags, key in DEFAULT_CONFIG["model"],
                   f"model.{key}", "unknown key")
        _check(diags, isinstance(model.get("target"), str),
               "model.target", "expected a body name")
        perts = model.get("perturbers")
        _check(diags,
               isinstance(perts, (list, tuple))
               and all(isinstance(p, str) for p in perts),
               "model.perturbers", "expected a list of body names")
        _check(diags, isinstance(model.get("srp"), bool),
               "model.srp", "expected true/false")
        ef = model.get("elements_file")
        _check(diags, ef is None or isinstance(ef, str),
               "model.elements_file", "expected a path or null")
    else:
        diags.append("model: expected an object")

    _check(diags, isinstance(resolved["n_max"], int)
           and resolved["n_max"] >= 1, "n_max", "expected integer >= 1")

    dirs = resolved["directions"]
    _check(diags,
           isinstance(dirs, (list, tuple)) and dirs
           and all(d in (FORWARD, BACKWARD) for d in dirs)
           and len(set(dirs)) == len(dirs),
           "directions", "expected a non-empty subset of "
           "['forward', 'backward'] without repeats")

    periods = resolved["periods"]
    if isinstance(periods, dict):
        for key in periods:
            _check(diags, key in DEFAULT_CONFIG["periods"],
                   f"periods.{key}", "unknown key")
        _check(diags, periods.get("source") in ("refit", "file"),
               "periods.source", "expected 'refit' or 'file'")
        _check(diags, periods.get("shape") in ("log", "sqrt"),
               "periods.shape", "expected 'log' or 'sqrt'")
        if periods.get("source") == "file":
            _check(diags, isinstance(periods.get("file"), str),
                   "periods.file", "required when source is 'file'")
        rc = periods.get("rev_counts")
        _check(diags,
               rc is None or (isinstance(rc, (list, tuple)) and rc
                              and all(isinstance(c, int) and c >= 1
                                      for c in rc)),
               "periods.rev_counts", "expected a list of integers >= 1")
    else:
        diags.append("periods: expected an object")

    oracle = resolved["oracle"]
    if isinstance(oracle, dict):
        for key in oracle:
            _check(diags, key in DEFAULT_CONFIG["oracle"],
                   f"oracle.{key}", "unknown key")
        grid = oracle.get("grid")
        _check(diags,
               isinstance(grid, (list, tuple)) and len(grid) == 2
               and all(isinstance(g, int) and g >= 1 for g in grid),
               "oracle.grid", "expected [n_rp, n_omega] positive integers")
    else:
        diags.append("oracle: expected an object")

    rend = resolved["render"]
    if isinstance(rend, dict):
        for key in rend:
            _check(diags, key in DEFAULT_CONFIG["render"],
                   f"render.{key}", "unknown key")
        for key in ("nx", "ny"):
            _check(diags, isinstance(rend.get(key), int) and rend[key] >= 1,
                   f"render.{key}", "expected integer >= 1")
        kinds = rend.get("kinds")
        _check(diags,
               isinstance(kinds, (list, tuple))
               and all(k in RENDER_KINDS for k in kinds),
               "render.kinds", f"expected a subset of {list(RENDER_KINDS)}")
    else:
        diags.append("render: expected an object")

    _check(diags, resolved["out"] is None or isinstance(resolved["out"], str),
           "out", "expected a directory path or null")
    _check(diags, isinstance(resolved["seed"], int)
           and 0 <= resolved["seed"] < 2 ** 64,
           "seed", "expected an unsigned 64-bit integer")
    _check(diags, isinstance(resolved["workers"], int)
           and resolved["workers"] >= 1, "workers", "expected integer >= 1")
    _check(diags, isinstance(resolved["emit_maps"], bool),
           "emit_maps", "expected true/false")

    if diags:
        raise ConfigError("\n".join(diags))
    return resolved


@dataclass
class RunConfig:
    """Validated, resolved run settings plus the user's raw document."""

    resolved: dict
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict, preset: Optional[str] = None) -> "RunConfig":
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(
                    f"preset: unknown preset {preset!r}; "
                    f"choose from {sorted(PRESETS)}"
                )
            raw = merge_config(PRESETS[preset], raw)
        cfg = cls(resolved=validate_config(raw), raw=dict(raw))
        # semantic checks live in the component constructors
        try:
            cfg.space()
            cfg.ads()
            cfg.model()
        except ValueError as err:
            raise ConfigError(str(err))
        return cfg

    # -- builders for the component objects

    def space(self) -> SearchSpaceSpec:
        return SearchSpaceSpec(**self.resolved["space"])

    def ads(self) -> AdsConfig:
        a = self.resolved["ads"]
        integ = None
        if self.resolved["integrator"] is not None:
            base = AdsConfig(tolerance=1.0).integrator_config()
            fields = {k: getattr(base, k) for k in _INTEGRATOR_KEYS}
            fields.update(self.resolved["integrator"])
            integ = IntegratorConfig(scheme=Scheme.RK8_DA, **fields)
        return AdsConfig(tolerance=a["tolerance"], order=a["order"],
                         max_splits=a["max_splits"],
                         grid=tuple(a["grid"]), integrator=integ)

    def model(self) -> DynamicsModel:
        m = self.resolved["model"]
        try:
            bodies = None
            if m["elements_file"]:
                # replaces the built-in set: must cover target + perturbers
                bodies = load_element_sets(m["elements_file"])
            return DynamicsModel(target=m["target"],
                                 perturbers=tuple(m["perturbers"]),
                                 srp=m["srp"], bodies=bodies)
        except (OSError, KeyError, ValueError, json.JSONDecodeError) as err:
            raise ConfigError(f"model: {err}")

    def n_max(self) -> int:
        return self.resolved["n_max"]

    def directions(self) -> List[str]:
        return list(self.resolved["directions"])

    def rev_counts(self) -> List[int]:
        rc = self.resolved["periods"]["rev_counts"]
        return list(rc) if rc else list(range(1, self.n_max() + 1))

    def out_dir(self) -> Path:
        if not self.resolved["out"]:
            raise ConfigError("out: an output directory is required")
        return Path(self.resolved["out"])


def load_config_file(path, preset: Optional[str] = None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"config: cannot read {path}: {err}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config: {path} is not valid JSON: {err}")
    return RunConfig.from_dict(raw, preset=preset)


# ---------------------------------------------------------------------------
# period model persistence


def load_period_model(path) -> PeriodModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
        table = {int(k): tuple(v) for k, v in doc["table"].items()}
        return PeriodModel(doc["shape"], table,
                           time_unit_s=doc.get("time_unit_s", 86400.0))
    except (OSError, KeyError, TypeError, ValueError,
            json.JSONDecodeError) as err:
        raise ConfigError(f"periods.file: {path}: {err}")


def period_model_dict(model: PeriodModel) -> dict:
    return {
        "shape": model.shape,
        "table": {str(k): list(v) for k, v in model.table.items()},
        "time_unit_s": model.time_unit_s,
    }


# ---------------------------------------------------------------------------
# the point-wise oracle grid


def oracle_grid(space: SearchSpaceSpec, grid: Sequence[int], seed: int = 0
                ) -> List[Tuple[float, float]]:
    """Stratified sample of a regular n_rp x n_omega tiling, row-major.

    One uniformly jittered point per cell (cell centers would systematically
    under-sample split filigree thinner than the cell pitch). The jitter
    stream is consumed in cell order, so the sample is a pure function of
    (space, grid, seed).
    """
    n_rp, n_om = grid
    drp = (space.rp_max_km - space.rp_min_km) / n_rp
    dom = (space.omega_max_rad - space.omega_min_rad) / n_om
    rng = np.random.default_rng(seed)
    return [
        (space.rp_min_km + (i + rng.uniform()) * drp,
         space.omega_min_rad + (j + rng.uniform()) * dom)
        for i in range(n_rp) for j in range(n_om)
    ]


def _batched(items: Sequence, workers: int) -> List[Sequence]:
    if workers <= 1 or len(items) <= 1:
        return [items]
    size = math.ceil(len(items) / workers)
    return [items[k:k + size] for k in range(0, len(items), size)]


def run_oracle(cfg: RunConfig, model: DynamicsModel,
               cap_model: Optional[PeriodModel] = None) -> List[OraclePoint]:
    """Classify the oracle grid point-wise, both directions, in IC order.

    Work is dispatched in contiguous batches and merged in batch order,
    so the output is independent of the worker count. Without an explicit
    period model the stall cap falls back to the osculating period, which
    stays valid whatever the search space looks like.
    """
    space = cfg.space()
    ocfg = OracleConfig(space=space, period_model=cap_model)
    ics = oracle_grid(space, cfg.resolved["oracle"]["grid"],
                      cfg.resolved["seed"])
    n_max = cfg.n_max()
    directions = cfg.directions()
    jobs = [(ic, n_max if d == FORWARD else 1, d)
            for d in directions for ic in ics]

    def run_batch(batch):
        return [classify_pointwise(ic, n, d, model, ocfg)
                for ic, n, d in batch]

    batches = _batched(jobs, cfg.resolved["workers"])
    if len(batches) == 1:
        out = run_batch(batches[0])
    else:
        with ThreadPoolExecutor(max_workers=len(batches)) as pool:
            out = []
            for part in pool.map(run_batch, batches):
                out.extend(part)
    return out


# ---------------------------------------------------------------------------
# artifact writers/readers


def _fmt(x: float) -> str:
    return repr(float(x))


def oracle_csv_text(points: Sequence[OraclePoint]) -> str:
    lines = ["rp_km,omega_rad,label_kind,period_index,final_time_tu,"
             "rev_times_tu"]
    for pt in points:
        head = [
            _fmt(pt.ic[0]), _fmt(pt.ic[1]), pt.label.kind.value,
            str(pt.label.period_index), _fmt(pt.final_time_tu),
        ]
        lines.append(",".join(head + [_fmt(t) for t in pt.rev_times_tu]))
    return "\n".join(lines) + "\n"


def parse_oracle_csv(text: str) -> List[OraclePoint]:
    lines = text.strip().splitlines()
    out = []
    for line in lines[1:]:
        cells = line.split(",")
        out.append(OraclePoint(
            ic=(float(cells[0]), float(cells[1])),
            label=ClassLabel(ClassKind(cells[2]), int(cells[3])),
            rev_times_tu=tuple(float(c) for c in cells[5:]),
            final_time_tu=float(cells[4]),
        ))
    return out


def domain_row(d: SubDomain, emit_maps: bool = False) -> dict:
    row = {
        "id": d.id,
        "parent_id": d.parent_id,
        "depth": d.depth,
        "rp_center_km": d.rp_center_km,
        "rp_halfwidth_km": d.rp_halfwidth_km,
        "omega_center_rad": d.omega_center_rad,
        "omega_halfwidth_rad": d.omega_halfwidth_rad,
        "label_kind": d.label.kind.value,
        "period_index": d.label.period_index,
        "consistent": d.label.kind is not ClassKind.INCONSISTENT,
        "last_time_tu": d.last_time,
    }
    if emit_maps and d.flow_map is not None:
        row["coeffs"] = [float(c) for c in d.flow_map.matrix.ravel()]
    return row


def domains_jsonl_text(results: Dict[str, MappingResult],
                       emit_maps: bool = False) -> str:
    lines = []
    for direction in (FORWARD, BACKWARD):
        if direction in results:
            for d in results[direction].domains:
                lines.append(json.dumps(domain_row(d, emit_maps),
                                        sort_keys=True))
    return "\n".join(lines) + "\n"


def parse_domains_jsonl(text: str) -> Dict[str, List[SubDomain]]:
    """Leaves per direction (flow maps are not reconstructed)."""
    out: Dict[str, List[SubDomain]] = {}
    for line in text.strip().splitlines():
        row = json.loads(line)
        label = ClassLabel(ClassKind(row["label_kind"]), row["period_index"])
        direction = FORWARD if row["period_index"] > 0 else BACKWARD
        out.setdefault(direction, []).append(SubDomain(
            id=row["id"], parent_id=row["parent_id"],
            rp_center_km=row["rp_center_km"],
            rp_halfwidth_km=row["rp_halfwidth_km"],
            omega_center_rad=row["omega_center_rad"],
            omega_halfwidth_rad=row["omega_halfwidth_rad"],
            depth=row["depth"], flow_map=None,
            last_time=row["last_time_tu"], label=label,
        ))
    return out


def results_from_artifacts(out_dir: Path) -> Dict[str, MappingResult]:
    """Rebuild per-direction results from domains.jsonl + run.json."""
    run_doc = json.loads((out_dir / "run.json").read_text())
    resolved = run_doc["resolved"]
    space = SearchSpaceSpec(**resolved["space"])
    metadata = {
        "period_model": run_doc.get("period_model"),
        "time_scale_s": run_doc.get("time_scale_s"),
    }
    leaves = parse_domains_jsonl((out_dir / "domains.jsonl").read_text())
    results = {}
    for direction, domains in leaves.items():
        n = (resolved["n_max"] if direction == FORWARD else 1)
        results[direction] = MappingResult(direction, n, domains, space,
                                           dict(metadata))
    return results


# ---------------------------------------------------------------------------
# criteria assembly


def criteria_dict(results: Dict[str, MappingResult],
                  points: Sequence[OraclePoint],
                  period_model: PeriodModel,
                  fit_rms: Optional[Dict[int, float]] = None) -> dict:
    doc: dict = {"directions": {}, "period_model":
                 period_model_dict(period_model)}
    if fit_rms:
        doc["fit_rms"] = {str(k): v for k, v in sorted(fit_rms.items())}
    for direction, result in sorted(results.items()):
        sign = 1 if direction == FORWARD else -1
        dir_points = [pt for pt in points
                      if (pt.label.period_index > 0) == (sign > 0)]
        cons = {str(i): consistency(result, sign * i)
                for i in range(1, result.n_max + 1)}
        qual = {key: rep.as_dict() for key, rep in
                sorted(quality_by_set(dir_points, result).items())}
        doc["directions"][direction] = {
            "consistency": cons,
            "quality": qual,
        }
    if FORWARD in results and BACKWARD in results:
        n = results[FORWARD].n_max
        boxes = capture_set(results[FORWARD], results[BACKWARD])
        entry = {
            "n": n,
            "box_count": len(boxes),
            "area_km_rad": sum(b.area for b in boxes),
            "boxes": [[b.rp_min_km, b.rp_max_km,
                       b.omega_min_rad, b.omega_max_rad] for b in boxes],
        }
        try:
            entry["pointwise_ratio"] = capture_ratio(points, n)
        except ValueError:
            entry["pointwise_ratio"] = None  # oracle missing a direction
        doc["capture"] = entry
    return doc


# ---------------------------------------------------------------------------
# pipeline


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _json_text(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def run_map(cfg: RunConfig, progress=None) -> dict:
    """Execute the full pipeline; returns the run.json document.

    Partial artifacts are flagged in run.json if a stage fails; compute
    failures re-raise as ComputeError, configuration problems found
    late (bad period file, bad elements file) stay ConfigError.
    """
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    renders_dir = out / "renders"
    renders_dir.mkdir(exist_ok=True)
    walls: Dict[str, float] = {}
    artifacts: List[str] = []
    doc = {
        "config": cfg.raw,
        "resolved": cfg.resolved,
        "status": "running",
        "artifacts": artifacts,
        "wall_s": walls,
    }

    def note(stage):
        if progress is not None:
            progress(stage)

    try:
        model = cfg.model()
        space = cfg.space()
        periods = cfg.resolved["periods"]

        # 1. point-wise oracle (time cap from file model when given)
        note("oracle")
        started = time.perf_counter()
        cap_model = (load_period_model(periods["file"])
                     if periods["source"] == "file" else None)
        points = run_oracle(cfg, model, cap_model=cap_model)
        _write(out / "oracle.csv", oracle_csv_text(points))
        artifacts.append("oracle.csv")
        walls["oracle"] = time.perf_counter() - started

        # 2. period model
        note("periods")
        started = time.perf_counter()
        fit_rms: Dict[int, float] = {}
        if periods["source"] == "file":
            period_model = cap_model
        else:
            shape = periods["shape"]
            for count in cfg.rev_counts():
                _, _, rms = fit_period_model(points, shape, count)
                fit_rms[count] = rms
            period_model = build_period_model(points, shape,
                                              cfg.rev_counts(),
                                              units=model.units)
        period_model.validate(space.rp_min_km, space.rp_max_km)
        _write(out / "periods.json", _json_text(period_model_dict(period_model)))
        artifacts.append("periods.json")
        walls["periods"] = time.perf_counter() - started
        doc["period_model"] = period_model_dict(period_model)
        doc["time_scale_s"] = model.units.time_scale_s

        # 3. box classification per direction
        ads = cfg.ads()
        results: Dict[str, MappingResult] = {}
        for direction in cfg.directions():
            note(f"classify_{direction}")
            started = time.perf_counter()
            n = cfg.n_max() if direction == FORWARD else 1
            grid = build_initial_grid(space, ads, model)
            results[direction] = classify_da(grid, n, direction,
                                             period_model, model, ads,
                                             space=space)
            walls[f"classify_{direction}"] = time.perf_counter() - started
        _write(out / "domains.jsonl",
               domains_jsonl_text(results, cfg.resolved["emit_maps"]))
        artifacts.append("domains.jsonl")

        # 4. criteria + capture
        note("criteria")
        started = time.perf_counter()
        crit = criteria_dict(results, points, period_model,
                             fit_rms=fit_rms or None)
        _write(out / "criteria.json", _json_text(crit))
        artifacts.append("criteria.json")
        walls["criteria"] = time.perf_counter() - started

        # 5. renders
        note("render")
        started = time.perf_counter()
        rend = cfg.resolved["render"]
        for direction, result in sorted(results.items()):
            for kind in rend["kinds"]:
                spec = RenderSpec(kind=kind, nx=rend["nx"], ny=rend["ny"])
                piece = render(result, spec)
                stem = f"{direction}_{kind}"
                _write(renders_dir / f"{stem}.{piece.extension}", piece.image)
                _write(renders_dir / f"{stem}.csv", piece.csv)
                artifacts.append(f"renders/{stem}.{piece.extension}")
                artifacts.append(f"renders/{stem}.csv")
        walls["render"] = time.perf_counter() - started

        doc["status"] = "ok"
        doc["criteria"] = crit
        return doc
    except ConfigError as err:
        doc["status"] = "failed"
        doc["error"] = f"{type(err).__name__}: {err}"
        raise
    except Exception as err:
        doc["status"] = "failed"
        doc["error"] = f"{type(err).__name__}: {err}"
        raise ComputeError(doc["error"]) from err
    finally:
        _write(out / "run.json", _json_text(
            {k: v for k, v in doc.items() if k != "criteria"}))
