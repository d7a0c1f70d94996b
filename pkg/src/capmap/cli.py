"""Command-line front end.

Subcommands cover the full pipeline (``map``) and its stages run alone
against an existing output directory: ``oracle``, ``fit-periods``,
``criteria``, ``render``, ``capture-set``. Exit codes: 0 success, 1
compute failure, 2 configuration error.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from .classification import BACKWARD, FORWARD, capture_ratio, capture_set
from .criteria import PeriodModel, build_period_model, fit_period_model
from .render import RenderSpec, render
from .runner import (
    ComputeError,
    ConfigError,
    PRESETS,
    RunConfig,
    criteria_dict,
    load_period_model,
    merge_config,
    oracle_csv_text,
    parse_oracle_csv,
    period_model_dict,
    results_from_artifacts,
    run_map,
    run_oracle,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capmap",
        description="Stable-set mapping of ballistic capture orbits",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "map": "run the full pipeline into the output directory",
        "oracle": "propagate only the point-wise oracle grid",
        "fit-periods": "fit the period model to an existing oracle.csv",
        "criteria": "recompute criteria.json from existing artifacts",
        "render": "re-render rasters from existing artifacts",
        "capture-set": "intersect forward/backward sets from artifacts",
    }
    for name, help_text in commands.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", metavar="FILE",
                         help="JSON run configuration")
        cmd.add_argument("--preset", choices=sorted(PRESETS),
                         help="named base configuration")
        cmd.add_argument("--seed", type=int, metavar="U64",
                         help="run seed echoed into the artifacts")
        cmd.add_argument("--out", metavar="DIR",
                         help="output directory")
        cmd.add_argument("--emit-maps", action="store_true",
                         help="include flow-map coefficients in domains.jsonl")
    return parser


def _config_from_args(args) -> RunConfig:
    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except OSError as err:
            raise ConfigError(f"config: cannot read {args.config}: {err}")
        except json.JSONDecodeError as err:
            raise ConfigError(f"config: {args.config} is not valid JSON: {err}")
        if not isinstance(raw, dict):
            raise ConfigError("config: expected a JSON object")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.emit_maps:
        overrides["emit_maps"] = True
    raw = merge_config(raw, overrides)
    return RunConfig.from_dict(raw, preset=args.preset)


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("out: --out DIR is required for this command")
    out = Path(args.out)
    if not out.is_dir():
        raise ConfigError(f"out: {out} is not a directory")
    return out


def _read(path: Path) -> str:
    try:
        return path.read_text()
    except OSError as err:
        raise ComputeError(f"missing artifact: {err}")


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _period_model_from_run(out: Path) -> PeriodModel:
    doc = json.loads(_read(out / "run.json"))
    pm = doc.get("period_model")
    if pm is None:
        raise ComputeError(f"{out}/run.json records no period model")
    return PeriodModel(pm["shape"],
                       {int(k): tuple(v) for k, v in pm["table"].items()},
                       time_unit_s=pm["time_unit_s"])


def cmd_map(args) -> int:
    cfg = _config_from_args(args)
    cfg.out_dir()  # fail fast before compute

    def progress(stage):
        print(f"[{time.strftime('%H:%M:%S')}] {stage}", file=sys.stderr)

    doc = run_map(cfg, progress=progress)
    crit = doc["criteria"]
    for direction, entry in sorted(crit["directions"].items()):
        cons = ", ".join(f"{k}: {v:.4f}"
                         for k, v in sorted(entry["consistency"].items()))
        print(f"{direction} consistency {{{cons}}}")
        omega = entry["quality"].get("omega")
        if omega:
            print(f"{direction} quality(omega) {omega['q']:.4f} "
                  f"[{omega['ci_low']:.4f}, {omega['ci_high']:.4f}]")
    if "capture" in crit:
        cap = crit["capture"]
        print(f"capture set: {cap['box_count']} boxes, "
              f"area {cap['area_km_rad']:.6g} km*rad")
    print(f"artifacts in {cfg.out_dir()}")
    return 0


def cmd_oracle(args) -> int:
    cfg = _config_from_args(args)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.model()
    periods = cfg.resolved["periods"]
    cap_model = (load_period_model(periods["file"])
                 if periods["source"] == "file" else None)
    points = run_oracle(cfg, model, cap_model=cap_model)
    _write(out / "oracle.csv", oracle_csv_text(points))
    counts = {}
    for pt in points:
        counts[str(pt.label)] = counts.get(str(pt.label), 0) + 1
    for label in sorted(counts):
        print(f"{label}: {counts[label]}")
    print(f"{len(points)} rows -> {out / 'oracle.csv'}")
    return 0


def cmd_fit_periods(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(args)
    points = parse_oracle_csv(_read(out / "oracle.csv"))
    shape = cfg.resolved["periods"]["shape"]
    model = build_period_model(points, shape, cfg.rev_counts(),
                               units=cfg.model().units)
    for count in cfg.rev_counts():
        a, b, rms = fit_period_model(points, shape, count)
        print(f"rev {count}: A={a!r} B={b!r} rms={rms:.3e}")
    _write(out / "periods.json",
           json.dumps(period_model_dict(model), sort_keys=True, indent=1)
           + "\n")
    print(f"model -> {out / 'periods.json'}")
    return 0


def cmd_criteria(args) -> int:
    out = _out_dir(args)
    results = results_from_artifacts(out)
    points = parse_oracle_csv(_read(out / "oracle.csv"))
    period_model = _period_model_from_run(out)
    run_doc = json.loads(_read(out / "run.json"))
    fit_rms = None
    if run_doc["resolved"]["periods"]["source"] == "refit":
        fit_rms = {count: fit_period_model(points, period_model.shape,
                                           count)[2]
                   for count in sorted(period_model.table)}
    crit = criteria_dict(results, points, period_model, fit_rms=fit_rms)
    _write(out / "criteria.json",
           json.dumps(crit, sort_keys=True, indent=1) + "\n")
    for direction, entry in sorted(crit["directions"].items()):
        for key, value in sorted(entry["consistency"].items()):
            print(f"{direction} consistency({key}) = {value:.6f}")
    print(f"criteria -> {out / 'criteria.json'}")
    return 0


def cmd_render(args) -> int:
    out = _out_dir(args)
    results = results_from_artifacts(out)
    run_doc = json.loads(_read(out / "run.json"))
    rend = run_doc["resolved"]["render"]
    renders_dir = out / "renders"
    renders_dir.mkdir(exist_ok=True)
    written = []
    for direction, result in sorted(results.items()):
        for kind in rend["kinds"]:
            piece = render(result, RenderSpec(kind=kind, nx=rend["nx"],
                                              ny=rend["ny"]))
            stem = f"{direction}_{kind}"
            _write(renders_dir / f"{stem}.{piece.extension}", piece.image)
            _write(renders_dir / f"{stem}.csv", piece.csv)
            written.append(stem)
    print(f"{len(written)} renders -> {renders_dir}")
    return 0


def cmd_capture_set(args) -> int:
    out = _out_dir(args)
    results = results_from_artifacts(out)
    if FORWARD not in results or BACKWARD not in results:
        raise ComputeError("capture-set needs forward and backward domains")
    boxes = capture_set(results[FORWARD], results[BACKWARD])
    doc = {
        "n": results[FORWARD].n_max,
        "box_count": len(boxes),
        "area_km_rad": sum(b.area for b in boxes),
        "boxes": [[b.rp_min_km, b.rp_max_km, b.omega_min_rad,
                   b.omega_max_rad] for b in boxes],
    }
    oracle_path = out / "oracle.csv"
    if oracle_path.exists():
        try:
            doc["pointwise_ratio"] = capture_ratio(
                parse_oracle_csv(oracle_path.read_text()),
                results[FORWARD].n_max)
        except ValueError:
            doc["pointwise_ratio"] = None
    _write(out / "capture.json",
           json.dumps(doc, sort_keys=True, indent=1) + "\n")
    print(f"{doc['box_count']} boxes, area {doc['area_km_rad']:.6g} km*rad "
          f"-> {out / 'capture.json'}")
    return 0


_COMMANDS = {
    "map": cmd_map,
    "oracle": cmd_oracle,
    "fit-periods": cmd_fit_periods,
    "criteria": cmd_criteria,
    "render": cmd_render,
    "capture-set": cmd_capture_set,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"configuration error:\n{err}", file=sys.stderr)
        return 2
    except ComputeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # any stage failure is a compute failure
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
