"""``semloc`` command line.

Every subcommand exits 0 on success.  Failures print one JSON object
``{"error": <type>, "message": <text>, "command": <subcommand>}`` to stderr
and exit with status 1 (2 for bad arguments).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

log = logging.getLogger("semloc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _on_off(value: str) -> bool:
    v = value.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


def _write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is None or str(path) == "-":
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _load_meta(path):
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _sun_provider(args, graph, meta):
    from .evaluation import SunProvider

    start = args.start_utc or meta.get("start_utc")
    if start is None:
        return None
    origin = meta.get("origin") or graph.frame_origin
    return SunProvider(start, *origin)


def _noise(path):
    from .observation import NoiseModel

    return NoiseModel.load(path) if path else NoiseModel()


# -- subcommands ---------------------------------------------------------------------


def cmd_ingest_map(args):
    from .osm_ingest import IngestConfig, ingest_file, load_speed_table

    cfg = IngestConfig(partition=not args.no_partition)
    if args.defaults:
        cfg.speeds.update(load_speed_table(args.defaults))
    g = ingest_file(args.osm, cfg)
    g.save(args.out)
    return {"segments": len(g), "total_length_m": round(g.total_length, 3), "out": str(args.out)}


def _auto_route(g, kind, duration, seed):
    from .sim import loop_route, random_route

    if kind == "symmetric_loop":
        loop = ["Am", "A4", "A3", "A2", "A1", "Am"]
        lap = sum(g[u].length for u in loop_route(g, loop, laps=1))
        speed = min(s.speed_limit for s in g) / 3.6
        return loop_route(g, loop, laps=max(1, math.ceil(duration * speed / lap) + 1))
    vmax = max(s.speed_limit for s in g) / 3.6
    return random_route(g, duration * vmax + 100.0, seed=seed)


def _read_route(path):
    text = Path(path).read_text().strip()
    if text.startswith("["):
        return [int(x) for x in json.loads(text)]
    return [int(x) for x in text.replace(",", " ").split()]


def cmd_simulate(args):
    from .observation import write_observations
    from .road_map import RoadGraph
    from .sim import SimConfig, emit_observations, make_synthetic_map, simulate_drive, write_ground_truth

    sim = SimConfig.from_toml(args.config) if args.config else SimConfig()
    if args.seed is not None:
        sim.seed = args.seed
    params = json.loads(args.map_params) if args.map_params else {}
    if args.map:
        g = RoadGraph.load(args.map)
    else:
        if args.kind == "grid":
            params.setdefault("seed", sim.seed)
        g = make_synthetic_map(args.kind, origin=sim.origin, **params)
    route = _auto_route(g, args.kind, args.duration, sim.seed) if args.route == "auto" else _read_route(args.route)
    gt = simulate_drive(g, route, sim, duration=args.duration)
    obs = emit_observations(gt, g, sim)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g.save(out / "map.json")
    write_observations(out / "obs.csv", obs)
    write_ground_truth(out / "gt.csv", gt)
    meta = {"start_utc": sim.start_utc, "origin": list(sim.origin), "seed": sim.seed, "kind": args.kind,
            "map_params": params, "route": route, "duration": args.duration}
    _write_json(out / "meta.json", meta)
    return {"frames": len(obs), "segments": len(g), "out_dir": str(out)}


def cmd_localize(args):
    from .evaluation import PosteriorDump, make_report, run_filter
    from .observation import read_observations
    from .road_map import RoadGraph
    from .sim import read_ground_truth

    g = RoadGraph.load(args.map)
    frames = read_observations(args.obs)
    meta = _load_meta(args.meta)
    sun_at = _sun_provider(args, g, meta)
    if "S" in args.cues.upper() and sun_at is None:
        log.warning("no start time given (--start-utc or --meta); sun cues are ignored")
    if args.dump:
        with PosteriorDump(args.dump) as dump:
            hist = run_filter(g, frames, _noise(args.noise), cues=args.cues, sun_at=sun_at, dump=dump)
    else:
        hist = run_filter(g, frames, _noise(args.noise), cues=args.cues, sun_at=sun_at)
    gt = read_ground_truth(args.gt) if args.gt else None
    report = make_report(hist, gt, args.strict_correctness).to_dict()
    _write_json(args.report, report)
    return None if args.report in (None, "-") else report


def cmd_learn_params(args):
    from .observation import NoiseModel, fit_noise_csv

    base = NoiseModel.load(args.base) if args.base else None
    nm = fit_noise_csv(args.residuals, base=base)
    nm.save(args.out)
    return nm.to_dict()


def cmd_evaluate(args):
    from .evaluation import history_from_dump, make_report, read_dump
    from .road_map import RoadGraph
    from .sim import read_ground_truth

    g = RoadGraph.load(args.map)
    hist = history_from_dump(read_dump(args.dump), g, cues=args.cues or "")
    gt = read_ground_truth(args.gt)
    report = make_report(hist, gt, args.strict_correctness).to_dict()
    _write_json(args.report, report)
    return None if args.report in (None, "-") else report


def cmd_ablate(args):
    from .evaluation import DEFAULT_SUBSETS, run_ablation, write_table
    from .observation import read_observations
    from .road_map import RoadGraph
    from .sim import read_ground_truth

    scen = Path(args.scenario)
    g = RoadGraph.load(args.map or scen / "map.json")
    frames = read_observations(scen / "obs.csv")
    gt_path = scen / "gt.csv"
    gt = read_ground_truth(gt_path) if gt_path.exists() else None
    meta = _load_meta(scen / "meta.json") if (scen / "meta.json").exists() else {}
    subsets = args.subsets.split(",") if args.subsets else DEFAULT_SUBSETS
    reports = run_ablation(g, frames, gt, subsets, _noise(args.noise), sun_at=_sun_provider(args, g, meta),
                           n_jobs=args.jobs, dump_dir=args.dump_dir, strict=args.strict_correctness)
    write_table(args.out, reports)
    return {"runs": len(reports), "failed": sum(r.error is not None for r in reports), "out": str(args.out)}


def cmd_sun(args):
    from .solar import sun_position

    p = sun_position(args.utc, args.lat, args.lon)
    return {"azimuth_deg": math.degrees(p.azimuth), "elevation_deg": math.degrees(p.elevation), "daytime": p.is_daytime}


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semloc", description="Map-based vehicle localization from semantic cues.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest-map", help="convert an OpenStreetMap XML extract to a map JSON")
    s.add_argument("--osm", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--defaults", help="TOML table of default speed limits per highway class (km/h)")
    s.add_argument("--no-partition", action="store_true", help="skip splitting segments at intersection look-ahead bands")
    s.set_defaults(func=cmd_ingest_map)

    s = sub.add_parser("simulate", help="simulate a drive and its noisy observations")
    s.add_argument("--map", help="existing map JSON; otherwise one is generated from --kind")
    s.add_argument("--kind", choices=("grid", "symmetric_loop", "radial"), default="grid")
    s.add_argument("--map-params", help="JSON object of generator parameters, e.g. '{\"nx\": 5, \"block\": 150}'")
    s.add_argument("--route", default="auto", help="'auto' or a file of segment ids")
    s.add_argument("--config", help="simulation TOML")
    s.add_argument("--seed", type=int)
    s.add_argument("--duration", type=float, default=180.0, help="seconds of driving")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("localize", help="run the filter over an observation file")
    s.add_argument("--map", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--noise", help="noise model JSON (defaults otherwise)")
    s.add_argument("--cues", default="OSIRV")
    s.add_argument("--dump", help="posterior dump CSV")
    s.add_argument("--report", default="-")
    s.add_argument("--gt", help="ground truth CSV for errors and strict success")
    s.add_argument("--meta", help="scenario meta.json providing start time and origin")
    s.add_argument("--start-utc")
    s.add_argument("--strict-correctness", type=_on_off, default=True, metavar="on|off")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("learn-params", help="fit a noise model from residuals")
    s.add_argument("--residuals", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--base", help="noise model JSON supplying values the residuals do not cover")
    s.set_defaults(func=cmd_learn_params)

    s = sub.add_parser("evaluate", help="metrics from a posterior dump")
    s.add_argument("--dump", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--map", required=True, help="map the dump refers to")
    s.add_argument("--report", default="-")
    s.add_argument("--cues", help="label stored in the report")
    s.add_argument("--strict-correctness", type=_on_off, default=True, metavar="on|off")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="run every cue subset on one scenario")
    s.add_argument("--scenario", required=True, help="directory written by 'semloc simulate'")
    s.add_argument("--map", help="defaults to <scenario>/map.json")
    s.add_argument("--out", required=True)
    s.add_argument("--subsets", help="comma separated, e.g. O,OS,OSIRV")
    s.add_argument("--noise")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--dump-dir")
    s.add_argument("--start-utc")
    s.add_argument("--strict-correctness", type=_on_off, default=True, metavar="on|off")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sun", help="sun azimuth and elevation in degrees")
    s.add_argument("--utc", required=True)
    s.add_argument("--lat", type=float, required=True)
    s.add_argument("--lon", type=float, required=True)
    s.set_defaults(func=cmd_sun)
    return p


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        result = args.func(args)
        if result is not None:
            print(json.dumps(result, indent=2, sort_keys=True))
        return 0
    except UsageError as exc:
        print(json.dumps({"error": "UsageError", "message": str(exc), "command": command}), file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": command}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
