"""Command line entry point: ``spmap <command> [options]``."""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import config_hash, load_config
from .errors import ConfigError, SpmError
from .eval import (
    ExperimentSetup,
    apply_stream,
    build_spline,
    run_convergence_experiment,
    run_horizon_experiment,
    write_horizon_outputs,
    write_kl_outputs,
)
from .geometry import save_spline
from .simulator import (
    MeasurementStream,
    TrueMap,
    generate_trajectory,
    generate_true_map,
    perturb_prior,
    synthesize_measurements,
)
from .spm import SemanticPropertyMap


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(out: Path, cfg: dict, seeds, command: str, outputs) -> None:
    _write_json(out / "manifest.json", {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "seeds": list(seeds),
        "outputs": sorted(Path(p).name for p in outputs),
        "versions": {
            "spmap": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    })


def _seeds(args, cfg) -> list[int]:
    return [args.seed] if args.seed is not None else [int(s) for s in cfg["simulator"]["seeds"]]


def cmd_fit_path(args, cfg, out: Path) -> list[Path]:
    spline = build_spline(cfg["road"])
    path = out / "spline.json"
    save_spline(spline, path)
    rep = spline.fit_report
    print(f"fit {spline.n_segments} segments of degree {spline.degree}: length {spline.length:.3f} m, "
          f"rms {rep.rms:.3e} m, max {rep.max_error:.3e} m, knot residual {rep.knot_residual:.1e}")
    return [path]


def cmd_simulate(args, cfg, out: Path) -> list[Path]:
    setup = ExperimentSetup.from_config(cfg)
    written = []
    for seed in _seeds(args, cfg):
        tm = generate_true_map(seed, setup.grid, setup.kernel, setup.layout, setup.props)
        traj = generate_trajectory(setup.spline, setup.speed, setup.profile, setup.sensors.property_rate,
                                   setup.distance / setup.speed, e_max=setup.sensors.e_max)
        stream = synthesize_measurements(tm, traj, setup.rig, setup.sensors, seed)
        _write_json(out / f"true_map_seed{seed}.json", tm.to_dict())
        stream.to_jsonl(out / f"stream_seed{seed}.jsonl")
        written += [out / f"true_map_seed{seed}.json", out / f"stream_seed{seed}.jsonl"]
        print(f"seed {seed}: {len(stream)} records, {stream.dropped} dropped")
    return written


def cmd_run(args, cfg, out: Path) -> list[Path]:
    setup = ExperimentSetup.from_config(cfg)
    if args.seed is not None:
        setup.seeds = (args.seed,)
    t0 = time.perf_counter()
    if args.experiment == "convergence":
        summary = run_convergence_experiment(setup, jobs=args.jobs)
        written = write_kl_outputs(summary, out)
        print(f"mean KL {summary.mean[0]:.4f} at 0 m -> {summary.mean[-1]:.4f} at {summary.s[-1]:.0f} m "
              f"(ratio {summary.mean[-1] / summary.mean[0]:.3f})")
    else:
        results = run_horizon_experiment(setup, jobs=args.jobs)
        written = write_horizon_outputs(results, out)
        for r in results:
            rm = r.rmse()
            print(f"seed {r.seed}: rmse spm {rm['spm']:.4f} kf {rm['kf']:.4f} gp {rm['gp']:.4f}")
    print(f"{args.experiment} finished in {time.perf_counter() - t0:.1f} s")
    return written


def cmd_export(args, cfg, out: Path) -> list[Path]:
    smap = SemanticPropertyMap.load(args.map)
    s0, s1, e0, e1 = args.region
    data = smap.export((s0, s1), (e0, e1), args.resolution)
    path = out / args.output
    K = data["p"].shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["s", "e", "m_y", "V_y", *(f"p_class_{i + 1}" for i in range(K))]) + "\n")
        for i in range(len(data["s"])):
            row = [data["s"][i], data["e"][i], data["m_y"][i], data["V_y"][i], *data["p"][i]]
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    print(f"wrote {len(data['s'])} rows to {path}")
    return [path]


def cmd_replay(args, cfg, out: Path) -> list[Path]:
    stream = MeasurementStream.from_jsonl(args.stream)
    seed = int(stream.meta.get("seed", args.seed or 0))
    tm = TrueMap.from_dict(json.loads(Path(args.true_map).read_text(encoding="utf-8")))
    prior = perturb_prior(tm, seed, cfg["prior"]["magnitude"], tuple(cfg["prior"]["a"]))
    smap = SemanticPropertyMap(prior, tm.grid, tm.kernel, var_cap=cfg["prior"]["var_cap"])
    apply_stream(smap, stream)
    path = out / f"map_seed{seed}.json"
    smap.save(path)
    st = smap.stats
    print(f"replayed {st.semantic} semantic and {st.property} property records ({st.dropped} dropped) -> {path}")
    return [path]


COMMANDS = {
    "fit-path": cmd_fit_path,
    "simulate": cmd_simulate,
    "run": cmd_run,
    "export": cmd_export,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted path, JSON value)")
    common.add_argument("--seed", type=int, help="run a single seed instead of simulator.seeds")
    common.add_argument("--jobs", type=int, default=1, help="parallel seed jobs")
    common.add_argument("--out", type=Path, help="output directory (default: output.dir)")

    p = argparse.ArgumentParser(prog="spmap", description="Semantic property maps in path coordinates.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("fit-path", parents=[common], help="fit the road centerline spline")
    sub.add_parser("simulate", parents=[common], help="write true maps and measurement streams")
    run = sub.add_parser("run", parents=[common], help="run an experiment and write its CSVs")
    run.add_argument("--experiment", choices=("convergence", "horizon"), default="convergence")
    exp = sub.add_parser("export", parents=[common], help="sample a saved map on a dense (s, e) grid")
    exp.add_argument("--map", type=Path, required=True)
    exp.add_argument("--region", type=float, nargs=4, required=True, metavar=("S0", "S1", "E0", "E1"))
    exp.add_argument("--resolution", type=float, default=1.0, help="samples per meter")
    exp.add_argument("--output", default="export.csv")
    rep = sub.add_parser("replay", parents=[common], help="rebuild a map from a stream dump")
    rep.add_argument("--stream", type=Path, required=True)
    rep.add_argument("--true-map", type=Path, required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        if args.command == "export" and args.resolution <= 0:
            raise ConfigError("--resolution must be positive")
        out = Path(args.out or cfg["output"]["dir"])
        out.mkdir(parents=True, exist_ok=True)
        written = COMMANDS[args.command](args, cfg, out)
        for path in written:
            if not Path(path).is_file():
                raise SpmError(f"expected output {path} was not written")
        _manifest(out, cfg, _seeds(args, cfg), args.command, written)
    except (ConfigError, ValueError) as exc:
        print(f"spmap: error: {exc}", file=sys.stderr)
        return 2
    except (SpmError, OSError) as exc:
        print(f"spmap: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
