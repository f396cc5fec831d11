"""Command-line entry points: experiment runner, expectation tables, log analysis."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ARMS,
    DEMANDS,
    SERVICES,
    ExperimentResult,
    ExperimentSpec,
    check_directions,
    compare_arms,
    load_expectations,
    run_experiment,
    write_report,
)
from .network import PRESET_NAMES
from .pilotlog import PeriodWindow, generate_corpus, load_period_fixture, summarize_periods


def _build_simulate_parser(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corridor", choices=PRESET_NAMES, default="attica")
    p.add_argument("--service", choices=[s.replace("_", "-") for s in SERVICES], default="hln-or")
    p.add_argument("--demand", choices=DEMANDS, default="baseline")
    p.add_argument("--arm", choices=[*ARMS, "both"], default="both")
    p.add_argument("--seeds", type=int, default=10, help="number of replications")
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("--strict", action="store_true", help="nonzero exit on any directional fail")
    p.add_argument("--trajectory-log", action="store_true")
    p.add_argument("--channel", choices=["itsg5", "cellular"], default="cellular")
    p.add_argument("--spec", type=Path, help="experiment document (JSON) overriding the flags")
    p.add_argument("--workers", type=int, default=None)


def _spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    if args.spec:
        from .control import spec_from_json

        doc = json.loads(args.spec.read_text())
        spec, _arm, _seed, _rt = spec_from_json(doc if "spec" in doc else {"v": 1, "spec": doc})
        return spec
    return ExperimentSpec(
        corridor=args.corridor,
        service=args.service.replace("-", "_"),
        demand=args.demand,
        channel=args.channel,
        seeds=tuple(range(args.seeds)),
    )


def cmd_simulate(args: argparse.Namespace) -> int:
    spec = _spec_from_args(args)
    if args.arm != "both":
        from .harness import build_world

        reports = []
        for seed in spec.seeds:
            world = build_world(spec, args.arm, seed, collect_trajectories=args.trajectory_log)
            world.run()
            reports.append(world.kpis.to_report())
            if args.trajectory_log:
                args.out.mkdir(parents=True, exist_ok=True)
                path = args.out / f"trajectories-{args.arm}-{seed}.jsonl"
                with open(path, "w") as f:
                    for t, vid, speed, accel in world.trajectory:
                        f.write(json.dumps({"t": t, "id": vid, "speed": speed, "accel": accel}) + "\n")
        args.out.mkdir(parents=True, exist_ok=True)
        out = args.out / f"kpis-{args.arm}.json"
        out.write_text(json.dumps([r.to_json() for r in reports], indent=1))
        print(f"wrote {out}")
        return 0
    manual, cits = run_experiment(spec, workers=args.workers)
    comparison = compare_arms(manual, cits)
    verdicts = check_directions(comparison, load_expectations(), spec.corridor, spec.service, spec.demand)
    result = ExperimentResult(spec, manual, cits, comparison, verdicts)
    code = write_report([result], args.out, strict=args.strict)
    print((args.out / "summary.txt").read_text())
    return code


def cmd_expectations(args: argparse.Namespace) -> int:
    rows = load_expectations()
    if args.action == "show":
        header = f"{'corridor':<9}{'service':<9}{'demand':<10}{'kpi':<13}{'manual':>10}{'cits':>10}  sign"
        print(header)
        print("-" * len(header))
        for e in rows:
            print(
                f"{e.corridor:<9}{e.service:<9}{e.demand:<10}{e.kpi:<13}"
                f"{e.manual:>10.2f}{e.cits:>10.2f}  {e.expected_sign():^4}"
            )
    return 0


def cmd_loganalyze(args: argparse.Namespace) -> int:
    if args.make_fixture:
        n = generate_corpus(args.make_fixture)
        print(f"wrote {n} synthetic log files under {args.make_fixture}")
        return 0
    if args.windows:
        windows = [PeriodWindow.from_json(w) for w in json.loads(Path(args.windows).read_text())["windows"]]
    else:
        windows = load_period_fixture()["periods"]
    files = sorted(Path(args.in_dir).rglob("*.log"))
    summaries = summarize_periods(files, windows)
    doc = {"v": 1, "summaries": [s.to_json() for s in summaries]}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=1))
        print(f"wrote {args.out}")
    else:
        print(json.dumps(doc, indent=1))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from .control import serve

    serve(host=args.host, port=args.port)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="citsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a manual-vs-C-ITS experiment")
    _build_simulate_parser(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_exp = sub.add_parser("expectations", help="show the published KPI expectation table")
    p_exp.add_argument("action", choices=["show"])
    p_exp.set_defaults(func=cmd_expectations)

    p_log = sub.add_parser("loganalyze", help="summarize pilot-style log files by period")
    p_log.add_argument("--in", dest="in_dir", type=Path, default=Path("."))
    p_log.add_argument("--windows", type=Path, help="JSON file with {'windows': [...]} rows")
    p_log.add_argument("--out", type=Path)
    p_log.add_argument("--make-fixture", type=Path, help="write the synthetic corpus here and exit")
    p_log.set_defaults(func=cmd_loganalyze)

    p_srv = sub.add_parser("serve", help="start the live-run control API")
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=8211)
    p_srv.set_defaults(func=cmd_serve)

    args = parser.parse_args(argv)
    return args.func(args)


def simulate_main() -> int:
    return main(["simulate", *sys.argv[1:]])


def expectations_main() -> int:
    argv = sys.argv[1:] if sys.argv[1:] else ["show"]
    return main(["expectations", *argv])


def loganalyze_main() -> int:
    return main(["loganalyze", *sys.argv[1:]])


if __name__ == "__main__":
    raise SystemExit(main())
