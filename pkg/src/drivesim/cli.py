"""Command line interface: serve, record, replay, label-export, validate.

Exit codes: 0 success, 1 validation/runtime error, 2 usage error, 3 replay
divergence. Structured JSON logs go to stderr; the run report goes to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path

from .bridge import DEFAULT_PORT, BridgeServer
from .dataset import load_manifest
from .engine import Engine, replay_dataset
from .scenario import ScenarioError, load_scenario, resolve_scenario_path

log = logging.getLogger("drivesim")

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class _JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "ts": round(time.time(), 3),
            "level": record.levelname.lower(),
            "name": record.name,
            "msg": record.getMessage(),
        }
        return json.dumps(entry, separators=(",", ":"))


def _setup_logging() -> None:
    level = _LEVELS.get(os.environ.get("DRIVESIM_LOG", "warn").lower(), logging.WARNING)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLogFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drivesim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the simulator with the bridge server")
    serve.add_argument("scenario")
    serve.add_argument("--port", type=int, default=None)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--mode", choices=("realtime", "fast"), default="realtime")
    serve.add_argument("--ticks", type=int, default=None, help="stop after N ticks (default: run until interrupted)")
    serve.add_argument("--dt", type=float, default=0.01)
    serve.add_argument("--record-dir", default=None, help="root for bridge-toggled recording sessions")

    record = sub.add_parser("record", help="serve with dataset recording enabled from tick 1")
    record.add_argument("scenario")
    record.add_argument("--out", required=True)
    record.add_argument("--ticks", type=int, default=None)
    record.add_argument("--port", type=int, default=None)
    record.add_argument("--host", default="127.0.0.1")
    record.add_argument("--mode", choices=("realtime", "fast"), default="realtime")
    record.add_argument("--dt", type=float, default=0.01)

    replay = sub.add_parser("replay", help="re-inject a recorded command log and verify observations")
    replay.add_argument("dataset")

    export = sub.add_parser("label-export", help="headless fast-mode ground-truth label generation")
    export.add_argument("scenario")
    export.add_argument("--out", required=True)
    export.add_argument("--ticks", type=int, required=True)
    export.add_argument("--classes", default="vehicle", help="comma-separated semantic classes")
    export.add_argument("--dt", type=float, default=0.01)

    validate = sub.add_parser("validate", help="load a scenario and check every invariant")
    validate.add_argument("scenario")
    return parser


def _resolve_port(arg_port: int | None) -> int:
    if arg_port is not None:
        return arg_port
    env = os.environ.get("DRIVESIM_PORT")
    return int(env) if env else DEFAULT_PORT


def _print_report(report) -> None:
    print(json.dumps(report.to_json_dict(), separators=(",", ":"), sort_keys=True))


def _run_serving(args, record_from_start: bool, out_dir: str | None) -> int:
    scenario = load_scenario(resolve_scenario_path(args.scenario))
    port = _resolve_port(args.port)
    bridge = BridgeServer(scenario, dt=args.dt, host=args.host, port=port)
    bridge.start()
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    engine = Engine(
        scenario,
        dt=args.dt,
        mode=args.mode,
        bridge=bridge,
        record_dir=out_dir if out_dir is not None else getattr(args, "record_dir", None),
        record_sessions=out_dir is None,
    )
    log.info("serving %s on %s:%s", args.scenario, args.host, bridge.bound_port)
    try:
        report = engine.run(max_ticks=args.ticks, stop=stop, record_from_start=record_from_start)
    finally:
        bridge.stop()
    _print_report(report)
    return 0


def main(argv=None) -> int:
    _setup_logging()
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "serve":
            return _run_serving(args, record_from_start=False, out_dir=None)

        if args.command == "record":
            return _run_serving(args, record_from_start=True, out_dir=args.out)

        if args.command == "replay":
            divergence, checked = replay_dataset(args.dataset)
            manifest = load_manifest(args.dataset)
            if divergence is not None:
                print(json.dumps({"divergent_tick": divergence, "samples_checked": checked}))
                return 3
            print(json.dumps({"divergent_tick": None, "samples_checked": checked,
                              "sample_count": manifest["sample_count"]}))
            return 0

        if args.command == "label-export":
            scenario = load_scenario(resolve_scenario_path(args.scenario))
            classes = frozenset(c.strip() for c in args.classes.split(",") if c.strip())
            cams = [s for s in scenario.sensors if s.kind == "camera_semantic"]
            if not cams:
                raise ScenarioError("label-export needs a camera_semantic sensor in the scenario")
            engine = Engine(
                scenario,
                dt=args.dt,
                mode="fast",
                label_export=(cams[0].id, classes, args.out),
            )
            report = engine.run(max_ticks=args.ticks)
            files = sorted((Path(args.out) / "labels").glob("*.json")) if (Path(args.out) / "labels").exists() else []
            print(json.dumps({"label_files": len(files), "ticks": report.ticks}))
            return 0

        if args.command == "validate":
            scenario = load_scenario(resolve_scenario_path(args.scenario))
            print(
                json.dumps(
                    {
                        "ok": True,
                        "waypoints": len(scenario.world.waypoints),
                        "obstacles": len(scenario.world.obstacles),
                        "lights": len(scenario.world.lights),
                        "vehicles": len(scenario.vehicles),
                        "sensors": len(scenario.sensors),
                        "hash": scenario.content_hash,
                    }
                )
            )
            return 0
    except ScenarioError as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 1
    except (OSError, RuntimeError, ValueError) as exc:
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
