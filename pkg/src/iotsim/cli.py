"""Command-line front end: simulate, sweep, l1-server."""

from __future__ import annotations

import argparse
import csv
import json
import socket
import sys
from pathlib import Path
from typing import Optional

from .bench import (
    AXES,
    ExperimentPlan,
    collect_metrics,
    measure_peak_memory,
    run_experiment,
)
from .config import OPTIONS, ConfigError, SimConfig, read_config_file
from .level0 import SimulationError, run_simulation
from .level1 import make_handlers
from .protocol import Init, InstanceHandlers, ProtocolError, TcpTransport, serve_session

_AXIS_ALIASES = {
    "ses": "num_ses",
    "num_ses": "num_ses",
    "l1-activations": "num_l1_activations",
    "num_l1_activations": "num_l1_activations",
    "lps": "num_lps",
    "num_lps": "num_lps",
}
# Sweeps default to desk scale; single runs keep the reference workload.
SWEEP_DEFAULT_TIMESTEPS = 100


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="key=value file mirroring these flags")
    for name in OPTIONS:
        if name == "l1-schedule":
            parser.add_argument(
                "--l1-schedule",
                action="append",
                metavar="T:LP:COUNT",
                dest="flag_l1_schedule",
                help="spawn trigger; repeatable",
            )
        else:
            parser.add_argument(f"--{name}", metavar="V", dest=f"flag_{name.replace('-', '_')}")


def _config_from_args(args: argparse.Namespace) -> SimConfig:
    updates: dict[str, object] = {}
    if args.config:
        updates.update(read_config_file(args.config))
    for name, (field_name, parser_fn) in OPTIONS.items():
        if name == "l1-schedule":
            raw_list = getattr(args, "flag_l1_schedule", None)
            if raw_list:
                updates[field_name] = parser_fn(",".join(raw_list))
            continue
        raw = getattr(args, f"flag_{name.replace('-', '_')}", None)
        if raw is not None:
            try:
                updates[field_name] = parser_fn(raw)
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"--{name}: {exc}") from None
    return SimConfig(**updates)


# -- simulate -----------------------------------------------------------------


def _write_report_csv(result, out_path: str) -> None:
    columns = [
        "timestep",
        "generated",
        "forwarded",
        "delivered",
        "duplicates",
        "dropped_delegated",
        "active",
        "delegated",
        "step_wct",
    ]
    target = sys.stdout if out_path == "-" else open(out_path, "w", newline="")
    try:
        writer = csv.writer(target)
        writer.writerow(columns)
        for r in result.reports:
            writer.writerow(
                [
                    r.timestep,
                    r.generated,
                    r.forwarded,
                    r.delivered,
                    r.duplicates,
                    r.dropped_delegated,
                    r.active,
                    r.delegated,
                    f"{max(r.lp_wct):.6f}",
                ]
            )
    finally:
        if target is not sys.stdout:
            target.close()


def _cmd_simulate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    result = run_simulation(config)
    metrics = collect_metrics(result, measure_peak_memory())
    if args.out:
        _write_report_csv(result, args.out)
    if args.json_metrics:
        payload = json.dumps(metrics.to_json_obj(), indent=None)
        if args.json_metrics == "-":
            print(payload)
        else:
            Path(args.json_metrics).write_text(payload + "\n")
    if args.json_metrics != "-":
        totals = result.totals()
        print(
            f"ok ses={config.num_ses} lps={config.num_lps} steps={config.total_timesteps} "
            f"seed={config.seed} wct={metrics.total_wct:.3f}s "
            f"generated={totals['generated']} delivered={totals['delivered']} "
            f"l1_sessions={len(result.session_logs)}"
        )
    return 0


# -- sweep ---------------------------------------------------------------------

_PLAN_KEYS = ("axis", "values", "reps", "mode")


def read_plan_file(path: str) -> tuple[ExperimentPlan, bool]:
    """Parse an experiment plan: plan keys plus base-config overrides."""
    plan_raw: dict[str, str] = {}
    config_updates: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in _PLAN_KEYS:
            plan_raw[key] = value
        elif key in OPTIONS:
            field_name, parser_fn = OPTIONS[key]
            config_updates[field_name] = parser_fn(value)
        else:
            raise ConfigError(f"{path}:{lineno}: unknown option {key!r}")
    if "axis" not in plan_raw or "values" not in plan_raw:
        raise ConfigError(f"{path}: plan needs at least axis= and values=")
    axis = _AXIS_ALIASES.get(plan_raw["axis"])
    if axis is None:
        raise ConfigError(f"{path}: unknown axis {plan_raw['axis']!r}")
    try:
        values = tuple(int(v) for v in plan_raw["values"].split(",") if v.strip())
        reps = int(plan_raw.get("reps", "3"))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    mode = plan_raw.get("mode", "subprocess")
    if mode not in ("subprocess", "in-process"):
        raise ConfigError(f"{path}: mode must be subprocess or in-process")
    config_updates.setdefault("total_timesteps", SWEEP_DEFAULT_TIMESTEPS)
    base = SimConfig(**config_updates)
    return ExperimentPlan(axis=axis, values=values, repetitions=reps, base=base), mode == "in-process"


def _cmd_sweep(args: argparse.Namespace) -> int:
    plan, in_process = read_plan_file(args.plan)
    if args.in_process:
        in_process = True
    rows = run_experiment(plan, out_path=args.out, in_process=in_process)
    failed = [r for r in rows if r["status"] == "failed"]
    if failed:
        print(f"{len(failed)} of {len(rows)} sweep points failed", file=sys.stderr)
        return 1
    return 0


# -- l1-server -------------------------------------------------------------------


def _cmd_l1_server(args: argparse.Namespace) -> int:
    expected_id: Optional[str] = args.instance_id

    def make_checked(init: Init) -> InstanceHandlers:
        if expected_id is not None and init.instance_id != expected_id:
            raise ProtocolError(
                "instance-mismatch",
                f"serving {expected_id!r} but INIT names {init.instance_id!r}",
            )
        return make_handlers(init)

    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        listener.bind(("127.0.0.1", args.port))
        listener.listen(1)
        # The spawner reads this line to learn the ephemeral port.
        print(f"PORT={listener.getsockname()[1]}", flush=True)
        listener.settimeout(args.accept_timeout)
        try:
            conn, _ = listener.accept()
        except socket.timeout:
            print("no connection arrived", file=sys.stderr)
            return 1
    finally:
        listener.close()

    transport = TcpTransport(conn)
    try:
        serve_session(transport, make_checked)
    except ProtocolError as exc:
        print(f"session failed: {exc}", file=sys.stderr)
        return 1
    finally:
        transport.close()
        peak = measure_peak_memory()
        if peak is not None:
            print(f"VMHWM={peak}", flush=True)
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iotsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run one simulation")
    _add_config_flags(p_sim)
    p_sim.add_argument("--out", metavar="CSV", help="per-timestep report table ('-' = stdout)")
    p_sim.add_argument(
        "--json-metrics", metavar="FILE", help="dump RunMetrics as JSON ('-' = stdout)"
    )
    p_sim.set_defaults(func=_cmd_simulate)

    p_sweep = sub.add_parser("sweep", help="run an experiment plan")
    p_sweep.add_argument("plan", help="plan file: axis=, values=, reps=, plus config keys")
    p_sweep.add_argument("--out", default="-", metavar="CSV", help="output table ('-' = stdout)")
    p_sweep.add_argument(
        "--in-process", action="store_true", help="run repetitions in this process (no fresh-process RSS)"
    )
    p_sweep.set_defaults(func=_cmd_sweep)

    p_srv = sub.add_parser("l1-server", help="serve one fine-grained session over TCP")
    p_srv.add_argument("--port", type=int, default=0, help="listen port (0 = ephemeral)")
    p_srv.add_argument("--instance-id", default=None, help="expected instance id")
    p_srv.add_argument("--accept-timeout", type=float, default=60.0)
    p_srv.set_defaults(func=_cmd_l1_server)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
