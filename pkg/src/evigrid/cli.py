"""Command-line front end: a thin HTTP client for the service.

Every subcommand turns its arguments into one service request. By default the
service application is called in-process; ``--server URL`` sends the same
request to a running instance instead.
"""

from __future__ import annotations

import argparse
import sys

import httpx
import yaml


def _post_in_process(route: str, body: dict) -> httpx.Response:
    import asyncio

    from .service import app

    async def go():
        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(
            transport=transport, base_url="http://service", timeout=None
        ) as client:
            return await client.post(route, json=body)

    return asyncio.run(go())


def _load_yaml(path: str) -> dict:
    with open(path) as handle:
        return yaml.safe_load(handle)


def _post(args, route: str, body: dict) -> dict:
    if args.server:
        with httpx.Client(base_url=args.server, timeout=None) as client:
            response = client.post(route, json=body)
    else:
        response = _post_in_process(route, body)
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        print(f"error: {detail}", file=sys.stderr)
        raise SystemExit(1)
    return response.json()


def _cmd_simulate(args) -> int:
    body = {"config": _load_yaml(args.config), "out_dir": args.out}
    result = _post(args, "/simulate", body)
    for path in result["paths"].values():
        print(path)
    print(f"persons: {result['n_persons']}")
    return 0


def _cmd_run(args) -> int:
    config = _load_yaml(args.config)
    if args.ps_strata is not None:
        config["ps_strata"] = args.ps_strata
    body = {"config": config, "out_dir": args.out, "workers": args.workers}
    result = _post(args, "/run", body)
    for path in result["paths"].values():
        print(path)
    print(
        f"records: {result['n_records']} "
        f"(suppressed {result['n_suppressed']}), "
        f"error models: {result['n_error_models']}"
    )
    return 0


def _cmd_report(args) -> int:
    body = {"store_dir": args.store}
    if args.out:
        body["out_dir"] = args.out
    result = _post(args, "/report", body)
    for path in result["paths"].values():
        print(path)
    return 0


def _cmd_loo_cv(args) -> int:
    result = _post(args, "/loo-cv", {"store_dir": args.store})
    rows = result["rows"]
    print(f"{result['path']} ({len(rows)} rows)")
    shown = [r for r in rows if r["level"] == 0.95] or rows
    for r in shown:
        print(
            f"{r['database']} {r['analysis']} {r['target']} vs {r['comparator']} "
            f"true_hr={r['true_hr']:g} level={r['level']:g} "
            f"coverage={r['coverage']:.3f} ({r['n']} controls)"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--server", default=None,
        help="base URL of a running service (default: run in-process)",
    )
    parser = argparse.ArgumentParser(prog="evigrid")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser(
        "simulate", parents=[common],
        help="generate a database from a config file",
    )
    simulate.add_argument("--config", required=True, help="YAML simulation config")
    simulate.add_argument("--out", required=True, help="directory for the tables")
    simulate.set_defaults(handler=_cmd_simulate)

    run = commands.add_parser(
        "run", parents=[common], help="run the estimation grid",
    )
    run.add_argument("--config", required=True, help="YAML run config")
    run.add_argument("--out", required=True, help="directory for the result store")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument(
        "--ps-strata", type=int, default=None,
        help="override the number of propensity strata",
    )
    run.set_defaults(handler=_cmd_run)

    report = commands.add_parser(
        "report", parents=[common], help="emit report files for a result store",
    )
    report.add_argument("--store", required=True, help="result store directory")
    report.add_argument("--out", default=None, help="report directory (default: <store>/reports)")
    report.set_defaults(handler=_cmd_report)

    loo = commands.add_parser(
        "loo-cv", parents=[common],
        help="leave-one-out calibration coverage for a result store",
    )
    loo.add_argument("--store", required=True, help="result store directory")
    loo.set_defaults(handler=_cmd_loo_cv)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    raise SystemExit(main())
