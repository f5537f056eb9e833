"""The minerva operator CLI: serve, scaffold, train, predict, poll, reload, simulate."""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading
import time

import requests

from minerva.config import ConfigError, load_config
from minerva.plugins import scaffold_app
from minerva.service import StartupError, start_service
from minerva.simulator import run_scenario_file

TERMINAL = ("SUCCEEDED", "FAILED", "REJECTED")


def _print_doc(doc) -> None:
    print(json.dumps(doc, ensure_ascii=False))


def _fail(message: str) -> int:
    print(message, file=sys.stderr)
    return 1


def cmd_serve(args) -> int:
    try:
        config = load_config(
            config_path=args.config,
            listen=args.listen,
            data_root=args.data_root,
            shared_root=args.shared_root,
            apps_root=args.apps_root,
            log_tier=args.log_tier,
        )
        service = start_service(config)
    except (ConfigError, StartupError) as exc:
        return _fail(f"startup failed: {exc}")
    print(f"minerva listening on {service.base_url}")
    stop_event = threading.Event()

    def _on_signal(signum, frame):
        stop_event.set()

    signal.signal(signal.SIGINT, _on_signal)
    signal.signal(signal.SIGTERM, _on_signal)
    stop_event.wait()
    service.stop()
    print("minerva stopped")
    return 0


def cmd_scaffold(args) -> int:
    try:
        app_dir = scaffold_app(args.app_name, args.target_dir)
    except FileExistsError as exc:
        return _fail(f"AlreadyExists: {exc}")
    except ValueError as exc:
        return _fail(str(exc))
    print(str(app_dir))
    return 0


def _post(url: str, payload_path: str) -> requests.Response:
    with open(payload_path, "rb") as fh:
        body = fh.read()
    return requests.post(url, data=body, headers={"Content-Type": "application/json"}, timeout=60)


def cmd_train(args) -> int:
    try:
        reply = _post(f"{args.server.rstrip('/')}/v1/train", args.payload)
    except (OSError, requests.RequestException) as exc:
        return _fail(f"train request failed: {exc}")
    _print_doc(reply.json())
    return 0 if reply.status_code == 202 else 1


def cmd_predict(args) -> int:
    url = f"{args.server.rstrip('/')}/v1/apps/{args.app}/v{args.version}/predict"
    try:
        reply = _post(url, args.payload)
    except (OSError, requests.RequestException) as exc:
        return _fail(f"predict request failed: {exc}")
    _print_doc(reply.json())
    return 0 if reply.status_code in (200, 202) else 1


def cmd_poll(args) -> int:
    url = f"{args.server.rstrip('/')}/v1/jobs/{args.job_id}"
    deadline = time.monotonic() + args.timeout
    while True:
        try:
            reply = requests.get(url, timeout=30)
        except requests.RequestException as exc:
            return _fail(f"poll failed: {exc}")
        doc = reply.json()
        if reply.status_code != 200:
            return _fail(f"poll failed: {doc.get('code', reply.status_code)}")
        if not args.wait or doc.get("state") in TERMINAL:
            _print_doc(doc)
            if args.wait:
                return 0 if doc.get("state") == "SUCCEEDED" else 1
            return 0
        if time.monotonic() > deadline:
            return _fail(f"job still {doc.get('state')} after {args.timeout}s")
        time.sleep(0.2)


def cmd_reload(args) -> int:
    try:
        reply = requests.post(f"{args.server.rstrip('/')}/v1/admin/reload", timeout=60)
    except requests.RequestException as exc:
        return _fail(f"reload failed: {exc}")
    _print_doc(reply.json())
    return 0 if reply.status_code == 200 else 1


def cmd_simulate(args) -> int:
    try:
        report = run_scenario_file(
            args.scenario, args.server, data_root=args.data_root, seed=args.seed
        )
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(f"cannot run scenario: {exc}")
    doc = report.to_doc()
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, ensure_ascii=False, indent=2)
    _print_doc(doc)
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minerva", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the service")
    serve.add_argument("--config", help="framework config file (JSON)")
    serve.add_argument("--listen", help="host:port to bind")
    serve.add_argument("--data-root", help="table and model storage root")
    serve.add_argument("--shared-root", help="logs, job events, scratch root")
    serve.add_argument("--apps-root", help="directory of app projects")
    serve.add_argument("--log-tier", help="DEBUG|INFO|WARN|ERROR")
    serve.set_defaults(func=cmd_serve)

    scaffold = sub.add_parser("scaffold", help="generate a new app skeleton")
    scaffold.add_argument("app_name")
    scaffold.add_argument("target_dir")
    scaffold.set_defaults(func=cmd_scaffold)

    train = sub.add_parser("train", help="submit a batch train/predict payload")
    train.add_argument("payload", help="payload document path")
    train.add_argument("--server", default="http://127.0.0.1:8080")
    train.set_defaults(func=cmd_train)

    predict = sub.add_parser("predict", help="submit an online predict payload")
    predict.add_argument("app")
    predict.add_argument("version", type=int)
    predict.add_argument("payload")
    predict.add_argument("--server", default="http://127.0.0.1:8080")
    predict.set_defaults(func=cmd_predict)

    poll = sub.add_parser("poll", help="poll a job status")
    poll.add_argument("job_id")
    poll.add_argument("--server", default="http://127.0.0.1:8080")
    poll.add_argument("--wait", action="store_true", help="block until a terminal state")
    poll.add_argument("--timeout", type=float, default=300.0)
    poll.set_defaults(func=cmd_poll)

    reload_cmd = sub.add_parser("reload", help="re-discover apps on the server")
    reload_cmd.add_argument("--server", default="http://127.0.0.1:8080")
    reload_cmd.set_defaults(func=cmd_reload)

    simulate = sub.add_parser("simulate", help="run a host-simulation scenario")
    simulate.add_argument("scenario", help="scenario document path")
    simulate.add_argument("--server", default="http://127.0.0.1:8080")
    simulate.add_argument("--data-root", help="data root shared with the service")
    simulate.add_argument("--seed", type=int, help="override the scenario seed")
    simulate.add_argument("--report", help="also write the report to this path")
    simulate.set_defaults(func=cmd_simulate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
