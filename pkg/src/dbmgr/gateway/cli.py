"""Command-line tools: db_create, db_start, db_stop, db_checkpoint,
db_restore, db_status, plus the umbrella ``dbm`` entry point with ``serve``,
``bench`` and ``init``.

Every database command is a thin HTTP client against a running ``dbm serve``
instance, so authorization semantics are identical to the web portal. Exit
codes: 0 ok, 2 usage, 3 permission, 4 wrong status/conflict, 5 insufficient
resources, 6 internal/unreachable.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import time
from pathlib import Path

import requests

from .. import migrate
from ..config import CONFIG_ENV_VAR, USER_ENV_VAR, Config, default_config
from ..errors import exit_code_for_http
from ..util import read_json

POLL_INTERVAL = 0.25

TRANSIENT = {"starting", "stopping", "checkpointing"}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_config(args) -> Config:
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV_VAR)
    if not path:
        raise CliError(f"no config: pass --config or set {CONFIG_ENV_VAR}", 2)
    try:
        return Config.from_file(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load config {path}: {exc}", 2)


def _identity(args) -> str:
    user = getattr(args, "as_user", None) or os.environ.get(USER_ENV_VAR)
    if not user:
        raise CliError(f"no identity: pass --as-user or set {USER_ENV_VAR}", 2)
    return user


class ApiClient:
    def __init__(self, config: Config, user: str):
        info_path = config.gateway_info_file
        if not info_path.exists():
            raise CliError("gateway not running (no gateway.json); "
                           "start it with: dbm serve", 6)
        self.base = read_json(info_path)["url"]
        self.user = user
        try:
            resp = requests.post(f"{self.base}/login", json={"user": user},
                                 timeout=10)
        except requests.RequestException as exc:
            raise CliError(f"cannot reach gateway at {self.base}: {exc}", 6)
        if resp.status_code != 200:
            raise CliError(_error_text(resp), exit_code_for_http(resp.status_code))
        self.token = resp.json()["token"]

    def request(self, method: str, path: str, body: dict | None = None) -> requests.Response:
        try:
            return requests.request(
                method, f"{self.base}{path}", json=body,
                headers={"Authorization": f"Bearer {self.token}"}, timeout=60)
        except requests.RequestException as exc:
            raise CliError(f"gateway request failed: {exc}", 6)

    def expect(self, method: str, path: str, body: dict | None = None) -> dict:
        resp = self.request(method, path, body)
        if resp.status_code >= 400:
            raise CliError(_error_text(resp), exit_code_for_http(resp.status_code))
        return resp.json()

    def status_of(self, name: str) -> str | None:
        rows = self.expect("GET", "/databases")["databases"]
        for row in rows:
            if row["name"] == name:
                return row["status"]
        return None

    def wait_settled(self, name: str, timeout: float) -> str:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            status = self.status_of(name)
            if status is not None and status not in TRANSIENT:
                return status
            time.sleep(POLL_INTERVAL)
        raise CliError(f"timed out waiting for {name} to settle", 6)


def _error_text(resp: requests.Response) -> str:
    try:
        err = resp.json()["error"]
        extra = ""
        if err.get("code") == "insufficient-resources":
            extra = f" (free={err.get('free')}, requested={err.get('requested')})"
        return f"{err['code']}: {err.get('message', '')}{extra}"
    except (ValueError, KeyError):
        return f"HTTP {resp.status_code}"


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help=f"config path (default: ${CONFIG_ENV_VAR})")
    parser.add_argument("--as-user", help=f"identity (default: ${USER_ENV_VAR})")


# --- command implementations --------------------------------------------------


def cmd_create(args) -> int:
    client = ApiClient(_load_config(args), _identity(args))
    payload = {"engine": args.engine, "num_nodes": args.num_nodes,
               "name": args.name, "group": args.group}
    if args.engine_version:
        payload["engine_version"] = args.engine_version
    out = client.expect("POST", "/databases", payload)
    d = out["descriptor"]
    print(f"created {d['name']} ({d['engine']} {d['engine_version']}, "
          f"{d['num_nodes']} nodes, group {d['security_group']})")
    return 0


def cmd_start(args) -> int:
    client = ApiClient(_load_config(args), _identity(args))
    out = client.expect("POST", f"/databases/{args.name}/actions",
                        {"action": "start"})
    print(f"{args.name}: {out['status']}")
    if args.no_wait:
        return 0
    final = client.wait_settled(args.name, args.timeout)
    print(f"{args.name}: {final}")
    if final != "started":
        raise CliError(f"start failed; database settled {final} "
                       f"(see the job log under the cluster root)", 6)
    return 0


def cmd_stop(args) -> int:
    client = ApiClient(_load_config(args), _identity(args))
    if args.force:
        client.expect("POST", f"/databases/{args.name}/force-stop")
        print(f"{args.name}: force-stopped")
        return 0
    out = client.expect("POST", f"/databases/{args.name}/actions",
                        {"action": "stop"})
    print(f"{args.name}: {out['status']}")
    if args.no_wait:
        return 0
    final = client.wait_settled(args.name, args.timeout)
    print(f"{args.name}: {final}")
    return 0 if final == "stopped" else 6


def cmd_checkpoint(args) -> int:
    client = ApiClient(_load_config(args), _identity(args))
    out = client.expect("POST", f"/databases/{args.name}/actions",
                        {"action": "checkpoint"})
    print(f"{args.name}: {out['status']}")
    if args.no_wait:
        return 0
    client.wait_settled(args.name, args.timeout)
    detail = client.expect("GET", f"/databases/{args.name}")
    checkpoints = detail.get("checkpoints", [])
    if not checkpoints:
        raise CliError("checkpoint did not produce an archive", 6)
    latest = checkpoints[-1]
    print(f"{args.name}: checkpoint {latest['id']} ({latest['size_bytes']} bytes)")
    return 0


def cmd_restore(args) -> int:
    client = ApiClient(_load_config(args), _identity(args))
    client.expect("POST", f"/databases/{args.name}/restore",
                  {"checkpoint_id": args.checkpoint_id})
    print(f"{args.name}: restored {args.checkpoint_id}")
    return 0


def cmd_status(args) -> int:
    client = ApiClient(_load_config(args), _identity(args))
    if args.name:
        detail = client.expect("GET", f"/databases/{args.name}")
        print(json.dumps(detail, indent=2))
        return 0
    rows = client.expect("GET", "/databases")["databases"]
    if args.json:
        print(json.dumps(rows, indent=2))
        return 0
    if not rows:
        print("no databases visible to this identity")
        return 0
    widths = (max(len(r["name"]) for r in rows),
              max(len(r["type"]) for r in rows),
              max(len(r["status"]) for r in rows))
    print(f"{'NAME':<{widths[0]}}  {'TYPE':<{widths[1]}}  "
          f"{'STATUS':<{widths[2]}}  ACTIONS")
    for r in rows:
        print(f"{r['name']:<{widths[0]}}  {r['type']:<{widths[1]}}  "
              f"{r['status']:<{widths[2]}}  {' '.join(r['actions'])}")
    return 0


def cmd_bench(args) -> int:
    sizes = [migrate.parse_size(s) for s in args.sizes.split(",")]
    modes = [migrate.CopyMode.parse(m) for m in args.modes.split(",")]
    if args.directions == "both":
        directions = list(migrate.DIRECTIONS)
    else:
        directions = [d.strip().replace("-", "_") for d in args.directions.split(",")]
    table = migrate.run_benchmark(Path(args.scratch), sizes, modes, directions,
                                  args.trials, seed=args.seed)
    table.write_csv(Path(args.out))
    print(f"wrote {len(table.rows)} rows to {args.out}")
    for row in table.rows:
        print(f"  {row.direction:<17} {row.mode.label()}:{row.mode.workers} "
              f"{row.bytes_per_node >> 20:>6} MiB {row.seconds:8.3f}s "
              f"{row.mb_per_sec:9.1f} MB/s")
    return 0


def cmd_serve(args) -> int:
    from ..dyndns import DnsServer
    from ..lifecycle import build_orchestrator
    from .api import GatewayServer

    config = _load_config(args)
    orch = build_orchestrator(config)
    dns_server = DnsServer(orch.dns).start()
    gateway = GatewayServer(orch, config).start(
        dns_udp=dns_server.udp_address, dns_http=dns_server.http_address)
    print(f"gateway listening on {gateway.url}")
    print(f"dns responder on udp://{dns_server.udp_address[0]}:{dns_server.udp_address[1]}")
    stopping = []

    def on_signal(_sig, _frame):
        stopping.append(True)

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    try:
        while not stopping:
            time.sleep(0.2)
    finally:
        gateway.stop()
        dns_server.stop()
        orch.shutdown()
    return 0


def cmd_init(args) -> int:
    root = Path(args.root).resolve()
    config = default_config(root)
    config.ensure_dirs()
    config_path = root / "config.json"
    config.save(config_path)
    identities = {"users": {}}
    if args.admin:
        identities["users"][args.admin] = {"groups": [], "admin": True}
    for spec in args.user or []:
        name, _, groups = spec.partition(":")
        identities["users"][name] = {
            "groups": [g for g in groups.split(",") if g], "admin": False}
    config.identity_file.write_text(json.dumps(identities, indent=2) + "\n")
    print(f"initialized {root}")
    print(f"config: {config_path}")
    print(f"export {CONFIG_ENV_VAR}={config_path}")
    return 0


# --- parsers -------------------------------------------------------------------


def _start_like(parser) -> None:
    parser.add_argument("name")
    parser.add_argument("--no-wait", action="store_true",
                        help="return as soon as the action is accepted")
    parser.add_argument("--timeout", type=float, default=180.0)
    _add_common(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dbm", description="on-demand database lifecycle manager")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("create", help="create a database (administrators)")
    p.add_argument("engine", help="toy-kv | toy-tabular (accumulo/scidb accepted)")
    p.add_argument("name")
    p.add_argument("group")
    p.add_argument("--num-nodes", type=int, required=True)
    p.add_argument("--engine-version")
    _add_common(p)
    p.set_defaults(fn=cmd_create)

    p = sub.add_parser("start", help="start a stopped database")
    _start_like(p)
    p.set_defaults(fn=cmd_start)

    p = sub.add_parser("stop", help="stop a started database")
    _start_like(p)
    p.add_argument("--force", action="store_true",
                   help="admin recovery for orphaned state")
    p.set_defaults(fn=cmd_stop)

    p = sub.add_parser("checkpoint", help="archive a stopped database")
    _start_like(p)
    p.set_defaults(fn=cmd_checkpoint)

    p = sub.add_parser("restore", help="restore a checkpoint (administrators)")
    p.add_argument("name")
    p.add_argument("checkpoint_id")
    _add_common(p)
    p.set_defaults(fn=cmd_restore)

    p = sub.add_parser("status", help="list databases visible to this identity")
    p.add_argument("name", nargs="?")
    p.add_argument("--json", action="store_true")
    _add_common(p)
    p.set_defaults(fn=cmd_status)

    p = sub.add_parser("bench", help="copy-engine benchmark harness")
    p.add_argument("--sizes", default="64MiB")
    p.add_argument("--modes", default="single,multi:3")
    p.add_argument("--directions", default="both")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--out", default="bench.csv")
    p.add_argument("--scratch", default=os.environ.get("TMPDIR", "/tmp"))
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("serve", help="run the orchestrator, DNS and gateway")
    _add_common(p)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("init", help="scaffold a state directory and config")
    p.add_argument("root")
    p.add_argument("--admin", help="create this administrator account")
    p.add_argument("--user", action="append",
                   help="user spec name:group1,group2 (repeatable)")
    p.set_defaults(fn=cmd_init)

    return parser


def _run(parser: argparse.ArgumentParser, argv: list[str] | None) -> int:
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


def main(argv: list[str] | None = None) -> int:
    return _run(build_parser(), argv)


def _single_command(command: str, description: str, configure) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=command, description=description)
    configure(parser)
    return parser


def db_create_main(argv: list[str] | None = None) -> int:
    def configure(p):
        p.add_argument("engine")
        p.add_argument("name")
        p.add_argument("group")
        p.add_argument("--num-nodes", type=int, required=True)
        p.add_argument("--engine-version")
        _add_common(p)
        p.set_defaults(fn=cmd_create)
    return _run(_single_command("db_create", "create a database", configure), argv)


def db_start_main(argv: list[str] | None = None) -> int:
    def configure(p):
        _start_like(p)
        p.set_defaults(fn=cmd_start)
    return _run(_single_command("db_start", "start a database", configure), argv)


def db_stop_main(argv: list[str] | None = None) -> int:
    def configure(p):
        _start_like(p)
        p.add_argument("--force", action="store_true")
        p.set_defaults(fn=cmd_stop)
    return _run(_single_command("db_stop", "stop a database", configure), argv)


def db_checkpoint_main(argv: list[str] | None = None) -> int:
    def configure(p):
        _start_like(p)
        p.set_defaults(fn=cmd_checkpoint)
    return _run(_single_command("db_checkpoint", "checkpoint a database", configure), argv)


def db_restore_main(argv: list[str] | None = None) -> int:
    def configure(p):
        p.add_argument("name")
        p.add_argument("checkpoint_id")
        _add_common(p)
        p.set_defaults(fn=cmd_restore)
    return _run(_single_command("db_restore", "restore a checkpoint", configure), argv)


def db_status_main(argv: list[str] | None = None) -> int:
    def configure(p):
        p.add_argument("name", nargs="?")
        p.add_argument("--json", action="store_true")
        _add_common(p)
        p.set_defaults(fn=cmd_status)
    return _run(_single_command("db_status", "database status table", configure), argv)


if __name__ == "__main__":
    sys.exit(main())
