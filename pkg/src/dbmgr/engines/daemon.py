"""Toy engine daemon: one OS process per (service, node).

Run as ``python -m dbmgr.engines.daemon <config.json>``. Speaks a
line-oriented UTF-8 protocol over TCP, one command per line:

    PING                        -> OK pong
    AUTH <user> <secret>        -> OK | ERR auth-failed
    TOPO                        -> OK <num_nodes>      (authority, needs auth)
    SETPASS <user> <new>        -> OK                  (authority, root session)
    SYNCPASS <user> <sha256>    -> OK                  (service session)
    JOIN <index> <host> <port>  -> OK <dbuser-hash|->  (authority, service session)
    PUT <key> <value>           -> OK                  (storage, authed session)
    GET <key>                   -> OK <value> | ERR not-found
    COUNT                       -> OK <n>              (storage, authed session)

Secrets are read from the paths in the config at startup and held in memory
only; they are never written to logs or data files (the user credential is
stored as a SHA-256 hash). Storage daemons join their authority before
binding, so a daemon that answers PING has completed the handshake.

Exit codes: 0 clean stop, 3 bad config/secret, 6 join timeout, 7 shared
secret rejected by the authority.
"""

from __future__ import annotations

import hashlib
import json
import os
import signal
import socket
import socketserver
import sys
import threading
import time
from pathlib import Path

MAX_KEY_BYTES = 1024
MAX_VALUE_BYTES = 64 * 1024
MAX_LINE_BYTES = MAX_KEY_BYTES + MAX_VALUE_BYTES + 64

SERVICE_USER = "__service__"

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_BIND_FAILED = 5
EXIT_JOIN_TIMEOUT = 6
EXIT_AUTH_MISMATCH = 7


def sha256_hex(value: str) -> str:
    return hashlib.sha256(value.encode("utf-8")).hexdigest()


class DaemonState:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.role = cfg["role"]  # "authority" | "storage"
        self.data_dir = Path(cfg["data_dir"])
        self.shared_secret = Path(cfg["shared_secret_path"]).read_text().strip()
        self.superuser_password = Path(cfg["superuser_path"]).read_text().strip()
        self.num_nodes = int(cfg.get("num_nodes", 1))
        self.lock = threading.RLock()
        self.kv: dict[str, str] = {}
        self.dbuser_sha256: str | None = None
        self.workers: dict[int, tuple[str, int]] = {}
        self._oplog = None
        self._load()

    # --- persistence ------------------------------------------------------

    def _auth_path(self) -> Path:
        return self.data_dir / "auth.json"

    def _load(self) -> None:
        self.data_dir.mkdir(parents=True, exist_ok=True)
        auth_path = self._auth_path()
        if auth_path.exists():
            self.dbuser_sha256 = json.loads(auth_path.read_text()).get("dbuser_sha256")
        snap = self.data_dir / "snapshot.json"
        if snap.exists():
            self.kv.update(json.loads(snap.read_text()).get("kv", {}))
        oplog = self.data_dir / "oplog"
        if oplog.exists():
            for line in oplog.read_text().splitlines():
                if not line:
                    continue
                entry = json.loads(line)
                self.kv[entry["k"]] = entry["v"]
        self._oplog = open(oplog, "a", encoding="utf-8")

    def put(self, key: str, value: str) -> None:
        with self.lock:
            self.kv[key] = value
            self._oplog.write(json.dumps({"k": key, "v": value}) + "\n")
            self._oplog.flush()

    def save_dbuser_hash(self, digest: str | None) -> None:
        with self.lock:
            self.dbuser_sha256 = digest
            tmp = self._auth_path().with_suffix(".tmp")
            tmp.write_text(json.dumps({"dbuser_sha256": digest}) + "\n")
            os.replace(tmp, self._auth_path())

    def flush(self) -> None:
        """Compact the op log into a snapshot (clean shutdown path)."""
        with self.lock:
            tmp = self.data_dir / "snapshot.json.tmp"
            tmp.write_text(json.dumps({"kv": self.kv}, sort_keys=True) + "\n")
            os.replace(tmp, self.data_dir / "snapshot.json")
            self._oplog.close()
            (self.data_dir / "oplog").write_text("")
            self._oplog = open(self.data_dir / "oplog", "a", encoding="utf-8")

    # --- auth ---------------------------------------------------------------

    def check_auth(self, user: str, secret: str) -> bool:
        if user == SERVICE_USER:
            return secret == self.shared_secret
        if user == "root":
            return secret == self.superuser_password
        if user == "dbuser":
            return (self.dbuser_sha256 is not None
                    and sha256_hex(secret) == self.dbuser_sha256)
        return False


def _push_to_worker(state: DaemonState, host: str, port: int, digest: str) -> bool:
    # Workers register before their socket is bound; retry briefly so a push
    # cannot race a worker that just joined.
    deadline = time.monotonic() + 5.0
    while True:
        try:
            with socket.create_connection((host, port), timeout=5.0) as sock:
                fh = sock.makefile("rw", encoding="utf-8", newline="\n")
                fh.write(f"AUTH {SERVICE_USER} {state.shared_secret}\n")
                fh.flush()
                if not fh.readline().startswith("OK"):
                    return False
                fh.write(f"SYNCPASS dbuser {digest}\n")
                fh.flush()
                return fh.readline().startswith("OK")
        except OSError:
            if time.monotonic() >= deadline:
                return False
            time.sleep(0.02)


class Handler(socketserver.StreamRequestHandler):
    def handle(self):
        state: DaemonState = self.server.state  # type: ignore[attr-defined]
        authed_user: str | None = None
        while True:
            try:
                line = self.rfile.readline(MAX_LINE_BYTES)
            except OSError:
                return
            if not line:
                return
            try:
                text = line.decode("utf-8").rstrip("\n")
            except UnicodeDecodeError:
                self._reply("ERR bad-encoding")
                continue
            parts = text.split(" ", 2)
            cmd = parts[0].upper() if parts else ""

            if cmd == "PING":
                # The pid lets a supervisor confirm it reached its own child
                # rather than a stale daemon on a recycled address.
                self._reply(f"OK pong {os.getpid()}")
            elif cmd == "AUTH" and len(parts) == 3:
                user, secret = parts[1], parts[2]
                if state.check_auth(user, secret):
                    authed_user = user
                    self._reply("OK")
                else:
                    self._reply("ERR auth-failed")
            elif cmd == "TOPO":
                if authed_user is None:
                    self._reply("ERR not-authenticated")
                elif state.role != "authority":
                    self._reply("ERR unsupported")
                else:
                    self._reply(f"OK {state.num_nodes}")
            elif cmd == "SETPASS" and len(parts) == 3:
                self._handle_setpass(state, authed_user, parts[1], parts[2])
            elif cmd == "SYNCPASS" and len(parts) == 3:
                if authed_user != SERVICE_USER:
                    self._reply("ERR not-authorized")
                elif parts[1] != "dbuser":
                    self._reply("ERR unknown-user")
                else:
                    state.save_dbuser_hash(parts[2])
                    self._reply("OK")
            elif cmd == "JOIN" and len(parts) == 3:
                if state.role != "authority":
                    self._reply("ERR unsupported")
                elif authed_user != SERVICE_USER:
                    self._reply("ERR not-authorized")
                else:
                    index_str, addr = parts[1], parts[2]
                    host, port = addr.rsplit(":", 1)
                    with state.lock:
                        state.workers[int(index_str)] = (host, int(port))
                        digest = state.dbuser_sha256 or "-"
                    self._reply(f"OK {digest}")
            elif cmd == "PUT" and len(parts) == 3:
                self._handle_put(state, authed_user, parts[1], parts[2])
            elif cmd == "GET" and len(parts) == 2:
                self._handle_get(state, authed_user, parts[1])
            elif cmd == "COUNT":
                if authed_user is None:
                    self._reply("ERR not-authenticated")
                elif state.role != "storage":
                    self._reply("ERR unsupported")
                else:
                    self._reply(f"OK {len(state.kv)}")
            else:
                self._reply("ERR bad-command")

    def _handle_setpass(self, state: DaemonState, authed_user, username, new_value):
        if state.role != "authority":
            self._reply("ERR unsupported")
            return
        if authed_user != "root":
            self._reply("ERR not-authorized")
            return
        if username != "dbuser":
            self._reply("ERR unknown-user")
            return
        digest = sha256_hex(new_value)
        state.save_dbuser_hash(digest)
        with state.lock:
            workers = list(state.workers.values())
        failed = [w for w in workers if not _push_to_worker(state, w[0], w[1], digest)]
        if failed:
            self._reply("ERR push-failed")
        else:
            self._reply("OK")

    def _handle_put(self, state: DaemonState, authed_user, key, value):
        if state.role != "storage":
            self._reply("ERR unsupported")
        elif authed_user not in ("dbuser", "root", SERVICE_USER):
            self._reply("ERR not-authenticated")
        elif len(key.encode()) > MAX_KEY_BYTES or len(value.encode()) > MAX_VALUE_BYTES:
            self._reply("ERR too-large")
        else:
            state.put(key, value)
            self._reply("OK")

    def _handle_get(self, state: DaemonState, authed_user, key):
        if state.role != "storage":
            self._reply("ERR unsupported")
        elif authed_user not in ("dbuser", "root", SERVICE_USER):
            self._reply("ERR not-authenticated")
        else:
            with state.lock:
                value = state.kv.get(key)
            self._reply("ERR not-found" if value is None else f"OK {value}")

    def _reply(self, text: str) -> None:
        self.wfile.write((text + "\n").encode("utf-8"))
        self.wfile.flush()


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def _join_authority(state: DaemonState, cfg: dict) -> int:
    """Register with the authority before serving. Returns an exit code."""
    deadline = time.monotonic() + float(cfg.get("join_timeout", 15.0))
    addr = (cfg["authority_host"], int(cfg["authority_port"]))
    my_addr = f"{cfg['ip']}:{cfg['port']}"
    while time.monotonic() < deadline:
        try:
            with socket.create_connection(addr, timeout=2.0) as sock:
                fh = sock.makefile("rw", encoding="utf-8", newline="\n")
                fh.write(f"AUTH {SERVICE_USER} {state.shared_secret}\n")
                fh.flush()
                if not fh.readline().startswith("OK"):
                    return EXIT_AUTH_MISMATCH
                fh.write(f"JOIN {cfg['node_index']} {my_addr}\n")
                fh.flush()
                reply = fh.readline().strip()
                if not reply.startswith("OK"):
                    return EXIT_AUTH_MISMATCH
                digest = reply.split(" ", 1)[1] if " " in reply else "-"
                if digest != "-":
                    state.save_dbuser_hash(digest)
                return EXIT_OK
        except OSError:
            time.sleep(0.02)
    return EXIT_JOIN_TIMEOUT


def main(argv: list[str]) -> int:
    if len(argv) != 2:
        print("usage: daemon <config.json>", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = json.loads(Path(argv[1]).read_text())
        state = DaemonState(cfg)
    except (OSError, KeyError, ValueError) as exc:
        print(f"daemon config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if state.role == "storage" and cfg.get("authority_host"):
        code = _join_authority(state, cfg)
        if code != EXIT_OK:
            print(f"join failed with code {code}", file=sys.stderr)
            return code

    try:
        server = _Server((cfg["ip"], int(cfg["port"])), Handler)
    except OSError as exc:
        print(f"bind failed on {cfg['ip']}:{cfg['port']}: {exc}", file=sys.stderr)
        return EXIT_BIND_FAILED
    server.state = state  # type: ignore[attr-defined]
    stop = threading.Event()

    def on_term(_sig, _frame):
        stop.set()

    signal.signal(signal.SIGTERM, on_term)
    signal.signal(signal.SIGINT, on_term)
    # Short poll interval: shutdown() blocks a multiple of it, and stop
    # latency is on the epilog's critical path.
    thread = threading.Thread(target=lambda: server.serve_forever(poll_interval=0.02),
                              daemon=True)
    thread.start()
    print(f"ready {cfg['service']} on {cfg['ip']}:{cfg['port']}", file=sys.stderr,
          flush=True)
    stop.wait()
    server.shutdown()
    server.server_close()
    state.flush()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main(sys.argv))
