"""HTTP/JSON API backing the status portal and the command-line tools.

Sessions are signed tokens minted by POST /login from the identity table;
group membership and admin rights are re-resolved on every request so a
revocation takes effect immediately. All mutation funnels through the
lifecycle orchestrator, which serializes per database. Error payloads are
structured: {"error": {"code": ..., "message": ...}}.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import mimetypes
import secrets
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from ..config import Config
from ..errors import DbmError, UnknownUser, http_status_for
from ..lifecycle import Orchestrator
from ..util import write_json_atomic

ACTIONS = ("start", "stop", "checkpoint")


@dataclass(frozen=True)
class Session:
    user: str
    groups: frozenset[str]
    admin: bool


class TokenSigner:
    def __init__(self, key_path: Path, ttl_seconds: int):
        self.ttl = ttl_seconds
        if not key_path.exists():
            key_path.parent.mkdir(parents=True, exist_ok=True)
            key_path.write_text(secrets.token_hex(32))
            key_path.chmod(0o600)
        self.key = key_path.read_text().strip().encode()

    def mint(self, user: str) -> str:
        payload = json.dumps({"user": user, "exp": int(time.time()) + self.ttl})
        raw = base64.urlsafe_b64encode(payload.encode()).decode().rstrip("=")
        sig = hmac.new(self.key, raw.encode(), hashlib.sha256).hexdigest()[:32]
        return f"{raw}.{sig}"

    def verify(self, token: str) -> str | None:
        try:
            raw, sig = token.rsplit(".", 1)
            expect = hmac.new(self.key, raw.encode(), hashlib.sha256).hexdigest()[:32]
            if not hmac.compare_digest(sig, expect):
                return None
            padded = raw + "=" * (-len(raw) % 4)
            payload = json.loads(base64.urlsafe_b64decode(padded))
            if payload["exp"] < time.time():
                return None
            return payload["user"]
        except (ValueError, KeyError):
            return None


class GatewayServer:
    def __init__(self, orchestrator: Orchestrator, config: Config):
        self.orch = orchestrator
        self.config = config
        self.signer = TokenSigner(config.state_root / "gateway_key",
                                  config.gateway.token_ttl_seconds)
        self._idempotency: dict[str, tuple[int, dict]] = {}
        self._idempotency_lock = threading.Lock()
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    # --- lifecycle of the server itself ------------------------------------

    def start(self, *, dns_udp=None, dns_http=None) -> "GatewayServer":
        handler = _make_handler(self)
        self._server = ThreadingHTTPServer(
            (self.config.gateway.host, self.config.gateway.port), handler)
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)
        self._thread.start()
        info = {"url": self.url}
        if dns_udp:
            info["dns_udp"] = list(dns_udp)
        if dns_http:
            info["dns_http"] = list(dns_http)
        write_json_atomic(self.config.gateway_info_file, info)
        return self

    @property
    def url(self) -> str:
        assert self._server is not None
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None

    # --- request handling ----------------------------------------------------

    def session_from(self, auth_header: str | None) -> Session | None:
        if not auth_header or not auth_header.startswith("Bearer "):
            return None
        user = self.signer.verify(auth_header[len("Bearer "):])
        if user is None:
            return None
        try:
            identity = self.orch.identities.get(user)
        except UnknownUser:
            return None
        return Session(user=user, groups=identity.groups, admin=identity.admin)

    def handle_action(self, session: Session, name: str, body: dict) -> tuple[int, dict]:
        action = (body.get("action") or "").lower()
        if action not in ACTIONS:
            return 400, {"error": {"code": "bad-request",
                                   "message": f"unknown action {action!r}"}}
        token = body.get("idempotency_token")
        if token:
            with self._idempotency_lock:
                if token in self._idempotency:
                    return self._idempotency[token]
        status, payload = self._run_action(session, name, action)
        if token:
            with self._idempotency_lock:
                self._idempotency.setdefault(token, (status, payload))
        return status, payload

    def _run_action(self, session: Session, name: str, action: str) -> tuple[int, dict]:
        try:
            if action == "start":
                self.orch.db_start(name, session.user)
                return 200, {"accepted": True, "status": "starting"}
            if action == "stop":
                self.orch.db_stop(name, session.user)
                return 200, {"accepted": True, "status": "stopping"}
            _job, finish = self.orch.db_checkpoint_begin(name, session.user)
            threading.Thread(target=self._finish_checkpoint, args=(finish,),
                             daemon=True).start()
            return 200, {"accepted": True, "status": "checkpointing"}
        except DbmError as exc:
            return error_payload(exc)

    @staticmethod
    def _finish_checkpoint(finish) -> None:
        try:
            finish()
        except DbmError:
            pass  # outcome is observable through status and checkpoint list


def error_payload(exc: DbmError) -> tuple[int, dict]:
    detail = {"code": exc.code, "message": str(exc)}
    for key, value in exc.details.items():
        if isinstance(value, (int, str, float, bool, list)) or value is None:
            detail[key] = value
    return http_status_for(exc), {"error": detail}


def _make_handler(gw: GatewayServer):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):  # keep test output quiet
            pass

        # --- plumbing -----------------------------------------------------

        def _json_body(self) -> dict:
            length = int(self.headers.get("Content-Length", 0))
            if length == 0:
                return {}
            try:
                return json.loads(self.rfile.read(length))
            except json.JSONDecodeError:
                return {}

        def _send(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _session(self) -> Session | None:
            return gw.session_from(self.headers.get("Authorization"))

        def _need_session(self) -> Session | None:
            session = self._session()
            if session is None:
                self._send(401, {"error": {"code": "unauthenticated",
                                           "message": "login required"}})
            return session

        def _dispatch_errors(self, fn) -> None:
            try:
                fn()
            except DbmError as exc:
                self._send(*error_payload(exc))
            except Exception as exc:  # pragma: no cover - defensive
                self._send(500, {"error": {"code": "internal",
                                           "message": str(exc)}})

        # --- routes ---------------------------------------------------------

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Headers",
                             "Authorization, Content-Type")
            self.send_header("Access-Control-Allow-Methods",
                             "GET, POST, PUT, DELETE, OPTIONS")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_POST(self):
            parts = [p for p in self.path.split("/") if p]
            if parts == ["login"]:
                body = self._json_body()
                user = body.get("user", "")
                if not gw.orch.identities.knows(user):
                    self._send(401, {"error": {"code": "unknown-user",
                                               "message": f"unknown user {user!r}"}})
                    return
                self._send(200, {"token": gw.signer.mint(user),
                                 "user": user})
                return
            session = self._need_session()
            if session is None:
                return
            if parts == ["databases"]:
                self._dispatch_errors(lambda: self._create(session))
            elif len(parts) == 3 and parts[0] == "databases" and parts[2] == "actions":
                body = self._json_body()
                status, payload = gw.handle_action(session, parts[1], body)
                self._send(status, payload)
            elif len(parts) == 3 and parts[0] == "databases" and parts[2] == "restore":
                self._dispatch_errors(lambda: self._restore(session, parts[1]))
            elif len(parts) == 3 and parts[0] == "databases" and parts[2] == "force-stop":
                self._dispatch_errors(lambda: self._force_stop(session, parts[1]))
            else:
                self._send(404, {"error": {"code": "not-found",
                                           "message": self.path}})

        def _create(self, session: Session) -> None:
            body = self._json_body()
            try:
                engine = body["engine"]
                num_nodes = int(body["num_nodes"])
                name = body["name"]
                group = body["group"]
            except (KeyError, TypeError, ValueError):
                self._send(400, {"error": {"code": "bad-request",
                                           "message": "engine, num_nodes, name, group required"}})
                return
            descriptor = gw.orch.db_create(
                engine, num_nodes, name, group, session.user,
                engine_version=body.get("engine_version"))
            self._send(201, {"descriptor": descriptor.to_dict()})

        def _restore(self, session: Session, name: str) -> None:
            body = self._json_body()
            checkpoint_id = body.get("checkpoint_id", "")
            gw.orch.db_restore(name, checkpoint_id, session.user)
            self._send(200, {"restored": checkpoint_id, "status": "stopped"})

        def _force_stop(self, session: Session, name: str) -> None:
            gw.orch.db_force_stop(name, session.user)
            self._send(200, {"status": "stopped", "forced": True})

        def do_GET(self):
            parts = [p for p in self.path.split("/") if p]
            if parts == ["health"]:
                self._send(200, {"ok": True})
                return
            if parts and parts[0] == "ui":
                self._static(parts[1:])
                return
            session = self._need_session()
            if session is None:
                return
            if parts == ["databases"]:
                rows = gw.orch.registry.list_databases(session.groups)
                self._send(200, {"databases": [r.to_dict() for r in rows]})
            elif len(parts) == 2 and parts[0] == "databases":
                self._dispatch_errors(
                    lambda: self._send(200, gw.orch.database_details(parts[1],
                                                                     session.user)))
            elif len(parts) == 3 and parts[0] == "databases" and parts[2] == "accesskey":
                self._dispatch_errors(
                    lambda: self._send(200, {
                        "database": parts[1],
                        "username": "dbuser",
                        "access_key": gw.orch.locate_access_key(parts[1],
                                                                session.user)}))
            else:
                self._send(404, {"error": {"code": "not-found",
                                           "message": self.path}})

        def _static(self, rel_parts: list[str]) -> None:
            root = gw.config.gateway.static_dir
            if root is None:
                self._send(404, {"error": {"code": "not-found",
                                           "message": "no static portal configured"}})
                return
            rel = "/".join(rel_parts) or "index.html"
            root_resolved = Path(root).resolve()
            target = (root_resolved / rel).resolve()
            if root_resolved not in target.parents or not target.is_file():
                self._send(404, {"error": {"code": "not-found", "message": rel}})
                return
            data = target.read_bytes()
            ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

    return Handler
