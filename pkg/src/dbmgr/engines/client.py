"""Client for the toy engine wire protocol.

Clients are configured with well-known DNS names only, never raw node IPs:
``<db>`` resolves to the authority (master node) and ``<db>-<i>`` to node i.
Keys are partitioned across storage daemons by key hash, so the client routes
each PUT/GET itself after learning the topology from the authority.
"""

from __future__ import annotations

import hashlib
import socket

from ..errors import (AuthFailed, EngineUnreachable, KeyNotFound,
                      NotAuthenticated, PermissionDenied, SuperuserAuthFailed)
from .defs import MAX_KEY_BYTES, MAX_VALUE_BYTES


class _Conn:
    def __init__(self, address: tuple[str, int], timeout: float):
        try:
            self.sock = socket.create_connection(address, timeout=timeout)
        except OSError as exc:
            raise EngineUnreachable(f"cannot connect to {address}: {exc}")
        self.fh = self.sock.makefile("rw", encoding="utf-8", newline="\n")

    def request(self, line: str) -> str:
        try:
            self.fh.write(line + "\n")
            self.fh.flush()
            reply = self.fh.readline()
        except OSError as exc:
            raise EngineUnreachable(str(exc))
        if not reply:
            raise EngineUnreachable("connection closed")
        return reply.rstrip("\n")

    def close(self) -> None:
        try:
            self.fh.close()
            self.sock.close()
        except OSError:
            pass


def _partition(key: str, num_nodes: int) -> int:
    digest = hashlib.sha1(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % num_nodes


class EngineClient:
    def __init__(self, db: str, resolver, *, authority_port: int,
                 storage_port: int, num_nodes: int | None = None,
                 timeout: float = 5.0):
        self.db = db
        self.resolver = resolver
        self.authority_port = authority_port
        self.storage_port = storage_port
        self.num_nodes = num_nodes
        self.timeout = timeout
        self._creds: tuple[str, str] | None = None
        self._authority: _Conn | None = None
        self._workers: dict[int, _Conn] = {}

    # --- connections -------------------------------------------------------

    def _resolve(self, name: str) -> str:
        address = self.resolver(name)
        if address is None:
            raise EngineUnreachable(f"{name} does not resolve")
        return address

    def _authority_conn(self) -> _Conn:
        if self._authority is None:
            self._authority = _Conn((self._resolve(self.db), self.authority_port),
                                    self.timeout)
            if self._creds is not None:
                self._auth_on(self._authority)
        return self._authority

    def _worker_conn(self, index: int) -> _Conn:
        conn = self._workers.get(index)
        if conn is None:
            conn = _Conn((self._resolve(f"{self.db}-{index}"), self.storage_port),
                         self.timeout)
            self._workers[index] = conn
            if self._creds is not None:
                self._auth_on(conn)
        return conn

    def _auth_on(self, conn: _Conn) -> None:
        user, secret = self._creds  # type: ignore[misc]
        reply = conn.request(f"AUTH {user} {secret}")
        if not reply.startswith("OK"):
            raise AuthFailed(f"authentication failed for {user!r}")

    # --- operations -----------------------------------------------------------

    def ping(self) -> bool:
        return self._authority_conn().request("PING").startswith("OK")

    def authenticate(self, user: str, secret: str) -> None:
        self._creds = (user, secret)
        self._auth_on(self._authority_conn())
        for conn in self._workers.values():
            self._auth_on(conn)

    def topology(self) -> int:
        reply = self._authority_conn().request("TOPO")
        if reply.startswith("ERR not-authenticated"):
            raise NotAuthenticated("TOPO requires authentication")
        if not reply.startswith("OK"):
            raise EngineUnreachable(f"TOPO failed: {reply}")
        n = int(reply.split(" ", 1)[1])
        self.num_nodes = n
        return n

    def set_password(self, username: str, new_value: str) -> None:
        """Change a database account password; needs a superuser session."""
        reply = self._authority_conn().request(f"SETPASS {username} {new_value}")
        if reply.startswith("ERR not-authorized"):
            raise PermissionDenied("SETPASS requires the superuser account")
        if reply.startswith("ERR push-failed"):
            raise EngineUnreachable("password push to workers failed")
        if not reply.startswith("OK"):
            raise EngineUnreachable(f"SETPASS failed: {reply}")

    def _num_nodes(self) -> int:
        if self.num_nodes is None:
            self.topology()
        return self.num_nodes  # type: ignore[return-value]

    def put(self, key: str, value: str) -> None:
        if len(key.encode()) > MAX_KEY_BYTES or len(value.encode()) > MAX_VALUE_BYTES:
            raise ValueError("key or value too large")
        if " " in key or "\n" in key or "\n" in value:
            raise ValueError("keys may not contain spaces; no newlines anywhere")
        conn = self._worker_conn(_partition(key, self._num_nodes()))
        reply = conn.request(f"PUT {key} {value}")
        if reply.startswith("ERR not-authenticated"):
            raise NotAuthenticated("PUT requires authentication")
        if not reply.startswith("OK"):
            raise EngineUnreachable(f"PUT failed: {reply}")

    def get(self, key: str) -> str:
        conn = self._worker_conn(_partition(key, self._num_nodes()))
        reply = conn.request(f"GET {key}")
        if reply.startswith("ERR not-found"):
            raise KeyNotFound(key)
        if reply.startswith("ERR not-authenticated"):
            raise NotAuthenticated("GET requires authentication")
        if not reply.startswith("OK"):
            raise EngineUnreachable(f"GET failed: {reply}")
        return reply.split(" ", 1)[1] if " " in reply else ""

    def worker_key_count(self, index: int) -> int:
        reply = self._worker_conn(index).request("COUNT")
        if not reply.startswith("OK"):
            raise EngineUnreachable(f"COUNT failed: {reply}")
        return int(reply.split(" ", 1)[1])

    def close(self) -> None:
        if self._authority is not None:
            self._authority.close()
            self._authority = None
        for conn in self._workers.values():
            conn.close()
        self._workers.clear()

    def __enter__(self) -> "EngineClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def superuser_set_password(db: str, resolver, username: str, new_value: str, *,
                           authority_port: int, storage_port: int,
                           superuser_password: str,
                           timeout: float = 5.0) -> None:
    """One-shot password rotation through the engine superuser account."""
    client = EngineClient(db, resolver, authority_port=authority_port,
                          storage_port=storage_port, timeout=timeout)
    try:
        try:
            client.authenticate("root", superuser_password)
        except AuthFailed:
            raise SuperuserAuthFailed(f"superuser rejected for {db}")
        client.set_password(username, new_value)
    finally:
        client.close()
