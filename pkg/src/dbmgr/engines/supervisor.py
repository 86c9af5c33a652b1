"""Spawn, health-check and stop engine daemons on the simulated nodes.

Startup respects each service's dependency DAG across nodes: a service is not
spawned until every instance of its dependencies (on whichever nodes they run)
is healthy. Shutdown runs in reverse: a daemon is only terminated once no live
dependent remains anywhere, with a grace period before force-kill.
"""

from __future__ import annotations

import json
import os
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..config import EngineSettings
from ..errors import AuthMismatch, DependencyStartFailed, EngineUnreachable
from .defs import EngineKind, ServiceSpec

DAEMON_EXIT_AUTH_MISMATCH = 7


@dataclass
class ServiceProc:
    service: ServiceSpec
    node_index: int
    address: tuple[str, int] | None = None
    proc: subprocess.Popen | None = None
    stopped: bool = False

    @property
    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None


@dataclass
class EngineHandle:
    db: str
    kind: EngineKind
    num_nodes: int
    procs: dict[tuple[str, int], ServiceProc] = field(default_factory=dict)
    start_log: list[tuple[float, str, int]] = field(default_factory=list)
    anomalies: list[str] = field(default_factory=list)
    stopped: bool = False
    _cv: threading.Condition = field(default_factory=threading.Condition)
    _started: set = field(default_factory=set)
    _aborted: bool = False

    def record_started(self, service: ServiceSpec, node_index: int,
                       sp: ServiceProc | None) -> None:
        with self._cv:
            if sp is not None:
                self.procs[(service.name, node_index)] = sp
            self.start_log.append((time.monotonic(), service.name, node_index))
            self._started.add((service.name, node_index))
            self._cv.notify_all()

    def abort_start(self) -> None:
        """Called when a sibling prolog fails, so dependency waiters bail."""
        with self._cv:
            self._aborted = True
            self._cv.notify_all()

    def wait_started(self, wanted: set, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        with self._cv:
            while not wanted <= self._started:
                if self._aborted:
                    return False
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cv.wait(remaining)
            return True

    def note(self, message: str) -> None:
        with self._cv:
            self.anomalies.append(message)


def ping(address: tuple[str, int], timeout: float = 2.0) -> int | None:
    """Returns the responding daemon's pid, or None when unreachable."""
    try:
        with socket.create_connection(address, timeout=timeout) as sock:
            fh = sock.makefile("rw", encoding="utf-8", newline="\n")
            fh.write("PING\n")
            fh.flush()
            reply = fh.readline().strip()
    except OSError:
        return None
    if not reply.startswith("OK"):
        return None
    parts = reply.split(" ")
    return int(parts[2]) if len(parts) >= 3 and parts[2].isdigit() else -1


class EngineSupervisor:
    def __init__(self, settings: EngineSettings):
        self.settings = settings

    def service_port(self, service: ServiceSpec) -> int:
        assert service.port_offset is not None
        return self.settings.port_base + service.port_offset

    def new_handle(self, db: str, kind: EngineKind, num_nodes: int) -> EngineHandle:
        return EngineHandle(db=db, kind=kind, num_nodes=num_nodes)

    # --- start ------------------------------------------------------------

    def _instances_of(self, kind: EngineKind, service_name: str,
                      num_nodes: int) -> set:
        svc = kind.service(service_name)
        nodes = range(num_nodes) if svc.scope == "all" else (0,)
        return {(service_name, i) for i in nodes}

    def start_node_services(self, handle: EngineHandle, *, db: str,
                            node_ip: str, node_index: int, master_ip: str,
                            local_db_dir: Path, secret_paths,
                            on_spawn=None, config_mutator=None) -> None:
        """Start this node's share of the engine, honoring dependencies."""
        kind = handle.kind
        for svc in kind.services_for_node(node_index):
            for dep in svc.depends_on:
                wanted = self._instances_of(kind, dep, handle.num_nodes)
                if not handle.wait_started(wanted, self.settings.health_timeout):
                    raise DependencyStartFailed(
                        f"{svc.name} on node {node_index}: dependency {dep} "
                        f"did not come up")
            if svc.kind == "noop":
                handle.record_started(svc, node_index, None)
                continue
            sp = self._spawn_daemon(handle, svc, db=db, node_ip=node_ip,
                                    node_index=node_index, master_ip=master_ip,
                                    local_db_dir=local_db_dir,
                                    secret_paths=secret_paths,
                                    on_spawn=on_spawn,
                                    config_mutator=config_mutator)
            handle.record_started(svc, node_index, sp)

    def _spawn_daemon(self, handle: EngineHandle, svc: ServiceSpec, *, db: str,
                      node_ip: str, node_index: int, master_ip: str,
                      local_db_dir: Path, secret_paths, on_spawn,
                      config_mutator) -> ServiceProc:
        kind = handle.kind
        port = self.service_port(svc)
        cfg = {
            "db": db,
            "engine": kind.name,
            "service": svc.name,
            "role": svc.role,
            "ip": node_ip,
            "port": port,
            "data_dir": str(local_db_dir / "data" / svc.name),
            "shared_secret_path": str(secret_paths.shared),
            "superuser_path": str(secret_paths.superuser),
            "node_index": node_index,
            "num_nodes": handle.num_nodes,
            "join_timeout": self.settings.health_timeout,
        }
        if svc.role == "storage":
            cfg["authority_host"] = master_ip
            cfg["authority_port"] = self.service_port(kind.authority)
        if config_mutator is not None:
            cfg = config_mutator(node_index, svc.name, cfg)
        cfg_path = local_db_dir / f"daemon-{svc.name}.json"
        cfg_path.write_text(json.dumps(cfg, indent=2) + "\n")
        log_dir = local_db_dir / "logs"
        log_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(log_dir / f"{svc.name}.log", "ab")
        env = dict(os.environ)
        pkg_parent = str(Path(__file__).resolve().parents[2])
        env["PYTHONPATH"] = pkg_parent + os.pathsep + env.get("PYTHONPATH", "")
        proc = subprocess.Popen(
            [sys.executable, "-m", "dbmgr.engines.daemon", str(cfg_path)],
            stdout=log_file, stderr=log_file, env=env)
        log_file.close()
        if on_spawn is not None:
            on_spawn(svc.name, node_index, proc.pid)
        sp = ServiceProc(service=svc, node_index=node_index,
                         address=(cfg["ip"], cfg["port"]), proc=proc)
        deadline = time.monotonic() + self.settings.health_timeout
        while time.monotonic() < deadline:
            code = proc.poll()
            if code is not None:
                if code == DAEMON_EXIT_AUTH_MISMATCH:
                    raise AuthMismatch(
                        f"{svc.name} on node {node_index}: shared secret rejected")
                raise DependencyStartFailed(
                    f"{svc.name} on node {node_index} exited with code {code}")
            # Require the answering pid to match: a stale daemon on a recycled
            # address must not pass for this one.
            if ping(sp.address, timeout=0.5) == proc.pid:
                return sp
            time.sleep(0.01)
        proc.kill()
        raise DependencyStartFailed(
            f"{svc.name} on node {node_index} did not become healthy")

    # --- stop ---------------------------------------------------------------

    def _live_dependents(self, handle: EngineHandle, service_name: str) -> bool:
        dependents = {d.name for d in handle.kind.dependents_of(service_name)}
        return any(sp.alive for sp in handle.procs.values()
                   if sp.service.name in dependents)

    def stop_node_services(self, handle: EngineHandle, node_index: int) -> None:
        """Stop this node's daemons in reverse dependency order.

        Idempotent per daemon; a daemon found already dead is recorded as an
        anomaly rather than an error, and daemons that outlive the grace
        period are force-killed and reported.
        """
        kind = handle.kind
        grace = self.settings.stop_grace
        for svc in reversed(kind.services_for_node(node_index)):
            if svc.kind == "noop":
                continue
            sp = handle.procs.get((svc.name, node_index))
            if sp is None or sp.stopped:
                continue
            deadline = time.monotonic() + grace
            while self._live_dependents(handle, svc.name):
                if time.monotonic() >= deadline:
                    handle.note(f"stop-timeout: dependents of {svc.name} still "
                                f"alive on node {node_index}; proceeding")
                    break
                time.sleep(0.01)
            if not sp.alive:
                if sp.proc is not None and sp.proc.poll() is not None:
                    handle.note(f"{svc.name} on node {node_index} was already dead")
                sp.stopped = True
                if sp.proc is not None:
                    sp.proc.wait()
                continue
            sp.proc.terminate()
            try:
                sp.proc.wait(timeout=grace)
            except subprocess.TimeoutExpired:
                sp.proc.kill()
                sp.proc.wait()
                handle.note(f"{svc.name} on node {node_index} force-killed "
                            f"after {grace}s grace")
            sp.stopped = True

    # --- health ---------------------------------------------------------------

    def ping_all(self, handle: EngineHandle) -> None:
        for sp in handle.procs.values():
            if sp.stopped:
                continue
            if not sp.alive or ping(sp.address) != sp.proc.pid:
                raise EngineUnreachable(
                    f"{sp.service.name} on node {sp.node_index} does not answer")
