"""The five lifecycle operations: create, start, stop, checkpoint, restore.

Start and stop are driven through scheduler jobs on the "db" queue: the
prolog on each allocated node registers DNS, copies data from central storage
to local disk, starts the engine services in dependency order, rotates the
user access key (master node only) and marks the database started; the epilog
runs the exact reverse. Checkpoints run as single-node jobs against a stopped
database; restore is offline file surgery performed by an administrator.
"""

from __future__ import annotations

import os
import re
import shutil
import signal
import tarfile
import threading
import time
import uuid
from dataclasses import dataclass
from functools import partial
from pathlib import Path

from . import migrate, registry as registry_mod
from .cluster import Cluster, HookContext, JobHandle, JobSpec, SimulatedCrash
from .config import Config
from .dyndns import RecordStore
from .engines.client import EngineClient, superuser_set_password
from .engines.defs import EngineKind, init_storage, node_data_dir, resolve_kind
from .engines.supervisor import EngineHandle, EngineSupervisor
from .errors import (ArchiveCorrupt, ArchiveFailed, CheckpointNotFound,
                     DbmError, DuplicateName, EngineInitFailed,
                     InsufficientResources, NotFound, PermissionDenied,
                     WrongCurrentStatus, WrongPhase)
from .registry import (CHECKPOINTING, STARTED, STARTING, STOPPED, STOPPING,
                       DatabaseDescriptor, Registry)
from .security import IdentityTable, OwnershipMap, SecurityService
from .util import compact_utc_stamp, read_json, rfc3339, write_json_atomic

CHECKPOINT_ID_RE = re.compile(r"^checkpoint-[0-9TZ]+(-[0-9]+)?$")

COPY_SENTINEL = ".copy-complete"


@dataclass(frozen=True)
class CheckpointRecord:
    id: str
    archive_path: Path
    created_by: str
    created_at: str
    size_bytes: int

    def to_dict(self) -> dict:
        return {"id": self.id, "archive_path": str(self.archive_path),
                "created_by": self.created_by, "created_at": self.created_at,
                "size_bytes": self.size_bytes}


class _Latch:
    """Countdown latch; arrive() returns True only for the last arriver."""

    def __init__(self, count: int):
        self._count = count
        self._lock = threading.Lock()

    def arrive(self) -> bool:
        with self._lock:
            self._count -= 1
            return self._count == 0


class _Breadcrumb:
    """Durable per-start job record used by crash recovery."""

    def __init__(self, path: Path, initial: dict):
        self.path = path
        self._lock = threading.Lock()
        self._data = dict(initial)
        self._flush()

    def _flush(self) -> None:
        write_json_atomic(self.path, self._data)

    def update(self, **kv) -> None:
        with self._lock:
            self._data.update(kv)
            self._flush()

    def append(self, key: str, item) -> None:
        with self._lock:
            self._data.setdefault(key, []).append(item)
            self._flush()


def build_orchestrator(config: Config, *, step_observer=None) -> "Orchestrator":
    """Construct the full component stack over one configuration."""
    config.ensure_dirs()
    identities = IdentityTable(config.identity_file,
                               service_user=config.service_user)
    ownership = OwnershipMap(config.ownership_file,
                             service_user=config.service_user)
    security = SecurityService(identities, ownership, config.keys_root,
                               service_user=config.service_user)
    reg = Registry(config.state_root)
    cluster = Cluster(config.cluster, is_admin=identities.is_admin,
                      step_observer=step_observer)
    dns_store = RecordStore(config.state_root / "dns", config.dns)
    return Orchestrator(config, registry=reg, cluster=cluster,
                        dns_store=dns_store, security=security,
                        identities=identities)


class Orchestrator:
    def __init__(self, config: Config, *, registry: Registry, cluster: Cluster,
                 dns_store: RecordStore, security: SecurityService,
                 identities: IdentityTable):
        self.config = config
        self.registry = registry
        self.cluster = cluster
        self.dns = dns_store
        self.security = security
        self.identities = identities
        self.supervisor = EngineSupervisor(config.engines)
        self._restore_locks: dict[str, threading.Lock] = {}
        self._restore_guard = threading.Lock()
        # Test seam: when set, the master-node prolog simulates orchestrator
        # death right after the named step completes.
        self._crash_after_step: str | None = None

    # --- authorization helpers ------------------------------------------------

    def _require_admin(self, caller: str) -> None:
        if not self.identities.is_admin(caller):
            raise PermissionDenied(f"{caller!r} is not an administrator")

    def _require_member(self, caller: str, group: str) -> None:
        if not self.identities.in_group(caller, group):
            raise PermissionDenied(f"{caller!r} is not in group {group!r}")

    def _descriptor(self, name: str) -> DatabaseDescriptor:
        return self.registry.get_descriptor(name)

    def _breadcrumb_path(self, descriptor: DatabaseDescriptor) -> Path:
        return descriptor.central_path / "job.json"

    # --- creation ---------------------------------------------------------------

    def db_create(self, engine: str, num_nodes: int, name: str, group: str,
                  caller: str, *, engine_version: str | None = None) -> DatabaseDescriptor:
        self._require_admin(caller)
        kind = resolve_kind(engine)
        registry_mod.validate_name(name)
        central = self.config.central_root / name
        if self.registry.exists(name) or central.exists():
            raise DuplicateName(f"database {name!r} already exists")
        descriptor = DatabaseDescriptor(
            name=name, engine=kind.name,
            engine_version=engine_version or kind.default_version,
            num_nodes=num_nodes, security_group=group,
            central_path=central, created_at=rfc3339())
        descriptor.validate()
        central.mkdir(parents=True)
        try:
            try:
                init_storage(kind, central, num_nodes)
            except DbmError:
                raise
            except Exception as exc:
                raise EngineInitFailed(str(exc)) from exc
            self.security.provision_secrets(name, central)
            self.security.ownership.set_owner(central, self.config.service_user)
            self.registry.register(descriptor)
        except BaseException:
            shutil.rmtree(central, ignore_errors=True)
            raise
        return descriptor

    # --- start --------------------------------------------------------------------

    def db_start(self, name: str, caller: str) -> JobHandle:
        descriptor = self._descriptor(name)
        self._require_member(caller, descriptor.security_group)
        free = self.cluster.free_nodes()
        if free < descriptor.num_nodes:
            raise InsufficientResources(free=free, requested=descriptor.num_nodes)
        kind = resolve_kind(descriptor.engine)
        job_id = f"job-{uuid.uuid4().hex[:12]}"
        self.registry.transition(name, STOPPED, STARTING,
                                 job_id=job_id, started_by=caller)
        crumb = _Breadcrumb(self._breadcrumb_path(descriptor), {
            "job_id": job_id, "db": name, "state": "active",
            "started_by": caller, "nodes": [], "pids": [], "dns": [],
        })
        engine_handle = self.supervisor.new_handle(name, kind, descriptor.num_nodes)
        started_latch = _Latch(descriptor.num_nodes)
        stopped_latch = _Latch(descriptor.num_nodes)
        prolog = partial(self._start_prolog, descriptor=descriptor, kind=kind,
                         engine_handle=engine_handle, latch=started_latch,
                         job_id=job_id, crumb=crumb)
        epilog = partial(self._stop_epilog, descriptor=descriptor, kind=kind,
                         engine_handle=engine_handle, latch=stopped_latch,
                         job_id=job_id, crumb=crumb)
        spec = JobSpec(queue="db", num_nodes=descriptor.num_nodes, owner=caller,
                       prolog=prolog, epilog=epilog, payload=None, job_id=job_id)
        try:
            job = self.cluster.submit(spec)
        except InsufficientResources:
            # Lost the allocation race after transitioning; back out through
            # the legal failure path (no plan ran, nothing to undo).
            self.registry.transition(name, STARTING, STOPPING, job_id=job_id)
            self.registry.transition(name, STOPPING, STOPPED)
            crumb.update(state="aborted")
            raise
        crumb.update(nodes=[{"node_id": n.node_id, "ip": n.ip,
                             "local_root": str(n.local_root)} for n in job.nodes])
        return job

    def _start_prolog(self, ctx: HookContext, *, descriptor: DatabaseDescriptor,
                      kind: EngineKind, engine_handle: EngineHandle,
                      latch: _Latch, job_id: str, crumb: _Breadcrumb) -> None:
        name = descriptor.name
        node, i = ctx.node, ctx.node_index
        master_ip = ctx.job.nodes[0].ip
        local_db_dir = node.local_root / name
        try:
            with ctx.step("register_dns"):
                self.dns.upsert(f"{name}-{i}", node.ip)
                crumb.append("dns", f"{name}-{i}")
                if i == 0:
                    self.dns.upsert(name, node.ip)
                    crumb.append("dns", name)
            self._maybe_crash("register_dns", i)

            with ctx.step("copy_central_to_local"):
                local_db_dir.mkdir(parents=True, exist_ok=True)
                migrate.copy_tree(node_data_dir(descriptor.central_path, i),
                                  local_db_dir / "data",
                                  migrate.CopyMode.multi(),
                                  direction=migrate.CENTRAL_TO_LOCAL)
                (local_db_dir / COPY_SENTINEL).touch()
            self._maybe_crash("copy_central_to_local", i)

            with ctx.step("start_services"):
                self.supervisor.start_node_services(
                    engine_handle, db=name, node_ip=node.ip, node_index=i,
                    master_ip=master_ip, local_db_dir=local_db_dir,
                    secret_paths=self.security.secret_paths(descriptor.central_path),
                    on_spawn=lambda svc, idx, pid: crumb.append(
                        "pids", {"service": svc, "node_index": idx, "pid": pid}))
            self._maybe_crash("start_services", i)

            if i == 0:
                with ctx.step("rotate_access_key"):
                    self.security.rotate_access_key(
                        name, descriptor.security_group,
                        self._engine_password_setter(descriptor, kind))
                self._maybe_crash("rotate_access_key", i)

            with ctx.step("mark_started"):
                if latch.arrive():
                    self.supervisor.ping_all(engine_handle)
                    self.registry.transition(name, STARTING, STARTED,
                                             job_id=job_id)
        except SimulatedCrash:
            raise
        except BaseException:
            engine_handle.abort_start()
            raise

    def _maybe_crash(self, step: str, node_index: int) -> None:
        if self._crash_after_step == step and node_index == 0:
            raise SimulatedCrash(f"simulated orchestrator death after {step}")

    def _engine_password_setter(self, descriptor: DatabaseDescriptor,
                                kind: EngineKind):
        superuser = self.security.read_secret(descriptor.central_path, "superuser")
        return partial(superuser_set_password, descriptor.name, self.dns.resolve,
                       authority_port=self.supervisor.service_port(kind.authority),
                       storage_port=self.supervisor.service_port(kind.storage),
                       superuser_password=superuser)

    # --- stop --------------------------------------------------------------------

    def db_stop(self, name: str, caller: str) -> JobHandle:
        descriptor = self._descriptor(name)
        self._require_member(caller, descriptor.security_group)
        status = self.registry.get_status(name)
        if status.value != STARTED:
            raise WrongCurrentStatus(f"{name} is {status.value}, not started",
                                     actual=status.value)
        job_id = status.job_id
        if job_id is None or not self.cluster.has_job(job_id):
            raise NotFound(f"no live job for {name}; use an admin force stop")
        self.registry.transition(name, STARTED, STOPPING, job_id=job_id)
        try:
            self.cluster.signal_stop(job_id)
        except WrongPhase:
            pass  # a concurrent cancellation already woke the placeholder
        return self.cluster.get_job(job_id)

    def _ensure_stopping(self, name: str, job_id: str) -> None:
        # First epilog arrival flips the status; normal stops already did it.
        for _ in range(3):
            current = self.registry.get_status(name).value
            if current in (STOPPING, STOPPED):
                return
            if current in (STARTING, STARTED):
                try:
                    self.registry.transition(name, current, STOPPING, job_id=job_id)
                    return
                except WrongCurrentStatus:
                    continue
            return

    def _stop_epilog(self, ctx: HookContext, *, descriptor: DatabaseDescriptor,
                     kind: EngineKind, engine_handle: EngineHandle,
                     latch: _Latch, job_id: str, crumb: _Breadcrumb) -> None:
        name = descriptor.name
        node, i = ctx.node, ctx.node_index
        local_db_dir = node.local_root / name
        self._ensure_stopping(name, job_id)

        with ctx.step("stop_services"):
            self.supervisor.stop_node_services(engine_handle, i)

        with ctx.step("copy_local_to_central"):
            # Only ship data back if this node's inbound copy completed;
            # shipping a partial tree would clobber good central data.
            if (local_db_dir / COPY_SENTINEL).exists():
                migrate.copy_tree(local_db_dir / "data",
                                  node_data_dir(descriptor.central_path, i),
                                  migrate.CopyMode.multi(),
                                  direction=migrate.LOCAL_TO_CENTRAL)
            shutil.rmtree(local_db_dir, ignore_errors=True)

        with ctx.step("deregister_dns"):
            self.dns.delete(f"{name}-{i}")
            if i == 0:
                self.dns.delete(name)

        with ctx.step("mark_stopped"):
            if latch.arrive():
                self.registry.transition(name, STOPPING, STOPPED)
                crumb.update(state="done", anomalies=engine_handle.anomalies)

    # --- checkpoint --------------------------------------------------------------

    def checkpoints_dir(self, descriptor: DatabaseDescriptor) -> Path:
        return descriptor.central_path / "checkpoints"

    def db_checkpoint(self, name: str, caller: str, *, timeout: float = 300.0) -> CheckpointRecord:
        job, finish = self.db_checkpoint_begin(name, caller)
        return finish(timeout)

    def db_checkpoint_begin(self, name: str, caller: str):
        """Transition and submit; returns (job, finish) so callers can poll."""
        descriptor = self._descriptor(name)
        self._require_member(caller, descriptor.security_group)
        free = self.cluster.free_nodes()
        if free < 1:
            raise InsufficientResources(free=free, requested=1)
        job_id = f"job-{uuid.uuid4().hex[:12]}"
        self.registry.transition(name, STOPPED, CHECKPOINTING, job_id=job_id)
        result: dict = {}

        def payload(pctx) -> None:
            with pctx.step("archive"):
                result["record"] = self._create_archive(descriptor, caller)

        def noop_hook(_ctx) -> None:
            return

        spec = JobSpec(queue="db", num_nodes=1, owner=caller, prolog=noop_hook,
                       epilog=noop_hook, payload=payload, job_id=job_id)
        try:
            job = self.cluster.submit(spec)
        except InsufficientResources:
            self.registry.transition(name, CHECKPOINTING, STOPPED)
            raise

        def finish(timeout: float = 300.0) -> CheckpointRecord:
            if not job.wait_done(timeout):
                # Leave the status transient: an operator force-stop is the
                # honest recovery, not a silent flip back to stopped.
                raise ArchiveFailed(f"checkpoint job {job_id} did not finish "
                                    f"within {timeout}s")
            self.registry.transition(name, CHECKPOINTING, STOPPED)
            if job.payload_error is not None:
                raise ArchiveFailed(str(job.payload_error)) from job.payload_error
            return result["record"]

        return job, finish

    def _archive_entries(self, descriptor: DatabaseDescriptor,
                         kind: EngineKind) -> list[Path]:
        entries: list[Path] = []
        central = descriptor.central_path
        for subtree in kind.data_subtrees:
            root = central / subtree
            if not root.exists():
                continue
            entries.append(Path(subtree))
            for base, dirnames, filenames in os.walk(root):
                rel_base = Path(base).relative_to(central)
                for child in dirnames + filenames:
                    entries.append(rel_base / child)
        return sorted(entries)

    def _create_archive(self, descriptor: DatabaseDescriptor,
                        caller: str) -> CheckpointRecord:
        kind = resolve_kind(descriptor.engine)
        ck_dir = self.checkpoints_dir(descriptor)
        ck_dir.mkdir(exist_ok=True)
        self.security.ownership.set_owner(ck_dir, self.config.service_user)
        base_id = f"checkpoint-{compact_utc_stamp()}"
        ck_id, n = base_id, 1
        while (ck_dir / f"{ck_id}.tar").exists():
            n += 1
            ck_id = f"{base_id}-{n}"
        archive = ck_dir / f"{ck_id}.tar"
        tmp = ck_dir / f".{ck_id}.tar.partial"
        try:
            with tarfile.open(tmp, "w", format=tarfile.PAX_FORMAT) as tar:
                for rel in self._archive_entries(descriptor, kind):
                    full = descriptor.central_path / rel
                    info = tar.gettarinfo(full, arcname=str(rel))
                    # Normalized metadata: equal trees yield identical bytes.
                    info.uid = info.gid = 0
                    info.uname = info.gname = ""
                    info.mtime = 0
                    if info.isreg():
                        with open(full, "rb") as fh:
                            tar.addfile(info, fh)
                    else:
                        tar.addfile(info)
            os.replace(tmp, archive)
        except (OSError, tarfile.TarError) as exc:
            tmp.unlink(missing_ok=True)
            raise ArchiveFailed(str(exc)) from exc
        archive.chmod(0o600)
        self.security.ownership.set_owner(archive, self.config.service_user)
        record = CheckpointRecord(id=ck_id, archive_path=archive,
                                  created_by=caller, created_at=rfc3339(),
                                  size_bytes=archive.stat().st_size)
        write_json_atomic(ck_dir / f"{ck_id}.json", record.to_dict())
        return record

    def list_checkpoints(self, name: str, caller: str) -> list[CheckpointRecord]:
        descriptor = self._descriptor(name)
        self._require_member(caller, descriptor.security_group)
        ck_dir = self.checkpoints_dir(descriptor)
        records = []
        if ck_dir.is_dir():
            for meta in sorted(ck_dir.glob("checkpoint-*.json")):
                data = read_json(meta)
                records.append(CheckpointRecord(
                    id=data["id"], archive_path=Path(data["archive_path"]),
                    created_by=data["created_by"], created_at=data["created_at"],
                    size_bytes=int(data["size_bytes"])))
        return records

    # --- restore --------------------------------------------------------------------

    def _restore_lock(self, name: str) -> threading.Lock:
        with self._restore_guard:
            return self._restore_locks.setdefault(name, threading.Lock())

    def db_restore(self, name: str, checkpoint_id: str, caller: str) -> None:
        self._require_admin(caller)
        descriptor = self._descriptor(name)
        kind = resolve_kind(descriptor.engine)
        if not CHECKPOINT_ID_RE.match(checkpoint_id):
            raise CheckpointNotFound(f"malformed checkpoint id {checkpoint_id!r}")
        archive = self.checkpoints_dir(descriptor) / f"{checkpoint_id}.tar"
        if not archive.exists():
            raise CheckpointNotFound(f"{name} has no checkpoint {checkpoint_id}")
        with self._restore_lock(name):
            status = self.registry.get_status(name)
            if status.value != STOPPED:
                raise WrongCurrentStatus(
                    f"{name} is {status.value}, not stopped", actual=status.value)
            scratch = descriptor.central_path / f".restore-{uuid.uuid4().hex[:8]}"
            scratch.mkdir()
            try:
                try:
                    with tarfile.open(archive, "r") as tar:
                        for member in tar:
                            target = Path(member.name)
                            if (target.is_absolute() or ".." in target.parts
                                    or not target.parts
                                    or target.parts[0] not in kind.data_subtrees):
                                raise ArchiveCorrupt(
                                    f"unexpected archive member {member.name!r}")
                            tar.extract(member, scratch)
                except (tarfile.TarError, EOFError, OSError) as exc:
                    raise ArchiveCorrupt(str(exc)) from exc
                for subtree in kind.data_subtrees:
                    if not (scratch / subtree).exists():
                        raise ArchiveCorrupt(f"archive lacks subtree {subtree!r}")
                # Validated extraction: now swap the engine data into place.
                for subtree in kind.data_subtrees:
                    target = descriptor.central_path / subtree
                    if target.exists():
                        shutil.rmtree(target)
                    shutil.move(str(scratch / subtree), str(target))
            finally:
                shutil.rmtree(scratch, ignore_errors=True)

    # --- recovery -------------------------------------------------------------------

    def db_force_stop(self, name: str, caller: str) -> None:
        """Admin recovery for state orphaned by an orchestrator crash."""
        self._require_admin(caller)
        descriptor = self._descriptor(name)
        crumb_path = self._breadcrumb_path(descriptor)
        crumb = read_json(crumb_path) if crumb_path.exists() else None
        if crumb and crumb.get("state") == "active" and \
                self.cluster.has_job(crumb["job_id"]):
            job = self.cluster.get_job(crumb["job_id"])
            self.cluster.cancel(crumb["job_id"], caller)
            job.wait_done(timeout=120)
            return
        if crumb:
            for entry in crumb.get("pids", []):
                self._kill_pid(entry["pid"])
            for dns_name in crumb.get("dns", []):
                self.dns.delete(dns_name)
            for node_entry in crumb.get("nodes", []):
                shutil.rmtree(Path(node_entry["local_root"]) / name,
                              ignore_errors=True)
            crumb["state"] = "forced"
            write_json_atomic(crumb_path, crumb)
        if self.registry.get_status(name).value != STOPPED:
            self.registry.force_status(name, STOPPED,
                                       note=f"force-stop by {caller}")

    @staticmethod
    def _kill_pid(pid: int) -> None:
        try:
            os.kill(pid, signal.SIGTERM)
        except (ProcessLookupError, PermissionError):
            return
        deadline = time.monotonic() + 3.0
        while time.monotonic() < deadline:
            try:
                os.kill(pid, 0)
            except ProcessLookupError:
                return
            time.sleep(0.02)
        try:
            os.kill(pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass

    # --- queries ---------------------------------------------------------------------

    def list_databases(self, caller: str):
        return self.registry.list_databases(self.identities.groups(caller))

    def locate_access_key(self, name: str, caller: str) -> str:
        descriptor = self._descriptor(name)
        return self.security.locate_access_key(name, descriptor.security_group,
                                               caller)

    def dns_labels(self, name: str) -> list[str]:
        descriptor = self._descriptor(name)
        return [name] + [f"{name}-{i}" for i in range(descriptor.num_nodes)]

    def database_details(self, name: str, caller: str) -> dict:
        descriptor = self._descriptor(name)
        self._require_member(caller, descriptor.security_group)
        status = self.registry.get_status(name)
        return {
            "descriptor": descriptor.to_dict(),
            "status": status.to_dict(),
            "actions": sorted(registry_mod.permitted_actions(status.value)),
            "history": self.registry.status_history(name),
            "checkpoints": [r.to_dict() for r in self.list_checkpoints(name, caller)],
            "dns": {label: self.dns.resolve(label)
                    for label in self.dns_labels(name)},
        }

    def engine_client(self, name: str, *, resolver=None) -> EngineClient:
        descriptor = self._descriptor(name)
        kind = resolve_kind(descriptor.engine)
        return EngineClient(
            name, resolver or self.dns.resolve,
            authority_port=self.supervisor.service_port(kind.authority),
            storage_port=self.supervisor.service_port(kind.storage),
            num_nodes=descriptor.num_nodes)

    def shutdown(self) -> None:
        self.cluster.shutdown()
