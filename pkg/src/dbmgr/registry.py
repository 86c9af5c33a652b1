"""Durable catalog of databases, their descriptors and lifecycle status.

Status is persisted as ``status.json`` inside each database's central folder;
the index is a JSON document at the configured state root. ``transition`` is
the single serialization point: a per-database compare-and-set on durable
state, so concurrent callers see exactly one winner.
"""

from __future__ import annotations

import re
import threading
import uuid
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (DuplicateName, IllegalEdge, InvalidName, InvalidNodeCount,
                     NotFound, WrongCurrentStatus)
from .util import append_jsonl, read_json, read_jsonl, rfc3339, write_json_atomic

NAME_RE = re.compile(r"^[a-z][a-z0-9_-]{0,62}$")

STOPPED = "stopped"
STARTING = "starting"
STARTED = "started"
STOPPING = "stopping"
CHECKPOINTING = "checkpointing"

STATUS_VALUES = (STOPPED, STARTING, STARTED, STOPPING, CHECKPOINTING)

# The complete permitted-edge set. Start failures route Starting -> Stopping
# (the epilog still runs) rather than jumping straight back to Stopped.
PERMITTED_EDGES = frozenset({
    (STOPPED, STARTING),
    (STARTING, STARTED),
    (STARTING, STOPPING),
    (STARTED, STOPPING),
    (STOPPING, STOPPED),
    (STOPPED, CHECKPOINTING),
    (CHECKPOINTING, STOPPED),
})

ACTIONS_BY_STATUS = {
    STOPPED: frozenset({"Start", "Checkpoint", "ViewInfo"}),
    STARTED: frozenset({"Stop", "ViewInfo"}),
    STARTING: frozenset({"ViewInfo"}),
    STOPPING: frozenset({"ViewInfo"}),
    CHECKPOINTING: frozenset({"ViewInfo"}),
}


def permitted_actions(status_value: str) -> frozenset[str]:
    return ACTIONS_BY_STATUS[status_value]


def validate_name(name: str) -> None:
    if not NAME_RE.match(name or ""):
        raise InvalidName(f"invalid database name {name!r}")


@dataclass(frozen=True)
class DatabaseDescriptor:
    name: str
    engine: str
    engine_version: str
    num_nodes: int
    security_group: str
    central_path: Path
    created_at: str

    def validate(self) -> None:
        validate_name(self.name)
        if int(self.num_nodes) < 1:
            raise InvalidNodeCount(f"num_nodes must be >= 1, got {self.num_nodes}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "engine": self.engine,
            "engine_version": self.engine_version,
            "num_nodes": self.num_nodes,
            "security_group": self.security_group,
            "central_path": str(self.central_path),
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatabaseDescriptor":
        return cls(
            name=d["name"],
            engine=d["engine"],
            engine_version=d["engine_version"],
            num_nodes=int(d["num_nodes"]),
            security_group=d["security_group"],
            central_path=Path(d["central_path"]),
            created_at=d["created_at"],
        )


@dataclass
class DatabaseStatus:
    value: str
    since: str
    job_id: str | None = None
    started_by: str | None = None

    def to_dict(self) -> dict:
        return {"value": self.value, "since": self.since,
                "job_id": self.job_id, "started_by": self.started_by}

    @classmethod
    def from_dict(cls, d: dict) -> "DatabaseStatus":
        return cls(value=d["value"], since=d["since"],
                   job_id=d.get("job_id"), started_by=d.get("started_by"))


@dataclass(frozen=True)
class TransitionReceipt:
    name: str
    previous: str
    value: str
    since: str
    job_id: str | None


@dataclass(frozen=True)
class DatabaseSummary:
    name: str
    engine_label: str
    status: str
    actions: frozenset[str] = field(default_factory=frozenset)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "type": self.engine_label,
            "status": self.status,
            "actions": sorted(self.actions),
        }


class Registry:
    """Catalog keyed by database name, backed by the state root."""

    def __init__(self, state_root: Path):
        self.state_root = Path(state_root)
        self.state_root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.state_root / "registry.json"
        self._index_lock = threading.Lock()
        self._name_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._name_locks_guard = threading.Lock()

    # --- index ---------------------------------------------------------

    def _load_index(self) -> dict:
        if not self.index_path.exists():
            return {"version": 1, "databases": {}}
        return read_json(self.index_path)

    def _save_index(self, index: dict) -> None:
        write_json_atomic(self.index_path, index)

    def _lock_for(self, name: str) -> threading.Lock:
        with self._name_locks_guard:
            return self._name_locks[name]

    # --- paths ---------------------------------------------------------

    def _descriptor(self, index: dict, name: str) -> DatabaseDescriptor:
        entry = index["databases"].get(name)
        if entry is None:
            raise NotFound(f"no database named {name!r}")
        return DatabaseDescriptor.from_dict(entry["descriptor"])

    def status_path(self, name: str) -> Path:
        return self.get_descriptor(name).central_path / "status.json"

    def history_path(self, name: str) -> Path:
        return self.get_descriptor(name).central_path / "status_history.jsonl"

    # --- operations ----------------------------------------------------

    def register(self, descriptor: DatabaseDescriptor) -> str:
        descriptor.validate()
        central = Path(descriptor.central_path)
        if not central.is_dir():
            raise NotFound(f"central path {central} does not exist")
        with self._index_lock:
            index = self._load_index()
            if descriptor.name in index["databases"]:
                raise DuplicateName(f"database {descriptor.name!r} already registered")
            db_id = uuid.uuid4().hex
            status = DatabaseStatus(value=STOPPED, since=rfc3339())
            write_json_atomic(central / "status.json", status.to_dict())
            append_jsonl(central / "status_history.jsonl", status.to_dict())
            index["databases"][descriptor.name] = {
                "id": db_id,
                "descriptor": descriptor.to_dict(),
            }
            self._save_index(index)
        return db_id

    def exists(self, name: str) -> bool:
        with self._index_lock:
            return name in self._load_index()["databases"]

    def names(self) -> list[str]:
        with self._index_lock:
            return sorted(self._load_index()["databases"])

    def get_descriptor(self, name: str) -> DatabaseDescriptor:
        with self._index_lock:
            return self._descriptor(self._load_index(), name)

    def get_status(self, name: str) -> DatabaseStatus:
        path = self.get_descriptor(name).central_path / "status.json"
        return DatabaseStatus.from_dict(read_json(path))

    def transition(self, name: str, from_value: str, to_value: str, *,
                   job_id: str | None = None,
                   started_by: str | None = None) -> TransitionReceipt:
        """Atomic compare-and-set of the durable status.

        Fails with IllegalEdge when (from, to) is not a permitted edge and
        with WrongCurrentStatus when the durable status differs from
        ``from_value``. First durable write wins under concurrency.
        """
        for v in (from_value, to_value):
            if v not in STATUS_VALUES:
                raise IllegalEdge(f"unknown status value {v!r}")
        if (from_value, to_value) not in PERMITTED_EDGES:
            raise IllegalEdge(f"no edge {from_value} -> {to_value}")
        descriptor = self.get_descriptor(name)
        status_path = descriptor.central_path / "status.json"
        with self._lock_for(name):
            current = DatabaseStatus.from_dict(read_json(status_path))
            if current.value != from_value:
                raise WrongCurrentStatus(
                    f"{name} is {current.value}, not {from_value}",
                    actual=current.value)
            if to_value == STOPPED:
                new_job, new_starter = None, None
            else:
                new_job = job_id if job_id is not None else current.job_id
                new_starter = started_by if started_by is not None else current.started_by
                if to_value == CHECKPOINTING:
                    new_starter = None
            new = DatabaseStatus(value=to_value, since=rfc3339(),
                                 job_id=new_job, started_by=new_starter)
            write_json_atomic(status_path, new.to_dict())
            append_jsonl(descriptor.central_path / "status_history.jsonl", new.to_dict())
        return TransitionReceipt(name=name, previous=from_value,
                                 value=to_value, since=new.since, job_id=new.job_id)

    def force_status(self, name: str, value: str, *, note: str) -> None:
        """Administrative escape hatch for crash recovery; audited in history."""
        if value not in STATUS_VALUES:
            raise IllegalEdge(f"unknown status value {value!r}")
        descriptor = self.get_descriptor(name)
        with self._lock_for(name):
            new = DatabaseStatus(value=value, since=rfc3339())
            write_json_atomic(descriptor.central_path / "status.json", new.to_dict())
            entry = new.to_dict()
            entry["forced"] = True
            entry["note"] = note
            append_jsonl(descriptor.central_path / "status_history.jsonl", entry)

    def status_history(self, name: str) -> list[dict]:
        descriptor = self.get_descriptor(name)
        return read_jsonl(descriptor.central_path / "status_history.jsonl")

    def list_databases(self, caller_groups: set[str] | frozenset[str]) -> list[DatabaseSummary]:
        """Summaries for databases whose security group the caller holds."""
        groups = set(caller_groups)
        with self._index_lock:
            index = self._load_index()
        out = []
        for name in sorted(index["databases"]):
            descriptor = DatabaseDescriptor.from_dict(index["databases"][name]["descriptor"])
            if descriptor.security_group not in groups:
                continue
            status = DatabaseStatus.from_dict(read_json(descriptor.central_path / "status.json"))
            out.append(DatabaseSummary(
                name=name,
                engine_label=f"{descriptor.engine} {descriptor.engine_version}",
                status=status.value,
                actions=permitted_actions(status.value),
            ))
        return out
