"""Engine kinds, their service topology and on-disk image layout.

Two toy engines cover the two daemon topologies we care about:

* ``toy-kv`` — a coordinator over a simulated filesystem image plus tablet
  workers on every node (Accumulo-shaped stack, with kerberos/hdfs/zookeeper
  present as ordered no-op service slots).
* ``toy-tabular`` — a catalog daemon that must be up before any worker
  (SciDB-shaped stack, where the catalog plays the PostgreSQL prerequisite).

Each kind declares an ordered service list (a topological order of its
dependency DAG) and the data-file subtrees used by checkpoint restore.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from ..errors import InvalidName, NotEmpty

MASTER = "master"
ALL_NODES = "all"

AUTHORITY = "authority"
STORAGE = "storage"

MAX_KEY_BYTES = 1024
MAX_VALUE_BYTES = 64 * 1024


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    kind: str                      # "noop" | "daemon"
    scope: str                     # MASTER | ALL_NODES
    start_order: int
    depends_on: tuple[str, ...] = ()
    role: str | None = None        # AUTHORITY | STORAGE for daemons
    port_offset: int | None = None

    def runs_on(self, node_index: int) -> bool:
        return self.scope == ALL_NODES or node_index == 0


@dataclass(frozen=True)
class EngineKind:
    name: str
    default_version: str
    services: tuple[ServiceSpec, ...]
    data_subtrees: tuple[str, ...] = ("data",)

    def services_for_node(self, node_index: int) -> list[ServiceSpec]:
        return sorted((s for s in self.services if s.runs_on(node_index)),
                      key=lambda s: s.start_order)

    def service(self, name: str) -> ServiceSpec:
        for s in self.services:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def authority(self) -> ServiceSpec:
        return next(s for s in self.services if s.role == AUTHORITY)

    @property
    def storage(self) -> ServiceSpec:
        return next(s for s in self.services if s.role == STORAGE)

    def dependents_of(self, service_name: str) -> list[ServiceSpec]:
        return [s for s in self.services if service_name in s.depends_on]


TOY_KV = EngineKind(
    name="toy-kv",
    default_version="1.6",
    services=(
        ServiceSpec("kerberos", "noop", MASTER, 1),
        ServiceSpec("hdfs", "noop", ALL_NODES, 2),
        ServiceSpec("zookeeper", "noop", MASTER, 3, depends_on=("hdfs",)),
        ServiceSpec("coordinator", "daemon", MASTER, 4,
                    depends_on=("zookeeper", "hdfs"), role=AUTHORITY, port_offset=0),
        ServiceSpec("tablet", "daemon", ALL_NODES, 5,
                    depends_on=("coordinator",), role=STORAGE, port_offset=1),
    ),
)

TOY_TABULAR = EngineKind(
    name="toy-tabular",
    default_version="14.3",
    services=(
        ServiceSpec("catalog", "daemon", MASTER, 1, role=AUTHORITY, port_offset=0),
        ServiceSpec("worker", "daemon", ALL_NODES, 2,
                    depends_on=("catalog",), role=STORAGE, port_offset=1),
    ),
)

ENGINE_KINDS = {TOY_KV.name: TOY_KV, TOY_TABULAR.name: TOY_TABULAR}

# Command-line spellings accepted for the two kinds.
ENGINE_ALIASES = {"accumulo": TOY_KV.name, "scidb": TOY_TABULAR.name}


def resolve_kind(name: str) -> EngineKind:
    canonical = ENGINE_ALIASES.get(name, name)
    kind = ENGINE_KINDS.get(canonical)
    if kind is None:
        raise InvalidName(f"unknown engine kind {name!r}")
    return kind


def node_data_dir(central_path: Path, node_index: int) -> Path:
    return Path(central_path) / "data" / f"node-{node_index}"


def service_data_dir(central_path: Path, node_index: int, service: ServiceSpec) -> Path:
    return node_data_dir(central_path, node_index) / service.name


def init_storage(kind: EngineKind, central_path: Path, num_nodes: int) -> None:
    """Create the engine's initial image inside an empty central folder."""
    central_path = Path(central_path)
    if any(central_path.iterdir()):
        raise NotEmpty(f"{central_path} is not empty")
    for i in range(num_nodes):
        node_dir = node_data_dir(central_path, i)
        for svc in kind.services_for_node(i):
            if svc.kind != "daemon":
                continue
            svc_dir = node_dir / svc.name
            svc_dir.mkdir(parents=True, exist_ok=True)
            if svc.role == AUTHORITY:
                if kind.name == TOY_KV.name:
                    manifest = svc_dir / "manifest.json"
                    manifest.write_text(json.dumps({"format": 1, "tables": []},
                                                   indent=2) + "\n")
                else:
                    catalog = svc_dir / "catalog.json"
                    catalog.write_text(json.dumps(
                        {"schema_version": 1, "tables": {}}, indent=2) + "\n")
                (svc_dir / "auth.json").write_text(
                    json.dumps({"dbuser_sha256": None}) + "\n")
            else:
                (svc_dir / "manifest.json").write_text(
                    json.dumps({"node": i, "format": 1}) + "\n")
