"""Service configuration.

One JSON document configures the whole system; the path comes from
``--config`` or the ``DBM_CONFIG`` environment variable. See
docs/formats.md for the schema.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

CONFIG_ENV_VAR = "DBM_CONFIG"
USER_ENV_VAR = "DBM_USER"

DEFAULT_ZONE = "db.cluster.test."


@dataclass
class ClusterSettings:
    nodes: int = 8
    cluster_root: Path = Path("cluster")
    ip_base: str = "127.64.0.0"


@dataclass
class DnsSettings:
    zone: str = DEFAULT_ZONE
    default_ttl: int = 5
    ttl_max: int = 60
    udp_host: str = "127.0.0.1"
    udp_port: int = 0
    http_host: str = "127.0.0.1"
    http_port: int = 0


@dataclass
class GatewaySettings:
    host: str = "127.0.0.1"
    port: int = 0
    static_dir: Path | None = None
    token_ttl_seconds: int = 3600


@dataclass
class EngineSettings:
    port_base: int = 9470
    health_timeout: float = 20.0
    stop_grace: float = 5.0


@dataclass
class Config:
    state_root: Path
    central_root: Path
    keys_root: Path
    cluster: ClusterSettings = field(default_factory=ClusterSettings)
    dns: DnsSettings = field(default_factory=DnsSettings)
    gateway: GatewaySettings = field(default_factory=GatewaySettings)
    engines: EngineSettings = field(default_factory=EngineSettings)
    service_user: str = "dbsvc"

    @property
    def identity_file(self) -> Path:
        return self.state_root / "identities.json"

    @property
    def ownership_file(self) -> Path:
        return self.state_root / "ownership.json"

    @property
    def gateway_info_file(self) -> Path:
        return self.state_root / "gateway.json"

    def ensure_dirs(self) -> None:
        for p in (self.state_root, self.central_root, self.keys_root,
                  self.cluster.cluster_root):
            Path(p).mkdir(parents=True, exist_ok=True)

    def to_dict(self) -> dict:
        return {
            "state_root": str(self.state_root),
            "central_root": str(self.central_root),
            "keys_root": str(self.keys_root),
            "service_user": self.service_user,
            "cluster": {
                "nodes": self.cluster.nodes,
                "cluster_root": str(self.cluster.cluster_root),
                "ip_base": self.cluster.ip_base,
            },
            "dns": {
                "zone": self.dns.zone,
                "default_ttl": self.dns.default_ttl,
                "ttl_max": self.dns.ttl_max,
                "udp_host": self.dns.udp_host,
                "udp_port": self.dns.udp_port,
                "http_host": self.dns.http_host,
                "http_port": self.dns.http_port,
            },
            "gateway": {
                "host": self.gateway.host,
                "port": self.gateway.port,
                "static_dir": str(self.gateway.static_dir) if self.gateway.static_dir else None,
                "token_ttl_seconds": self.gateway.token_ttl_seconds,
            },
            "engines": {
                "port_base": self.engines.port_base,
                "health_timeout": self.engines.health_timeout,
                "stop_grace": self.engines.stop_grace,
            },
        }

    def save(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        cluster = data.get("cluster", {})
        dns = data.get("dns", {})
        gateway = data.get("gateway", {})
        engines = data.get("engines", {})
        static_dir = gateway.get("static_dir")
        return cls(
            state_root=Path(data["state_root"]),
            central_root=Path(data["central_root"]),
            keys_root=Path(data["keys_root"]),
            service_user=data.get("service_user", "dbsvc"),
            cluster=ClusterSettings(
                nodes=int(cluster.get("nodes", 8)),
                cluster_root=Path(cluster.get("cluster_root", Path(data["state_root"]) / "cluster")),
                ip_base=cluster.get("ip_base", "127.64.0.0"),
            ),
            dns=DnsSettings(
                zone=dns.get("zone", DEFAULT_ZONE),
                default_ttl=int(dns.get("default_ttl", 5)),
                ttl_max=int(dns.get("ttl_max", 60)),
                udp_host=dns.get("udp_host", "127.0.0.1"),
                udp_port=int(dns.get("udp_port", 0)),
                http_host=dns.get("http_host", "127.0.0.1"),
                http_port=int(dns.get("http_port", 0)),
            ),
            gateway=GatewaySettings(
                host=gateway.get("host", "127.0.0.1"),
                port=int(gateway.get("port", 0)),
                static_dir=Path(static_dir) if static_dir else None,
                token_ttl_seconds=int(gateway.get("token_ttl_seconds", 3600)),
            ),
            engines=EngineSettings(
                port_base=int(engines.get("port_base", 9470)),
                health_timeout=float(engines.get("health_timeout", 20.0)),
                stop_grace=float(engines.get("stop_grace", 5.0)),
            ),
        )

    @classmethod
    def from_file(cls, path: Path | str) -> "Config":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def from_env(cls) -> "Config":
        path = os.environ.get(CONFIG_ENV_VAR)
        if not path:
            raise FileNotFoundError(f"{CONFIG_ENV_VAR} is not set")
        return cls.from_file(path)


def default_config(root: Path | str) -> Config:
    """Lay out a standard state tree under one root directory."""
    root = Path(root)
    return Config(
        state_root=root / "state",
        central_root=root / "central",
        keys_root=root / "keys",
        cluster=ClusterSettings(cluster_root=root / "cluster"),
    )
