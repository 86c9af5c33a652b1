"""Shared fixtures: isolated configs with unique loopback subnets and ports."""

from __future__ import annotations

import itertools
import time

import pytest

from dbmgr.config import default_config
from dbmgr.lifecycle import build_orchestrator
from dbmgr.registry import STOPPED

# Every test that touches the network gets its own /24 inside 127.64.0.0/16
# and its own engine port base, so a leaked daemon can never collide with a
# later test.
_NET_COUNTER = itertools.count(1)


@pytest.fixture
def unique_net():
    n = next(_NET_COUNTER)
    return {"ip_base": f"127.64.{n % 250 + 1}.0",
            "port_base": 10000 + (n * 7) % 20000}


@pytest.fixture
def make_config(tmp_path, unique_net):
    def factory(nodes: int = 8, subdir: str = "sys"):
        cfg = default_config(tmp_path / subdir)
        cfg.cluster.nodes = nodes
        cfg.cluster.ip_base = unique_net["ip_base"]
        cfg.engines.port_base = unique_net["port_base"]
        cfg.engines.health_timeout = 10.0
        cfg.engines.stop_grace = 4.0
        return cfg
    return factory


DEFAULT_USERS = {
    "admin": ([], True),
    "alice": (["secgroup"], False),
    "bob": (["othergrp"], False),
    "carol": (["secgroup", "othergrp"], False),
    "eve": (["secgroup"], False),
}


def populate_identities(orch, users: dict | None = None) -> None:
    for name, (groups, admin) in (users or DEFAULT_USERS).items():
        orch.identities.add_user(name, groups, admin=admin)


@pytest.fixture
def orch(make_config):
    orchestrator = build_orchestrator(make_config())
    populate_identities(orchestrator)
    yield orchestrator
    orchestrator.shutdown()
    _kill_leftover_daemons(orchestrator)


def _kill_leftover_daemons(orchestrator) -> None:
    """Safety net: reap engine daemons a failed test may have orphaned."""
    import os
    import signal

    from dbmgr.util import read_json

    for name in orchestrator.registry.names():
        crumb = orchestrator.registry.get_descriptor(name).central_path / "job.json"
        if not crumb.exists():
            continue
        try:
            data = read_json(crumb)
        except ValueError:
            continue
        for entry in data.get("pids", []):
            try:
                os.kill(entry["pid"], signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                pass


def wait_status(orch, name: str, value: str = STOPPED, timeout: float = 30.0) -> str:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        current = orch.registry.get_status(name).value
        if current == value:
            return current
        time.sleep(0.02)
    return orch.registry.get_status(name).value
