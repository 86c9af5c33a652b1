#!/usr/bin/env python3
"""Narrated walkthrough: one database through its whole life.

Creates a scratch deployment under /tmp, then runs create -> start -> write
-> stop -> checkpoint -> corrupt -> restore -> verify, printing what the
system does at each step. Cleans up after itself.

    python demos/full_lifecycle_demo.py
"""

import shutil
import tempfile
from pathlib import Path

from dbmgr.config import default_config
from dbmgr.dyndns import DnsServer, wire_resolve
from dbmgr.lifecycle import build_orchestrator


def banner(text: str) -> None:
    print(f"\n=== {text} " + "=" * max(0, 60 - len(text)))


def main() -> None:
    root = Path(tempfile.mkdtemp(prefix="dbm-demo-"))
    config = default_config(root)
    config.cluster.ip_base = "127.64.250.0"
    config.engines.port_base = 24700
    orch = build_orchestrator(config)
    orch.identities.add_user("admin", [], admin=True)
    orch.identities.add_user("alice", ["secgroup"])
    dns_server = DnsServer(orch.dns).start()

    try:
        banner("create (administrator)")
        d = orch.db_create("toy-kv", 4, "dbname01", "secgroup", "admin")
        print(f"central folder: {d.central_path}")
        print(f"status: {orch.registry.get_status('dbname01').value}")

        banner("start (group member)")
        job = orch.db_start("dbname01", "alice")
        job.wait_phase("sleeping", 60)
        print(f"status: {orch.registry.get_status('dbname01').value}")
        print(f"allocated nodes: {[n.hostname for n in job.nodes]}")
        for label in orch.dns_labels("dbname01"):
            addr = wire_resolve(dns_server.udp_address,
                                f"{label}.{config.dns.zone}")
            print(f"  {label}.{config.dns.zone.rstrip('.')} -> {addr}")

        banner("write through the engine")
        key = orch.locate_access_key("dbname01", "alice")
        print(f"access key (group-readable, rotates every start): {key[:8]}…")
        with orch.engine_client("dbname01") as client:
            client.authenticate("dbuser", key)
            for i in range(100):
                client.put(f"sample-{i:03d}", f"value-{i}")
            print(f"wrote 100 pairs; sample readback: "
                  f"{client.get('sample-042')}")

        banner("stop: data migrates back to central storage")
        orch.db_stop("dbname01", "alice").wait_done(60)
        print(f"status: {orch.registry.get_status('dbname01').value}")
        print(f"free nodes: {orch.cluster.free_nodes()}")

        banner("checkpoint (stopped databases only)")
        record = orch.db_checkpoint("dbname01", "alice")
        print(f"archive: {record.archive_path.name} ({record.size_bytes} bytes)")

        banner("damage the data, then restore the checkpoint")
        job = orch.db_start("dbname01", "alice")
        job.wait_phase("sleeping", 60)
        key = orch.locate_access_key("dbname01", "alice")
        with orch.engine_client("dbname01") as client:
            client.authenticate("dbuser", key)
            for i in range(100):
                client.put(f"sample-{i:03d}", "CORRUPTED")
        orch.db_stop("dbname01", "alice").wait_done(60)
        orch.db_restore("dbname01", record.id, "admin")
        print("restored; verifying…")

        job = orch.db_start("dbname01", "alice")
        job.wait_phase("sleeping", 60)
        key = orch.locate_access_key("dbname01", "alice")
        with orch.engine_client("dbname01") as client:
            client.authenticate("dbuser", key)
            assert client.get("sample-042") == "value-42"
            print("sample-042 -> value-42 (checkpoint state recovered)")
        orch.db_stop("dbname01", "alice").wait_done(60)

        banner("status history")
        for entry in orch.registry.status_history("dbname01"):
            print(f"  {entry['since']}  {entry['value']}")
    finally:
        dns_server.stop()
        orch.shutdown()
        shutil.rmtree(root, ignore_errors=True)
        print("\ncleaned up", root)


if __name__ == "__main__":
    main()
