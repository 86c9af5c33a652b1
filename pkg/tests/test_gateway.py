"""Gateway: HTTP API semantics, session handling, CLI parity."""

from __future__ import annotations

import json

import pytest
import requests

from dbmgr.errors import exit_code_for_http
from dbmgr.gateway.api import GatewayServer
from dbmgr.gateway.cli import main as dbm_main
from dbmgr.gateway.cli import (db_create_main, db_start_main, db_status_main,
                               db_stop_main)
from dbmgr.lifecycle import build_orchestrator
from dbmgr.registry import STOPPED

from .conftest import populate_identities, wait_status


@pytest.fixture
def gateway(make_config, tmp_path):
    config = make_config()
    orch = build_orchestrator(config)
    populate_identities(orch)
    server = GatewayServer(orch, config).start()
    config.save(tmp_path / "config.json")
    yield server
    server.stop()
    orch.shutdown()


class Api:
    def __init__(self, gateway: GatewayServer, user: str):
        self.base = gateway.url
        resp = requests.post(f"{self.base}/login", json={"user": user}, timeout=5)
        resp.raise_for_status()
        self.token = resp.json()["token"]

    def get(self, path):
        return requests.get(f"{self.base}{path}", timeout=30,
                            headers={"Authorization": f"Bearer {self.token}"})

    def post(self, path, body=None):
        return requests.post(f"{self.base}{path}", json=body or {}, timeout=30,
                             headers={"Authorization": f"Bearer {self.token}"})


def create_db(gateway, name="webdb", nodes=1, group="secgroup"):
    admin = Api(gateway, "admin")
    resp = admin.post("/databases", {"engine": "toy-kv", "num_nodes": nodes,
                                     "name": name, "group": group})
    assert resp.status_code == 201, resp.text
    return admin


class TestSessions:
    def test_login_unknown_user(self, gateway):
        resp = requests.post(f"{gateway.url}/login", json={"user": "ghost"},
                             timeout=5)
        assert resp.status_code == 401

    def test_missing_token(self, gateway):
        resp = requests.get(f"{gateway.url}/databases", timeout=5)
        assert resp.status_code == 401

    def test_garbage_token(self, gateway):
        resp = requests.get(f"{gateway.url}/databases", timeout=5,
                            headers={"Authorization": "Bearer junk.junk"})
        assert resp.status_code == 401


class TestListing:
    def test_group_visibility(self, gateway):
        create_db(gateway, "visible", group="secgroup")
        create_db(gateway, "hidden", group="othergrp")
        rows = Api(gateway, "alice").get("/databases").json()["databases"]
        assert [r["name"] for r in rows] == ["visible"]

    def test_stopped_row_actions(self, gateway):
        create_db(gateway, "actions")
        row = Api(gateway, "alice").get("/databases").json()["databases"][0]
        assert row["actions"] == ["Checkpoint", "Start", "ViewInfo"]

    def test_transient_row_viewinfo_only(self, gateway):
        create_db(gateway, "transient")
        orch = gateway.orch
        orch.registry.transition("transient", "stopped", "starting", job_id="j")
        row = Api(gateway, "alice").get("/databases").json()["databases"][0]
        assert row["actions"] == ["ViewInfo"]
        assert row["status"] == "starting"

    def test_detail_includes_dns_history_checkpoints(self, gateway):
        create_db(gateway, "detail")
        detail = Api(gateway, "alice").get("/databases/detail").json()
        assert detail["descriptor"]["name"] == "detail"
        assert detail["status"]["value"] == "stopped"
        assert "detail" in detail["dns"]
        assert detail["history"][0]["value"] == "stopped"

    def test_detail_non_member(self, gateway):
        create_db(gateway, "mine")
        resp = Api(gateway, "bob").get("/databases/mine")
        assert resp.status_code == 403


class TestActions:
    def test_start_accepted_then_started(self, gateway):
        create_db(gateway, "runme")
        alice = Api(gateway, "alice")
        resp = alice.post("/databases/runme/actions", {"action": "start"})
        assert resp.status_code == 200
        assert resp.json() == {"accepted": True, "status": "starting"}
        assert wait_status(gateway.orch, "runme", "started") == "started"
        resp = alice.post("/databases/runme/actions", {"action": "stop"})
        assert resp.status_code == 200
        assert wait_status(gateway.orch, "runme", STOPPED) == STOPPED

    def test_start_on_started_conflict(self, gateway):
        create_db(gateway, "conflict")
        alice = Api(gateway, "alice")
        alice.post("/databases/conflict/actions", {"action": "start"})
        wait_status(gateway.orch, "conflict", "started")
        resp = alice.post("/databases/conflict/actions", {"action": "start"})
        assert resp.status_code == 409
        assert resp.json()["error"]["code"] == "wrong-current-status"
        alice.post("/databases/conflict/actions", {"action": "stop"})
        wait_status(gateway.orch, "conflict", STOPPED)

    def test_start_cluster_full_503(self, gateway):
        create_db(gateway, "hog", nodes=8)
        create_db(gateway, "starved", nodes=4)
        alice = Api(gateway, "alice")
        alice.post("/databases/hog/actions", {"action": "start"})
        wait_status(gateway.orch, "hog", "started")
        resp = alice.post("/databases/starved/actions", {"action": "start"})
        assert resp.status_code == 503
        err = resp.json()["error"]
        assert err["code"] == "insufficient-resources"
        assert err["free"] == 0
        assert err["requested"] == 4
        alice.post("/databases/hog/actions", {"action": "stop"})
        wait_status(gateway.orch, "hog", STOPPED)

    def test_non_member_forbidden(self, gateway):
        create_db(gateway, "guarded")
        resp = Api(gateway, "bob").post("/databases/guarded/actions",
                                        {"action": "start"})
        assert resp.status_code == 403

    def test_unknown_action_400(self, gateway):
        create_db(gateway, "weird")
        resp = Api(gateway, "alice").post("/databases/weird/actions",
                                          {"action": "explode"})
        assert resp.status_code == 400

    def test_checkpoint_via_api(self, gateway):
        create_db(gateway, "snap")
        alice = Api(gateway, "alice")
        resp = alice.post("/databases/snap/actions", {"action": "checkpoint"})
        assert resp.status_code == 200
        assert resp.json()["status"] == "checkpointing"
        wait_status(gateway.orch, "snap", STOPPED)
        detail = alice.get("/databases/snap").json()
        assert len(detail["checkpoints"]) == 1

    def test_idempotency_token_replays_outcome(self, gateway):
        create_db(gateway, "idem")
        alice = Api(gateway, "alice")
        body = {"action": "start", "idempotency_token": "tok-123"}
        first = alice.post("/databases/idem/actions", body)
        assert first.status_code == 200
        wait_status(gateway.orch, "idem", "started")
        replay = alice.post("/databases/idem/actions", body)
        assert replay.status_code == 200
        assert replay.json() == first.json()  # no re-execution, no 409
        alice.post("/databases/idem/actions", {"action": "stop"})
        wait_status(gateway.orch, "idem", STOPPED)


class TestAdminSurfaces:
    def test_create_requires_admin(self, gateway):
        resp = Api(gateway, "alice").post("/databases", {
            "engine": "toy-kv", "num_nodes": 1, "name": "nope",
            "group": "secgroup"})
        assert resp.status_code == 403

    def test_restore_requires_admin(self, gateway):
        create_db(gateway, "restoreme")
        alice = Api(gateway, "alice")
        alice.post("/databases/restoreme/actions", {"action": "checkpoint"})
        wait_status(gateway.orch, "restoreme", STOPPED)
        ck = alice.get("/databases/restoreme").json()["checkpoints"][0]["id"]
        resp = alice.post("/databases/restoreme/restore", {"checkpoint_id": ck})
        assert resp.status_code == 403
        resp = Api(gateway, "admin").post("/databases/restoreme/restore",
                                          {"checkpoint_id": ck})
        assert resp.status_code == 200

    def test_force_stop_requires_admin(self, gateway):
        create_db(gateway, "forced")
        assert Api(gateway, "alice").post(
            "/databases/forced/force-stop").status_code == 403
        resp = Api(gateway, "admin").post("/databases/forced/force-stop")
        assert resp.status_code == 200
        assert gateway.orch.registry.get_status("forced").value == "stopped"

    def test_access_key_endpoint(self, gateway):
        create_db(gateway, "keyed")
        alice = Api(gateway, "alice")
        resp = alice.get("/databases/keyed/accesskey")
        assert resp.status_code == 404  # never started
        alice.post("/databases/keyed/actions", {"action": "start"})
        wait_status(gateway.orch, "keyed", "started")
        resp = alice.get("/databases/keyed/accesskey")
        assert resp.status_code == 200
        assert len(resp.json()["access_key"]) == 48
        assert Api(gateway, "bob").get("/databases/keyed/accesskey").status_code == 403
        alice.post("/databases/keyed/actions", {"action": "stop"})
        wait_status(gateway.orch, "keyed", STOPPED)


class TestCli:
    @pytest.fixture
    def cli_env(self, gateway, tmp_path, monkeypatch):
        config_path = tmp_path / "config.json"
        monkeypatch.setenv("DBM_CONFIG", str(config_path))
        monkeypatch.delenv("DBM_USER", raising=False)
        return gateway

    def test_figure3_command_shape(self, cli_env, capsys):
        code = db_create_main(["accumulo", "--num-nodes", "4", "dbname01",
                               "secgroup", "--as-user", "admin"])
        assert code == 0
        out = capsys.readouterr().out
        assert "dbname01" in out and "toy-kv" in out

    def test_create_non_admin_exit3(self, cli_env):
        code = db_create_main(["toy-kv", "--num-nodes", "1", "x", "secgroup",
                               "--as-user", "alice"])
        assert code == 3

    def test_start_non_member_exit3(self, cli_env):
        db_create_main(["toy-kv", "--num-nodes", "1", "teamdb", "secgroup",
                        "--as-user", "admin"])
        code = db_start_main(["teamdb", "--as-user", "bob"])
        assert code == 3

    def test_start_stop_cycle_exit0(self, cli_env):
        db_create_main(["toy-kv", "--num-nodes", "1", "clidb", "secgroup",
                        "--as-user", "admin"])
        assert db_start_main(["clidb", "--as-user", "alice"]) == 0
        assert gateway_status(cli_env, "clidb") == "started"
        assert db_stop_main(["clidb", "--as-user", "alice"]) == 0
        assert gateway_status(cli_env, "clidb") == "stopped"

    def test_stop_when_stopped_exit4(self, cli_env):
        db_create_main(["toy-kv", "--num-nodes", "1", "idledb", "secgroup",
                        "--as-user", "admin"])
        assert db_stop_main(["idledb", "--as-user", "alice"]) == 4

    def test_usage_error_exit2(self, cli_env):
        assert db_start_main(["missing-identity-db"]) == 2  # no --as-user/env

    def test_status_matches_api(self, cli_env, capsys, monkeypatch):
        db_create_main(["toy-kv", "--num-nodes", "1", "paritydb", "secgroup",
                        "--as-user", "admin"])
        capsys.readouterr()
        monkeypatch.setenv("DBM_USER", "alice")
        assert db_status_main(["--json"]) == 0
        cli_rows = json.loads(capsys.readouterr().out)
        api_rows = Api(cli_env, "alice").get("/databases").json()["databases"]
        assert cli_rows == api_rows

    def test_dbm_umbrella_status(self, cli_env, capsys):
        dbm_main(["create", "toy-kv", "umbrella", "secgroup",
                  "--num-nodes", "1", "--as-user", "admin"])
        capsys.readouterr()
        assert dbm_main(["status", "--as-user", "alice"]) == 0
        out = capsys.readouterr().out
        assert "umbrella" in out
        assert "STATUS" in out

    def test_exit_class_mapping(self):
        assert exit_code_for_http(200) == 0
        assert exit_code_for_http(400) == 2
        assert exit_code_for_http(401) == 3
        assert exit_code_for_http(403) == 3
        assert exit_code_for_http(404) == 4
        assert exit_code_for_http(409) == 4
        assert exit_code_for_http(503) == 5
        assert exit_code_for_http(500) == 6


def gateway_status(gateway, name: str) -> str:
    return gateway.orch.registry.get_status(name).value


class TestBenchCli:
    def test_bench_writes_csv(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        code = dbm_main(["bench", "--sizes", "2MiB", "--modes", "single",
                         "--directions", "central-to-local", "--trials", "1",
                         "--out", str(out), "--scratch", str(tmp_path / "scratch")])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("direction,mode,workers")
        assert len(lines) == 2
