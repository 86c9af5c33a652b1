"""Credential model: shared secrets, superuser credential, rotated access keys.

Users, groups and the service identity are simulated through an identity
table plus effective-permission checks; real permission bits are still
applied to every secret and key file. Component secrets live under
``<central>/secrets/`` and are readable by the service identity only; the
per-database user access key lives in the user-visible keys area with
group-read permission and is regenerated on every database start.
"""

from __future__ import annotations

import hashlib
import secrets as _secrets
import stat
import string
import threading
from dataclasses import dataclass
from pathlib import Path

from .errors import (AlreadyProvisioned, NoKeyYet, PermissionDenied,
                     UnknownUser, UserNotInGroup)
from .util import read_json, rfc3339, write_json_atomic

KEY_ALPHABET = string.ascii_uppercase + string.ascii_lowercase + string.digits
KEY_LENGTH = 48

SHARED_SECRET_FILE = "shared_secret"
SUPERUSER_FILE = "superuser_password"

ACCESS_KEY_USER = "dbuser"
SUPERUSER_NAME = "root"


def generate_secret(length: int = KEY_LENGTH) -> str:
    return "".join(_secrets.choice(KEY_ALPHABET) for _ in range(length))


def sha256_hex(value: str) -> str:
    return hashlib.sha256(value.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Identity:
    name: str
    groups: frozenset[str]
    admin: bool = False


class IdentityTable:
    """JSON-backed user/group/admin table; schema documented in docs."""

    def __init__(self, path: Path, *, service_user: str = "dbsvc"):
        self.path = Path(path)
        self.service_user = service_user
        self._lock = threading.Lock()
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            write_json_atomic(self.path, {"users": {}})

    def _load(self) -> dict:
        return read_json(self.path)

    def get(self, name: str) -> Identity:
        users = self._load()["users"]
        if name not in users:
            raise UnknownUser(f"unknown user {name!r}")
        entry = users[name]
        return Identity(name=name, groups=frozenset(entry.get("groups", [])),
                        admin=bool(entry.get("admin", False)))

    def knows(self, name: str) -> bool:
        return name in self._load()["users"]

    def is_admin(self, name: str) -> bool:
        try:
            return self.get(name).admin
        except UnknownUser:
            return False

    def groups(self, name: str) -> frozenset[str]:
        return self.get(name).groups

    def in_group(self, name: str, group: str) -> bool:
        try:
            return group in self.get(name).groups
        except UnknownUser:
            return False

    def add_user(self, name: str, groups: list[str] | None = None,
                 admin: bool = False) -> None:
        with self._lock:
            data = self._load()
            data["users"][name] = {"groups": sorted(groups or []), "admin": admin}
            write_json_atomic(self.path, data)

    def remove_from_group(self, name: str, group: str) -> None:
        with self._lock:
            data = self._load()
            if name not in data["users"]:
                raise UnknownUser(f"unknown user {name!r}")
            user_groups = data["users"][name].get("groups", [])
            if group not in user_groups:
                raise UserNotInGroup(f"{name!r} not in group {group!r}")
            user_groups.remove(group)
            write_json_atomic(self.path, data)


class OwnershipMap:
    """Simulated file ownership (owner, group) keyed by absolute path."""

    def __init__(self, path: Path, *, service_user: str = "dbsvc"):
        self.path = Path(path)
        self.service_user = service_user
        self._lock = threading.Lock()
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            write_json_atomic(self.path, {"paths": {}})

    def set_owner(self, target: Path, owner: str, group: str | None = None) -> None:
        with self._lock:
            data = read_json(self.path)
            data["paths"][str(Path(target))] = {"owner": owner, "group": group}
            write_json_atomic(self.path, data)

    def owner_of(self, target: Path) -> tuple[str, str | None]:
        entry = read_json(self.path)["paths"].get(str(Path(target)))
        if entry is None:
            return self.service_user, None
        return entry["owner"], entry.get("group")


@dataclass(frozen=True)
class AccessKey:
    database: str
    username: str
    value: str
    generation: int
    stored_at: Path


@dataclass(frozen=True)
class RevocationPlan:
    database: str
    user: str
    generation_at_revocation: int
    requested_at: str
    steps: tuple[str, ...] = (
        "remove user from the database security group (done)",
        "restart the database so the access key is regenerated",
    )


@dataclass
class SecretPaths:
    shared: Path
    superuser: Path


class SecurityService:
    """Secrets provisioning, key rotation/lookup and two-step revocation."""

    def __init__(self, identities: IdentityTable, ownership: OwnershipMap,
                 keys_root: Path, *, service_user: str = "dbsvc"):
        self.identities = identities
        self.ownership = ownership
        self.keys_root = Path(keys_root)
        self.service_user = service_user
        self._rotate_lock = threading.Lock()

    # --- effective permission checks ------------------------------------

    def can_read(self, user: str, target: Path) -> bool:
        """Combine real mode bits with the simulated ownership table."""
        target = Path(target)
        try:
            mode = stat.S_IMODE(target.stat().st_mode)
        except OSError:
            return False
        owner, group = self.ownership.owner_of(target)
        if user == owner:
            return bool(mode & stat.S_IRUSR)
        if group is not None and self.identities.in_group(user, group):
            return bool(mode & stat.S_IRGRP)
        return bool(mode & stat.S_IROTH)

    def read_as(self, user: str, target: Path) -> str:
        if not self.can_read(user, target):
            raise PermissionDenied(f"{user!r} may not read {target}")
        return Path(target).read_text()

    # --- component secrets ----------------------------------------------

    def secret_paths(self, central_path: Path) -> SecretPaths:
        secrets_dir = Path(central_path) / "secrets"
        return SecretPaths(shared=secrets_dir / SHARED_SECRET_FILE,
                           superuser=secrets_dir / SUPERUSER_FILE)

    def provision_secrets(self, db_name: str, central_path: Path) -> SecretPaths:
        """Create the shared secret and superuser credential, service-only."""
        paths = self.secret_paths(central_path)
        secrets_dir = paths.shared.parent
        if paths.shared.exists() or paths.superuser.exists():
            raise AlreadyProvisioned(f"secrets already provisioned for {db_name}")
        secrets_dir.mkdir(parents=True, exist_ok=True)
        secrets_dir.chmod(0o700)
        self.ownership.set_owner(secrets_dir, self.service_user)
        for path in (paths.shared, paths.superuser):
            path.write_text(generate_secret() + "\n")
            path.chmod(0o600)
            self.ownership.set_owner(path, self.service_user)
        return paths

    def read_secret(self, central_path: Path, which: str, *,
                    as_user: str | None = None) -> str:
        paths = self.secret_paths(central_path)
        target = paths.shared if which == "shared" else paths.superuser
        user = as_user if as_user is not None else self.service_user
        return self.read_as(user, target).strip()

    # --- access keys ------------------------------------------------------

    def key_path(self, db_name: str) -> Path:
        return self.keys_root / db_name / "accesskey"

    def _meta_path(self, db_name: str) -> Path:
        return self.keys_root / db_name / "accesskey.meta.json"

    def access_key_generation(self, db_name: str) -> int:
        meta = self._meta_path(db_name)
        if not meta.exists():
            return 0
        return int(read_json(meta)["generation"])

    def rotate_access_key(self, db_name: str, security_group: str,
                          set_engine_password) -> AccessKey:
        """Generate a fresh key, install it in the engine, then publish it.

        ``set_engine_password(username, new_value)`` performs the actual
        password change via the engine superuser account and raises
        EngineUnreachable / SuperuserAuthFailed on failure, in which case
        the previously published key stays in place.
        """
        with self._rotate_lock:
            new_value = generate_secret()
            set_engine_password(ACCESS_KEY_USER, new_value)
            key_dir = self.keys_root / db_name
            key_dir.mkdir(parents=True, exist_ok=True)
            key_dir.chmod(0o750)
            self.ownership.set_owner(key_dir, self.service_user, security_group)
            key_file = self.key_path(db_name)
            key_file.write_text(new_value + "\n")
            key_file.chmod(0o640)
            self.ownership.set_owner(key_file, self.service_user, security_group)
            generation = self.access_key_generation(db_name) + 1
            write_json_atomic(self._meta_path(db_name), {
                "generation": generation,
                "rotated_at": rfc3339(),
            })
            self._meta_path(db_name).chmod(0o644)
            return AccessKey(database=db_name, username=ACCESS_KEY_USER,
                             value=new_value, generation=generation,
                             stored_at=key_file)

    def locate_access_key(self, db_name: str, security_group: str,
                          caller: str) -> str:
        """Return the current key for a group member (client-binding path)."""
        if not self.identities.in_group(caller, security_group):
            raise PermissionDenied(
                f"{caller!r} is not in group {security_group!r}")
        key_file = self.key_path(db_name)
        if not key_file.exists():
            raise NoKeyYet(f"{db_name} has never been started")
        return self.read_as(caller, key_file).strip()

    # --- revocation -------------------------------------------------------

    def revoke_user(self, db_name: str, security_group: str, user: str,
                    admin: str) -> RevocationPlan:
        """Step one of two: drop group membership. Step two is a restart."""
        if not self.identities.is_admin(admin):
            raise PermissionDenied(f"{admin!r} is not an administrator")
        self.identities.remove_from_group(user, security_group)
        return RevocationPlan(
            database=db_name, user=user,
            generation_at_revocation=self.access_key_generation(db_name),
            requested_at=rfc3339())

    def revocation_status(self, plan: RevocationPlan) -> str:
        """INCOMPLETE until a restart has rotated the key past the plan."""
        current = self.access_key_generation(plan.database)
        return "COMPLETE" if current > plan.generation_at_revocation else "INCOMPLETE"
