"""Error taxonomy shared by every module.

Each error carries a stable machine-readable ``code``; the gateway maps codes
to HTTP statuses and the CLI maps HTTP status classes to exit codes, so the
same failure surfaces identically on both interfaces.
"""

from __future__ import annotations


class DbmError(Exception):
    """Base class for all domain errors."""

    code = "internal"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details


# --- registry ---------------------------------------------------------------

class NotFound(DbmError):
    code = "not-found"


class DuplicateName(DbmError):
    code = "duplicate-name"


class InvalidName(DbmError):
    code = "invalid-name"


class InvalidNodeCount(DbmError):
    code = "invalid-node-count"


class WrongCurrentStatus(DbmError):
    code = "wrong-current-status"

    def __init__(self, message: str = "", *, actual: str | None = None, **details):
        super().__init__(message, actual=actual, **details)
        self.actual = actual


class IllegalEdge(DbmError):
    code = "illegal-edge"


# --- cluster / scheduler ----------------------------------------------------

class InvalidQueue(DbmError):
    code = "invalid-queue"


class InsufficientResources(DbmError):
    code = "insufficient-resources"

    def __init__(self, message: str = "", *, free: int = 0, requested: int = 0, **details):
        super().__init__(message or f"{requested} nodes requested, {free} free",
                         free=free, requested=requested, **details)
        self.free = free
        self.requested = requested


class WrongPhase(DbmError):
    code = "wrong-phase"


# --- authorization ----------------------------------------------------------

class PermissionDenied(DbmError):
    code = "permission-denied"


class UnknownUser(DbmError):
    code = "unknown-user"


# --- migrate ----------------------------------------------------------------

class SourceMissing(DbmError):
    code = "source-missing"


class DestinationUnwritable(DbmError):
    code = "destination-unwritable"


class PartialCopy(DbmError):
    code = "partial-copy"

    def __init__(self, message: str = "", *, failed_paths: list[str] | None = None, **details):
        failed_paths = failed_paths or []
        super().__init__(message or f"{len(failed_paths)} paths failed",
                         failed_paths=failed_paths, **details)
        self.failed_paths = failed_paths


class InsufficientScratch(DbmError):
    code = "insufficient-scratch"


# --- dyndns -----------------------------------------------------------------

class TtlTooHigh(DbmError):
    code = "ttl-too-high"


class PortInUse(DbmError):
    code = "port-in-use"


# --- security ---------------------------------------------------------------

class AlreadyProvisioned(DbmError):
    code = "already-provisioned"


class EngineUnreachable(DbmError):
    code = "engine-unreachable"


class SuperuserAuthFailed(DbmError):
    code = "superuser-auth-failed"


class NoKeyYet(DbmError):
    code = "no-key-yet"


class UserNotInGroup(DbmError):
    code = "user-not-in-group"


# --- engines ----------------------------------------------------------------

class NotEmpty(DbmError):
    code = "not-empty"


class EngineInitFailed(DbmError):
    code = "engine-init-failed"


class DependencyStartFailed(DbmError):
    code = "dependency-start-failed"


class AuthMismatch(DbmError):
    code = "auth-mismatch"


class StopTimeout(DbmError):
    code = "stop-timeout"


class AuthFailed(DbmError):
    code = "auth-failed"


class NotAuthenticated(DbmError):
    code = "not-authenticated"


class KeyNotFound(DbmError):
    code = "key-not-found"


# --- lifecycle --------------------------------------------------------------

class ArchiveFailed(DbmError):
    code = "archive-failed"


class ArchiveCorrupt(DbmError):
    code = "archive-corrupt"


class CheckpointNotFound(DbmError):
    code = "checkpoint-not-found"


# --- surface mappings -------------------------------------------------------

# HTTP status per error code; anything unlisted is a 500.
HTTP_STATUS_BY_CODE = {
    "not-found": 404,
    "checkpoint-not-found": 404,
    "duplicate-name": 409,
    "invalid-name": 400,
    "invalid-node-count": 400,
    "wrong-current-status": 409,
    "illegal-edge": 409,
    "wrong-phase": 409,
    "invalid-queue": 400,
    "insufficient-resources": 503,
    "permission-denied": 403,
    "unknown-user": 401,
    "user-not-in-group": 409,
    "no-key-yet": 404,
    "already-provisioned": 409,
    "not-empty": 409,
    "ttl-too-high": 400,
    "insufficient-scratch": 507,
}


def http_status_for(err: DbmError) -> int:
    return HTTP_STATUS_BY_CODE.get(err.code, 500)


def exit_code_for_http(status: int) -> int:
    """Collapse an HTTP status into the CLI exit-code classes.

    0 ok, 2 usage, 3 permission, 4 wrong-status/conflict, 5 resources,
    6 internal.
    """
    if 200 <= status < 300:
        return 0
    if status in (400, 422):
        return 2
    if status in (401, 403):
        return 3
    if status in (404, 409):
        return 4
    if status == 503:
        return 5
    return 6
