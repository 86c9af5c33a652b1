"""Simulated multi-node cluster and scheduler for the "db" queue.

Nodes live on one host: each gets a directory under ``cluster_root`` and its
own loopback IP, so DNS registration and TCP daemons are real. Jobs move
strictly Prolog -> Sleeping -> Epilog -> Done. Cancellation flags are checked
only between phases: a prolog or epilog that began always runs to completion,
and the epilog runs exactly once for every job whose prolog started, no
matter how the job ended.
"""

from __future__ import annotations

import ipaddress
import threading
import time
import uuid
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

from .config import ClusterSettings
from .errors import (InsufficientResources, InvalidNodeCount, InvalidQueue,
                     NotFound, PermissionDenied, WrongPhase)

PROLOG = "prolog"
SLEEPING = "sleeping"
EPILOG = "epilog"
DONE = "done"

PHASE_ORDER = (PROLOG, SLEEPING, EPILOG, DONE)


class SimulatedCrash(BaseException):
    """Test seam for crash-consistency drills.

    A hook raising this mimics the orchestrator process dying: the job is
    frozen as-is (no epilog, nodes never released) so recovery paths can be
    exercised against the durable leftovers.
    """


@dataclass(frozen=True)
class SimNode:
    node_id: int
    hostname: str
    ip: str
    local_root: Path


@dataclass
class JobSpec:
    queue: str
    num_nodes: int
    owner: str
    prolog: "Hook"
    epilog: "Hook"
    payload: "Payload | None" = None  # None = placeholder that sleeps forever
    now: bool = True
    job_id: str | None = None


class HookContext:
    """Handed to prolog/epilog hooks, one per (job, node)."""

    def __init__(self, job: "JobHandle", node: SimNode, node_index: int, phase: str):
        self.job = job
        self.node = node
        self.node_index = node_index
        self.phase = phase

    @property
    def cancel_requested(self) -> bool:
        return self.job.cancel_requested

    @contextmanager
    def step(self, name: str):
        self.job._log_step(self.phase, self.node.hostname, name, "start")
        try:
            yield
        finally:
            self.job._log_step(self.phase, self.node.hostname, name, "end")


class PayloadContext:
    def __init__(self, job: "JobHandle", node: SimNode):
        self.job = job
        self.node = node

    @contextmanager
    def step(self, name: str):
        self.job._log_step("payload", self.node.hostname, name, "start")
        try:
            yield
        finally:
            self.job._log_step("payload", self.node.hostname, name, "end")


Hook = "callable[[HookContext], None]"
Payload = "callable[[PayloadContext], None]"


class JobHandle:
    def __init__(self, job_id: str, spec: JobSpec, nodes: list[SimNode],
                 log_path: Path, observer=None):
        self.job_id = job_id
        self.spec = spec
        self.nodes = nodes
        self.log_path = log_path
        self._observer = observer
        self._cv = threading.Condition()
        self._phase = PROLOG
        self._stop_event = threading.Event()
        self._stop_signaled = False
        self.cancel_requested = False
        self.crashed = False
        self.prolog_errors: list[BaseException] = []
        self.epilog_errors: list[BaseException] = []
        self.payload_error: BaseException | None = None
        self._log_lock = threading.Lock()

    # --- state ------------------------------------------------------------

    @property
    def phase(self) -> str:
        with self._cv:
            return self._phase

    def _set_phase(self, phase: str) -> None:
        with self._cv:
            self._phase = phase
            self._cv.notify_all()

    @property
    def exit(self) -> str | None:
        if self.phase != DONE:
            return None
        if self.prolog_errors:
            return "prolog-failed"
        if self.payload_error is not None:
            return "payload-failed"
        if self.epilog_errors:
            return "epilog-failed"
        return "ok"

    def wait_phase(self, phase: str, timeout: float | None = None) -> bool:
        """Wait until the job reaches (or has passed) the given phase."""
        target = PHASE_ORDER.index(phase)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while PHASE_ORDER.index(self._phase) < target:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self._cv.wait(remaining)
            return True

    def wait_done(self, timeout: float | None = None) -> bool:
        return self.wait_phase(DONE, timeout)

    # --- logging ------------------------------------------------------------

    def _log_step(self, phase: str, hostname: str, step: str, edge: str) -> None:
        line = f"{phase} {hostname} {step} {edge}\n"
        with self._log_lock:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
        if self._observer is not None:
            self._observer(self.job_id, phase, hostname, step, edge)


class Cluster:
    """Node inventory plus the scheduler for the "db" queue."""

    def __init__(self, settings: ClusterSettings, *, is_admin=None,
                 step_observer=None):
        self.settings = settings
        self._is_admin = is_admin or (lambda user: False)
        self._step_observer = step_observer
        self.cluster_root = Path(settings.cluster_root)
        (self.cluster_root / "jobs").mkdir(parents=True, exist_ok=True)
        base = ipaddress.IPv4Address(settings.ip_base)
        self.nodes: list[SimNode] = []
        for i in range(settings.nodes):
            local_root = self.cluster_root / f"node-{i}"
            local_root.mkdir(parents=True, exist_ok=True)
            self.nodes.append(SimNode(
                node_id=i, hostname=f"node-{i}",
                ip=str(base + i + 1), local_root=local_root))
        self._alloc_lock = threading.Lock()
        self._allocated: dict[int, str] = {}  # node_id -> job_id
        self._jobs: dict[str, JobHandle] = {}
        self._threads: list[threading.Thread] = []

    # --- inventory ------------------------------------------------------

    def free_nodes(self) -> int:
        with self._alloc_lock:
            return len(self.nodes) - len(self._allocated)

    def node_states(self) -> list[tuple[int, str | None]]:
        with self._alloc_lock:
            return [(n.node_id, self._allocated.get(n.node_id)) for n in self.nodes]

    def get_job(self, job_id: str) -> JobHandle:
        job = self._jobs.get(job_id)
        if job is None:
            raise NotFound(f"no job {job_id!r}")
        return job

    def has_job(self, job_id: str) -> bool:
        return job_id in self._jobs

    # --- scheduling -------------------------------------------------------

    def submit(self, spec: JobSpec) -> JobHandle:
        """Allocate nodes and launch the prolog, or fail immediately.

        Jobs on this queue always use the "now" option: with insufficient
        free nodes the error returns synchronously instead of queuing.
        """
        if spec.queue != "db":
            raise InvalidQueue(f"unknown queue {spec.queue!r}")
        if spec.num_nodes < 1:
            raise InvalidNodeCount(f"num_nodes must be >= 1, got {spec.num_nodes}")
        if not spec.now:
            raise InvalidQueue("the db queue only accepts now=true submissions")
        job_id = spec.job_id or f"job-{uuid.uuid4().hex[:12]}"
        with self._alloc_lock:
            free = [n for n in self.nodes if n.node_id not in self._allocated]
            if len(free) < spec.num_nodes:
                raise InsufficientResources(free=len(free), requested=spec.num_nodes)
            chosen = free[:spec.num_nodes]  # lowest-numbered free nodes first
            for n in chosen:
                self._allocated[n.node_id] = job_id
        handle = JobHandle(job_id, spec, chosen,
                           self.cluster_root / "jobs" / f"{job_id}.log",
                           observer=self._step_observer)
        self._jobs[job_id] = handle
        runner = threading.Thread(target=self._run_job, args=(handle,),
                                  name=f"job-{job_id}", daemon=True)
        self._threads.append(runner)
        runner.start()
        return handle

    def signal_stop(self, job_id: str) -> None:
        """Wake the placeholder so the epilog begins on every node."""
        job = self.get_job(job_id)
        with job._cv:
            if job._phase != SLEEPING or job._stop_signaled:
                raise WrongPhase(f"job {job_id} is not sleeping")
            job._stop_signaled = True
        job._stop_event.set()

    def cancel(self, job_id: str, requester: str) -> None:
        """Owner/admin-only. Never interrupts a running prolog or epilog."""
        job = self.get_job(job_id)
        if requester != job.spec.owner and not self._is_admin(requester):
            raise PermissionDenied(
                f"{requester!r} is neither the job owner nor an administrator")
        with job._cv:
            job.cancel_requested = True
            if job._phase == SLEEPING and not job._stop_signaled:
                job._stop_signaled = True
        job._stop_event.set()

    # --- job execution ------------------------------------------------------

    def _run_hooks(self, job: JobHandle, phase: str, hook) -> None:
        """Run the hook on every node concurrently; barrier at the end."""
        errors: list[BaseException] = []
        errors_lock = threading.Lock()

        def run_one(index: int, node: SimNode) -> None:
            ctx = HookContext(job, node, index, phase)
            try:
                hook(ctx)
            except SimulatedCrash:
                job.crashed = True
            except BaseException as exc:  # siblings always finish
                with errors_lock:
                    errors.append(exc)

        threads = [threading.Thread(target=run_one, args=(i, n), daemon=True,
                                    name=f"{job.job_id}-{phase}-{n.hostname}")
                   for i, n in enumerate(job.nodes)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if phase == PROLOG:
            job.prolog_errors.extend(errors)
        else:
            job.epilog_errors.extend(errors)

    def _run_job(self, job: JobHandle) -> None:
        try:
            self._run_hooks(job, PROLOG, job.spec.prolog)
            if job.crashed:
                return  # simulated orchestrator death: freeze everything
            # Cancellation and prolog failure are only considered here,
            # between phases; the placeholder is skipped, never the epilog.
            proceed_to_sleep = not job.prolog_errors and not job.cancel_requested
            if proceed_to_sleep:
                job._set_phase(SLEEPING)
                if job.spec.payload is None:
                    job._stop_event.wait()
                else:
                    try:
                        job.spec.payload(PayloadContext(job, job.nodes[0]))
                    except BaseException as exc:
                        job.payload_error = exc
            job._set_phase(EPILOG)
            self._run_hooks(job, EPILOG, job.spec.epilog)
        finally:
            if not job.crashed:
                with self._alloc_lock:
                    for n in job.nodes:
                        self._allocated.pop(n.node_id, None)
                job._set_phase(DONE)

    def shutdown(self, timeout: float = 10.0) -> None:
        """Test/teardown helper: signal sleepers and wait for jobs to finish."""
        for job in list(self._jobs.values()):
            with job._cv:
                if job._phase == SLEEPING and not job._stop_signaled:
                    job._stop_signaled = True
            job._stop_event.set()
        deadline = time.monotonic() + timeout
        for job in list(self._jobs.values()):
            job.wait_done(max(0.0, deadline - time.monotonic()))
