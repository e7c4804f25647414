"""Per-team instance lifecycle: admission against a per-team limit, identity
derivation, TTL bookkeeping with extension, and the janitor sweep.

Instance identity is deterministic: ``<challenge_id>-<slug8>`` where slug8 is
the first 8 hex chars of HMAC-SHA256(secret_key, team_id || 0x00 ||
challenge_id). The same (key, team, challenge) triple therefore yields the
same id and endpoint hosts across restarts, while other teams' hosts stay
non-enumerable without the key.

Admission (limit check, duplicate check, reservation) is one atomic step
serialized per team; rendering and backend submission happen outside that
critical section. A quota slot is released only when an instance reaches a
terminal state (expired/failed), not when teardown begins.
"""

from __future__ import annotations

import dataclasses
import hashlib
import hmac
import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional

from .backend import BackendError, OrchestrationBackend, WorkloadState
from .clock import Clock, SystemClock
from .rendering import render_instance_workload
from .schema import ChallengeKind, ChallengeSpec, NetProtocol


class InstancerError(Exception):
    pass


class UnknownChallenge(InstancerError):
    pass


class NotInstanced(InstancerError):
    pass


class TeamLimitExceeded(InstancerError):
    def __init__(self, limit: int):
        self.limit = limit
        super().__init__(f"per-team instance limit reached ({limit})")


class AlreadyRunning(InstancerError):
    def __init__(self, existing: "Instance"):
        self.existing = existing
        super().__init__(f"instance {existing.instance_id} is already live")


class BackendRejected(InstancerError):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


class NoLiveInstance(InstancerError):
    pass


class MaxLifetimeReached(InstancerError):
    pass


class InstanceState(str, Enum):
    PENDING = "pending"
    STARTING = "starting"
    RUNNING = "running"
    STOPPING = "stopping"
    EXPIRED = "expired"
    FAILED = "failed"

    @property
    def terminal(self) -> bool:
        return self in (InstanceState.EXPIRED, InstanceState.FAILED)


# backend workload state -> instance state
_WORKLOAD_TO_INSTANCE = {
    WorkloadState.ACCEPTED: InstanceState.PENDING,
    WorkloadState.STARTING: InstanceState.STARTING,
    WorkloadState.RUNNING: InstanceState.RUNNING,
    WorkloadState.STOPPING: InstanceState.STOPPING,
    WorkloadState.TERMINATED: InstanceState.EXPIRED,
    WorkloadState.FAILED: InstanceState.FAILED,
}

_STATE_RANK = {
    InstanceState.PENDING: 0,
    InstanceState.STARTING: 1,
    InstanceState.RUNNING: 2,
    InstanceState.STOPPING: 3,
    InstanceState.EXPIRED: 4,
    InstanceState.FAILED: 4,
}

_CHAIN = [
    InstanceState.PENDING,
    InstanceState.STARTING,
    InstanceState.RUNNING,
    InstanceState.STOPPING,
    InstanceState.EXPIRED,
]


def derive_slug8(secret_key: bytes, team_id: str, challenge_id: str) -> str:
    digest = hmac.new(
        secret_key, team_id.encode() + b"\x00" + challenge_id.encode(), hashlib.sha256
    ).hexdigest()
    return digest[:8]


def derive_instance_id(secret_key: bytes, team_id: str, challenge_id: str) -> str:
    return f"{challenge_id}-{derive_slug8(secret_key, team_id, challenge_id)}"


@dataclass
class InstancerConfig:
    secret_key: bytes
    challs_domain: str = "challs.local"
    per_team_limit: int = 3
    default_ttl_seconds: int = 3600
    max_ttl_seconds: int | None = None  # defaults to 4x the default ttl
    janitor_interval_seconds: int = 60

    def __post_init__(self):
        if isinstance(self.secret_key, str):
            self.secret_key = self.secret_key.encode()
        if len(self.secret_key) < 16:
            raise ValueError("secret_key must be at least 16 bytes")
        if self.per_team_limit <= 0 or self.default_ttl_seconds <= 0:
            raise ValueError("per_team_limit and default_ttl_seconds must be positive")
        if self.max_ttl_seconds is None:
            self.max_ttl_seconds = 4 * self.default_ttl_seconds
        if self.max_ttl_seconds < self.default_ttl_seconds:
            raise ValueError("max_ttl_seconds must be >= default_ttl_seconds")
        if not 0 < self.janitor_interval_seconds <= self.default_ttl_seconds:
            raise ValueError("janitor_interval_seconds must be in [1, default_ttl_seconds]")


@dataclass(frozen=True)
class Endpoint:
    name: str
    kind: NetProtocol
    host: str
    port: int


@dataclass
class Instance:
    instance_id: str
    challenge_id: str
    team_id: str
    state: InstanceState
    created_at: float
    expires_at: float
    endpoints: list[Endpoint] = field(default_factory=list)
    failure_reason: str | None = None
    submitted: bool = field(default=False, compare=False, repr=False)

    @property
    def live(self) -> bool:
        return not self.state.terminal

    def view(self, now: float) -> dict:
        return {
            "instance_id": self.instance_id,
            "challenge_id": self.challenge_id,
            "state": self.state.value,
            "created_at": self.created_at,
            "expires_at": self.expires_at,
            "remaining_seconds": max(0, int(self.expires_at - now)) if self.live else 0,
            "endpoints": [
                {"name": e.name, "kind": e.kind.value, "host": e.host, "port": e.port}
                for e in self.endpoints
            ],
        }


class Instancer:
    """Tracks one record per (team, challenge) pair: the live instance or the
    most recent terminal one. Callers receive defensive copies.

    The table structure is guarded by one registry lock; per-instance state is
    serialized by per-team locks (admission atomicity). The janitor shares the
    same discipline.
    """

    def __init__(
        self,
        backend: OrchestrationBackend,
        config: InstancerConfig,
        clock: Clock | None = None,
        catalog: Callable[[], Mapping[str, ChallengeSpec]] | None = None,
        journal_path: Path | str | None = None,
    ):
        self._backend = backend
        self.config = config
        self._clock = clock if clock is not None else SystemClock()
        self._catalog = catalog
        self._table: dict[tuple[str, str], Instance] = {}
        self._registry_lock = threading.Lock()
        self._team_locks: dict[str, threading.Lock] = {}
        self._journal_lock = threading.Lock()
        self._journal_path = Path(journal_path) if journal_path else None
        self.started_total = 0
        self.reaped_total = 0
        if self._journal_path and self._journal_path.exists():
            self._recover_journal()

    # -- public API ---------------------------------------------------------

    def start(self, team_id: str, challenge_id: str) -> Instance:
        """Admit and launch one instance. Exactly one concurrent duplicate
        request wins; the rest get AlreadyRunning with the winner's record."""
        record = self._lookup_template(challenge_id)
        ttl = record.template.ttl_seconds or self.config.default_ttl_seconds
        instance_id = derive_instance_id(self.config.secret_key, team_id, challenge_id)

        with self._team_lock(team_id):
            self._sync_team(team_id)
            existing = self._get(team_id, challenge_id)
            if existing is not None and existing.live:
                raise AlreadyRunning(dataclasses.replace(existing))
            if self._live_count(team_id) >= self.config.per_team_limit:
                raise TeamLimitExceeded(self.config.per_team_limit)
            now = self._clock.now()
            instance = Instance(
                instance_id=instance_id,
                challenge_id=challenge_id,
                team_id=team_id,
                state=InstanceState.PENDING,
                created_at=now,
                expires_at=now + ttl,
            )
            with self._registry_lock:
                self._table[(team_id, challenge_id)] = instance
                self.started_total += 1
            self._journal(instance)

        # admission reserved the slot; render and submit outside the lock
        workload = render_instance_workload(
            challenge_id, record.template, record.flag, team_id, instance_id,
            self.config.challs_domain,
        )
        try:
            self._backend.submit(workload)
        except BackendError as exc:
            with self._team_lock(team_id):
                instance.state = InstanceState.FAILED
                instance.failure_reason = str(exc)
                self._journal(instance)
            raise BackendRejected(str(exc)) from exc

        with self._team_lock(team_id):
            instance.submitted = True
            specs_by_host = {spec.host: spec for spec in workload.routes}
            instance.endpoints = [
                Endpoint(name=specs_by_host[r.host].name, kind=specs_by_host[r.host].kind,
                         host=r.host, port=r.port)
                for r in self._backend.routes_for(instance_id)
            ]
            return dataclasses.replace(instance)

    def extend(self, team_id: str, challenge_id: str) -> Instance:
        """Push expiry to now + ttl, capped at created_at + max_ttl."""
        record = self._lookup_template(challenge_id)
        ttl = record.template.ttl_seconds or self.config.default_ttl_seconds
        with self._team_lock(team_id):
            self._sync_pair(team_id, challenge_id)
            instance = self._get(team_id, challenge_id)
            if instance is None or not instance.live:
                raise NoLiveInstance(f"{team_id}/{challenge_id}")
            now = self._clock.now()
            cap = instance.created_at + self.config.max_ttl_seconds
            if instance.expires_at >= cap:
                raise MaxLifetimeReached(f"{instance.instance_id} reached its lifetime cap")
            instance.expires_at = max(instance.expires_at, min(now + ttl, cap))
            self._journal(instance)
            return dataclasses.replace(instance)

    def stop(self, team_id: str, challenge_id: str) -> None:
        """Request teardown. The record turns expired (and the quota slot
        frees) once the backend confirms termination."""
        with self._team_lock(team_id):
            self._sync_pair(team_id, challenge_id)
            instance = self._get(team_id, challenge_id)
            if instance is None or not instance.live:
                raise NoLiveInstance(f"{team_id}/{challenge_id}")
            if instance.state is InstanceState.STOPPING:
                raise NoLiveInstance(f"{team_id}/{challenge_id} is already stopping")
            self._teardown(instance)

    def status(self, team_id: str, challenge_id: str) -> Optional[Instance]:
        """Live or most recent terminal record; None if never started."""
        with self._team_lock(team_id):
            self._sync_pair(team_id, challenge_id)
            instance = self._get(team_id, challenge_id)
            return dataclasses.replace(instance) if instance is not None else None

    def instances_for_team(self, team_id: str) -> dict[str, Instance]:
        with self._team_lock(team_id):
            self._sync_team(team_id)
            with self._registry_lock:
                return {
                    cid: dataclasses.replace(inst)
                    for (t, cid), inst in self._table.items()
                    if t == team_id
                }

    def live_count(self, team_id: str) -> int:
        with self._registry_lock:
            return sum(1 for (t, _), inst in self._table.items() if t == team_id and inst.live)

    def live_instances(self) -> int:
        with self._registry_lock:
            return sum(1 for inst in self._table.values() if inst.live)

    def janitor_sweep(self, now: float | None = None) -> list[str]:
        """Tear down every live instance whose expiry has passed (inclusive
        bound). Returns the newly reaped instance ids; repeating the sweep at
        the same instant returns nothing further."""
        if now is None:
            now = self._clock.now()
        with self._registry_lock:
            pairs = list(self._table.keys())
        reaped: list[str] = []
        for team_id, challenge_id in pairs:
            with self._team_lock(team_id):
                self._sync_pair(team_id, challenge_id)
                instance = self._get(team_id, challenge_id)
                if instance is None or not instance.live:
                    continue
                if instance.state is InstanceState.STOPPING:
                    continue  # teardown already in flight
                if instance.expires_at <= now:
                    self._teardown(instance)
                    with self._registry_lock:
                        self.reaped_total += 1
                    reaped.append(instance.instance_id)
        return reaped

    def sync(self) -> None:
        """Poll the backend for state transitions on every tracked instance."""
        with self._registry_lock:
            pairs = list(self._table.keys())
        for team_id, challenge_id in pairs:
            with self._team_lock(team_id):
                self._sync_pair(team_id, challenge_id)

    # -- internals ------------------------------------------------------------

    def _get(self, team_id: str, challenge_id: str) -> Optional[Instance]:
        with self._registry_lock:
            return self._table.get((team_id, challenge_id))

    def _live_count(self, team_id: str) -> int:
        with self._registry_lock:
            return sum(1 for (t, _), inst in self._table.items() if t == team_id and inst.live)

    def _teardown(self, instance: Instance) -> None:
        self._transition(instance, InstanceState.STOPPING)
        try:
            self._backend.terminate(instance.instance_id)
        except BackendError as exc:
            instance.state = InstanceState.FAILED
            instance.failure_reason = f"teardown failed: {exc}"
            self._journal(instance)

    def _lookup_template(self, challenge_id: str):
        if self._catalog is not None:
            specs = self._catalog()
            spec = specs.get(challenge_id)
            if spec is None:
                raise UnknownChallenge(challenge_id)
            if spec.kind is not ChallengeKind.INSTANCED:
                raise NotInstanced(challenge_id)
        record = self._backend.get_template(challenge_id)
        if record is None:
            if self._catalog is not None:
                raise BackendRejected(f"no registered template for {challenge_id}")
            raise UnknownChallenge(challenge_id)
        return record

    def _team_lock(self, team_id: str) -> threading.Lock:
        with self._registry_lock:
            lock = self._team_locks.get(team_id)
            if lock is None:
                lock = self._team_locks[team_id] = threading.Lock()
            return lock

    def _sync_team(self, team_id: str) -> None:
        with self._registry_lock:
            pairs = [k for k in self._table if k[0] == team_id]
        for t, cid in pairs:
            self._sync_pair(t, cid)

    def _sync_pair(self, team_id: str, challenge_id: str) -> None:
        # caller holds the team lock
        instance = self._get(team_id, challenge_id)
        if instance is None or not instance.submitted or not instance.live:
            return
        workload_state = self._backend.lookup(instance.instance_id)
        if workload_state is None:
            return
        self._advance_to(instance, _WORKLOAD_TO_INSTANCE[workload_state])

    def _advance_to(self, instance: Instance, target: InstanceState) -> None:
        if _STATE_RANK[target] <= _STATE_RANK[instance.state]:
            return  # no regress on stale reads, no exit from terminal states
        if target is InstanceState.FAILED:
            if instance.state is InstanceState.RUNNING:
                # a workload dying after it ran winds down through the normal
                # chain; failed is reserved for never-became-ready / teardown
                self._transition(instance, InstanceState.STOPPING)
                self._transition(instance, InstanceState.EXPIRED)
            else:
                self._transition(instance, InstanceState.FAILED)
            return
        idx = _CHAIN.index(instance.state)
        for state in _CHAIN[idx + 1:]:
            self._transition(instance, state)
            if state is target:
                break

    def _transition(self, instance: Instance, state: InstanceState) -> None:
        instance.state = state
        self._journal(instance)

    # -- journal ----------------------------------------------------------------

    def _journal(self, instance: Instance) -> None:
        if self._journal_path is None:
            return
        entry = {
            "at": self._clock.now(),
            "instance_id": instance.instance_id,
            "team_id": instance.team_id,
            "challenge_id": instance.challenge_id,
            "state": instance.state.value,
            "created_at": instance.created_at,
            "expires_at": instance.expires_at,
        }
        if instance.failure_reason:
            entry["reason"] = instance.failure_reason
        with self._journal_lock:
            with self._journal_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def _recover_journal(self) -> None:
        """Rebuild the table from the journal. Instances that were live when
        the process died are recorded as failed: simulated workloads do not
        outlive the process."""
        latest: dict[tuple[str, str], dict] = {}
        with self._journal_path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                latest[(entry["team_id"], entry["challenge_id"])] = entry
        for (team_id, challenge_id), entry in latest.items():
            state = InstanceState(entry["state"])
            instance = Instance(
                instance_id=entry["instance_id"],
                challenge_id=challenge_id,
                team_id=team_id,
                state=state,
                created_at=entry["created_at"],
                expires_at=entry["expires_at"],
                failure_reason=entry.get("reason"),
            )
            if not state.terminal:
                instance.state = InstanceState.FAILED
                instance.failure_reason = "orphaned by restart"
                self._journal(instance)
            self._table[(team_id, challenge_id)] = instance
