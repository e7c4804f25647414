"""Orchestration backend: the seam through which the reconciler and the
instancer materialize workloads.

Only the deterministic in-memory simulator ships; a real orchestrator
adapter plugs in behind the same interface. The simulator models workload
lifecycle (accepted -> started -> ready -> termination), a host/port routing
table with loading/online/offline serving states, scripted fault injection,
capacity accounting, and a virtual clock so every timing property is exactly
reproducible.
"""

from __future__ import annotations

import heapq
import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

from .clock import Clock, ManualClock
from .schema import (
    ContainerSpec,
    DeploymentTemplate,
    NetProtocol,
    PortSpec,
    Resources,
    deployment_to_dict,
    parse_deployment_dict,
)


class BackendError(Exception):
    pass


class DuplicateWorkload(BackendError):
    pass


class InvalidWorkload(BackendError):
    pass


class UnknownWorkload(BackendError):
    pass


class InjectedFault(BackendError):
    pass


class WorkloadState(str, Enum):
    ACCEPTED = "accepted"
    STARTING = "starting"
    RUNNING = "running"
    STOPPING = "stopping"
    TERMINATED = "terminated"
    FAILED = "failed"

    @property
    def terminal(self) -> bool:
        return self in (WorkloadState.TERMINATED, WorkloadState.FAILED)


class ServingState(str, Enum):
    LOADING = "loading"
    ONLINE = "online"
    OFFLINE = "offline"


class Transition(str, Enum):
    ACCEPTED = "accepted"
    STARTED = "started"
    READY = "ready"
    TERMINATION_REQUESTED = "termination_requested"
    TERMINATED = "terminated"
    FAILED = "failed"


_LIFECYCLE_ORDER = {
    Transition.ACCEPTED: 0,
    Transition.STARTED: 1,
    Transition.READY: 2,
    Transition.TERMINATION_REQUESTED: 3,
    Transition.TERMINATED: 4,
    Transition.FAILED: 5,
}

_TRANSITION_STATE = {
    Transition.ACCEPTED: WorkloadState.ACCEPTED,
    Transition.STARTED: WorkloadState.STARTING,
    Transition.READY: WorkloadState.RUNNING,
    Transition.TERMINATION_REQUESTED: WorkloadState.STOPPING,
    Transition.TERMINATED: WorkloadState.TERMINATED,
    Transition.FAILED: WorkloadState.FAILED,
}


@dataclass(frozen=True)
class BackendEvent:
    at: float
    workload_id: str
    transition: Transition
    reason: str | None = None

    def to_json_dict(self) -> dict:
        out = {"at": self.at, "workload_id": self.workload_id,
               "transition": self.transition.value}
        if self.reason is not None:
            out["reason"] = self.reason
        return out


@dataclass(frozen=True)
class RouteSpec:
    """Requested route: the backend allocates the external port for tcp."""

    name: str
    host: str
    kind: NetProtocol
    container: str
    container_port: int


@dataclass(frozen=True)
class RouteEntry:
    host: str
    port: int
    target: tuple[str, str, int] | None  # (workload_id, container, container port)
    serving_state: ServingState


@dataclass(frozen=True)
class Workload:
    """Fully rendered unit of deployment. No unsubstituted ``{{`` placeholder
    may remain anywhere in a submitted workload."""

    workload_id: str
    labels: dict[str, str]
    containers: list[ContainerSpec]
    routes: list[RouteSpec]


@dataclass(frozen=True)
class WorkloadView:
    workload_id: str
    state: WorkloadState
    labels: dict[str, str]


@dataclass(frozen=True)
class TemplateRecord:
    """Registered instance template: everything needed to render one team's
    workload (the flag value backs the {{FLAG}} placeholder)."""

    challenge_id: str
    template: DeploymentTemplate
    flag: str | None
    deploy_hash: bytes


class OrchestrationBackend:
    """Interface implemented by the simulator (and future real adapters)."""

    def submit(self, workload: Workload) -> None:
        raise NotImplementedError

    def terminate(self, workload_id: str) -> None:
        raise NotImplementedError

    def query(self, selector: dict[str, str], include_terminal: bool = False) -> list[WorkloadView]:
        raise NotImplementedError

    def lookup(self, workload_id: str) -> Optional[WorkloadState]:
        raise NotImplementedError

    def routes_for(self, workload_id: str) -> list[RouteEntry]:
        raise NotImplementedError

    def resolve(self, host: str, port: int = 443) -> RouteEntry:
        raise NotImplementedError

    def apply_shared(self, challenge_id: str, workload: Workload, deploy_hash: bytes) -> bool:
        raise NotImplementedError

    def remove_shared(self, challenge_id: str) -> None:
        raise NotImplementedError

    def list_shared(self) -> dict[str, bytes]:
        raise NotImplementedError

    def register_template(self, record: TemplateRecord) -> None:
        raise NotImplementedError

    def unregister_template(self, challenge_id: str) -> None:
        raise NotImplementedError

    def list_templates(self) -> dict[str, bytes]:
        raise NotImplementedError

    def get_template(self, challenge_id: str) -> Optional[TemplateRecord]:
        raise NotImplementedError


@dataclass
class SimBackendConfig:
    start_latency_ticks: int = 2  # accepted -> ready
    teardown_latency_ticks: int = 1  # stopping -> terminated
    tcp_port_min: int = 30000
    tcp_port_max: int = 32767


@dataclass
class _SimWorkload:
    workload: Workload
    state: WorkloadState
    routes: list[tuple[str, int, RouteSpec]]  # (host, external port, spec)
    incarnation: int
    role: str | None = None  # 'shared' marks reconciler-owned deployments
    deploy_hash: bytes | None = None


def _check_no_placeholders(workload: Workload) -> None:
    def scan(value: str, where: str) -> None:
        if "{{" in value:
            raise InvalidWorkload(f"unsubstituted placeholder in {where}: {value!r}")

    for c in workload.containers:
        scan(c.image, f"container {c.name} image")
        for k, v in c.env.items():
            scan(v, f"container {c.name} env {k}")
    for r in workload.routes:
        scan(r.host, f"route {r.name} host")
    for k, v in workload.labels.items():
        scan(v, f"label {k}")


class SimBackend(OrchestrationBackend):
    """Deterministic simulated backend.

    All mutations are serialized under one lock; identical call + clock
    scripts produce byte-identical event logs. ``advance_clock`` drives the
    virtual clock; with a system clock, call ``pump()`` periodically instead.
    """

    def __init__(
        self,
        clock: Clock | None = None,
        config: SimBackendConfig | None = None,
        state_path: Path | str | None = None,
    ):
        self._clock = clock if clock is not None else ManualClock()
        self.config = config or SimBackendConfig()
        self._lock = threading.RLock()
        self._live: dict[str, _SimWorkload] = {}
        self._history: dict[str, _SimWorkload] = {}  # latest terminal record per id
        self._templates: dict[str, TemplateRecord] = {}
        self._routes: dict[tuple[str, int], _SimWorkload] = {}
        self._route_specs: dict[tuple[str, int], RouteSpec] = {}
        self._event_heap: list[tuple[float, str, int, Transition, str | None]] = []
        self._event_seq = 0
        self._event_log: list[BackendEvent] = []
        self._allocated_tcp: set[int] = set()
        self._submit_faults: list[tuple[str | None, str]] = []
        self._running_cpu = 0
        self._running_mem = 0
        self._state_path = Path(state_path) if state_path else None
        if self._state_path and self._state_path.exists():
            self._load(self._state_path)

    # -- time ------------------------------------------------------------

    @property
    def clock(self) -> Clock:
        return self._clock

    def now(self) -> float:
        return self._clock.now()

    def advance_clock(self, ticks: float) -> list[BackendEvent]:
        """Advance the virtual clock and fire every event that came due,
        ordered by (timestamp, workload_id)."""
        if not isinstance(self._clock, ManualClock):
            raise RuntimeError("advance_clock requires a manual clock")
        with self._lock:
            self._clock.advance(ticks)
            return self._fire_due()

    def pump(self) -> list[BackendEvent]:
        """Fire events due at the current clock reading (system-clock mode)."""
        with self._lock:
            return self._fire_due()

    # -- workload lifecycle ----------------------------------------------

    def submit(self, workload: Workload) -> None:
        with self._lock:
            self._check_submit_fault(workload.workload_id)
            _check_no_placeholders(workload)
            if "challenge" not in workload.labels:
                raise InvalidWorkload("missing required label 'challenge'")
            if workload.workload_id in self._live:
                raise DuplicateWorkload(workload.workload_id)
            self._install(workload, role=None, deploy_hash=None)

    def terminate(self, workload_id: str) -> None:
        with self._lock:
            sim = self._live.get(workload_id)
            if sim is None:
                raise UnknownWorkload(workload_id)
            if sim.state is WorkloadState.STOPPING:
                return  # teardown already in flight
            if sim.state is WorkloadState.FAILED:
                # cleanup of a dead workload: no further lifecycle events
                for host, port, _ in sim.routes:
                    self._release_route((host, port))
                self._live.pop(workload_id, None)
                self._history[workload_id] = sim
                return
            self._apply_transition(sim, Transition.TERMINATION_REQUESTED, None)
            self._schedule(
                self.now() + self.config.teardown_latency_ticks,
                workload_id, Transition.TERMINATED, None,
            )

    def query(self, selector: dict[str, str], include_terminal: bool = False) -> list[WorkloadView]:
        with self._lock:
            pool: list[_SimWorkload] = list(self._live.values())
            if include_terminal:
                pool += [h for h in self._history.values()
                         if h.workload.workload_id not in self._live]
            out = [
                WorkloadView(s.workload.workload_id, s.state, dict(s.workload.labels))
                for s in pool
                if all(s.workload.labels.get(k) == v for k, v in selector.items())
            ]
            out.sort(key=lambda w: w.workload_id)
            return out

    def lookup(self, workload_id: str) -> Optional[WorkloadState]:
        with self._lock:
            sim = self._live.get(workload_id) or self._history.get(workload_id)
            return sim.state if sim else None

    # -- routing ----------------------------------------------------------

    def routes_for(self, workload_id: str) -> list[RouteEntry]:
        with self._lock:
            sim = self._live.get(workload_id)
            if sim is None:
                return []
            return [self._route_entry(sim, host, port, spec) for host, port, spec in sim.routes]

    def resolve(self, host: str, port: int = 443) -> RouteEntry:
        """Route lookup. Unknown or torn-down hosts get the distinguished
        offline fallback; routes of not-yet-ready workloads report loading."""
        with self._lock:
            sim = self._routes.get((host, port))
            if sim is None:
                return RouteEntry(host=host, port=port, target=None,
                                  serving_state=ServingState.OFFLINE)
            spec = self._route_specs[(host, port)]
            return self._route_entry(sim, host, port, spec)

    def _route_entry(self, sim: _SimWorkload, host: str, port: int, spec: RouteSpec) -> RouteEntry:
        # serving state is a pure function of the target workload's state
        if sim.state in (WorkloadState.ACCEPTED, WorkloadState.STARTING):
            serving = ServingState.LOADING
        elif sim.state is WorkloadState.RUNNING:
            serving = ServingState.ONLINE
        else:
            serving = ServingState.OFFLINE
        return RouteEntry(
            host=host, port=port,
            target=(sim.workload.workload_id, spec.container, spec.container_port),
            serving_state=serving,
        )

    # -- shared deployments and templates ----------------------------------

    def apply_shared(self, challenge_id: str, workload: Workload, deploy_hash: bytes) -> bool:
        """Idempotent upsert of the single shared deployment for a challenge.
        Returns False when the live deployment already matches the hash."""
        with self._lock:
            existing = self._find_shared(challenge_id)
            if existing is not None:
                if existing.deploy_hash == deploy_hash:
                    return False
                self._drop_now(existing)
            self._check_submit_fault(workload.workload_id)
            _check_no_placeholders(workload)
            self._install(workload, role="shared", deploy_hash=deploy_hash)
            self._persist()
            return True

    def remove_shared(self, challenge_id: str) -> None:
        with self._lock:
            existing = self._find_shared(challenge_id)
            if existing is not None:
                self._drop_now(existing)
                self._persist()

    def list_shared(self) -> dict[str, bytes]:
        with self._lock:
            return {
                s.workload.labels["challenge"]: s.deploy_hash
                for s in self._live.values()
                if s.role == "shared" and s.deploy_hash is not None
            }

    def register_template(self, record: TemplateRecord) -> None:
        with self._lock:
            self._templates[record.challenge_id] = record
            self._persist()

    def unregister_template(self, challenge_id: str) -> None:
        with self._lock:
            self._templates.pop(challenge_id, None)
            self._persist()

    def list_templates(self) -> dict[str, bytes]:
        with self._lock:
            return {cid: rec.deploy_hash for cid, rec in self._templates.items()}

    def get_template(self, challenge_id: str) -> Optional[TemplateRecord]:
        with self._lock:
            return self._templates.get(challenge_id)

    # -- fault injection ----------------------------------------------------

    def fail_next_submit(self, workload_id: str | None = None, reason: str = "injected fault") -> None:
        """Arm a submit-time rejection: the next submit (optionally only for
        the given workload id) raises InjectedFault."""
        with self._lock:
            self._submit_faults.append((workload_id, reason))

    def fail_at(self, workload_id: str, at: float, reason: str = "injected fault") -> None:
        """Script a runtime failure: the workload transitions to failed when
        the clock reaches ``at``."""
        with self._lock:
            self._schedule(at, workload_id, Transition.FAILED, reason)

    # -- observability -------------------------------------------------------

    def capacity(self) -> tuple[int, int]:
        """(cpu_millis, memory_mb) summed over running workloads."""
        with self._lock:
            return self._running_cpu, self._running_mem

    @property
    def event_log(self) -> list[BackendEvent]:
        with self._lock:
            return list(self._event_log)

    def export_events_ndjson(self) -> str:
        with self._lock:
            return "\n".join(json.dumps(e.to_json_dict(), sort_keys=True)
                             for e in self._event_log)

    # -- internals ------------------------------------------------------------

    def _check_submit_fault(self, workload_id: str) -> None:
        for i, (target, reason) in enumerate(self._submit_faults):
            if target is None or target == workload_id:
                del self._submit_faults[i]
                raise InjectedFault(reason)

    def _find_shared(self, challenge_id: str) -> Optional[_SimWorkload]:
        for s in self._live.values():
            if s.role == "shared" and s.workload.labels.get("challenge") == challenge_id:
                return s
        return None

    def _install(self, workload: Workload, role: str | None, deploy_hash: bytes | None) -> None:
        routes: list[tuple[str, int, RouteSpec]] = []
        claimed: list[tuple[str, int]] = []
        for spec in workload.routes:
            port = 443 if spec.kind is NetProtocol.HTTP else self._alloc_tcp_port()
            key = (spec.host, port)
            if key in self._routes:
                for c in claimed:
                    self._release_route(c)
                raise InvalidWorkload(f"route host already in use: {spec.host}:{port}")
            claimed.append(key)
            routes.append((spec.host, port, spec))

        prev = self._history.get(workload.workload_id)
        sim = _SimWorkload(
            workload=workload, state=WorkloadState.ACCEPTED, routes=routes,
            incarnation=(prev.incarnation + 1 if prev else 0),
            role=role, deploy_hash=deploy_hash,
        )
        self._live[workload.workload_id] = sim
        for host, port, spec in routes:
            self._routes[(host, port)] = sim
            self._route_specs[(host, port)] = spec
            if spec.kind is NetProtocol.TCP:
                self._allocated_tcp.add(port)

        now = self.now()
        self._log_event(BackendEvent(now, workload.workload_id, Transition.ACCEPTED))
        latency = self.config.start_latency_ticks
        self._schedule(now + min(1, latency), workload.workload_id, Transition.STARTED, None)
        self._schedule(now + latency, workload.workload_id, Transition.READY, None)

    def _alloc_tcp_port(self) -> int:
        for port in range(self.config.tcp_port_min, self.config.tcp_port_max + 1):
            if port not in self._allocated_tcp:
                return port
        raise InvalidWorkload("tcp port range exhausted")

    def _release_route(self, key: tuple[str, int]) -> None:
        self._routes.pop(key, None)
        spec = self._route_specs.pop(key, None)
        if spec is not None and spec.kind is NetProtocol.TCP:
            self._allocated_tcp.discard(key[1])

    def _schedule(self, due: float, workload_id: str, transition: Transition,
                  reason: str | None) -> None:
        self._event_seq += 1
        heapq.heappush(self._event_heap, (due, workload_id, self._event_seq, transition, reason))

    def _fire_due(self) -> list[BackendEvent]:
        fired: list[BackendEvent] = []
        now = self.now()
        while self._event_heap and self._event_heap[0][0] <= now:
            due, workload_id, _, transition, reason = heapq.heappop(self._event_heap)
            sim = self._live.get(workload_id)
            if sim is None:
                continue  # stale: workload already dropped or replaced
            if not self._advances(sim.state, transition):
                continue
            event = BackendEvent(due, workload_id, transition, reason)
            self._apply_transition(sim, transition, reason, at=due)
            fired.append(event)
        return fired

    @staticmethod
    def _advances(state: WorkloadState, transition: Transition) -> bool:
        if state.terminal:
            return False
        if transition is Transition.FAILED:
            return True
        order = {
            WorkloadState.ACCEPTED: 0,
            WorkloadState.STARTING: 1,
            WorkloadState.RUNNING: 2,
            WorkloadState.STOPPING: 3,
        }[state]
        return _LIFECYCLE_ORDER[transition] > order

    def _apply_transition(self, sim: _SimWorkload, transition: Transition,
                          reason: str | None, at: float | None = None) -> None:
        was_running = sim.state is WorkloadState.RUNNING
        sim.state = _TRANSITION_STATE[transition]
        if at is None:
            self._log_event(BackendEvent(self.now(), sim.workload.workload_id, transition, reason))
        else:
            self._log_event(BackendEvent(at, sim.workload.workload_id, transition, reason))

        if sim.state is WorkloadState.RUNNING and not was_running:
            for c in sim.workload.containers:
                self._running_cpu += c.resources.cpu_millis
                self._running_mem += c.resources.memory_mb
        elif was_running and sim.state is not WorkloadState.RUNNING:
            for c in sim.workload.containers:
                self._running_cpu -= c.resources.cpu_millis
                self._running_mem -= c.resources.memory_mb

        if sim.state is WorkloadState.TERMINATED:
            # routes disappear only at full termination; during the stopping
            # window they keep answering with the offline state
            for host, port, _ in sim.routes:
                self._release_route((host, port))
            self._live.pop(sim.workload.workload_id, None)
            self._history[sim.workload.workload_id] = sim
        elif sim.state is WorkloadState.FAILED:
            # failed workloads keep their routes (offline) until terminated
            pass

    def _drop_now(self, sim: _SimWorkload) -> None:
        """Instant replace/remove used by shared apply: no teardown latency."""
        if sim.state is WorkloadState.RUNNING:
            for c in sim.workload.containers:
                self._running_cpu -= c.resources.cpu_millis
                self._running_mem -= c.resources.memory_mb
        now = self.now()
        wid = sim.workload.workload_id
        self._log_event(BackendEvent(now, wid, Transition.TERMINATION_REQUESTED))
        self._log_event(BackendEvent(now, wid, Transition.TERMINATED))
        sim.state = WorkloadState.TERMINATED
        for host, port, _ in sim.routes:
            self._release_route((host, port))
        self._live.pop(wid, None)
        self._history[wid] = sim

    def _log_event(self, event: BackendEvent) -> None:
        self._event_log.append(event)

    # -- persistence -----------------------------------------------------------

    def save(self, path: Path | str | None = None) -> None:
        """Persist templates and shared deployments so one-shot CLI runs see
        the same live state across invocations. Per-team instances are
        runtime state and are not persisted."""
        target = Path(path) if path else self._state_path
        if target is None:
            return
        with self._lock:
            doc = {
                "templates": {
                    cid: {
                        "template": deployment_to_dict(rec.template),
                        "kind": "instanced",
                        "flag": rec.flag,
                        "deploy_hash": rec.deploy_hash.hex(),
                    }
                    for cid, rec in self._templates.items()
                },
                "shared": {
                    s.workload.labels["challenge"]: {
                        "workload": _workload_to_dict(s.workload),
                        "deploy_hash": (s.deploy_hash or b"").hex(),
                        "routes": [
                            {"host": host, "port": port, "name": spec.name,
                             "kind": spec.kind.value, "container": spec.container,
                             "container_port": spec.container_port}
                            for host, port, spec in s.routes
                        ],
                    }
                    for s in self._live.values() if s.role == "shared"
                },
            }
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(doc, sort_keys=True, indent=1), encoding="utf-8")

    def _persist(self) -> None:
        if self._state_path is not None:
            self.save(self._state_path)

    def _load(self, path: Path) -> None:
        doc = json.loads(path.read_text(encoding="utf-8"))
        from .schema import ChallengeKind  # template dicts round-trip via the parser

        for cid, rec in doc.get("templates", {}).items():
            template = parse_deployment_dict(
                rec["template"], ChallengeKind.INSTANCED, Path("."),
                has_exact_flag=True, check_files=False,
            )
            self._templates[cid] = TemplateRecord(
                challenge_id=cid, template=template, flag=rec.get("flag"),
                deploy_hash=bytes.fromhex(rec["deploy_hash"]),
            )
        for cid, rec in doc.get("shared", {}).items():
            workload = _workload_from_dict(rec["workload"])
            routes = []
            for r in rec["routes"]:
                spec = RouteSpec(name=r["name"], host=r["host"], kind=NetProtocol(r["kind"]),
                                 container=r["container"], container_port=r["container_port"])
                routes.append((r["host"], r["port"], spec))
            sim = _SimWorkload(
                workload=workload, state=WorkloadState.RUNNING, routes=routes,
                incarnation=0, role="shared",
                deploy_hash=bytes.fromhex(rec["deploy_hash"]),
            )
            self._live[workload.workload_id] = sim
            for host, port, spec in routes:
                self._routes[(host, port)] = sim
                self._route_specs[(host, port)] = spec
                if spec.kind is NetProtocol.TCP:
                    self._allocated_tcp.add(port)
            for c in workload.containers:
                self._running_cpu += c.resources.cpu_millis
                self._running_mem += c.resources.memory_mb


def _workload_to_dict(w: Workload) -> dict:
    return {
        "workload_id": w.workload_id,
        "labels": dict(w.labels),
        "containers": [
            {
                "name": c.name, "image": c.image,
                "ports": [{"number": p.number, "protocol": p.protocol.value} for p in c.ports],
                "env": dict(c.env),
                "resources": {"cpu_millis": c.resources.cpu_millis,
                              "memory_mb": c.resources.memory_mb},
            }
            for c in w.containers
        ],
        "routes": [
            {"name": r.name, "host": r.host, "kind": r.kind.value,
             "container": r.container, "container_port": r.container_port}
            for r in w.routes
        ],
    }


def _workload_from_dict(doc: dict) -> Workload:
    return Workload(
        workload_id=doc["workload_id"],
        labels=dict(doc["labels"]),
        containers=[
            ContainerSpec(
                name=c["name"], image=c["image"],
                ports=[PortSpec(number=p["number"], protocol=NetProtocol(p["protocol"]))
                       for p in c["ports"]],
                env=dict(c["env"]),
                resources=Resources(cpu_millis=c["resources"]["cpu_millis"],
                                    memory_mb=c["resources"]["memory_mb"]),
            )
            for c in doc["containers"]
        ],
        routes=[
            RouteSpec(name=r["name"], host=r["host"], kind=NetProtocol(r["kind"]),
                      container=r["container"], container_port=r["container_port"])
            for r in doc["routes"]
        ],
    )
