"""The control loop: snapshot the source tree, read live state from the
scoreboard and the orchestration backend, plan, apply.

Apply order groups actions by challenge id with scoreboard writes before
backend writes, deletions last; one action failing never aborts the rest of
the cycle. Last-applied hashes live as annotations on the targets themselves
(scoreboard tag, backend label), keeping the controller stateless and
restart-safe. Reports go to an audit sink as JSON lines.
"""

from __future__ import annotations

import json
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, IO, Mapping, Optional

from .backend import OrchestrationBackend, TemplateRecord
from .clock import Clock, SystemClock
from .packager import package_handouts
from .rendering import first_exact_flag, render_shared_workload
from .scoreboard import ScoreboardClient, ScoreboardError, Transport, Unauthorized
from .schema import ChallengeKind, ChallengeSpec
from .state import (
    Action,
    ActionKind,
    BackendFlavor,
    DesiredEntry,
    DesiredState,
    LiveState,
    ValidationFailed,
    plan,
    snapshot,
)

DEFAULT_LOOP_INTERVAL = 30
DEFAULT_LANDING_HINT = "Start your own instance from the landing page."


class ReconcileError(Exception):
    pass


class SnapshotFailed(ReconcileError):
    def __init__(self, diagnostics):
        self.diagnostics = diagnostics
        super().__init__("snapshot failed validation")


class TargetUnreachable(ReconcileError):
    def __init__(self, target: str, reason: str):
        self.target = target
        self.reason = reason
        super().__init__(f"{target} unreachable: {reason}")


@dataclass
class ReconcileReport:
    started_at: float
    finished_at: float
    revision: str
    applied: list[tuple[Action, str]]  # outcome: "ok" or "failed: <reason>"
    converged: bool
    error: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "revision": self.revision,
            "applied": [
                {"action": a.kind.value, "challenge_id": a.challenge_id, "outcome": outcome}
                for a, outcome in self.applied
            ],
            "converged": self.converged,
            "error": self.error,
        }


class StateHolder:
    """Latest snapshot shared with the API layer (and the instancer's
    challenge catalog)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._state: Optional[DesiredState] = None

    def set(self, state: DesiredState) -> None:
        with self._lock:
            self._state = state

    def get(self) -> Optional[DesiredState]:
        with self._lock:
            return self._state

    def specs(self) -> Mapping[str, ChallengeSpec]:
        with self._lock:
            if self._state is None:
                return {}
            return {cid: e.spec for cid, e in self._state.entries.items()}


class AuditSink:
    """Newline-delimited JSON report writer ('-' means stdout)."""

    def __init__(self, target: str | Path | IO[str] = "-"):
        self._lock = threading.Lock()
        self._stream: IO[str] | None
        if hasattr(target, "write"):
            self._stream = target  # caller-owned
            self._path = None
        elif str(target) == "-":
            self._stream = sys.stdout
            self._path = None
        else:
            self._stream = None
            self._path = Path(target)

    def __call__(self, report: ReconcileReport) -> None:
        line = json.dumps(report.to_json_dict(), sort_keys=True)
        with self._lock:
            if self._stream is not None:
                self._stream.write(line + "\n")
                self._stream.flush()
            else:
                with self._path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")


class Reconciler:
    def __init__(
        self,
        root: Path,
        scoreboard: ScoreboardClient,
        backend: OrchestrationBackend,
        challs_domain: str = "challs.local",
        clock: Clock | None = None,
        holder: StateHolder | None = None,
        sink: Callable[[ReconcileReport], None] | None = None,
        landing_hint: str = DEFAULT_LANDING_HINT,
    ):
        self.root = Path(root)
        self._scoreboard = scoreboard
        self._backend = backend
        self._domain = challs_domain
        self._clock = clock if clock is not None else SystemClock()
        self.holder = holder if holder is not None else StateHolder()
        self._sink = sink
        self._landing_hint = landing_hint
        self._cycle_lock = threading.Lock()
        self.cycles_total = 0
        self.failures_total = 0
        self.skipped_ticks = 0

    # -- live state ---------------------------------------------------------

    def read_live(self) -> LiveState:
        try:
            scoreboard = self._scoreboard.list_live()
        except (Transport, Unauthorized) as exc:
            raise TargetUnreachable("scoreboard", str(exc)) from exc
        backend: dict[str, tuple[BackendFlavor, bytes]] = {}
        for cid, digest in self._backend.list_shared().items():
            backend[cid] = (BackendFlavor.SHARED, digest)
        for cid, digest in self._backend.list_templates().items():
            backend[cid] = (BackendFlavor.TEMPLATE, digest)
        return LiveState(scoreboard=scoreboard, backend=backend)

    # -- one cycle ------------------------------------------------------------

    def reconcile_once(self, revision: str = "working-tree") -> ReconcileReport:
        """Snapshot, plan, apply, verify. Raises SnapshotFailed on an invalid
        tree and TargetUnreachable when the initial live read fails; action
        failures are contained per action and recorded in the report."""
        started = self._clock.now()
        try:
            desired = snapshot(self.root, revision)
        except ValidationFailed as exc:
            raise SnapshotFailed(exc.diagnostics) from exc
        self.holder.set(desired)
        live = self.read_live()

        applied: list[tuple[Action, str]] = []
        for action in plan(desired, live).actions:
            try:
                self._apply_action(action, desired)
                applied.append((action, "ok"))
            except Exception as exc:  # contain the failure to this action
                applied.append((action, f"failed: {exc}"))

        all_ok = all(outcome == "ok" for _, outcome in applied)
        try:
            post = plan(desired, self.read_live())
            converged = all_ok and not post.actions
        except TargetUnreachable:
            converged = False

        self.cycles_total += 1
        if not converged:
            self.failures_total += 1
        return ReconcileReport(
            started_at=started,
            finished_at=self._clock.now(),
            revision=revision,
            applied=applied,
            converged=converged,
        )

    def _apply_action(self, action: Action, desired: DesiredState) -> None:
        cid = action.challenge_id
        entry = desired.entries.get(cid)
        kind = action.kind

        if kind in (ActionKind.CREATE_CHALLENGE, ActionKind.UPDATE_CHALLENGE_INFO):
            assert entry is not None
            self._scoreboard.upsert_challenge(
                entry.spec,
                connection_info=self._connection_hint(entry.spec),
                info_hash=entry.info_hash,
            )
        elif kind is ActionKind.UPLOAD_HANDOUTS:
            assert entry is not None
            archive = package_handouts(entry.spec)
            if archive is not None:
                self._scoreboard.upload_handout(cid, archive.data, archive.filename)
        elif kind is ActionKind.APPLY_SHARED:
            assert entry is not None
            workload = render_shared_workload(entry.spec, entry.deploy_hash, self._domain)
            self._backend.apply_shared(cid, workload, entry.deploy_hash)
        elif kind is ActionKind.REGISTER_TEMPLATE:
            assert entry is not None and entry.spec.deployment is not None
            self._backend.register_template(TemplateRecord(
                challenge_id=cid,
                template=entry.spec.deployment,
                flag=first_exact_flag(entry.spec.info.flags),
                deploy_hash=entry.deploy_hash,
            ))
        elif kind is ActionKind.DELETE_CHALLENGE:
            self._scoreboard.delete_challenge(cid)
        elif kind is ActionKind.REMOVE_SHARED:
            self._backend.remove_shared(cid)
        elif kind is ActionKind.UNREGISTER_TEMPLATE:
            # deliberately leaves running team instances to expire via TTL
            self._backend.unregister_template(cid)
        else:  # pragma: no cover
            raise ReconcileError(f"unhandled action {kind}")

    def _connection_hint(self, spec: ChallengeSpec) -> str | None:
        if spec.kind is ChallengeKind.INSTANCED:
            return self._landing_hint
        if spec.kind is ChallengeKind.SHARED and spec.deployment is not None:
            expose = spec.deployment.expose[0]
            base = spec.deployment.shared_host or spec.id
            host = f"{base}.{self._domain}"
            return f"https://{host}" if expose.kind.value == "http" else host
        return None

    # -- loop -------------------------------------------------------------------

    def reconcile_guarded(self, revision: str = "working-tree") -> Optional[ReconcileReport]:
        """reconcile_once under the no-overlap guard; None = a cycle was
        already in flight (counted, never queued)."""
        if not self._cycle_lock.acquire(blocking=False):
            self.skipped_ticks += 1
            return None
        try:
            try:
                return self.reconcile_once(revision)
            except (SnapshotFailed, TargetUnreachable) as exc:
                self.cycles_total += 1
                self.failures_total += 1
                now = self._clock.now()
                return ReconcileReport(
                    started_at=now, finished_at=now, revision=revision,
                    applied=[], converged=False, error=str(exc),
                )
        finally:
            self._cycle_lock.release()

    def run_loop(self, interval_seconds: float, stop: threading.Event,
                 revision: str = "working-tree") -> None:
        """Reconcile immediately, then every interval until stop is set.
        Overlapping runs are skipped, not queued."""
        if interval_seconds < 1:
            raise ValueError("interval_seconds must be >= 1")
        while not stop.is_set():
            report = self.reconcile_guarded(revision)
            if report is not None and self._sink is not None:
                self._sink(report)
            if stop.wait(interval_seconds):
                return
