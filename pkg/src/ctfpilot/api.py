"""Participant/admin HTTP API.

Team routes (bearer token from the teams file):

    GET    /api/v1/challenges                 visible challenges + own instances
    POST   /api/v1/challenges/{id}/start
    POST   /api/v1/challenges/{id}/extend
    GET    /api/v1/challenges/{id}/status
    DELETE /api/v1/challenges/{id}            stop the team's instance

Admin routes (separate bearer token): POST /admin/reconcile. Unauthenticated:
GET /healthz, GET /metrics (plaintext counters).

Responses use the ``{ok: bool, data|error}`` envelope with snake_case fields;
machine-readable error codes are drawn from ERROR_CODES only. A team can
never see another team's instance records: every instance lookup is keyed by
the authenticated team id.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional

from .clock import Clock, SystemClock
from .httputil import HttpService, make_routes
from .instancer import (
    AlreadyRunning,
    BackendRejected,
    Instancer,
    InstancerError,
    MaxLifetimeReached,
    NoLiveInstance,
    NotInstanced,
    TeamLimitExceeded,
    UnknownChallenge,
)
from .reconciler import Reconciler
from .schema import ChallengeKind, ChallengeSpec

ERROR_CODES = frozenset({
    "unauthorized",
    "forbidden",
    "not_found",
    "unknown_challenge",
    "not_instanced",
    "team_limit_exceeded",
    "already_running",
    "no_live_instance",
    "max_lifetime_reached",
    "backend_rejected",
    "internal_error",
})

_ERROR_MAP: list[tuple[type, int, str]] = [
    (TeamLimitExceeded, 409, "team_limit_exceeded"),
    (AlreadyRunning, 409, "already_running"),
    (NoLiveInstance, 409, "no_live_instance"),
    (MaxLifetimeReached, 409, "max_lifetime_reached"),
    (NotInstanced, 422, "not_instanced"),
    (UnknownChallenge, 404, "unknown_challenge"),
    (BackendRejected, 502, "backend_rejected"),
]


@dataclass
class ApiConfig:
    host: str = "127.0.0.1"
    port: int = 0
    admin_token: str = ""
    cors_origin: str = "*"


class ControlPlaneApi:
    def __init__(
        self,
        instancer: Instancer,
        catalog: Callable[[], Mapping[str, ChallengeSpec]],
        teams: Mapping[str, str],  # token -> team_id (injective)
        config: ApiConfig,
        clock: Clock | None = None,
        reconciler: Reconciler | None = None,
        loop_alive: Callable[[], bool] = lambda: True,
    ):
        self._instancer = instancer
        self._catalog = catalog
        self._teams = dict(teams)
        self._config = config
        self._clock = clock if clock is not None else SystemClock()
        self._reconciler = reconciler
        self._loop_alive = loop_alive
        self._service: HttpService | None = None

    # -- service lifecycle ---------------------------------------------------

    def start(self) -> HttpService:
        self._service = HttpService(
            self._config.host, self._config.port, self._routes(),
            extra_headers=self._cors_headers,
        ).start()
        return self._service

    def stop(self) -> None:
        if self._service is not None:
            self._service.stop()

    @property
    def url(self) -> str:
        assert self._service is not None
        return self._service.url

    def _cors_headers(self) -> list[tuple[str, str]]:
        return [
            ("Access-Control-Allow-Origin", self._config.cors_origin),
            ("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"),
            ("Access-Control-Allow-Headers", "Authorization, Content-Type"),
        ]

    # -- auth ---------------------------------------------------------------

    def _team(self, handler) -> Optional[str]:
        token = handler.bearer_token()
        team = self._teams.get(token) if token else None
        if team is None:
            _error(handler, 401, "unauthorized", "missing or unknown team token")
            return None
        return team

    def _admin(self, handler) -> bool:
        token = handler.bearer_token()
        if not token:
            _error(handler, 401, "unauthorized", "missing admin token")
            return False
        if token != self._config.admin_token:
            _error(handler, 403, "forbidden", "not an admin token")
            return False
        return True

    # -- team handlers ----------------------------------------------------------

    def _list_challenges(self, handler):
        team = self._team(handler)
        if team is None:
            return
        now = self._clock.now()
        data = []
        for cid, spec in sorted(self._catalog().items()):
            if not spec.info.visible:
                continue
            entry = {
                "challenge_id": cid,
                "name": spec.info.name,
                "category": spec.info.category,
                "kind": spec.kind.value,
                "instance": None,
            }
            if spec.kind is ChallengeKind.INSTANCED:
                instance = self._instancer.status(team, cid)
                if instance is not None:
                    entry["instance"] = instance.view(now)
            data.append(entry)
        _ok(handler, 200, data)

    def _visible_challenge(self, handler, cid: str) -> Optional[ChallengeSpec]:
        spec = self._catalog().get(cid)
        if spec is None or not spec.info.visible:
            _error(handler, 404, "unknown_challenge", f"no challenge {cid!r}")
            return None
        return spec

    def _start(self, handler, cid):
        team = self._team(handler)
        if team is None or self._visible_challenge(handler, cid) is None:
            return
        try:
            instance = self._instancer.start(team, cid)
        except InstancerError as exc:
            _instancer_error(handler, exc, self._clock.now())
            return
        _ok(handler, 200, {"instance": instance.view(self._clock.now())})

    def _extend(self, handler, cid):
        team = self._team(handler)
        if team is None or self._visible_challenge(handler, cid) is None:
            return
        try:
            instance = self._instancer.extend(team, cid)
        except InstancerError as exc:
            _instancer_error(handler, exc, self._clock.now())
            return
        _ok(handler, 200, {"instance": instance.view(self._clock.now())})

    def _stop(self, handler, cid):
        team = self._team(handler)
        if team is None or self._visible_challenge(handler, cid) is None:
            return
        try:
            self._instancer.stop(team, cid)
        except InstancerError as exc:
            _instancer_error(handler, exc, self._clock.now())
            return
        instance = self._instancer.status(team, cid)
        view = instance.view(self._clock.now()) if instance else None
        _ok(handler, 200, {"instance": view})

    def _status(self, handler, cid):
        team = self._team(handler)
        if team is None or self._visible_challenge(handler, cid) is None:
            return
        instance = self._instancer.status(team, cid)
        view = instance.view(self._clock.now()) if instance else None
        _ok(handler, 200, {"instance": view})

    # -- operator handlers ----------------------------------------------------

    def _admin_reconcile(self, handler):
        if not self._admin(handler):
            return
        if self._reconciler is None:
            _error(handler, 404, "not_found", "no reconciler attached")
            return
        report = self._reconciler.reconcile_guarded()
        if report is None:
            _ok(handler, 202, {"status": "skipped_busy"})
            return
        _ok(handler, 200, {
            "status": "completed",
            "converged": report.converged,
            "actions": len(report.applied),
        })

    def _healthz(self, handler):
        if self._loop_alive():
            handler.send_text(200, "ok")
        else:
            handler.send_text(503, "degraded")

    def _metrics(self, handler):
        inst = self._instancer
        rec = self._reconciler
        lines = [
            f"live_instances {inst.live_instances()}",
            f"instances_started_total {inst.started_total}",
            f"instances_reaped_total {inst.reaped_total}",
            f"reconcile_cycles_total {rec.cycles_total if rec else 0}",
            f"reconcile_failures_total {rec.failures_total if rec else 0}",
        ]
        handler.send_text(200, "\n".join(lines) + "\n")

    def _routes(self):
        cid = r"(?P<cid>[a-z0-9-]+)"
        return make_routes([
            ("GET", r"/api/v1/challenges", self._list_challenges),
            ("POST", rf"/api/v1/challenges/{cid}/start", self._start),
            ("POST", rf"/api/v1/challenges/{cid}/extend", self._extend),
            ("GET", rf"/api/v1/challenges/{cid}/status", self._status),
            ("DELETE", rf"/api/v1/challenges/{cid}", self._stop),
            ("POST", r"/admin/reconcile", self._admin_reconcile),
            ("GET", r"/healthz", self._healthz),
            ("GET", r"/metrics", self._metrics),
        ])


def _ok(handler, status: int, data) -> None:
    handler.send_json(status, {"ok": True, "data": data})


def _error(handler, status: int, code: str, message: str, **extra) -> None:
    assert code in ERROR_CODES
    handler.send_json(status, {"ok": False, "error": {"code": code,
                                                      "message": message, **extra}})


def _instancer_error(handler, exc: InstancerError, now: float) -> None:
    for etype, status, code in _ERROR_MAP:
        if isinstance(exc, etype):
            extra = {}
            if isinstance(exc, TeamLimitExceeded):
                extra["limit"] = exc.limit
            if isinstance(exc, AlreadyRunning):
                extra["instance"] = exc.existing.view(now)
            _error(handler, status, code, str(exc), **extra)
            return
    _error(handler, 500, "internal_error", str(exc))
