"""Operator entry point.

    ctfpilot validate <repo>
    ctfpilot plan     <repo> --scoreboard URL|sim --backend sim [...]
    ctfpilot apply    <repo> --scoreboard URL|sim --backend sim [...]
    ctfpilot serve    --config ctfpilot.yaml
    ctfpilot package  <repo> --out DIR [--registry HOST]
    ctfpilot new      <repo> <id> --kind static|shared|instanced

Exit codes everywhere: 0 converged/clean, 1 findings or pending changes,
2 operational failure.
"""

from __future__ import annotations

import argparse
import signal
import sys
import threading
from pathlib import Path

from . import __version__
from .api import ApiConfig, ControlPlaneApi
from .backend import SimBackend
from .clock import SystemClock
from .config import ConfigError, ServeConfig, load_serve_config, load_teams
from .instancer import Instancer, InstancerConfig
from .packager import build_plan, package_handouts, write_build_plan
from .reconciler import AuditSink, Reconciler, SnapshotFailed, StateHolder, TargetUnreachable
from .schema import ChallengeSchemaError, scaffold, validate_repo
from .scoreboard import ScoreboardClient
from .scoreboard_mock import MockScoreboard
from .state import ValidationFailed, diff_human, plan, snapshot

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_FAILURE = 2


def _cmd_validate(args) -> int:
    root = Path(args.repo)
    if not root.is_dir():
        print(f"error: no such directory: {root}", file=sys.stderr)
        return EXIT_FAILURE
    try:
        results = validate_repo(root)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    findings = 0
    for cid, diagnostics in results:
        for diag in diagnostics:
            findings += 1
            print(f"{cid}: {diag}")
    return EXIT_FINDINGS if findings else EXIT_OK


class _Targets:
    """Scoreboard client + backend for one-shot plan/apply commands. A 'sim'
    scoreboard runs the bundled mock for the lifetime of the command."""

    def __init__(self, args):
        self._mock_service = None
        if args.scoreboard == "sim":
            self._mock = MockScoreboard(admin_token=args.scoreboard_token)
            self._mock_service = self._mock.serve()
            url = self._mock_service.url
        else:
            url = args.scoreboard
        self.scoreboard = ScoreboardClient(url, args.scoreboard_token)
        if args.backend != "sim":
            raise ConfigError(
                "only the simulated backend ships; pass --backend sim "
                "(a real orchestrator adapter is an extension point)"
            )
        self.backend = SimBackend(state_path=args.backend_state)

    def close(self):
        self.scoreboard.close()
        self.backend.save()
        if self._mock_service is not None:
            self._mock_service.stop()


def _cmd_plan(args) -> int:
    root = Path(args.repo)
    if not root.is_dir():
        print(f"error: no such directory: {root}", file=sys.stderr)
        return EXIT_FAILURE
    try:
        targets = _Targets(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    try:
        desired = snapshot(root, args.revision)
        rec = Reconciler(root, targets.scoreboard, targets.backend,
                         challs_domain=args.domain)
        live = rec.read_live()
    except ValidationFailed as exc:
        for cid, diags in exc.diagnostics:
            for diag in diags:
                print(f"{cid}: {diag}", file=sys.stderr)
        return EXIT_FAILURE
    except TargetUnreachable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        targets.close()
    pending = plan(desired, live)
    print(diff_human(pending))
    return EXIT_FINDINGS if pending.actions else EXIT_OK


def _cmd_apply(args) -> int:
    root = Path(args.repo)
    if not root.is_dir():
        print(f"error: no such directory: {root}", file=sys.stderr)
        return EXIT_FAILURE
    try:
        targets = _Targets(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    try:
        rec = Reconciler(root, targets.scoreboard, targets.backend,
                         challs_domain=args.domain)
        report = rec.reconcile_once(revision=args.revision)
    except SnapshotFailed as exc:
        for cid, diags in exc.diagnostics:
            for diag in diags:
                print(f"{cid}: {diag}", file=sys.stderr)
        return EXIT_FAILURE
    except TargetUnreachable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        targets.close()
    for action, outcome in report.applied:
        print(f"{action.kind.value} {action.challenge_id}: {outcome}")
    if report.converged:
        print(f"converged ({len(report.applied)} actions)")
        return EXIT_OK
    print("not converged", file=sys.stderr)
    return EXIT_FINDINGS


def _cmd_package(args) -> int:
    root = Path(args.repo)
    if not root.is_dir():
        print(f"error: no such directory: {root}", file=sys.stderr)
        return EXIT_FAILURE
    out = Path(args.out)
    try:
        desired = snapshot(root)
    except ValidationFailed as exc:
        for cid, diags in exc.diagnostics:
            for diag in diags:
                print(f"{cid}: {diag}", file=sys.stderr)
        return EXIT_FAILURE
    out.mkdir(parents=True, exist_ok=True)
    for cid, entry in desired.entries.items():
        archive = package_handouts(entry.spec)
        if archive is not None:
            (out / archive.filename).write_bytes(archive.data)
            print(f"wrote {archive.filename} ({len(archive.data)} bytes)")
    plan_doc = build_plan(desired, args.registry)
    json_path, sh_path = write_build_plan(plan_doc, out)
    print(f"wrote {json_path.name} ({len(plan_doc.entries)} images) and {sh_path.name}")
    return EXIT_OK


def _cmd_new(args) -> int:
    root = Path(args.repo)
    if not root.is_dir():
        print(f"error: no such directory: {root}", file=sys.stderr)
        return EXIT_FAILURE
    try:
        created = scaffold(root, args.id, args.kind)
    except ChallengeSchemaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FINDINGS
    print(f"created {created}")
    return EXIT_OK


def _cmd_serve(args) -> int:
    try:
        cfg = load_serve_config(args.config)
        return run_serve(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def run_serve(cfg: ServeConfig, ready: threading.Event | None = None,
              stop: threading.Event | None = None) -> int:
    """Long-running mode: reconcile loop + janitor + HTTP API under one
    shutdown signal. ``ready``/``stop`` exist for embedding in tests."""
    if cfg.instancer is None:
        print("error: serve requires an instancer section (secret_key at least)",
              file=sys.stderr)
        return EXIT_FAILURE
    if cfg.backend.kind != "sim":
        print("error: only the simulated backend ships; set backend.kind: sim",
              file=sys.stderr)
        return EXIT_FAILURE

    clock = SystemClock()
    stop = stop if stop is not None else threading.Event()

    mock_service = None
    if cfg.scoreboard.is_sim:
        mock = MockScoreboard(admin_token=cfg.scoreboard.token)
        mock_service = mock.serve(port=cfg.scoreboard.sim_port)
        scoreboard_url = mock_service.url
        print(f"embedded scoreboard mock at {scoreboard_url}")
    else:
        scoreboard_url = cfg.scoreboard.url

    scoreboard = ScoreboardClient(scoreboard_url, cfg.scoreboard.token)
    backend = SimBackend(clock=clock, state_path=cfg.backend.state_path)
    holder = StateHolder()
    sink = AuditSink(cfg.audit_log)
    reconciler = Reconciler(
        Path(cfg.repo), scoreboard, backend,
        challs_domain=cfg.instancer.challs_domain, clock=clock,
        holder=holder, sink=sink,
    )
    instancer = Instancer(
        backend, cfg.instancer, clock=clock, catalog=holder.specs,
        journal_path=cfg.journal,
    )
    teams = load_teams(cfg.teams_file) if cfg.teams_file else {}

    loop_thread = threading.Thread(
        target=reconciler.run_loop,
        args=(cfg.loop_interval_seconds, stop, cfg.revision),
        name="reconcile-loop", daemon=True,
    )

    def housekeeping():
        # drives simulated lifecycle latencies and the TTL janitor
        last_sweep = clock.now()
        while not stop.is_set():
            backend.pump()
            instancer.sync()
            if clock.now() - last_sweep >= cfg.instancer.janitor_interval_seconds:
                instancer.janitor_sweep()
                last_sweep = clock.now()
            stop.wait(0.25)

    janitor_thread = threading.Thread(target=housekeeping, name="janitor", daemon=True)

    api = ControlPlaneApi(
        instancer, holder.specs, teams,
        ApiConfig(host=cfg.api.host, port=cfg.api.port,
                  admin_token=cfg.api.admin_token, cors_origin=cfg.api.cors_origin),
        clock=clock, reconciler=reconciler,
        loop_alive=lambda: loop_thread.is_alive(),
    )

    def handle_signal(signum, frame):
        stop.set()

    try:
        signal.signal(signal.SIGINT, handle_signal)
        signal.signal(signal.SIGTERM, handle_signal)
    except ValueError:
        pass  # embedded in a non-main thread

    loop_thread.start()
    janitor_thread.start()
    service = api.start()
    print(f"api listening at {service.url}")
    if ready is not None:
        ready.set()
    try:
        stop.wait()
    except KeyboardInterrupt:
        stop.set()
    api.stop()
    loop_thread.join(timeout=max(5, cfg.loop_interval_seconds + 1))
    janitor_thread.join(timeout=5)
    backend.save()
    scoreboard.close()
    if mock_service is not None:
        mock_service.stop()
    print("shutdown complete")
    return EXIT_OK


def _add_target_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scoreboard", default="sim",
                   help="scoreboard base URL, or 'sim' for the bundled mock")
    p.add_argument("--scoreboard-token", default="admin-token")
    p.add_argument("--backend", default="sim", help="only 'sim' is supported")
    p.add_argument("--backend-state", default=None,
                   help="JSON file persisting sim-backend registries across runs")
    p.add_argument("--domain", default="challs.local",
                   help="wildcard DNS suffix for challenge endpoints")
    p.add_argument("--revision", default="working-tree")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctfpilot",
                                     description="GitOps control plane for CTF events")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check every challenge definition in a repo")
    p.add_argument("repo")
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("plan", help="dry-run diff against the live targets")
    p.add_argument("repo")
    _add_target_flags(p)
    p.set_defaults(fn=_cmd_plan)

    p = sub.add_parser("apply", help="run one reconcile cycle")
    p.add_argument("repo")
    _add_target_flags(p)
    p.set_defaults(fn=_cmd_apply)

    p = sub.add_parser("serve", help="reconcile loop + janitor + HTTP API")
    p.add_argument("--config", default=None,
                   help="ctfpilot.yaml (falls back to $CTFPILOT_CONFIG)")
    p.set_defaults(fn=_cmd_serve)

    p = sub.add_parser("package", help="deterministic handout archives + build plan")
    p.add_argument("repo")
    p.add_argument("--out", required=True)
    p.add_argument("--registry", default="registry.local")
    p.set_defaults(fn=_cmd_package)

    p = sub.add_parser("new", help="scaffold a challenge directory")
    p.add_argument("repo")
    p.add_argument("id")
    p.add_argument("--kind", required=True, choices=["static", "shared", "instanced"])
    p.set_defaults(fn=_cmd_new)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
