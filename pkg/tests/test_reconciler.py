"""Control-loop behavior against the mock scoreboard and the simulated
backend: convergence, idempotence, drift repair, fault containment."""

from __future__ import annotations

import io
import json
import shutil
import threading

import pytest

from ctfpilot.backend import SimBackend
from ctfpilot.clock import ManualClock
from ctfpilot.reconciler import (
    AuditSink,
    Reconciler,
    SnapshotFailed,
    StateHolder,
    TargetUnreachable,
)
from ctfpilot.scoreboard import ScoreboardClient
from ctfpilot.scoreboard_mock import MockScoreboard
from ctfpilot.state import ActionKind
from conftest import ADMIN_TOKEN, make_mixed_repo, write_challenge


@pytest.fixture()
def stack(tmp_path, scoreboard_client, manual_clock):
    client, mock = scoreboard_client
    backend = SimBackend(clock=manual_clock)
    repo = tmp_path / "repo"
    repo.mkdir()
    rec = Reconciler(repo, client, backend, challs_domain="challs.test",
                     clock=manual_clock)
    return rec, repo, mock, backend


class TestReconcileOnce:
    def test_empty_repo_empty_live(self, stack):
        rec, _, _, _ = stack
        report = rec.reconcile_once()
        assert report.converged is True
        assert report.applied == []

    def test_cold_start_instanced(self, stack):
        rec, repo, mock, backend = stack
        write_challenge(repo, "pwn-1", kind="instanced",
                        handouts={"dist/a.txt": b"hint"})
        report = rec.reconcile_once()
        kinds = [a.kind for a, outcome in report.applied if outcome == "ok"]
        assert kinds == [ActionKind.CREATE_CHALLENGE, ActionKind.UPLOAD_HANDOUTS,
                         ActionKind.REGISTER_TEMPLATE]
        assert report.converged is True
        assert backend.list_templates().keys() == {"pwn-1"}
        assert mock.find_by_slug("pwn-1")

    def test_second_cycle_has_zero_actions(self, stack):
        rec, repo, _, _ = stack
        make_mixed_repo(repo)
        first = rec.reconcile_once()
        assert first.converged and len(first.applied) >= 10
        second = rec.reconcile_once()
        assert second.applied == []
        assert second.converged is True

    def test_shared_challenge_deploys_and_routes(self, stack):
        rec, repo, _, backend = stack
        write_challenge(repo, "market", kind="shared", shared_host="market")
        rec.reconcile_once()
        backend.advance_clock(2)
        route = backend.resolve("market.challs.test")
        assert route.serving_state.value == "online"

    def test_connection_info_for_kinds(self, stack):
        rec, repo, mock, _ = stack
        write_challenge(repo, "market", kind="shared")
        write_challenge(repo, "pwn-1", kind="instanced")
        write_challenge(repo, "web-1")
        rec.reconcile_once()
        by_slug = {mock.slug_of(rid): ch for rid, ch in mock.challenges.items()}
        assert by_slug["market"]["connection_info"] == "https://market.challs.test"
        assert "landing" in by_slug["pwn-1"]["connection_info"]
        assert by_slug["web-1"]["connection_info"] is None

    def test_snapshot_failure_raises(self, stack):
        rec, repo, _, _ = stack
        bad = write_challenge(repo, "bad")
        (bad / "challenge.yaml").write_text("id: bad\n")
        with pytest.raises(SnapshotFailed):
            rec.reconcile_once()

    def test_deleting_challenge_prunes_targets(self, stack):
        rec, repo, mock, backend = stack
        write_challenge(repo, "pwn-1", kind="instanced")
        write_challenge(repo, "web-1")
        rec.reconcile_once()
        shutil.rmtree(repo / "pwn-1")
        report = rec.reconcile_once()
        kinds = {a.kind for a, _ in report.applied}
        assert kinds == {ActionKind.DELETE_CHALLENGE, ActionKind.UNREGISTER_TEMPLATE}
        assert report.converged
        assert mock.find_by_slug("pwn-1") == []
        assert backend.list_templates() == {}

    def test_deletion_leaves_running_instances_to_ttl(self, stack, tmp_path):
        rec, repo, mock, backend = stack
        write_challenge(repo, "pwn-1", kind="instanced")
        rec.reconcile_once()
        from conftest import make_instancer
        inst = make_instancer(backend, backend.clock)
        started = inst.start("team-a", "pwn-1")
        shutil.rmtree(repo / "pwn-1")
        rec.reconcile_once()
        # template gone, but the team's instance still lives until its TTL
        assert backend.list_templates() == {}
        assert backend.lookup(started.instance_id) is not None

    def test_edit_updates_only_that_challenge(self, stack):
        rec, repo, mock, _ = stack
        write_challenge(repo, "web-1", points=100)
        write_challenge(repo, "web-2", points=100)
        rec.reconcile_once()
        mock.reset_counters()
        info = (repo / "web-1" / "challenge.yaml")
        info.write_text(info.read_text().replace("points: 100", "points: 250"))
        report = rec.reconcile_once()
        touched = {a.challenge_id for a, _ in report.applied}
        assert touched == {"web-1"}
        assert report.converged


class TestDriftRepair:
    def _converge(self, stack):
        rec, repo, mock, backend = stack
        make_mixed_repo(repo)
        assert rec.reconcile_once().converged
        return rec, repo, mock, backend

    def test_scoreboard_deletion_recreated(self, stack):
        rec, _, mock, _ = self._converge(stack)
        rid = mock.find_by_slug("web-1")[0]
        del mock.challenges[rid]  # out-of-band mutation
        report = rec.reconcile_once()
        assert report.converged
        touched = {(a.kind, a.challenge_id) for a, _ in report.applied}
        assert (ActionKind.CREATE_CHALLENGE, "web-1") in touched
        assert all(cid == "web-1" for _, cid in touched)

    def test_template_unregistration_restored(self, stack):
        rec, _, _, backend = self._converge(stack)
        backend.unregister_template("inst-2")
        report = rec.reconcile_once()
        assert report.converged
        assert [(a.kind, a.challenge_id) for a, _ in report.applied] == [
            (ActionKind.REGISTER_TEMPLATE, "inst-2")
        ]

    def test_corrupt_annotation_repaired(self, stack):
        rec, _, mock, _ = self._converge(stack)
        rid = mock.find_by_slug("share-0")[0]
        for tid, tag in list(mock.tags[rid].items()):
            if tag.startswith("hash:"):
                mock.tags[rid][tid] = "hash:" + "00" * 32
        report = rec.reconcile_once()
        assert report.converged
        touched = {(a.kind, a.challenge_id) for a, _ in report.applied}
        assert (ActionKind.UPDATE_CHALLENGE_INFO, "share-0") in touched
        assert all(cid == "share-0" for _, cid in touched)

    def test_three_simultaneous_drifts_one_cycle(self, stack):
        rec, _, mock, backend = self._converge(stack)
        rid = mock.find_by_slug("inst-0")[0]
        del mock.challenges[rid]
        backend.unregister_template("inst-1")
        rid2 = mock.find_by_slug("inst-3")[0]
        for tid, tag in list(mock.tags[rid2].items()):
            if tag.startswith("hash:"):
                mock.tags[rid2][tid] = "hash:" + "ff" * 32
        report = rec.reconcile_once()
        assert report.converged
        assert len(report.applied) <= 3
        touched = {a.challenge_id for a, _ in report.applied}
        assert touched == {"inst-0", "inst-1", "inst-3"}

    def test_revert_to_prior_revision(self, stack, tmp_path):
        rec, repo, mock, backend = stack
        write_challenge(repo, "web-1", points=100)
        rec.reconcile_once(revision="v1")
        saved = (repo / "web-1" / "challenge.yaml").read_text()

        (repo / "web-1" / "challenge.yaml").write_text(
            saved.replace("points: 100", "points: 400"))
        rec.reconcile_once(revision="v2")
        rid = mock.find_by_slug("web-1")[0]
        assert mock.challenges[rid]["value"] == 400

        (repo / "web-1" / "challenge.yaml").write_text(saved)  # revert commit
        report = rec.reconcile_once(revision="v1")
        assert report.converged
        assert mock.challenges[rid]["value"] == 100


class TestFaultContainment:
    def test_permanently_failing_id_does_not_block_others(self, stack):
        rec, repo, mock, _ = stack
        write_challenge(repo, "cursed")
        write_challenge(repo, "fine-1")
        write_challenge(repo, "fine-2")
        # two manual challenges claim cursed's slug: upsert hits a conflict
        mock.seed_challenge("dupe a", tags=["slug:cursed"])
        mock.seed_challenge("dupe b", tags=["slug:cursed"])
        report = rec.reconcile_once()
        outcomes = {a.challenge_id: outcome for a, outcome in report.applied}
        assert outcomes["cursed"].startswith("failed")
        assert outcomes["fine-1"] == "ok"
        assert outcomes["fine-2"] == "ok"
        assert not report.converged
        # the healthy challenges are fully converged despite the failure
        second = rec.reconcile_once()
        assert {a.challenge_id for a, _ in second.applied} == {"cursed"}

    def test_unreachable_scoreboard(self, tmp_path, manual_clock):
        backend = SimBackend(clock=manual_clock)
        client = ScoreboardClient("http://127.0.0.1:1", ADMIN_TOKEN, timeout=0.2)
        repo = tmp_path / "repo"
        repo.mkdir()
        write_challenge(repo, "web-1")
        rec = Reconciler(repo, client, backend, clock=manual_clock)
        with pytest.raises(TargetUnreachable):
            rec.reconcile_once()
        client.close()


class TestLoop:
    def test_stop_before_first_tick(self, stack):
        rec, _, _, _ = stack
        reports = []
        rec._sink = reports.append
        stop = threading.Event()
        stop.set()
        rec.run_loop(1, stop)
        assert reports == []

    def test_loop_emits_reports_and_repairs_drift(self, stack):
        rec, repo, mock, _ = stack
        write_challenge(repo, "web-1")
        reports = []
        rec._sink = reports.append
        stop = threading.Event()

        def driver():
            rec.run_loop(1, stop)

        t = threading.Thread(target=driver)
        t.start()
        try:
            deadline = threading.Event()
            for _ in range(100):
                if mock.find_by_slug("web-1"):
                    break
                deadline.wait(0.05)
            rid = mock.find_by_slug("web-1")[0]
            del mock.challenges[rid]  # drift between ticks
            for _ in range(100):
                if mock.find_by_slug("web-1"):
                    break
                deadline.wait(0.05)
            assert mock.find_by_slug("web-1")  # recreated by a later cycle
        finally:
            stop.set()
            t.join(timeout=10)
        assert all(isinstance(r.converged, bool) for r in reports)

    def test_no_overlap_skips_busy_cycles(self, stack):
        rec, repo, _, _ = stack
        write_challenge(repo, "web-1")
        with rec._cycle_lock:
            assert rec.reconcile_guarded() is None
        assert rec.skipped_ticks == 1
        assert rec.reconcile_guarded() is not None

    def test_audit_sink_ndjson(self, stack):
        rec, repo, _, _ = stack
        write_challenge(repo, "web-1", handouts={"dist/a.txt": b"x"})
        buffer = io.StringIO()
        sink = AuditSink(buffer)
        sink(rec.reconcile_once(revision="deadbeef"))
        lines = buffer.getvalue().strip().splitlines()
        assert len(lines) == 1
        doc = json.loads(lines[0])
        assert doc["revision"] == "deadbeef"
        assert doc["converged"] is True
        assert {a["action"] for a in doc["applied"]} == {
            "create_challenge", "upload_handouts",
        }

    def test_holder_tracks_catalog(self, stack):
        rec, repo, _, _ = stack
        write_challenge(repo, "web-1")
        assert rec.holder.specs() == {}
        rec.reconcile_once()
        assert set(rec.holder.specs()) == {"web-1"}
