"""Segment loop, test lock, publication discipline, BCSR."""

from rmesim.events import CRASH, SEG_ENTER
from rmesim.harness import (PC_CS_PEEK, WorkloadConfig, check_liveness,
                            check_me, run_workload)
from rmesim.schedule import CrashPolicy, ScheduleConfig
from rmesim.auditors import (audit_me, audit_publication, flatten, run_all)


def _cs_entries(bundle, pid=None):
    return [e for e in bundle.events
            if e.kind == SEG_ENTER and e.note.get("seg") == "CS"
            and (pid is None or e.pid == pid)]


def test_single_process_ten_passages():
    wcfg = WorkloadConfig(n=1, passages=10, seed=1)
    bundle, rep = run_workload(wcfg, ScheduleConfig(seed=1, n=1, max_events=5000))
    assert rep.cs_entries[1] == 10
    assert rep.super_passages[1] == 10
    assert not rep.violations
    assert flatten(run_all(bundle, include_liveness=True)) == []


def test_two_process_contention_clean():
    wcfg = WorkloadConfig(n=2, passages=8, seed=3)
    bundle, rep = run_workload(wcfg, ScheduleConfig(seed=3, n=2, max_events=20_000))
    assert rep.cs_entries[1] == 8 and rep.cs_entries[2] == 8
    assert audit_me(bundle) == []
    assert check_me(bundle) == []
    assert check_liveness(bundle) == []
    assert flatten(run_all(bundle)) == []


def test_crashy_run_stays_safe():
    wcfg = WorkloadConfig(n=4, seed=5)
    scfg = ScheduleConfig(seed=5, n=4, max_events=20_000,
                          crash=CrashPolicy.random(0.01))
    bundle, rep = run_workload(wcfg, scfg)
    assert sum(rep.crashes.values()) > 0
    assert not rep.violations
    results = run_all(bundle)
    assert flatten(results) == [], {k: [str(x) for x in v]
                                    for k, v in results.items() if v}


def test_cc_model_run_clean():
    wcfg = WorkloadConfig(n=3, model="cc", seed=9)
    scfg = ScheduleConfig(seed=9, n=3, max_events=15_000,
                          crash=CrashPolicy.random(0.005))
    bundle, rep = run_workload(wcfg, scfg)
    assert not rep.violations
    assert flatten(run_all(bundle)) == []


def test_bcsr_crash_in_cs_reenters_first():
    # crash the lock holder inside its CS; it must be the next process in CS
    wcfg = WorkloadConfig(n=3, seed=2)
    scfg = ScheduleConfig(seed=2, n=3, max_events=20_000,
                          crash=CrashPolicy.targeted([(1, "hz.loop", PC_CS_PEEK)]))
    bundle, rep = run_workload(wcfg, scfg)
    crash_seq = next(e.seq for e in bundle.events
                     if e.kind == CRASH and e.pid == 1)
    later = [e for e in _cs_entries(bundle) if e.seq > crash_seq]
    assert later and later[0].pid == 1
    assert later[0].note.get("bcsr") == 1
    assert audit_me(bundle) == []
    assert flatten(run_all(bundle)) == []


def test_crash_between_step_and_counter_bump():
    # crash exactly after the embedded step, before start is incremented; the
    # recovery re-executes new_node, which runs one more step and still hands
    # out a node with no reclamation-safety fallout
    wcfg = WorkloadConfig(n=2, passages=6, seed=12)
    scfg = ScheduleConfig(seed=12, n=2, max_events=20_000,
                          crash=CrashPolicy.targeted([(1, "rc.new_node", 4)]))
    bundle, rep = run_workload(wcfg, scfg)
    assert rep.crashes[1] == 1
    assert rep.super_passages[1] == 6  # it still completed its quota
    assert flatten(run_all(bundle)) == []
    # the interrupted allocation plus its retry produced two step executions
    crash_seq = next(e.seq for e in bundle.events if e.kind == CRASH)
    retry_allocs = [e for e in bundle.events
                    if e.pid == 1 and e.seq > crash_seq and e.kind == "annotation"
                    and (e.note or {}).get("op") == "new_node"
                    and e.note.get("ph") == "E"]
    assert retry_allocs and retry_allocs[0].note["ret"] > 0


def test_publication_cleared_before_retire():
    wcfg = WorkloadConfig(n=2, passages=6, seed=4)
    bundle, _ = run_workload(wcfg, ScheduleConfig(seed=4, n=2, max_events=20_000))
    assert audit_publication(bundle) == []
    # slots carry only the current node id
    wl_slots = {c["id"] for c in bundle.meta["cells"]
                if tuple(c["role"])[:1] == ("slot",)}
    published = [e for e in bundle.events
                 if e.kind == "write" and e.cell in wl_slots and e.new != 0]
    assert published


def test_cs_payload_writes_are_reexecutable():
    # between two retire completions every payload write by the owner stores
    # the same value, so bounded reentry may repeat the CS body verbatim
    wcfg = WorkloadConfig(n=2, seed=8)
    scfg = ScheduleConfig(seed=8, n=2, max_events=20_000,
                          crash=CrashPolicy.random(0.02))
    bundle, _ = run_workload(wcfg, scfg)
    payload_owner = {c["id"]: tuple(c["role"])[1] for c in bundle.meta["cells"]
                     if tuple(c["role"])[:1] == ("payload",)}
    current: dict = {}
    groups = 0
    for ev in bundle.events:
        if (ev.kind == "annotation" and isinstance(ev.note, dict)
                and ev.note.get("op") == "retire" and ev.note.get("ph") == "E"):
            current.pop(ev.pid, None)
            groups += 1
        elif (ev.kind == "write" and ev.cell in payload_owner
              and payload_owner[ev.cell] == ev.pid):
            prev = current.get(ev.pid)
            if prev is not None:
                assert prev == ev.new, "payload value changed within one request"
            current[ev.pid] = ev.new
    assert groups > 5


def test_stuck_lock_mutant_detected_as_stall():
    wcfg = WorkloadConfig(n=2, seed=6, lock_fault="no_release")
    bundle, _ = run_workload(wcfg, ScheduleConfig(seed=6, n=2, max_events=8000))
    stalls = check_liveness(bundle, patience=2000)
    assert any(v.kind == "stall" for v in stalls)


def test_exit_and_recover_budgets_hold():
    wcfg = WorkloadConfig(n=3, seed=7)
    scfg = ScheduleConfig(seed=7, n=3, max_events=20_000,
                          crash=CrashPolicy.random(0.01))
    bundle, _ = run_workload(wcfg, scfg)
    assert check_liveness(bundle) == []


def test_stats_report_shape():
    wcfg = WorkloadConfig(n=2, passages=4, seed=11)
    bundle, rep = run_workload(wcfg, ScheduleConfig(seed=11, n=2, max_events=10_000))
    d = rep.to_dict()
    for key in ("passages", "crashes", "cc_rmrs", "dsm_rmrs", "rmr_split",
                "max_op_rmr", "max_reclaim_per_passage", "pool_swaps",
                "violations", "cs_entries"):
        assert key in d
    assert rep.to_json()
    assert d["violations"] == []
    # reclamation ops show up with constant-ish per-op maxima
    assert "new_node" in d["max_op_rmr"]
    assert "retire" in d["max_op_rmr"]
