"""Broadcast counter: sequencing, wakeup chain, idempotence, RMR constants.

The per-call RMR constants asserted here were derived by hand from the cell
homes (a waiter touches the writer-homed announce cell twice plus the
interim and wakeup cells once each; chain duty adds one remote cas) and are
cross-checked against the independent recount oracle.
"""

from rmesim.broadcast import make_broadcast
from rmesim.crashpoints import driver_program
from rmesim.events import CAS, SPIN
from rmesim.machine import DONE, Simulator
from rmesim.metrics import aggregate
from rmesim.schedule import run_until_done, snapshot_bundle
from rmesim.auditors import audit_accounts, audit_broadcast


def _pair(kind="dsm", writer_ops=(), waiter_ops=(), n=2, fault=None):
    sim = Simulator(n)
    make_broadcast(sim, "g", 1, kind, fault=fault)
    sim.set_program(1, driver_program(list(writer_ops)))
    for pid in range(2, n + 1):
        sim.set_program(pid, driver_program(list(waiter_ops.get(pid, [])))
                        if isinstance(waiter_ops, dict)
                        else driver_program(list(waiter_ops)))
    sim.start()
    return sim


def _spin_to_block(sim, pid, wait_fn="bc.wait", spin_pc=5):
    ctx = sim.st.ctxs[pid]
    for _ in range(300):
        sim.step_once(pid)
        fr = ctx.stack[-1]
        if fr[0] == wait_fn and fr[1] == spin_pc:
            return
    raise AssertionError(f"{pid} never reached the spin")


def _drain(sim, pids, rounds=10_000):
    from rmesim.machine import DONE as _DONE
    pids = list(pids)
    for _ in range(rounds):
        if all(sim.st.ctxs[p].status == _DONE for p in pids):
            return
        for p in pids:
            if sim.st.ctxs[p].status != _DONE:
                sim.step_once(p)
    raise AssertionError("drain did not finish")


def _op_rmrs(sim, pid, op):
    """Non-spin rmrs of completed op windows for pid, via the recount oracle."""
    bundle = snapshot_bundle(sim)
    m = aggregate(bundle)
    return m.max_op_rmr.get(op, {"cc": 0, "dsm": 0})


def test_initial_read_is_zero():
    sim = _pair(writer_ops=[], waiter_ops=[("bc.read", {"o": "g"})])
    run_until_done(sim, 2)
    end = [e for e in sim.trace if e.kind == "annotation"
           and e.note.get("op") == "bread" and e.note.get("ph") == "E"]
    assert end[-1].note["ret"] == 0


def test_sequential_sets_then_read():
    sim = _pair(writer_ops=[("bc.set", {"o": "g", "x": 1}),
                            ("bc.set", {"o": "g", "x": 2}),
                            ("bc.read", {"o": "g"})])
    run_until_done(sim, 1)
    obj = sim.objects["g"]
    assert sim.st.cells[obj.count] == 2
    assert not sim.violations


def test_set_with_no_waiter_performs_no_cas():
    sim = _pair(writer_ops=[("bc.set", {"o": "g", "x": 1})])
    run_until_done(sim, 1)
    assert all(e.kind != CAS for e in sim.trace)
    assert sim.st.cells[sim.objects["g"].count] == 1


def test_blocked_waiter_released_by_set():
    sim = _pair(writer_ops=[("bc.set", {"o": "g", "x": 1})],
                waiter_ops=[("bc.wait", {"o": "g", "x": 1})])
    _spin_to_block(sim, 2)
    run_until_done(sim, 1)
    obj = sim.objects["g"]
    assert sim.st.cells[obj.target[1]] == 0  # the writer's cas reset it
    run_until_done(sim, 2)
    assert sim.st.ctxs[2].status == DONE
    assert not sim.violations


def test_repeat_set_is_idempotent():
    sim = _pair(writer_ops=[("bc.set", {"o": "g", "x": 1})])
    run_until_done(sim, 1)
    cells_after_one = list(sim.st.cells)

    sim2 = _pair(writer_ops=[("bc.set", {"o": "g", "x": 1}),
                             ("bc.set", {"o": "g", "x": 1})])
    run_until_done(sim2, 1)
    assert list(sim2.st.cells) == cells_after_one
    assert not sim2.violations


def test_wait_below_count_returns_without_spinning():
    sim = _pair(writer_ops=[("bc.set", {"o": "g", "x": v}) for v in (1, 2, 3)],
                waiter_ops=[("bc.wait", {"o": "g", "x": 2})])
    run_until_done(sim, 1)
    run_until_done(sim, 2)
    waiter_reads = [e for e in sim.trace if e.pid == 2 and e.note == SPIN]
    assert waiter_reads == []
    assert not sim.violations


def test_wait_zero_returns_immediately():
    sim = _pair(waiter_ops=[("bc.wait", {"o": "g", "x": 0})])
    run_until_done(sim, 2)
    assert sim.st.ctxs[2].status == DONE
    assert not sim.violations


def test_read_during_inflight_set_returns_old_value():
    sim = _pair(writer_ops=[("bc.set", {"o": "g", "x": 1}),
                            ("bc.set", {"o": "g", "x": 2})],
                waiter_ops=[("bc.read", {"o": "g"})])
    # drive the second set past its interim write but stop before count
    obj = sim.objects["g"]
    while sim.st.cells[obj.interim] != 2:
        sim.step_once(1)
    assert sim.st.cells[obj.count] == 1
    run_until_done(sim, 2)
    end = [e for e in sim.trace if e.pid == 2 and e.kind == "annotation"
           and e.note.get("op") == "bread" and e.note.get("ph") == "E"]
    assert end[-1].note["ret"] == 1  # count is written last


def test_three_waiters_all_released_and_writer_cost_constant():
    # whichever subset of processes waits, the writer's set pays one remote cas
    for blocked in ((2,), (2, 3), (2, 3, 4)):
        sim = _pair(n=4,
                    writer_ops=[("bc.set", {"o": "g", "x": 1})],
                    waiter_ops={p: [("bc.wait", {"o": "g", "x": 1})]
                                for p in blocked})
        for p in blocked:
            _spin_to_block(sim, p)
        run_until_done(sim, 1)
        _drain(sim, blocked)  # chain members release each other in turn
        assert all(sim.st.ctxs[p].status == DONE for p in blocked)
        assert _op_rmrs(sim, 1, "bset")["dsm"] == 1
        assert not sim.violations
        assert audit_broadcast(snapshot_bundle(sim)) == []


def test_waiter_rmr_constant_without_chain_duty():
    sim = _pair(writer_ops=[("bc.set", {"o": "g", "x": 1})],
                waiter_ops=[("bc.wait", {"o": "g", "x": 1})])
    _spin_to_block(sim, 2)
    run_until_done(sim, 1)
    run_until_done(sim, 2)
    assert _op_rmrs(sim, 2, "bwait")["dsm"] == 4
    assert audit_accounts(snapshot_bundle(sim)) == []


def test_chain_waiter_pays_one_extra_relay_cas():
    sim = _pair(n=3,
                writer_ops=[("bc.set", {"o": "g", "x": 1})],
                waiter_ops={2: [("bc.wait", {"o": "g", "x": 1})],
                            3: [("bc.wait", {"o": "g", "x": 1})]})
    _spin_to_block(sim, 2)
    _spin_to_block(sim, 3)
    run_until_done(sim, 1)   # builds chain 3 -> 2, wakes 3
    run_until_done(sim, 3)   # relays the wakeup to 2
    run_until_done(sim, 2)
    bundle = snapshot_bundle(sim)
    m = aggregate(bundle)
    assert m.max_op_rmr["bwait"]["dsm"] == 5  # chain duty adds one remote cas
    relays = [e for e in bundle.events if e.kind == CAS and e.pid == 3]
    assert len(relays) == 1 and relays[0].note["ok"] == 1
    assert audit_broadcast(bundle) == []
    assert not sim.violations


def test_usage_rules_audited():
    # set by a non-writer
    sim = _pair(waiter_ops=[("bc.set", {"o": "g", "x": 1})])
    run_until_done(sim, 2)
    assert any(v.kind == "bc-usage" for v in sim.violations)

    # wait by the writer
    sim = _pair(writer_ops=[("bc.wait", {"o": "g", "x": 0})])
    run_until_done(sim, 1)
    assert any(v.kind == "bc-usage" for v in sim.violations)

    # set jumping by two
    sim = _pair(writer_ops=[("bc.set", {"o": "g", "x": 2})])
    run_until_done(sim, 1)
    assert any(v.kind == "bc-usage" for v in sim.violations)

    # wait more than one ahead of the last completed set
    sim = _pair(waiter_ops=[("bc.wait", {"o": "g", "x": 2})])
    for _ in range(3):  # driver dispatch, call push, then the wait's first step
        sim.step_once(2)
    assert any(v.kind == "bc-usage" for v in sim.violations)


def test_cc_variant_basics():
    sim = _pair(kind="cc",
                writer_ops=[("bc.cc_set", {"o": "g", "x": 1})],
                waiter_ops=[("bc.cc_wait", {"o": "g", "x": 1}),
                            ("bc.read", {"o": "g"})])
    run_until_done(sim, 1)
    run_until_done(sim, 2)
    end = [e for e in sim.trace if e.pid == 2 and e.kind == "annotation"
           and e.note.get("op") == "bread" and e.note.get("ph") == "E"]
    assert end[-1].note["ret"] == 1
    assert not sim.violations


def test_cc_release_costs_exactly_one_extra_rmr():
    sim = _pair(kind="cc", writer_ops=[("bc.cc_set", {"o": "g", "x": 1})],
                waiter_ops=[("bc.cc_wait", {"o": "g", "x": 1})])
    _spin_to_block(sim, 2, wait_fn="bc.cc_wait", spin_pc=1)
    sim.step_once(2)  # first read of the loop: the one paid cache miss
    cc_before = sim.st.cc[2]
    for _ in range(5):
        sim.step_once(2)  # cached spin reads are free
    assert sim.st.cc[2] == cc_before
    run_until_done(sim, 1)  # the set invalidates the waiter's cached copy
    run_until_done(sim, 2)
    assert sim.st.cc[2] == cc_before + 1
    assert audit_accounts(snapshot_bundle(sim)) == []


def test_mutant_skipping_interim_strands_a_late_waiter():
    # negative control for the publish-then-scan protocol: if the pending
    # value is never published, a waiter that announces after the scan spins
    # forever
    sim = _pair(fault="skip_interim",
                writer_ops=[("bc.set", {"o": "g", "x": 1})],
                waiter_ops=[("bc.wait", {"o": "g", "x": 1})])
    run_until_done(sim, 1)  # the whole set completes before the wait starts
    ctx = sim.st.ctxs[2]
    for _ in range(200):
        if ctx.status == DONE:
            break
        sim.step_once(2)
    assert ctx.status != DONE  # stuck on the spin
    fr = ctx.stack[-1]
    assert fr[0] == "bc.wait" and fr[1] == 5


def test_monotonic_counter_auditor_accepts_normal_runs():
    sim = _pair(writer_ops=[("bc.set", {"o": "g", "x": 1}),
                            ("bc.set", {"o": "g", "x": 1}),
                            ("bc.set", {"o": "g", "x": 2})])
    run_until_done(sim, 1)
    assert audit_broadcast(snapshot_bundle(sim)) == []
    assert not sim.violations
