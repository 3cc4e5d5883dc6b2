"""Cells, memory ops, and live RMR accounting."""

import pytest

from rmesim.events import CAS, READ, WRITE
from rmesim.machine import (CENTRAL, Simulator, SimulatorError, UnknownCellError,
                            make_program, step_fn)


@step_fn("t.ops")
def _t_ops(sim, pid, frame):
    ops = sim.pconf(pid)["ops"]
    i = frame[1]
    if i >= len(ops):
        sim.ret(pid)
        return
    kind, a = ops[i]
    frame[1] = i + 1
    if kind == "r":
        frame[2]["last"] = sim.read(pid, a)
    elif kind == "w":
        sim.write(pid, a[0], a[1])
    elif kind == "c":
        frame[2]["ok"] = sim.cas(pid, a[0], a[1], a[2])


@step_fn("t.double")
def _t_double(sim, pid, frame):
    cid = sim.pconf(pid)["cid"]
    sim.read(pid, cid)
    sim.read(pid, cid)  # second op in one step must blow up


def _sim_with(n, ops_by_pid):
    sim = Simulator(n)
    return sim, {pid: ops for pid, ops in ops_by_pid.items()}


def _set_ops(sim, pid, ops):
    sim.set_program(pid, make_program("t.ops", config={"ops": ops}))


def _drive(sim, pid, steps):
    for _ in range(steps):
        sim.step_once(pid)


def test_alloc_cell_basics():
    sim = Simulator(2)
    a = sim.alloc_cell(2, 0, "a")
    b = sim.alloc_cell(CENTRAL, 7, "b")
    c = sim.alloc_cell(1, 3, "c")
    assert a != b != c  # fresh ids
    _set_ops(sim, 1, [("r", b)])
    _set_ops(sim, 2, [("r", a)])
    sim.start()
    assert sim.st.cells[a] == 0
    assert sim.st.cells[b] == 7
    sim.step_once(1)
    assert sim.st.ctxs[1].stack[-1][2]["last"] == 7


def test_alloc_after_start_rejected():
    sim = Simulator(1)
    _set_ops(sim, 1, [])
    sim.start()
    with pytest.raises(SimulatorError):
        sim.alloc_cell(1, 0)


def test_unknown_cell_is_fatal():
    sim = Simulator(1)
    _set_ops(sim, 1, [("r", 99)])
    sim.start()
    with pytest.raises(UnknownCellError):
        sim.step_once(1)


def test_one_shared_op_per_step_enforced():
    sim = Simulator(1)
    cid = sim.alloc_cell(1, 0)
    sim.set_program(1, make_program("t.double", config={"cid": cid}))
    sim.start()
    with pytest.raises(SimulatorError):
        sim.step_once(1)


def test_dsm_accounting_remote_read():
    # a read of a cell homed elsewhere costs one DSM rmr
    sim = Simulator(2)
    a = sim.alloc_cell(2, 0, "a")
    _set_ops(sim, 1, [("r", a)])
    _set_ops(sim, 2, [])
    sim.start()
    sim.step_once(1)
    assert sim.st.dsm[1] == 1
    assert sim.st.cc[1] == 1  # first touch is a miss


def test_cc_re_read_is_free():
    sim = Simulator(2)
    a = sim.alloc_cell(2, 5, "a")
    _set_ops(sim, 1, [("r", a), ("r", a)])
    _set_ops(sim, 2, [])
    sim.start()
    _drive(sim, 1, 2)
    assert sim.st.cc[1] == 1  # cached after the first read
    assert sim.st.dsm[1] == 2  # every remote access pays under DSM


def test_cc_invalidation_costs_one_more():
    sim = Simulator(2)
    a = sim.alloc_cell(CENTRAL, 0, "a")
    _set_ops(sim, 1, [("r", a), ("r", a)])
    _set_ops(sim, 2, [("w", (a, 9))])
    sim.start()
    sim.step_once(1)       # miss: cc=1
    sim.step_once(2)       # peer write invalidates
    sim.step_once(1)       # miss again
    assert sim.st.cc[1] == 2
    assert sim.st.cc[2] == 1  # writes always pay under CC


def test_dsm_write_by_home_is_free():
    sim = Simulator(2)
    a = sim.alloc_cell(1, 0, "a")
    _set_ops(sim, 1, [("w", (a, 3)), ("r", a)])
    _set_ops(sim, 2, [])
    sim.start()
    _drive(sim, 1, 2)
    assert sim.st.dsm[1] == 0
    assert sim.st.ctxs[1].stack[-1][2]["last"] == 3  # write then read returns v


def test_central_is_remote_for_everyone():
    sim = Simulator(2)
    a = sim.alloc_cell(CENTRAL, 0, "a")
    _set_ops(sim, 1, [("w", (a, 1))])
    _set_ops(sim, 2, [("r", a)])
    sim.start()
    sim.step_once(1)
    sim.step_once(2)
    assert sim.st.dsm[1] == 1 and sim.st.dsm[2] == 1


def test_cas_semantics():
    sim = Simulator(1)
    a = sim.alloc_cell(1, 5, "a")
    _set_ops(sim, 1, [("c", (a, 5, 7)), ("c", (a, 4, 9)), ("c", (a, 7, 7))])
    sim.start()
    sim.step_once(1)
    assert sim.st.cells[a] == 7 and sim.st.ctxs[1].stack[-1][2]["ok"] is True
    sim.step_once(1)
    assert sim.st.cells[a] == 7 and sim.st.ctxs[1].stack[-1][2]["ok"] is False
    sim.step_once(1)  # cas(x, x) succeeds and leaves the value unchanged
    assert sim.st.cells[a] == 7 and sim.st.ctxs[1].stack[-1][2]["ok"] is True


def test_cas_charged_like_write_regardless_of_outcome():
    sim = Simulator(2)
    a = sim.alloc_cell(2, 5, "a")
    _set_ops(sim, 1, [("c", (a, 0, 1)), ("c", (a, 5, 6))])
    _set_ops(sim, 2, [])
    sim.start()
    _drive(sim, 1, 2)
    assert sim.st.dsm[1] == 2
    assert sim.st.cc[1] == 2


def test_trace_seq_gapless():
    sim = Simulator(2)
    a = sim.alloc_cell(1, 0, "a")
    _set_ops(sim, 1, [("w", (a, 1)), ("r", a)])
    _set_ops(sim, 2, [("r", a)])
    sim.start()
    sim.step_once(1)
    sim.step_once(2)
    sim.step_once(1)
    assert [e.seq for e in sim.trace] == [1, 2, 3]
    kinds = [e.kind for e in sim.trace]
    assert kinds == [WRITE, READ, READ]


def test_value_changes_only_via_store_events():
    sim = Simulator(2)
    a = sim.alloc_cell(CENTRAL, 0, "a")
    _set_ops(sim, 1, [("w", (a, 2)), ("c", (a, 2, 3)), ("c", (a, 9, 4)), ("r", a)])
    _set_ops(sim, 2, [])
    sim.start()
    _drive(sim, 1, 4)
    val = 0
    for ev in sim.trace:
        if ev.kind == WRITE or (ev.kind == CAS and ev.note["ok"]):
            val = ev.new
        elif ev.kind == READ:
            assert ev.old == val
    assert val == 3
