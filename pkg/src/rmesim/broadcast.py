"""Recoverable multi-reader single-writer counter with set / wait / read.

Two variants with the same observable counter semantics:

dsm  Waiters spin on a cell homed at their own node. The writer publishes
     the pending value to ``interim`` first, then scans the announce slots
     and links the announced waiters into a reverse wakeup chain; it wakes
     only the chain head, and each released waiter wakes its predecessor.
     Every operation is idempotent under crash and full re-execution, and
     each call costs a constant number of remote references regardless of
     how many processes participate.

cc   A single shared counter cell: set writes it, wait spins reading it,
     read returns it. Spins are free while the value is cached.

Usage discipline (audited, never enforced at runtime): only the designated
writer calls set and never calls wait; set arguments grow by at most one and
may repeat the last value; a wait for x is legal only while x is at most one
ahead of the last completed set.
"""

from __future__ import annotations

from dataclasses import dataclass

from .machine import Simulator, step_fn


@dataclass(frozen=True)
class BroadcastObject:
    """Cell layout of one counter instance; all mutable state lives in cells."""

    name: str
    kind: str                       # "dsm" | "cc"
    writer: int
    count: int                      # cell id
    interim: int | None             # dsm only
    target: tuple[int, ...]         # dsm only, target[i-1] homed at process i
    announce: tuple[int, ...]       # dsm only, homed at the writer
    wakeup: tuple[int, ...]         # dsm only, homed at the writer
    fault: str | None = None        # test-only fault injection

    @property
    def set_fn(self) -> str:
        return "bc.set" if self.kind == "dsm" else "bc.cc_set"

    @property
    def wait_fn(self) -> str:
        return "bc.wait" if self.kind == "dsm" else "bc.cc_wait"

    @property
    def read_fn(self) -> str:
        return "bc.read"


def make_broadcast(sim: Simulator, name: str, writer: int, kind: str = "dsm",
                   *, fault: str | None = None) -> BroadcastObject:
    """Allocate cells for one counter and register its auditor shadow."""
    if kind not in ("dsm", "cc"):
        raise ValueError(f"bad broadcast kind {kind!r}")
    n = sim.n
    count = sim.alloc_cell(writer, 0, f"{name}.count", ("bc_count", name))
    if kind == "cc":
        obj = BroadcastObject(name, kind, writer, count, None, (), (), (), fault)
        sim.watchers[count] = ("bc", count, None)
    else:
        interim = sim.alloc_cell(writer, 0, f"{name}.interim", ("bc_interim", name))
        target = tuple(sim.alloc_cell(i, 0, f"{name}.target[{i}]", ("bc_target", name, i))
                       for i in range(1, n + 1))
        announce = tuple(sim.alloc_cell(writer, 0, f"{name}.announce[{i}]",
                                        ("bc_announce", name, i))
                         for i in range(1, n + 1))
        wakeup = tuple(sim.alloc_cell(writer, 0, f"{name}.wakeup[{i}]",
                                      ("bc_wakeup", name, i))
                       for i in range(1, n + 1))
        obj = BroadcastObject(name, kind, writer, count, interim, target,
                              announce, wakeup, fault)
        sim.watchers[count] = ("bc", count, interim)
        sim.watchers[interim] = ("bc", count, interim)
    sim.objects[name] = obj
    sim.register_bc_shadow(name)
    sim.meta_extra.setdefault("broadcast", {})[name] = {
        "kind": kind, "writer": writer, "count": obj.count,
        "interim": obj.interim, "target": list(obj.target),
        "announce": list(obj.announce), "wakeup": list(obj.wakeup),
    }
    return obj


def bc_shadow(sim: Simulator, name: str) -> list:
    return sim.st.shadow["bc"][name]


def _audit_set(sim: Simulator, pid: int, o: BroadcastObject, x: int) -> None:
    sh = bc_shadow(sim, o.name)
    if pid != o.writer:
        sim.violation("bc-usage", pid, f"set on {o.name} by non-writer")
    if x not in (sh[0], sh[0] + 1):
        sim.violation("bc-usage", pid,
                      f"set({x}) on {o.name} after last completed set({sh[0]})")


def _audit_wait(sim: Simulator, pid: int, o: BroadcastObject, x: int) -> None:
    sh = bc_shadow(sim, o.name)
    if pid == o.writer:
        sim.violation("bc-usage", pid, f"wait on {o.name} by its writer")
    if x > sh[0] + 1:
        sim.violation("bc-usage", pid,
                      f"wait({x}) on {o.name} runs ahead of set({sh[0]})")


def _next_slot(o: BroadcastObject, j: int, n: int) -> int:
    j += 1
    if j == o.writer:
        j += 1
    return j


# ----------------------------------------------------------------- dsm writer

@step_fn("bc.set")
def _bc_set(sim: Simulator, pid: int, frame: list) -> None:
    loc = frame[2]
    o: BroadcastObject = sim.objects[loc["o"]]
    x = loc["x"]
    pc = frame[1]
    if pc == 0:
        sim.op_begin(pid, "bset", obj=o.name, arg=x)
        _audit_set(sim, pid, o, x)
        bc_shadow(sim, o.name)[1] = x
        loc["last"] = 0
        loc["j"] = _next_slot(o, 0, sim.n)
        frame[1] = 1
    elif pc == 1:
        # publish the pending value first so late waiters take the fast path
        if o.fault != "skip_interim":
            sim.write(pid, o.interim, x)
        frame[1] = 2
    elif pc == 2:
        j = loc["j"]
        if j > sim.n:
            frame[1] = 5
        else:
            a = sim.read(pid, o.announce[j - 1])
            if a == x:
                frame[1] = 3
            else:
                loc["j"] = _next_slot(o, j, sim.n)
    elif pc == 3:
        sim.write(pid, o.wakeup[loc["j"] - 1], loc["last"])
        frame[1] = 4
    elif pc == 4:
        # re-check: a waiter that escaped via the fast path must not head the chain
        a = sim.read(pid, o.announce[loc["j"] - 1])
        if a == x:
            loc["last"] = loc["j"]
        loc["j"] = _next_slot(o, loc["j"], sim.n)
        frame[1] = 2
    elif pc == 5:
        if loc["last"] > 0:
            sim.cas(pid, o.target[loc["last"] - 1], x, 0)
            frame[1] = 6
        else:
            _finish_set(sim, pid, o, x)
    elif pc == 6:
        _finish_set(sim, pid, o, x)


def _finish_set(sim: Simulator, pid: int, o: BroadcastObject, x: int) -> None:
    sim.write(pid, o.count, x)
    sh = bc_shadow(sim, o.name)
    sh[0] = max(sh[0], x)
    sh[1] = -1
    sim.op_end(pid, "bset", obj=o.name, arg=x)
    sim.ret(pid)


# ----------------------------------------------------------------- dsm waiter

@step_fn("bc.wait")
def _bc_wait(sim: Simulator, pid: int, frame: list) -> None:
    loc = frame[2]
    o: BroadcastObject = sim.objects[loc["o"]]
    x = loc["x"]
    pc = frame[1]
    if pc == 0:
        sim.op_begin(pid, "bwait", obj=o.name, arg=x)
        _audit_wait(sim, pid, o, x)
        loc["sp"] = 0
        frame[1] = 1
    elif pc == 1:
        sim.write(pid, o.target[pid - 1], x)
        frame[1] = 2
    elif pc == 2:
        sim.write(pid, o.announce[pid - 1], x)
        frame[1] = 3
    elif pc == 3:
        v = sim.read(pid, o.interim)
        frame[1] = 4 if v >= x else 5
    elif pc == 4:
        sim.write(pid, o.target[pid - 1], 0)
        frame[1] = 5
    elif pc == 5:
        # home spin: wait until a releaser (or the fast path) zeroed the target
        v = sim.read(pid, o.target[pid - 1], spin=bool(loc["sp"]))
        loc["sp"] = 1
        if v == 0:
            frame[1] = 6
    elif pc == 6:
        sim.write(pid, o.announce[pid - 1], 0)
        frame[1] = 7
    elif pc == 7:
        k = sim.read(pid, o.wakeup[pid - 1])
        if k > 0:
            loc["k"] = k
            frame[1] = 8
        else:
            sim.op_end(pid, "bwait", obj=o.name, arg=x)
            sim.ret(pid)
    elif pc == 8:
        # relay the release down the chain; a stale entry fails harmlessly
        sim.cas(pid, o.target[loc["k"] - 1], x, 0)
        sim.op_end(pid, "bwait", obj=o.name, arg=x)
        sim.ret(pid)


# ------------------------------------------------------------------ cc variant

@step_fn("bc.cc_set")
def _bc_cc_set(sim: Simulator, pid: int, frame: list) -> None:
    loc = frame[2]
    o: BroadcastObject = sim.objects[loc["o"]]
    x = loc["x"]
    if frame[1] == 0:
        sim.op_begin(pid, "bset", obj=o.name, arg=x)
        _audit_set(sim, pid, o, x)
        bc_shadow(sim, o.name)[1] = x
        frame[1] = 1
    else:
        _finish_set(sim, pid, o, x)


@step_fn("bc.cc_wait")
def _bc_cc_wait(sim: Simulator, pid: int, frame: list) -> None:
    loc = frame[2]
    o: BroadcastObject = sim.objects[loc["o"]]
    x = loc["x"]
    if frame[1] == 0:
        sim.op_begin(pid, "bwait", obj=o.name, arg=x)
        _audit_wait(sim, pid, o, x)
        loc["sp"] = 0
        frame[1] = 1
    else:
        v = sim.read(pid, o.count, spin=bool(loc["sp"]))
        loc["sp"] = 1
        if v >= x:
            sim.op_end(pid, "bwait", obj=o.name, arg=x)
            sim.ret(pid)


# --------------------------------------------------------------------- reader

@step_fn("bc.read")
def _bc_read(sim: Simulator, pid: int, frame: list) -> None:
    o: BroadcastObject = sim.objects[frame[2]["o"]]
    sim.op_begin(pid, "bread", obj=o.name)
    v = sim.read(pid, o.count)
    sim.op_end(pid, "bread", obj=o.name, ret=v)
    sim.ret(pid, v)
