"""Two-pool node reclamation with a stepped grace period.

Each process owns two pools of 2n+2 nodes and walks a 2n+2 step cycle:

  index 1..n       snapshot each peer's request counter
  index n+1..2n    wait (via the peer's broadcast counter) until that peer's
                   completions caught up to the snapshot, i.e. the peer was
                   quiescent at some point after the snapshot
  index 2n+1       the backup pool has survived a full grace period; make it
                   the current pool
  index 2n+2       re-arm the other pool as backup and restart the cycle

new_node performs one such step whenever the request counter equals the
completion counter, then bumps the request counter and hands out the node
under the current index. retire publishes the completion via the process's
broadcast counter. Both methods are guarded so that crash-and-re-execute
leaves the same state as one clean execution, and repeated calls are no-ops
until the matching opposite call happens.

The lifecycle auditor shadows every node through
FREE -> ALLOCATED -> RETIRED -> RECLAIMED -> ALLOCATED and flags any access
to a FREE or RECLAIMED node by anyone but its owner.
"""

from __future__ import annotations

from dataclasses import dataclass

from .broadcast import BroadcastObject, bc_shadow, make_broadcast
from .machine import (ALLOCATED, FREE, RECLAIMED, RETIRED, STAGE_NAMES,
                      Simulator, step_fn)


@dataclass(frozen=True)
class Reclaimer:
    """Static layout shared by all reclaiming processes."""

    n: int
    start_cells: tuple[int, ...]            # start_cells[i-1] homed at process i
    finish: tuple[BroadcastObject, ...]     # finish[i-1] written by process i
    pools: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]  # [pid-1][pool] -> node ids
    payload_words: int

    def pool_nodes(self, pid: int, pool: int) -> tuple[int, ...]:
        return self.pools[pid - 1][pool]


def pool_size(n: int) -> int:
    return 2 * n + 2


def build_reclamation(sim: Simulator, *, kind: str = "dsm",
                      payload_words: int = 4) -> Reclaimer:
    """Allocate counters, broadcast objects, and both node pools per process."""
    n = sim.n
    start_cells = tuple(
        sim.alloc_cell(i, 0, f"start[{i}]", ("start", i)) for i in range(1, n + 1)
    )
    finish = tuple(
        make_broadcast(sim, f"finish[{i}]", i, kind) for i in range(1, n + 1)
    )
    for i in range(1, n + 1):
        sim.watchers[start_cells[i - 1]] = ("sync", start_cells[i - 1],
                                            finish[i - 1].count, i)
        sim.watchers[finish[i - 1].count] = ("sync", start_cells[i - 1],
                                             finish[i - 1].count, i)
    pools = []
    for pid in range(1, n + 1):
        both = []
        for pool in range(2):
            nids = []
            for slot in range(1, pool_size(n) + 1):
                payload = tuple(
                    sim.alloc_cell(pid, 0, f"node[{pid}.{pool}.{slot}].w{w}",
                                   ("payload", pid, pool, slot, w))
                    for w in range(payload_words)
                )
                nids.append(sim.add_node(pid, pool, slot, payload))
            both.append(tuple(nids))
        pools.append(tuple(both))
    rec = Reclaimer(n, start_cells, finish, tuple(pools), payload_words)
    sim.objects["reclaim"] = rec
    sim.meta_extra["reclaim"] = {
        "start_cells": list(start_cells),
        "finish_count_cells": [b.count for b in finish],
        "finish_names": [b.name for b in finish],
        "pool_size": pool_size(n),
        "payload_words": payload_words,
        "kind": kind,
    }
    return rec


def init_reclaimer_nv(nv: dict, n: int) -> None:
    """Seed one process's non-volatile reclaimer locals."""
    nv["rc.cur"] = 0
    nv["rc.bak"] = 1
    nv["rc.idx"] = 1
    nv["rc.snap"] = (0,) * n
    nv["rc.meth"] = None
    nv["rc.node"] = 0
    nv["rc.start"] = 0


def audit_access(sim: Simulator, pid: int, nid: int) -> bool:
    """Record a payload dereference; flag FREE/RECLAIMED access by non-owners."""
    nd = sim.nodes[nid]
    stage = sim.node_stage(nid)
    ok = nd.owner == pid or stage in (ALLOCATED, RETIRED)
    sim.ann(pid, {"access": nid, "stage": STAGE_NAMES[stage], "owner": nd.owner})
    if not ok:
        sim.violation("safe-reclamation", pid,
                      f"access to node {nid} in stage {STAGE_NAMES[stage]}")
    return ok


def _mark_allocated(sim: Simulator, pid: int, nid: int) -> None:
    stage = sim.node_stage(nid)
    if stage == ALLOCATED:
        return  # idempotent re-return of the same allocation
    sim.move_stage(pid, nid, ALLOCATED, bump_gen=True)


def _mark_retired(sim: Simulator, pid: int, nid: int) -> None:
    if nid == 0 or sim.node_stage(nid) == RETIRED:
        return
    sim.move_stage(pid, nid, RETIRED)


def _reclaim_pool(sim: Simulator, pid: int, rec: Reclaimer, pool: int) -> None:
    for nid in rec.pool_nodes(pid, pool):
        stage = sim.node_stage(nid)
        if stage == RETIRED:
            sim.move_stage(pid, nid, RECLAIMED)
        elif stage == ALLOCATED:
            sim.violation("lifecycle-order", pid,
                          f"pool swap reclaims live node {nid}")


# ------------------------------------------------------------------ new_node

@step_fn("rc.new_node")
def _rc_new_node(sim: Simulator, pid: int, frame: list) -> None:
    loc = frame[2]
    rec: Reclaimer = sim.objects["reclaim"]
    nv = sim.st.ctxs[pid].nv
    pc = frame[1]
    if pc == 0:
        sim.op_begin(pid, "new_node")
        nv["rc.meth"] = "new_node"
        frame[1] = 1
    elif pc == 1:
        loc["s"] = sim.read(pid, rec.start_cells[pid - 1])
        frame[1] = 2
    elif pc == 2:
        frame[1] = 3
        sim.call(pid, rec.finish[pid - 1].read_fn, {"o": rec.finish[pid - 1].name})
    elif pc == 3:
        if loc["_ret"] == loc["s"]:
            frame[1] = 4
            sim.call(pid, "rc.step", {})
        else:
            frame[1] = 5
    elif pc == 4:
        sim.write(pid, rec.start_cells[pid - 1], loc["s"] + 1)
        nv["rc.start"] = loc["s"] + 1
        frame[1] = 5
    elif pc == 5:
        nid = rec.pool_nodes(pid, nv["rc.cur"])[nv["rc.idx"] - 1]
        al = sim.st.shadow["alloc"][pid]
        _mark_allocated(sim, pid, nid)
        # idempotent allocation: a repeat call without retire must hand back
        # the same node
        if al[0] and not al[1] and al[0] != nid:
            sim.violation("idempotent-allocation", pid,
                          f"new_node returned {nid} instead of {al[0]}")
        al[0] = nid
        al[1] = 0
        al[2] = 0
        nv["rc.node"] = nid
        nv["rc.meth"] = None
        sim.op_end(pid, "new_node", ret=nid)
        sim.ret(pid, nid)


# -------------------------------------------------------------------- retire

@step_fn("rc.retire")
def _rc_retire(sim: Simulator, pid: int, frame: list) -> None:
    loc = frame[2]
    rec: Reclaimer = sim.objects["reclaim"]
    nv = sim.st.ctxs[pid].nv
    pc = frame[1]
    if pc == 0:
        sim.op_begin(pid, "retire")
        nv["rc.meth"] = "retire"
        sim.st.shadow["alloc"][pid][1] = 1
        frame[1] = 1
    elif pc == 1:
        loc["s"] = sim.read(pid, rec.start_cells[pid - 1])
        frame[1] = 2
    elif pc == 2:
        frame[1] = 3
        sim.call(pid, rec.finish[pid - 1].read_fn, {"o": rec.finish[pid - 1].name})
    elif pc == 3:
        if loc["s"] != loc["_ret"]:
            loc["did"] = 1
            _mark_retired(sim, pid, nv.get("rc.node", 0))
            frame[1] = 4
            sim.call(pid, rec.finish[pid - 1].set_fn,
                     {"o": rec.finish[pid - 1].name, "x": loc["s"]})
        else:
            frame[1] = 4
    elif pc == 4:
        if loc.get("did"):
            # only completed retires count: a crashed one is re-executed by
            # contract and may legally publish the same completion again
            al = sim.st.shadow["alloc"][pid]
            if al[2]:
                sim.violation("idempotent-retirement", pid,
                              "repeat retire advanced the completion counter")
            al[2] = 1
        nv["rc.meth"] = None
        sim.op_end(pid, "retire")
        sim.ret(pid)


# ---------------------------------------------------------------------- step

@step_fn("rc.step")
def _rc_step(sim: Simulator, pid: int, frame: list) -> None:
    rec: Reclaimer = sim.objects["reclaim"]
    nv = sim.st.ctxs[pid].nv
    n = rec.n
    idx = nv["rc.idx"]
    pc = frame[1]
    if pc == 1:
        # resumed after the waiting-phase broadcast wait returned
        nv["rc.idx"] = idx + 1
        sim.op_end(pid, "step", branch="b", index=idx)
        sim.ret(pid)
        return
    sim.op_begin(pid, "step", index=idx)
    if idx <= n:
        v = sim.read(pid, rec.start_cells[idx - 1])
        snap = list(nv["rc.snap"])
        snap[idx - 1] = v
        nv["rc.snap"] = tuple(snap)
        nv["rc.idx"] = idx + 1
        sim.op_end(pid, "step", branch="a", index=idx)
        sim.ret(pid)
    elif idx <= 2 * n:
        j = idx - n
        if j == pid:
            nv["rc.idx"] = idx + 1
            sim.op_end(pid, "step", branch="b", index=idx, skipped=1)
            sim.ret(pid)
        else:
            x = nv["rc.snap"][j - 1]
            # legal by the counter-sync invariant; assert rather than assume
            if x > bc_shadow(sim, rec.finish[j - 1].name)[0] + 1:
                sim.violation("bc-usage", pid,
                              f"waiting phase would wait({x}) ahead of finish[{j}]")
            frame[1] = 1
            sim.call(pid, rec.finish[j - 1].wait_fn,
                     {"o": rec.finish[j - 1].name, "x": x})
    elif idx == 2 * n + 1:
        nv["rc.cur"] = nv["rc.bak"]
        nv["rc.idx"] = idx + 1
        wit = sim.st.shadow.get("wit")
        if wit is not None:
            for j in range(1, n + 1):
                if j != pid and not wit[pid] & (1 << j):
                    sim.violation("quiescence-witness", pid,
                                  f"pool swap without a quiescent instant of {j}")
        # the pool that just became current sat out a full grace period
        _reclaim_pool(sim, pid, rec, nv["rc.cur"])
        sim.op_end(pid, "step", branch="c", index=idx, pool=nv["rc.cur"])
        sim.ret(pid)
    else:
        nv["rc.bak"] = 1 - nv["rc.cur"]
        nv["rc.idx"] = 1
        wit = sim.st.shadow.get("wit")
        if wit is not None:
            mask = 0
            cells = sim.st.cells
            for j in range(1, n + 1):
                if cells[rec.start_cells[j - 1]] == cells[rec.finish[j - 1].count]:
                    mask |= 1 << j
            wit[pid] = mask  # restart the window with the currently quiescent peers
        sim.op_end(pid, "step", branch="d", index=idx)
        sim.ret(pid)
