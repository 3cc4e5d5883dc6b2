"""Trace-scan auditors.

Every auditor is a pure function over a TraceBundle so any stored trace can
be re-audited offline. The simulator performs a subset of these checks
online; the scans here are independent recomputations from the event stream
plus the static metadata in the trace header.
"""

from __future__ import annotations

from .events import (ANNOTATION, CAS, CRASH, LIFECYCLE, MEMORY_KINDS,
                     RECOVER, SEG_ENTER, SEG_EXIT, SPIN, TraceBundle,
                     Violation, WRITE)
from .metrics import recount_rmrs

_STAGES = ("FREE", "ALLOCATED", "RETIRED", "RECLAIMED")
_LEGAL = {("FREE", "ALLOCATED"), ("ALLOCATED", "RETIRED"),
          ("RETIRED", "RECLAIMED"), ("RECLAIMED", "ALLOCATED")}


def _cell_values(meta: dict) -> dict[int, int]:
    return {c["id"]: c["init"] for c in meta["cells"]}


def _stores(ev) -> bool:
    return ev.kind == WRITE or (ev.kind == CAS and ev.note["ok"])


def audit_me(bundle: TraceBundle) -> list[Violation]:
    """At most one process inside its CS at any trace instant."""
    out: list[Violation] = []
    in_cs: set[int] = set()
    for ev in bundle.events:
        if ev.kind == SEG_ENTER and ev.note.get("seg") == "CS":
            if in_cs - {ev.pid}:
                out.append(Violation("mutual-exclusion", ev.pid, ev.seq,
                                     f"CS overlap with {sorted(in_cs)}"))
            in_cs.add(ev.pid)
        elif ev.kind == SEG_EXIT and ev.note.get("seg") == "CS":
            in_cs.discard(ev.pid)
        elif ev.kind == CRASH:
            in_cs.discard(ev.pid)
    return out


def audit_crash_semantics(bundle: TraceBundle) -> list[Violation]:
    """Crashed processes take no step before a recover that resets volatiles."""
    out: list[Violation] = []
    programs = bundle.meta["programs"]
    crashed: dict[int, int] = {}
    for ev in bundle.events:
        if ev.kind == CRASH:
            if ev.pid in crashed:
                out.append(Violation("crash-semantics", ev.pid, ev.seq,
                                     "crash while already crashed"))
            crashed[ev.pid] = ev.seq
        elif ev.pid in crashed:
            if ev.kind != RECOVER:
                out.append(Violation("crash-semantics", ev.pid, ev.seq,
                                     f"{ev.kind} before recover"))
            else:
                want = programs[str(ev.pid)]["recover"]
                got = ev.note["stack"]
                if got != [[want[0], want[1], want[2]]]:
                    out.append(Violation("crash-semantics", ev.pid, ev.seq,
                                         f"recovered with stack {got}, expected {want}"))
            crashed.pop(ev.pid, None)
    # a crash with no recovery before trace end is legal in a finite prefix
    return out


def audit_counter_sync(bundle: TraceBundle) -> list[Violation]:
    """start[i] minus finish[i].count stays in {0, 1} at every instant."""
    rc = bundle.meta.get("reclaim")
    if not rc:
        return []
    out: list[Violation] = []
    vals = _cell_values(bundle.meta)
    pairs = list(zip(rc["start_cells"], rc["finish_count_cells"]))
    watch: dict[int, tuple[int, int]] = {}
    for s, c in pairs:
        watch[s] = (s, c)
        watch[c] = (s, c)
    for ev in bundle.events:
        if ev.kind in MEMORY_KINDS and _stores(ev):
            vals[ev.cell] = ev.new
            pair = watch.get(ev.cell)
            if pair:
                d = vals[pair[0]] - vals[pair[1]]
                if d not in (0, 1):
                    out.append(Violation("counter-sync", ev.pid, ev.seq,
                                         f"start-finish gap {d}"))
    return out


def audit_lifecycle(bundle: TraceBundle) -> list[Violation]:
    """Stage moves follow the node lifecycle; accesses hit live stages only."""
    out: list[Violation] = []
    owner = {nd["id"]: nd["owner"] for nd in bundle.meta["nodes"]}
    stage = {nd["id"]: "FREE" for nd in bundle.meta["nodes"]}
    gen = {nd["id"]: 0 for nd in bundle.meta["nodes"]}
    for ev in bundle.events:
        if ev.kind == LIFECYCLE:
            nid, frm, to = ev.note["node"], ev.note["from"], ev.note["to"]
            if stage.get(nid) != frm:
                out.append(Violation("lifecycle-order", ev.pid, ev.seq,
                                     f"node {nid} recorded {frm} but was {stage.get(nid)}"))
            if (frm, to) not in _LEGAL:
                out.append(Violation("lifecycle-order", ev.pid, ev.seq,
                                     f"node {nid}: illegal {frm}->{to}"))
            stage[nid] = to
            if to == "ALLOCATED":
                gen[nid] += 1
                if ev.note["gen"] != gen[nid]:
                    out.append(Violation("lifecycle-order", ev.pid, ev.seq,
                                         f"node {nid} generation skew"))
        elif ev.kind == ANNOTATION and isinstance(ev.note, dict) and "access" in ev.note:
            nid = ev.note["access"]
            st = stage.get(nid, "FREE")
            if owner.get(nid) != ev.pid and st not in ("ALLOCATED", "RETIRED"):
                out.append(Violation("safe-reclamation", ev.pid, ev.seq,
                                     f"access to node {nid} in stage {st}"))
    return out


def _op_windows(bundle: TraceBundle):
    """Yield (pid, op, arg, begin_seq, end_event_or_None, nested_ops, ret)."""
    open_ops: dict[int, list] = {}
    for ev in bundle.events:
        if ev.kind == ANNOTATION and isinstance(ev.note, dict) and "op" in ev.note:
            if ev.note["ph"] == "B":
                open_ops.setdefault(ev.pid, []).append(
                    [ev.note["op"], ev.note.get("arg"), ev.seq, set()])
            else:
                stack = open_ops.get(ev.pid, [])
                if stack and stack[-1][0] == ev.note["op"]:
                    op, arg, begin, nested = stack.pop()
                    for outer in stack:
                        outer[3].add(op)
                        outer[3] |= nested
                    yield (ev.pid, op, arg, begin, ev, nested, ev.note.get("ret"))
        elif ev.kind == CRASH:
            for op, arg, begin, nested in open_ops.get(ev.pid, []):
                yield (ev.pid, op, arg, begin, None, nested, None)
            open_ops[ev.pid] = []


def audit_idempotence(bundle: TraceBundle) -> list[Violation]:
    """Repeat new_node returns the same node; repeat retire changes nothing."""
    out: list[Violation] = []
    last_alloc: dict[int, int] = {}
    retire_between: dict[int, bool] = {}
    effective_retire: dict[int, bool] = {}
    events = {e.seq: e for e in bundle.events}
    windows = sorted(_op_windows(bundle), key=lambda w: w[3])
    # replay begin/end ordering by begin seq; completion matters, so walk ends
    ends = sorted((w for w in windows if w[4] is not None), key=lambda w: w[4].seq)
    begins = sorted(windows, key=lambda w: w[3])
    marks: list[tuple[int, str, tuple]] = []
    for w in begins:
        pid, op, arg, begin, end, nested, ret = w
        marks.append((begin, "B", w))
    for w in ends:
        marks.append((w[4].seq, "E", w))
    marks.sort(key=lambda m: (m[0], m[1]))
    for _, ph, (pid, op, arg, begin, end, nested, ret) in marks:
        if op == "retire" and ph == "B":
            retire_between[pid] = True
        elif op == "new_node" and ph == "E":
            if pid in last_alloc and not retire_between.get(pid, True):
                if ret != last_alloc[pid]:
                    out.append(Violation(
                        "idempotent-allocation", pid, end.seq,
                        f"returned {ret} after {last_alloc[pid]} with no retire between"))
            last_alloc[pid] = ret
            retire_between[pid] = False
            effective_retire[pid] = False
        elif op == "retire" and ph == "E":
            did_set = "bset" in nested
            if did_set:
                if effective_retire.get(pid, False):
                    out.append(Violation(
                        "idempotent-retirement", pid, end.seq,
                        "second retire with no new_node between advanced the counter"))
                effective_retire[pid] = True
    return out


def audit_broadcast(bundle: TraceBundle) -> list[Violation]:
    """Counter monotonicity, interim bounds, wakeup-chain homogeneity, targets."""
    bc = bundle.meta.get("broadcast")
    if not bc:
        return []
    out: list[Violation] = []
    vals = _cell_values(bundle.meta)
    count_of: dict[int, str] = {}
    interim_of: dict[int, str] = {}
    announce_of: dict[int, tuple[str, int]] = {}
    wakeup_of: dict[int, tuple[str, int]] = {}
    target_of: dict[int, tuple[str, int]] = {}
    for name, d in bc.items():
        count_of[d["count"]] = name
        if d["interim"] is not None:
            interim_of[d["interim"]] = name
        for i, cid in enumerate(d["announce"], start=1):
            announce_of[cid] = (name, i)
        for i, cid in enumerate(d["wakeup"], start=1):
            wakeup_of[cid] = (name, i)
        for i, cid in enumerate(d["target"], start=1):
            target_of[cid] = (name, i)
    # open bset windows per object: [arg, announced-set]
    set_open: dict[str, list] = {}
    # open bwait windows per (obj, pid): arg
    wait_open: dict[tuple[str, int], int] = {}
    for ev in bundle.events:
        if ev.kind == ANNOTATION and isinstance(ev.note, dict) and "op" in ev.note:
            op, ph = ev.note["op"], ev.note["ph"]
            if op == "bset":
                name = ev.note["obj"]
                if ph == "B":
                    x = ev.note["arg"]
                    announced = {i for i, cid in
                                 enumerate(bc[name]["announce"], start=1)
                                 if vals[cid] == x}
                    set_open[name] = [x, announced]
                else:
                    set_open.pop(name, None)
            elif op == "bwait":
                key = (ev.note["obj"], ev.pid)
                if ph == "B":
                    wait_open[key] = ev.note["arg"]
                else:
                    wait_open.pop(key, None)
        elif ev.kind == CRASH:
            for key in [k for k in wait_open if k[1] == ev.pid]:
                wait_open.pop(key)
            for name, d in bc.items():
                if d["writer"] == ev.pid:
                    set_open.pop(name, None)
        elif ev.kind in MEMORY_KINDS and _stores(ev):
            cid, newv, oldv = ev.cell, ev.new, vals[ev.cell]
            vals[cid] = newv
            if cid in count_of or cid in interim_of:
                label = count_of.get(cid) or interim_of.get(cid)
                if newv < oldv:
                    out.append(Violation("counter-monotonic", ev.pid, ev.seq,
                                         f"{label} decreased {oldv}->{newv}"))
                elif newv - oldv > 1:
                    out.append(Violation("counter-increment", ev.pid, ev.seq,
                                         f"{label} jumped {oldv}->{newv}"))
                name = count_of.get(cid) or interim_of.get(cid)
                d = bc[name]
                if d["interim"] is not None:
                    gap = vals[d["interim"]] - vals[d["count"]]
                    if gap not in (0, 1):
                        out.append(Violation("interim-bound", ev.pid, ev.seq,
                                             f"{name} interim-count gap {gap}"))
            elif cid in announce_of:
                name, i = announce_of[cid]
                w = set_open.get(name)
                if w is not None and newv == w[0]:
                    w[1].add(i)
            elif cid in wakeup_of:
                name, j = wakeup_of[cid]
                w = set_open.get(name)
                if w is None:
                    out.append(Violation("chain-homogeneity", ev.pid, ev.seq,
                                         f"{name}.wakeup[{j}] written outside bset"))
                else:
                    x, announced = w
                    if j not in announced or (newv != 0 and newv not in announced):
                        out.append(Violation(
                            "chain-homogeneity", ev.pid, ev.seq,
                            f"{name} chain links {j}<-{newv} outside announce({x}) set"))
            elif cid in target_of and ev.kind == WRITE:
                name, i = target_of[cid]
                if ev.pid == i and newv != 0:
                    if wait_open.get((name, i)) != newv:
                        out.append(Violation(
                            "target-invariant", ev.pid, ev.seq,
                            f"{name}.target[{i}] set to {newv} with no matching wait"))
    return out


def audit_quiescence(bundle: TraceBundle) -> list[Violation]:
    """Every pool swap saw each peer quiescent since the swapper's index reset.

    Quiescent for process j means start[j] equals finish[j].count at some
    instant inside the window (reset, swap).
    """
    rc = bundle.meta.get("reclaim")
    if not rc:
        return []
    out: list[Violation] = []
    n = bundle.meta["n"]
    vals = _cell_values(bundle.meta)
    starts = rc["start_cells"]
    counts = rc["finish_count_cells"]
    of_pair = {}
    for j in range(1, n + 1):
        of_pair[starts[j - 1]] = j
        of_pair[counts[j - 1]] = j
    eq = [True] * (n + 1)  # all counters start equal
    witnessed = [[True] * (n + 1) for _ in range(n + 1)]
    for ev in bundle.events:
        if ev.kind in MEMORY_KINDS and _stores(ev):
            vals[ev.cell] = ev.new
            j = of_pair.get(ev.cell)
            if j is not None:
                eq[j] = vals[starts[j - 1]] == vals[counts[j - 1]]
                if eq[j]:
                    for i in range(1, n + 1):
                        witnessed[i][j] = True
        elif (ev.kind == ANNOTATION and isinstance(ev.note, dict)
              and ev.note.get("op") == "step" and ev.note.get("ph") == "E"):
            i = ev.pid
            branch = ev.note.get("branch")
            if branch == "d":
                witnessed[i] = list(eq)
                witnessed[i][0] = True
            elif branch == "c":
                for j in range(1, n + 1):
                    if j != i and not witnessed[i][j]:
                        out.append(Violation(
                            "quiescence-witness", i, ev.seq,
                            f"pool swap without a quiescent instant of process {j}"))
    return out


def audit_publication(bundle: TraceBundle) -> list[Violation]:
    """Published slots carry the current node; Exit clears before retiring."""
    out: list[Violation] = []
    slot_of: dict[int, int] = {}
    for c in bundle.meta["cells"]:
        role = tuple(c["role"])
        if role[:1] == ("slot",):
            slot_of[c["id"]] = role[1]
    if not slot_of:
        return out
    last_alloc: dict[int, int] = {}
    in_exit: dict[int, dict] = {}
    for ev in bundle.events:
        if (ev.kind == ANNOTATION and isinstance(ev.note, dict)
                and ev.note.get("op") == "new_node" and ev.note.get("ph") == "E"):
            last_alloc[ev.pid] = ev.note.get("ret")
        elif ev.kind in MEMORY_KINDS and ev.kind == WRITE and ev.cell in slot_of:
            i = slot_of[ev.cell]
            if ev.pid != i:
                out.append(Violation("publication", ev.pid, ev.seq,
                                     f"slot[{i}] written by process {ev.pid}"))
            if ev.new != 0 and ev.new != last_alloc.get(ev.pid):
                out.append(Violation("publication", ev.pid, ev.seq,
                                     f"published {ev.new}, current node is "
                                     f"{last_alloc.get(ev.pid)}"))
            st = in_exit.get(ev.pid)
            if st is not None and ev.new == 0:
                st["cleared"] = True
        elif ev.kind == SEG_ENTER and ev.note.get("seg") == "EXIT":
            in_exit[ev.pid] = {"cleared": False, "retired": False, "seq": ev.seq}
        elif (ev.kind == ANNOTATION and isinstance(ev.note, dict)
              and ev.note.get("op") == "retire" and ev.note.get("ph") == "B"):
            st = in_exit.get(ev.pid)
            if st is not None and not st["cleared"]:
                out.append(Violation("publication", ev.pid, ev.seq,
                                     "retire before clearing the published slot"))
        elif ev.kind == SEG_EXIT and ev.note.get("seg") == "EXIT":
            in_exit.pop(ev.pid, None)
        elif ev.kind == CRASH:
            in_exit.pop(ev.pid, None)
    return out


def audit_liveness(bundle: TraceBundle, *, patience: int = 20_000,
                   exit_budget: int | None = None,
                   recover_budget: int | None = None) -> list[Violation]:
    """Flag stalled lock attempts and over-budget Exit/Recover segments.

    Budgets count the process's own non-spin memory events inside the
    segment; a crash exempts the truncated segment. Blocked waiting shows up
    as spin reads and is a liveness concern only via the patience bound.
    """
    n = bundle.meta["n"]
    if exit_budget is None:
        exit_budget = 24 + 3 * n
    if recover_budget is None:
        recover_budget = 48 + 3 * n
    out: list[Violation] = []
    pending: dict[int, int] = {}
    seg_count: dict[int, list] = {}
    end_seq = bundle.events[-1].seq if bundle.events else 0
    for ev in bundle.events:
        if ev.kind == SEG_EXIT and ev.note.get("seg") == "NCS":
            pending.setdefault(ev.pid, ev.seq)
        elif ev.kind == SEG_ENTER and ev.note.get("seg") == "CS":
            pending.pop(ev.pid, None)
        if ev.kind == SEG_ENTER and ev.note.get("seg") in ("EXIT", "RECOVER"):
            seg_count[ev.pid] = [ev.note["seg"], 0, ev.seq]
        elif ev.kind == SEG_EXIT and ev.note.get("seg") in ("EXIT", "RECOVER"):
            st = seg_count.pop(ev.pid, None)
            if st is not None:
                budget = exit_budget if st[0] == "EXIT" else recover_budget
                if st[1] > budget:
                    out.append(Violation("segment-budget", ev.pid, ev.seq,
                                         f"{st[0]} took {st[1]} steps (budget {budget})"))
        elif ev.kind == CRASH:
            seg_count.pop(ev.pid, None)
        elif ev.kind in MEMORY_KINDS and ev.note != SPIN:
            st = seg_count.get(ev.pid)
            if st is not None:
                st[1] += 1
    for pid, since in sorted(pending.items()):
        if end_seq - since > patience:
            out.append(Violation("stall", pid, end_seq,
                                 f"left NCS at {since}, no CS entry after "
                                 f"{end_seq - since} events"))
    return out


def audit_freshness(bundle: TraceBundle) -> list[Violation]:
    """Effective allocations between two pool swaps are pairwise distinct,
    always from the owner's registered pool, and each pool holds 2n+2 nodes."""
    rc = bundle.meta.get("reclaim")
    if not rc:
        return []
    out: list[Violation] = []
    n = bundle.meta["n"]
    psize = rc["pool_size"]
    own_nodes: dict[int, set[int]] = {p: set() for p in range(1, n + 1)}
    per_pool: dict[tuple[int, int], int] = {}
    for nd in bundle.meta["nodes"]:
        own_nodes[nd["owner"]].add(nd["id"])
        per_pool[(nd["owner"], nd["pool"])] = per_pool.get((nd["owner"], nd["pool"]), 0) + 1
    for pid in range(1, n + 1):
        for pool in (0, 1):
            if per_pool.get((pid, pool), 0) != psize:
                out.append(Violation("space-bound", pid, 0,
                                     f"pool {pool} holds {per_pool.get((pid, pool), 0)} "
                                     f"nodes, expected {psize}"))
    window: dict[int, set[int]] = {p: set() for p in range(1, n + 1)}
    for w in sorted(_op_windows(bundle), key=lambda w: w[3]):
        pid, op, arg, begin, end, nested, ret = w
        if op == "new_node" and end is not None and "step" in nested:
            if ret not in own_nodes[pid]:
                out.append(Violation("space-bound", pid, end.seq,
                                     f"allocated unregistered node {ret}"))
            if ret in window[pid]:
                out.append(Violation("freshness", pid, end.seq,
                                     f"node {ret} handed out twice in one pool cycle"))
            window[pid].add(ret)
        elif op == "step" and end is not None and end.note.get("branch") == "c":
            window[pid] = set()
    return out


def audit_accounts(bundle: TraceBundle) -> list[Violation]:
    """Live RMR accounting equals the independent recount, both models."""
    out: list[Violation] = []
    live = bundle.meta.get("accounts")
    if not live:
        return out
    cc, dsm = recount_rmrs(bundle)
    if list(live["cc"]) != cc:
        out.append(Violation("rmr-oracle", 0, 0,
                             f"cc mismatch live={live['cc']} recount={cc}"))
    if list(live["dsm"]) != dsm:
        out.append(Violation("rmr-oracle", 0, 0,
                             f"dsm mismatch live={live['dsm']} recount={dsm}"))
    return out


ALL_AUDITORS = {
    "mutual-exclusion": audit_me,
    "crash-semantics": audit_crash_semantics,
    "counter-sync": audit_counter_sync,
    "lifecycle": audit_lifecycle,
    "idempotence": audit_idempotence,
    "broadcast": audit_broadcast,
    "quiescence": audit_quiescence,
    "publication": audit_publication,
    "freshness": audit_freshness,
    "accounts": audit_accounts,
}


def run_all(bundle: TraceBundle, *, include_liveness: bool = False,
            patience: int = 20_000) -> dict[str, list[Violation]]:
    results = {name: fn(bundle) for name, fn in ALL_AUDITORS.items()}
    if include_liveness:
        results["liveness"] = audit_liveness(bundle, patience=patience)
    return results


def flatten(results: dict[str, list[Violation]]) -> list[Violation]:
    return [v for vs in results.values() for v in vs]
