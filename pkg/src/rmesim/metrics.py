"""RMR recounting and per-operation / per-passage aggregation from traces.

recount_rmrs is an independent replay of the accounting rules (per-cell
validity sets rather than the live per-process sets) used as the oracle for
the live counters. aggregate walks a trace once and attributes each memory
event's charges to the operation windows, segments, and categories that were
open at that point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .events import (ANNOTATION, CAS, CRASH, MEMORY_KINDS, READ, SEG_ENTER,
                     SEG_EXIT, SPIN, TraceBundle, WRITE)

RECLAIM_OPS = frozenset(("new_node", "retire", "step"))
BROADCAST_OPS = frozenset(("bset", "bwait", "bread"))
CATEGORIES = ("lock", "reclaim", "broadcast", "other")


def _homes_from_meta(meta: dict) -> list[int]:
    cells = meta["cells"]
    homes = [0] * len(cells)
    for c in cells:
        homes[c["id"]] = c["home"]
    return homes


def _roles_from_meta(meta: dict) -> list[tuple]:
    cells = meta["cells"]
    roles: list[tuple] = [()] * len(cells)
    for c in cells:
        roles[c["id"]] = tuple(c["role"])
    return roles


def event_charges(bundle: TraceBundle) -> list[tuple[int, int]]:
    """Per-event (cc, dsm) charges recomputed from the trace alone."""
    homes = _homes_from_meta(bundle.meta)
    n = bundle.meta["n"]
    holders: list[set[int]] = [set() for _ in homes]
    charges: list[tuple[int, int]] = []
    for ev in bundle.events:
        if ev.kind not in MEMORY_KINDS:
            if ev.kind == CRASH:
                for s in holders:
                    s.discard(ev.pid)  # a crash drops the volatile cache
            charges.append((0, 0))
            continue
        cid, pid = ev.cell, ev.pid
        dsm = 1 if homes[cid] != pid else 0
        if ev.kind == READ:
            if pid in holders[cid]:
                cc = 0
            else:
                cc = 1
                holders[cid].add(pid)
        elif ev.kind == WRITE:
            cc = 1
            holders[cid] = {pid}
        else:  # cas: charged like a write whether or not it swaps
            cc = 1
            if ev.note["ok"]:
                holders[cid] = {pid}
            else:
                holders[cid].add(pid)
        charges.append((cc, dsm))
    return charges


def recount_rmrs(bundle: TraceBundle) -> tuple[list[int], list[int]]:
    """Reference totals per process: (cc, dsm), index 0 unused."""
    n = bundle.meta["n"]
    cc = [0] * (n + 1)
    dsm = [0] * (n + 1)
    for ev, (c, d) in zip(bundle.events, event_charges(bundle)):
        cc[ev.pid] += c
        dsm[ev.pid] += d
    return cc, dsm


@dataclass
class MetricsReport:
    recount_cc: list[int]
    recount_dsm: list[int]
    max_op_rmr: dict = field(default_factory=dict)      # op -> {"cc","dsm"} non-spin
    op_counts: dict = field(default_factory=dict)       # op -> completed windows
    max_reclaim_per_passage: dict = field(default_factory=dict)  # {"cc","dsm"}
    reclaim_passages: int = 0
    category_split: dict = field(default_factory=dict)  # cat -> model -> {pid: total}
    pool_swaps: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "recount_cc": self.recount_cc, "recount_dsm": self.recount_dsm,
            "max_op_rmr": self.max_op_rmr, "op_counts": self.op_counts,
            "max_reclaim_per_passage": self.max_reclaim_per_passage,
            "reclaim_passages": self.reclaim_passages,
            "category_split": self.category_split,
            "pool_swaps": {str(k): v for k, v in sorted(self.pool_swaps.items())},
        }


def aggregate(bundle: TraceBundle) -> MetricsReport:
    n = bundle.meta["n"]
    roles = _roles_from_meta(bundle.meta)
    charges = event_charges(bundle)
    rep = MetricsReport(*recount_rmrs(bundle))

    # per-pid stack of open op windows: [op, cc_ns, dsm_ns]
    open_ops: dict[int, list[list]] = {p: [] for p in range(1, n + 1)}
    # per-pid open passage accumulator: [cc_ns, dsm_ns] or None
    passage_acc: dict[int, list | None] = {p: None for p in range(1, n + 1)}
    max_op: dict[str, list[int]] = {}
    counts: dict[str, int] = {}
    split = {cat: {"cc": {p: 0 for p in range(1, n + 1)},
                   "dsm": {p: 0 for p in range(1, n + 1)}} for cat in CATEGORIES}
    max_pass = [0, 0]
    pool_swaps = {p: 0 for p in range(1, n + 1)}
    n_passages = 0

    def close_passage(pid: int) -> None:
        nonlocal max_pass
        acc = passage_acc[pid]
        if acc is not None:
            max_pass[0] = max(max_pass[0], acc[0])
            max_pass[1] = max(max_pass[1], acc[1])
            passage_acc[pid] = None

    for ev, (cc, dsm) in zip(bundle.events, charges):
        pid = ev.pid
        kind = ev.kind
        if kind == ANNOTATION and isinstance(ev.note, dict) and "op" in ev.note:
            op = ev.note["op"]
            if ev.note["ph"] == "B":
                open_ops[pid].append([op, 0, 0])
            else:
                if op == "step" and ev.note.get("branch") == "c":
                    pool_swaps[pid] += 1
                stack = open_ops[pid]
                if stack and stack[-1][0] == op:
                    _, c_ns, d_ns = stack.pop()
                    counts[op] = counts.get(op, 0) + 1
                    cur = max_op.setdefault(op, [0, 0])
                    cur[0] = max(cur[0], c_ns)
                    cur[1] = max(cur[1], d_ns)
        elif kind == SEG_ENTER and ev.note.get("seg") == "RECOVER":
            passage_acc[pid] = [0, 0]
            n_passages += 1
        elif kind == SEG_EXIT and ev.note.get("seg") == "EXIT":
            close_passage(pid)
        elif kind == CRASH:
            open_ops[pid] = []  # windows truncated by the crash stay incomplete
            close_passage(pid)
        elif kind in MEMORY_KINDS:
            spin = ev.note == SPIN
            stack = open_ops[pid]
            if not spin:
                for w in stack:
                    w[1] += cc
                    w[2] += dsm
            ops_open = {w[0] for w in stack}
            if ops_open & BROADCAST_OPS:
                cat = "broadcast"
            elif ops_open & RECLAIM_OPS:
                cat = "reclaim"
            elif roles[ev.cell] == ("owner",):
                cat = "lock"
            else:
                cat = "other"
            split[cat]["cc"][pid] += cc
            split[cat]["dsm"][pid] += dsm
            acc = passage_acc[pid]
            if acc is not None and not spin and cat in ("reclaim", "broadcast"):
                acc[0] += cc
                acc[1] += dsm

    for pid in range(1, n + 1):
        close_passage(pid)
    rep.max_op_rmr = {op: {"cc": v[0], "dsm": v[1]} for op, v in sorted(max_op.items())}
    rep.op_counts = dict(sorted(counts.items()))
    rep.max_reclaim_per_passage = {"cc": max_pass[0], "dsm": max_pass[1]}
    rep.reclaim_passages = n_passages
    rep.category_split = {
        cat: {m: {str(p): v for p, v in vals.items() if v}
              for m, vals in models.items()}
        for cat, models in split.items()
    }
    rep.pool_swaps = pool_swaps
    return rep
