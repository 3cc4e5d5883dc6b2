"""Deterministic shared-memory machine.

Processes are explicit step machines: each scheduler step runs one handler,
which performs at most one shared-memory instruction (read/write/cas). Local
computation is free and folded into the surrounding shared event. Volatile
state is the per-process frame stack; non-volatile locals live in ctx.nv and
survive crashes. A crash erases the stack and later resumes the process at
its declared recover entry point.

RMR accounting runs live on every memory event:
  DSM  +1 whenever the cell's home is not the acting process (CENTRAL cells
       are remote for everyone).
  CC   reads +1 on a cache miss (cell absent from the process's validity
       set); writes and cas always +1, and a value-changing store drops the
       cell from every other process's validity set.
"""

from __future__ import annotations

import hashlib
import pickle
from dataclasses import dataclass, field
from typing import Any, Callable

from .events import (ANNOTATION, CAS, CRASH, Event, LIFECYCLE, READ, RECOVER,
                     SEG_ENTER, SEG_EXIT, SPIN, Violation, WRITE)

CENTRAL = 0
WORD_MASK = (1 << 64) - 1

RUNNING, CRASHED, DONE = 0, 1, 2
STATUS_NAMES = ("RUNNING", "CRASHED", "DONE")

# node lifecycle stages (shadow state maintained for the auditors)
FREE, ALLOCATED, RETIRED, RECLAIMED = 0, 1, 2, 3
STAGE_NAMES = ("FREE", "ALLOCATED", "RETIRED", "RECLAIMED")
LEGAL_STAGE_MOVES = {(FREE, ALLOCATED), (ALLOCATED, RETIRED),
                     (RETIRED, RECLAIMED), (RECLAIMED, ALLOCATED)}

FUNCS: dict[str, Callable[["Simulator", int, list], None]] = {}


def step_fn(name: str):
    """Register a step handler under a stable program-point name."""
    def deco(fn):
        FUNCS[name] = fn
        return fn
    return deco


class SimulatorError(Exception):
    pass


class UnknownCellError(SimulatorError):
    pass


@dataclass(frozen=True)
class ProgramSpec:
    """Static per-process program: entry frame, recover entry frame, params.

    nv_init seeds the process's non-volatile locals once at system init;
    crashes never touch them.
    """

    entry: tuple[str, int, dict]
    recover: tuple[str, int, dict]
    config: dict = field(default_factory=dict)
    nv_init: dict = field(default_factory=dict)


def make_program(entry_fn: str, entry_loc: dict | None = None, *,
                 entry_pc: int = 0, recover: tuple[str, int, dict] | None = None,
                 config: dict | None = None, nv_init: dict | None = None) -> ProgramSpec:
    entry = (entry_fn, entry_pc, dict(entry_loc or {}))
    return ProgramSpec(entry=entry, recover=recover or entry,
                       config=config or {}, nv_init=nv_init or {})


@dataclass(frozen=True)
class NodeInfo:
    """Static identity of one reusable node: owner, pool slot, payload cells."""

    nid: int
    owner: int
    pool: int
    slot: int
    payload: tuple[int, ...]


@dataclass
class ProcessContext:
    pid: int
    status: int = RUNNING
    stack: list = field(default_factory=list)  # volatile frames [fn, pc, locals]
    nv: dict = field(default_factory=dict)     # non-volatile locals

    def copy(self) -> "ProcessContext":
        return ProcessContext(
            self.pid, self.status,
            [[f, pc, dict(loc)] for f, pc, loc in self.stack],
            dict(self.nv),
        )


def _canon(x: Any):
    if isinstance(x, dict):
        return tuple((k, _canon(v)) for k, v in sorted(x.items()))
    if isinstance(x, (list, tuple)):
        return tuple(_canon(v) for v in x)
    return x


@dataclass
class MachineState:
    """Everything that determines future behavior, copyable and hashable."""

    cells: list[int]
    ctxs: list[ProcessContext | None]
    valid: list[set[int]]          # per-pid CC validity sets
    cc: list[int]
    dsm: list[int]
    shadow: dict
    crash_budget: int | None = None

    def copy(self, *, track_rmr: bool = True) -> "MachineState":
        sh = self.shadow
        shadow = {
            "stage": list(sh["stage"]),
            "gen": list(sh["gen"]),
            "bc": {k: list(v) for k, v in sh["bc"].items()},
            "alloc": {k: list(v) for k, v in sh["alloc"].items()},
            "seg": list(sh["seg"]),
        }
        wit = sh.get("wit")
        if wit is not None:
            shadow["wit"] = list(wit)
        if track_rmr:
            valid = [set(s) for s in self.valid]
            cc, dsm = list(self.cc), list(self.dsm)
        else:
            valid, cc, dsm = self.valid, self.cc, self.dsm
        return MachineState(
            cells=list(self.cells),
            ctxs=[c.copy() if c else None for c in self.ctxs],
            valid=valid, cc=cc, dsm=dsm,
            shadow=shadow, crash_budget=self.crash_budget,
        )

    def key(self) -> bytes:
        """Digest of the behavioral state.

        RMR counters, validity sets, and the trace are excluded: they do not
        influence any future transition or auditor verdict.
        """
        sh = self.shadow
        wit = sh.get("wit")
        parts = (
            tuple(self.cells),
            tuple(
                (c.status, tuple((f, pc, _canon(loc)) for f, pc, loc in c.stack),
                 _canon(c.nv))
                for c in self.ctxs if c is not None
            ),
            tuple(sh["stage"]), tuple(sh["gen"]),
            _canon(sh["bc"]), _canon(sh["alloc"]), tuple(sh["seg"]),
            None if wit is None else tuple(wit),
            self.crash_budget,
        )
        return hashlib.blake2b(pickle.dumps(parts, protocol=4), digest_size=16).digest()


class Simulator:
    """Owns the cell table, the programs, the machine state, and the trace."""

    def __init__(self, n: int, *, track_rmr: bool = True):
        if n < 1:
            raise ValueError("need at least one process")
        self.n = n
        self.homes: list[int] = []
        self.names: list[str] = []
        self.roles: list[tuple] = []
        self.inits: list[int] = []
        self.objects: dict[str, Any] = {}
        self.programs: dict[int, ProgramSpec] = {}
        self.nodes: list[NodeInfo | None] = [None]
        self.track_rmr = track_rmr
        self.trace: list[Event] = []
        self.violations: list[Violation] = []
        self.st: MachineState | None = None
        self.started = False
        self._ops = 0
        # online watchers: cell id -> ("sync", start_cid, count_cid)
        #                           | ("bc", count_cid, interim_cid_or_None)
        self.watchers: dict[int, tuple] = {}
        self._bc_shadow_init: dict[str, list] = {}
        self.meta_extra: dict[str, Any] = {}

    # ------------------------------------------------------------------ setup

    def alloc_cell(self, home: int, init: int = 0, name: str = "",
                   role: tuple = ()) -> int:
        if self.started:
            raise SimulatorError("cells must be allocated before the run starts")
        if home != CENTRAL and not (1 <= home <= self.n):
            raise ValueError(f"bad home {home}")
        cid = len(self.homes)
        self.homes.append(home)
        self.names.append(name or f"cell{cid}")
        self.roles.append(role)
        self.inits.append(init & WORD_MASK)
        return cid

    def add_node(self, owner: int, pool: int, slot: int,
                 payload: tuple[int, ...]) -> int:
        nid = len(self.nodes)
        self.nodes.append(NodeInfo(nid, owner, pool, slot, payload))
        return nid

    def set_program(self, pid: int, spec: ProgramSpec) -> None:
        self.programs[pid] = spec

    def register_bc_shadow(self, name: str) -> None:
        self._bc_shadow_init[name] = [0, -1]  # [last completed set, pending arg]

    def start(self) -> None:
        num_nodes = len(self.nodes)
        ctxs: list[ProcessContext | None] = [None] * (self.n + 1)
        for pid in range(1, self.n + 1):
            spec = self.programs.get(pid)
            if spec is None:
                raise SimulatorError(f"no program for process {pid}")
            fn, pc, loc = spec.entry
            ctxs[pid] = ProcessContext(pid, RUNNING, [[fn, pc, dict(loc)]],
                                       dict(spec.nv_init))
        self.st = MachineState(
            cells=list(self.inits),
            ctxs=ctxs,
            valid=[set() for _ in range(self.n + 1)],
            cc=[0] * (self.n + 1),
            dsm=[0] * (self.n + 1),
            shadow={
                "stage": [FREE] * num_nodes,
                "gen": [0] * num_nodes,
                "bc": {k: list(v) for k, v in self._bc_shadow_init.items()},
                "alloc": {p: [0, 1, 0] for p in range(1, self.n + 1)},
                "seg": [None] * (self.n + 1),
            },
        )
        self.trace = []
        self.violations = []
        self.started = True

    def build_meta(self) -> dict:
        return {
            **self.meta_extra,
            "n": self.n,
            "cells": [
                {"id": i, "home": self.homes[i], "name": self.names[i],
                 "role": list(self.roles[i]), "init": self.inits[i],
                 "persistent": True}
                for i in range(len(self.homes))
            ],
            "nodes": [
                {"id": nd.nid, "owner": nd.owner, "pool": nd.pool,
                 "slot": nd.slot, "payload": list(nd.payload)}
                for nd in self.nodes if nd is not None
            ],
            "programs": {
                str(pid): {"entry": [s.entry[0], s.entry[1], s.entry[2]],
                           "recover": [s.recover[0], s.recover[1], s.recover[2]]}
                for pid, s in sorted(self.programs.items())
            },
        }

    # ------------------------------------------------------------- trace emit

    def emit(self, pid: int, kind: str, cell: int | None = None,
             old: int | None = None, new: int | None = None,
             note: Any = None) -> None:
        home = self.homes[cell] if cell is not None else None
        self.trace.append(Event(len(self.trace) + 1, pid, kind, cell, home, old, new, note))

    def ann(self, pid: int, note: dict) -> None:
        self.emit(pid, ANNOTATION, note=note)

    def op_begin(self, pid: int, op: str, **extra) -> None:
        self.ann(pid, {"op": op, "ph": "B", **extra})

    def op_end(self, pid: int, op: str, **extra) -> None:
        self.ann(pid, {"op": op, "ph": "E", **extra})

    def violation(self, kind: str, pid: int, detail: str = "") -> None:
        self.violations.append(Violation(kind, pid, len(self.trace), detail))

    # ------------------------------------------------------------- memory ops

    def _check_cell(self, cid: int) -> int:
        if not (0 <= cid < len(self.homes)):
            raise UnknownCellError(f"unknown cell id {cid}")
        return self.homes[cid]

    def _one_op(self) -> None:
        self._ops += 1
        if self._ops > 1:
            raise SimulatorError("more than one shared-memory op in a single step")

    def read(self, pid: int, cid: int, *, spin: bool = False) -> int:
        home = self._check_cell(cid)
        self._one_op()
        st = self.st
        v = st.cells[cid]
        if self.track_rmr:
            if home != pid:
                st.dsm[pid] += 1
            vs = st.valid[pid]
            if cid not in vs:
                st.cc[pid] += 1
                vs.add(cid)
        self.emit(pid, READ, cid, old=v, note=SPIN if spin else None)
        return v

    def write(self, pid: int, cid: int, value: int) -> None:
        home = self._check_cell(cid)
        self._one_op()
        st = self.st
        value &= WORD_MASK
        prev = st.cells[cid]
        st.cells[cid] = value
        if self.track_rmr:
            if home != pid:
                st.dsm[pid] += 1
            st.cc[pid] += 1
            for q in range(1, self.n + 1):
                if q != pid:
                    st.valid[q].discard(cid)
            st.valid[pid].add(cid)
        self.emit(pid, WRITE, cid, old=prev, new=value)
        self._post_store(pid, cid, prev, value)

    def cas(self, pid: int, cid: int, old: int, new: int) -> bool:
        home = self._check_cell(cid)
        self._one_op()
        st = self.st
        prev = st.cells[cid]
        ok = prev == (old & WORD_MASK)
        if ok:
            st.cells[cid] = new & WORD_MASK
        if self.track_rmr:
            # charged like a write in both models regardless of outcome
            if home != pid:
                st.dsm[pid] += 1
            st.cc[pid] += 1
            if ok:
                for q in range(1, self.n + 1):
                    if q != pid:
                        st.valid[q].discard(cid)
            st.valid[pid].add(cid)
        self.emit(pid, CAS, cid, old=prev, new=st.cells[cid], note={"ok": 1 if ok else 0})
        if ok:
            self._post_store(pid, cid, prev, new & WORD_MASK)
        return ok

    def _post_store(self, pid: int, cid: int, prev: int, value: int) -> None:
        w = self.watchers.get(cid)
        if w is None:
            return
        cells = self.st.cells
        if w[0] == "sync":
            _, start_cid, count_cid, owner = w
            d = cells[start_cid] - cells[count_cid]
            if d not in (0, 1):
                self.violation("counter-sync", pid,
                               f"start-finish gap {d} ({self.names[start_cid]})")
            wit = self.st.shadow.get("wit")
            if wit is not None and d == 0:
                bit = 1 << owner
                for i in range(1, self.n + 1):
                    wit[i] |= bit  # a quiescent instant of `owner` was seen
        elif w[0] == "bc":
            _, count_cid, interim_cid = w
            if value < prev:
                self.violation("counter-monotonic", pid,
                               f"{self.names[cid]} decreased {prev}->{value}")
            elif value - prev > 1:
                self.violation("counter-increment", pid,
                               f"{self.names[cid]} jumped {prev}->{value}")
            if interim_cid is not None:
                d = cells[interim_cid] - cells[count_cid]
                if d not in (0, 1):
                    self.violation("interim-bound", pid,
                                   f"interim-count gap {d} ({self.names[count_cid]})")

    # ------------------------------------------------------ lifecycle shadows

    def node_stage(self, nid: int) -> int:
        return self.st.shadow["stage"][nid]

    def move_stage(self, pid: int, nid: int, to: int, *, bump_gen: bool = False) -> None:
        sh = self.st.shadow
        frm = sh["stage"][nid]
        if (frm, to) not in LEGAL_STAGE_MOVES:
            self.violation("lifecycle-order", pid,
                           f"node {nid}: {STAGE_NAMES[frm]}->{STAGE_NAMES[to]}")
        sh["stage"][nid] = to
        if bump_gen:
            sh["gen"][nid] += 1
        self.emit(pid, LIFECYCLE, note={"node": nid, "from": STAGE_NAMES[frm],
                                        "to": STAGE_NAMES[to], "gen": sh["gen"][nid]})

    # --------------------------------------------------------------- segments

    def seg_enter(self, pid: int, seg: str, **extra) -> None:
        sh = self.st.shadow["seg"]
        if seg == "CS":
            for q in range(1, self.n + 1):
                if q != pid and sh[q] == "CS":
                    self.violation("mutual-exclusion", pid,
                                   f"CS entered while process {q} is in CS")
        sh[pid] = seg
        self.emit(pid, SEG_ENTER, note={"seg": seg, **extra})

    def seg_exit(self, pid: int, seg: str, **extra) -> None:
        self.st.shadow["seg"][pid] = None
        self.emit(pid, SEG_EXIT, note={"seg": seg, **extra})

    # -------------------------------------------------------------- execution

    def step_once(self, pid: int) -> None:
        ctx = self.st.ctxs[pid]
        if ctx.status != RUNNING:
            raise SimulatorError(f"process {pid} is {STATUS_NAMES[ctx.status]}")
        self._ops = 0
        frame = ctx.stack[-1]
        FUNCS[frame[0]](self, pid, frame)
        if not ctx.stack:
            ctx.status = DONE

    def call(self, pid: int, fn: str, loc: dict | None = None) -> None:
        self.st.ctxs[pid].stack.append([fn, 0, loc or {}])

    def ret(self, pid: int, value: Any = None) -> None:
        stack = self.st.ctxs[pid].stack
        stack.pop()
        if stack:
            stack[-1][2]["_ret"] = value

    def crash_now(self, pid: int) -> None:
        ctx = self.st.ctxs[pid]
        if ctx.status != RUNNING:
            raise SimulatorError("only running processes can crash")
        ctx.stack = []
        ctx.status = CRASHED
        self.st.shadow["seg"][pid] = None
        if self.track_rmr:
            self.st.valid[pid].clear()  # the cache is volatile too
        self.emit(pid, CRASH)

    def recover_now(self, pid: int) -> None:
        ctx = self.st.ctxs[pid]
        if ctx.status != CRASHED:
            raise SimulatorError("recover on a non-crashed process")
        fn, pc, loc = self.programs[pid].recover
        ctx.stack = [[fn, pc, dict(loc)]]
        ctx.status = RUNNING
        self.emit(pid, RECOVER, note={"stack": [[fn, pc, dict(loc)]]})

    def pconf(self, pid: int) -> dict:
        return self.programs[pid].config
