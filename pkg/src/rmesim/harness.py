"""Workload harness: five-segment process loop around a CAS test lock.

Each process cycles NCS -> Recover -> Enter -> CS -> Exit:

  Recover  re-executes an interrupted reclamation method (non-volatile
           marker), then, if it still owns the lock, jumps straight back
           into the CS (bounded critical-section reentry).
  Enter    new_node, publish the node id on the process's board slot, then
           acquire the lock with a cas retry loop.
  CS       write the node payload (re-executable, value is stable within a
           super-passage), then read one seed-chosen peer slot and, if a
           node is published there, audit and read its payload.
  Exit     clear the slot, release the lock, retire the node. The slot is
           always cleared before retire so a retired node has no shared
           references left.

The lock is deliberately minimal: one CENTRAL owner word. It exists to
exercise the reclamation paths under contention and crashes, not to be a
good lock.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .events import CRASH, SEG_ENTER, TraceBundle, Violation
from .machine import CENTRAL, Simulator, make_program, step_fn
from .reclamation import Reclaimer, audit_access, build_reclamation, init_reclaimer_nv
from .schedule import ScheduleConfig, run

# segment loop program points
PC_NCS, PC_NCS_IDLE, PC_REC, PC_REC_METH, PC_REC_OWNER, PC_REC_BRANCH = 0, 1, 2, 3, 4, 5
PC_ENT_NEW, PC_ENT_PUB, PC_ENT_LOCK = 6, 7, 8
PC_CS_WRITE, PC_CS_PEEK, PC_CS_ACCESS, PC_CS_DONE = 9, 10, 11, 12
PC_EXIT_CLEAR, PC_EXIT_REL, PC_EXIT_RETIRE, PC_EXIT_DONE = 13, 14, 15, 16

SEGMENTS = ("NCS", "RECOVER", "ENTER", "CS", "EXIT")


def _mix(*xs: int) -> int:
    h = 0x9E3779B97F4A7C15
    for x in xs:
        h ^= (x + 0x165667B19E3779F9) & 0xFFFFFFFFFFFFFFFF
        h = (h * 0xFF51AFD7ED558CCD) & 0xFFFFFFFFFFFFFFFF
        h ^= h >> 33
    return h


@dataclass(frozen=True)
class WorkloadConfig:
    """Shape of the harness workload driven by one simulator run."""

    n: int
    model: str = "dsm"              # broadcast variant and accounting under test
    passages: int | None = None     # completed passages per process; None = run to budget
    ncs_max: int = 3                # NCS idle steps are seeded in [0, ncs_max]
    payload_words: int = 4
    seed: int = 0                   # workload-level choices (NCS length, peeked peer)
    lock_fault: str | None = None   # test-only: "no_release"

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.model not in ("dsm", "cc"):
            raise ValueError(f"bad model {self.model!r}")
        if self.payload_words < 1:
            raise ValueError("payload_words must be >= 1")
        if self.ncs_max < 0:
            raise ValueError("ncs_max must be >= 0")

    def to_dict(self) -> dict:
        return {"n": self.n, "model": self.model, "passages": self.passages,
                "ncs_max": self.ncs_max, "payload_words": self.payload_words,
                "seed": self.seed, "lock_fault": self.lock_fault}


@dataclass
class Workload:
    sim: Simulator
    cfg: WorkloadConfig
    reclaimer: Reclaimer
    owner_cell: int
    slot_cells: tuple[int, ...]


def build_workload(cfg: WorkloadConfig) -> Workload:
    cfg.validate()
    sim = Simulator(cfg.n)
    owner = sim.alloc_cell(CENTRAL, 0, "lock.owner", ("owner",))
    slots = tuple(sim.alloc_cell(i, 0, f"slot[{i}]", ("slot", i))
                  for i in range(1, cfg.n + 1))
    rec = build_reclamation(sim, kind=cfg.model, payload_words=cfg.payload_words)
    wl = Workload(sim, cfg, rec, owner, slots)
    sim.objects["workload"] = wl
    for pid in range(1, cfg.n + 1):
        nv: dict = {"hz.passage": 0, "hz.exits": 0}
        init_reclaimer_nv(nv, cfg.n)
        sim.set_program(pid, make_program(
            "hz.loop",
            recover=("hz.loop", PC_REC, {}),
            config={"seed": cfg.seed, "ncs_max": cfg.ncs_max,
                    "target": cfg.passages, "lock_fault": cfg.lock_fault},
            nv_init=nv,
        ))
    return wl


@step_fn("hz.loop")
def _hz_loop(sim: Simulator, pid: int, frame: list) -> None:
    loc = frame[2]
    wl: Workload = sim.objects["workload"]
    rec = wl.reclaimer
    nv = sim.st.ctxs[pid].nv
    conf = sim.pconf(pid)
    pc = frame[1]

    if pc == PC_NCS:
        sim.seg_enter(pid, "NCS")
        target = conf["target"]
        if target is not None and nv["hz.exits"] >= target:
            sim.ret(pid)  # park for good; the process stays quiescent
            return
        loc["k"] = _mix(conf["seed"], pid, nv["hz.passage"], 7) % (conf["ncs_max"] + 1)
        frame[1] = PC_NCS_IDLE
    elif pc == PC_NCS_IDLE:
        if loc["k"] > 0:
            loc["k"] -= 1
        else:
            sim.seg_exit(pid, "NCS")
            frame[1] = PC_REC
    elif pc == PC_REC:
        nv["hz.passage"] += 1
        sim.seg_enter(pid, "RECOVER", p=nv["hz.passage"])
        frame[1] = PC_REC_METH
    elif pc == PC_REC_METH:
        frame[1] = PC_REC_OWNER
        meth = nv.get("rc.meth")
        if meth == "new_node":
            sim.call(pid, "rc.new_node", {})
        elif meth == "retire":
            sim.call(pid, "rc.retire", {})
    elif pc == PC_REC_OWNER:
        loc["o"] = sim.read(pid, wl.owner_cell)
        frame[1] = PC_REC_BRANCH
    elif pc == PC_REC_BRANCH:
        sim.seg_exit(pid, "RECOVER", p=nv["hz.passage"])
        if loc["o"] == pid:
            # crashed while holding the lock: bounded reentry, straight to CS
            sim.seg_enter(pid, "CS", p=nv["hz.passage"], bcsr=1)
            frame[1] = PC_CS_WRITE
        else:
            sim.seg_enter(pid, "ENTER", p=nv["hz.passage"])
            frame[1] = PC_ENT_NEW
    elif pc == PC_ENT_NEW:
        frame[1] = PC_ENT_PUB
        sim.call(pid, "rc.new_node", {})
    elif pc == PC_ENT_PUB:
        sim.write(pid, wl.slot_cells[pid - 1], nv["rc.node"])
        frame[1] = PC_ENT_LOCK
    elif pc == PC_ENT_LOCK:
        if sim.cas(pid, wl.owner_cell, 0, pid):
            sim.seg_exit(pid, "ENTER", p=nv["hz.passage"])
            sim.seg_enter(pid, "CS", p=nv["hz.passage"])
            frame[1] = PC_CS_WRITE
    elif pc == PC_CS_WRITE:
        node = sim.nodes[nv["rc.node"]]
        value = ((pid << 32) | (nv["rc.start"] & 0xFFFFFFFF))
        sim.write(pid, node.payload[0], value)
        frame[1] = PC_CS_PEEK
    elif pc == PC_CS_PEEK:
        if sim.n == 1:
            frame[1] = PC_CS_DONE
        else:
            others = [q for q in range(1, sim.n + 1) if q != pid]
            peer = others[_mix(conf["seed"], pid, nv["hz.passage"], 13) % len(others)]
            loc["pn"] = sim.read(pid, wl.slot_cells[peer - 1])
            frame[1] = PC_CS_ACCESS
    elif pc == PC_CS_ACCESS:
        frame[1] = PC_CS_DONE
        nid = loc["pn"]
        if nid != 0:
            audit_access(sim, pid, nid)
            sim.read(pid, sim.nodes[nid].payload[0])
    elif pc == PC_CS_DONE:
        sim.seg_exit(pid, "CS", p=nv["hz.passage"])
        sim.seg_enter(pid, "EXIT", p=nv["hz.passage"])
        frame[1] = PC_EXIT_CLEAR
    elif pc == PC_EXIT_CLEAR:
        sim.write(pid, wl.slot_cells[pid - 1], 0)
        frame[1] = PC_EXIT_REL
    elif pc == PC_EXIT_REL:
        frame[1] = PC_EXIT_RETIRE
        if conf["lock_fault"] != "no_release":
            sim.write(pid, wl.owner_cell, 0)
    elif pc == PC_EXIT_RETIRE:
        frame[1] = PC_EXIT_DONE
        sim.call(pid, "rc.retire", {})
    elif pc == PC_EXIT_DONE:
        sim.seg_exit(pid, "EXIT", p=nv["hz.passage"])
        nv["hz.exits"] += 1
        frame[1] = PC_NCS


@dataclass
class StatsReport:
    """Per-run statistics plus per-process RMR splits; JSON-friendly."""

    n: int
    model: str
    seed: int
    events: int
    passages: dict[int, int] = field(default_factory=dict)
    super_passages: dict[int, int] = field(default_factory=dict)
    crashes: dict[int, int] = field(default_factory=dict)
    cs_entries: dict[int, int] = field(default_factory=dict)
    cc_rmrs: dict[int, int] = field(default_factory=dict)
    dsm_rmrs: dict[int, int] = field(default_factory=dict)
    rmr_split: dict = field(default_factory=dict)     # category -> model -> per pid
    max_op_rmr: dict = field(default_factory=dict)    # op -> {"cc": int, "dsm": int}
    max_reclaim_per_passage: dict = field(default_factory=dict)  # {"cc","dsm"}
    pool_swaps: dict[int, int] = field(default_factory=dict)
    violations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def km(d):
            return {str(k): v for k, v in sorted(d.items())}
        return {
            "n": self.n, "model": self.model, "seed": self.seed, "events": self.events,
            "passages": km(self.passages), "super_passages": km(self.super_passages),
            "crashes": km(self.crashes), "cs_entries": km(self.cs_entries),
            "cc_rmrs": km(self.cc_rmrs), "dsm_rmrs": km(self.dsm_rmrs),
            "rmr_split": self.rmr_split, "max_op_rmr": self.max_op_rmr,
            "max_reclaim_per_passage": self.max_reclaim_per_passage,
            "pool_swaps": km(self.pool_swaps),
            "violations": [v.to_dict() if isinstance(v, Violation) else v
                           for v in self.violations],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def run_workload(wcfg: WorkloadConfig, scfg: ScheduleConfig) -> tuple[TraceBundle, StatsReport]:
    """Build, run, and summarize one workload; aborts on an online violation."""
    from .metrics import aggregate  # local import to avoid a cycle

    wl = build_workload(wcfg)
    bundle = run(wl.sim, scfg, stop_on_violation=True,
                 workload_meta=wcfg.to_dict())
    m = aggregate(bundle)
    rep = StatsReport(n=wcfg.n, model=wcfg.model, seed=scfg.seed,
                      events=len(bundle.events))
    for pid in range(1, wcfg.n + 1):
        nv = wl.sim.st.ctxs[pid].nv
        rep.passages[pid] = nv["hz.passage"]
        rep.super_passages[pid] = nv["hz.exits"]
        rep.cc_rmrs[pid] = wl.sim.st.cc[pid]
        rep.dsm_rmrs[pid] = wl.sim.st.dsm[pid]
        rep.crashes[pid] = 0
        rep.cs_entries[pid] = 0
        rep.pool_swaps[pid] = m.pool_swaps.get(pid, 0)
    for ev in bundle.events:
        if ev.kind == CRASH:
            rep.crashes[ev.pid] += 1
        elif ev.kind == SEG_ENTER and ev.note.get("seg") == "CS":
            rep.cs_entries[ev.pid] += 1
    rep.rmr_split = m.category_split
    rep.max_op_rmr = m.max_op_rmr
    rep.max_reclaim_per_passage = m.max_reclaim_per_passage
    rep.violations = list(wl.sim.violations)
    return bundle, rep


def check_me(bundle: TraceBundle) -> list[Violation]:
    """Scan a trace for overlapping critical sections."""
    from .auditors import audit_me
    return audit_me(bundle)


def check_liveness(bundle: TraceBundle, *, patience: int = 20_000,
                   exit_budget: int | None = None,
                   recover_budget: int | None = None) -> list[Violation]:
    """Scan a trace for stalled entries and over-budget Exit/Recover segments."""
    from .auditors import audit_liveness
    return audit_liveness(bundle, patience=patience, exit_budget=exit_budget,
                          recover_budget=recover_budget)
