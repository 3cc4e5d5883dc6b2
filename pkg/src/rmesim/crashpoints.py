"""Targeted crash-point campaign.

For each interior step of a recoverable method, run the method up to that
step, crash the process, let it recover and re-execute the method, and check
that the final shared-cell image is identical to a single clean execution.
Scenarios are scripted (fixed step order) so the comparison is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .broadcast import make_broadcast
from .machine import CRASHED, DONE, Simulator, make_program, step_fn
from .reclamation import build_reclamation, init_reclaimer_nv
from .schedule import run_until_done


@dataclass
class CampaignResult:
    scenario: str
    crash_points: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


# Generic driver: one process runs a fixed list of calls; after a crash it
# first re-invokes an interrupted reclamation method (non-volatile marker),
# then re-issues the call that was in flight. That is the caller-side
# re-execution contract for all four recoverable methods.

@step_fn("drv.seq")
def _drv_seq(sim: Simulator, pid: int, frame: list) -> None:
    nv = sim.st.ctxs[pid].nv
    ops = sim.pconf(pid)["ops"]
    pc = frame[1]
    if pc == 0:
        meth = nv.get("rc.meth")
        frame[1] = 1
        if meth == "new_node":
            sim.call(pid, "rc.new_node", {})
        elif meth == "retire":
            sim.call(pid, "rc.retire", {})
    elif pc == 1:
        i = nv["drv.i"]
        if i >= len(ops):
            sim.ret(pid)
            return
        fn, loc = ops[i]
        frame[1] = 2
        sim.call(pid, fn, dict(loc))
    elif pc == 2:
        nv["drv.i"] += 1
        frame[1] = 1


def driver_program(ops: list[tuple[str, dict]], extra_nv: dict | None = None):
    nv = {"drv.i": 0}
    nv.update(extra_nv or {})
    return make_program("drv.seq", recover=("drv.seq", 0, {}),
                        config={"ops": ops}, nv_init=nv)


@dataclass
class Scenario:
    name: str
    build: Callable[[], Simulator]
    victim: int
    warmup: Callable[[Simulator], None] | None = None
    interleave: tuple[int, ...] = ()   # stepped once after each victim step
    drain: tuple[int, ...] = ()        # run to completion after the victim


def _step_or_recover(sim: Simulator, pid: int) -> None:
    ctx = sim.st.ctxs[pid]
    if ctx.status == CRASHED:
        sim.recover_now(pid)
    elif ctx.status != DONE:
        sim.step_once(pid)


def _run_victim(sim: Simulator, sc: Scenario, *, crash_at: int | None,
                limit: int = 200_000) -> int:
    """Drive the victim to completion; crash it once before step crash_at."""
    ctx = sim.st.ctxs[sc.victim]
    steps = 0
    while ctx.status != DONE:
        if crash_at is not None and steps == crash_at:
            sim.crash_now(sc.victim)
            sim.recover_now(sc.victim)
            crash_at = None
            continue
        _step_or_recover(sim, sc.victim)
        steps += 1
        for q in sc.interleave:
            _step_or_recover(sim, q)
        if steps > limit:
            raise RuntimeError(f"victim {sc.victim} did not finish ({sc.name})")
    return steps


def run_scenario(sc: Scenario) -> CampaignResult:
    res = CampaignResult(sc.name)

    sim = sc.build()
    sim.start()
    if sc.warmup:
        sc.warmup(sim)
    clean_steps = _run_victim(sim, sc, crash_at=None)
    for q in sc.drain:
        run_until_done(sim, q)
    clean_cells = list(sim.st.cells)
    if sim.violations:
        res.failures.append(f"clean run already has violations: {sim.violations}")
        return res

    for k in range(1, clean_steps):
        sim = sc.build()
        sim.start()
        if sc.warmup:
            sc.warmup(sim)
        _run_victim(sim, sc, crash_at=k)
        for q in sc.drain:
            run_until_done(sim, q)
        res.crash_points += 1
        cells = list(sim.st.cells)
        if cells != clean_cells:
            diff = [i for i, (a, b) in enumerate(zip(cells, clean_cells)) if a != b]
            res.failures.append(f"crash@{k}: cells differ at {diff}")
        if sim.violations:
            res.failures.append(f"crash@{k}: violations "
                                f"{[str(v) for v in sim.violations]}")
    return res


# ------------------------------------------------------------ stock scenarios

def _set_op(kind: str) -> str:
    return "bc.set" if kind == "dsm" else "bc.cc_set"


def _wait_op(kind: str) -> str:
    return "bc.wait" if kind == "dsm" else "bc.cc_wait"


def _bc_pair(kind: str, *, preset: int = 0, waiter_wait: int | None = None,
             writer_ops: list | None = None):
    """Two processes: p1 writes the counter, p2 optionally waits on it."""
    def build() -> Simulator:
        sim = Simulator(2)
        make_broadcast(sim, "g", 1, kind)
        ops = [(_set_op(kind), {"o": "g", "x": v}) for v in range(1, preset + 1)]
        ops += (writer_ops if writer_ops is not None
                else [(_set_op(kind), {"o": "g", "x": preset + 1})])
        sim.set_program(1, driver_program(ops))
        waiter = ([(_wait_op(kind), {"o": "g", "x": waiter_wait})]
                  if waiter_wait is not None else [])
        sim.set_program(2, driver_program(waiter))
        return sim
    return build


def _warm_preset(sim: Simulator) -> None:
    # run everything but the last op of p1, so only the op under test remains
    nv = sim.st.ctxs[1].nv
    target = len(sim.pconf(1)["ops"]) - 1
    while nv["drv.i"] < target:
        sim.step_once(1)


def _warm_waiter_blocked(sim: Simulator) -> None:
    # park p2 on its spin: target and announce set, interim already checked
    ctx = sim.st.ctxs[2]
    for _ in range(200):
        sim.step_once(2)
        frame = ctx.stack[-1]
        if frame[0] == "bc.wait" and frame[1] == 5:
            sim.step_once(2)  # one spin read, still blocked
            return
    raise RuntimeError("waiter did not reach its spin")


def bset_scenarios(kind: str = "dsm") -> list[Scenario]:
    out = [Scenario(f"bset-no-waiter[{kind}]", _bc_pair(kind), victim=1)]
    if kind == "dsm":
        out.append(Scenario(
            "bset-with-blocked-waiter", _bc_pair(kind, waiter_wait=1),
            victim=1, warmup=_warm_waiter_blocked, drain=(2,)))
        out.append(Scenario(
            "bset-repeat-idempotent",
            _bc_pair(kind, writer_ops=[("bc.set", {"o": "g", "x": 1}),
                                       ("bc.set", {"o": "g", "x": 1})]),
            victim=1, warmup=_warm_preset))
    return out


def bwait_scenarios(kind: str = "dsm") -> list[Scenario]:
    def warm_fast(sim: Simulator) -> None:
        run_until_done(sim, 1)  # counter already set: the wait takes the fast path

    return [
        Scenario(f"bwait-fast-path[{kind}]",
                 _bc_pair(kind, preset=1, waiter_wait=1),
                 victim=2, warmup=warm_fast),
        Scenario(f"bwait-blocked-release[{kind}]",
                 _bc_pair(kind, waiter_wait=1),
                 victim=2, interleave=(1,)),
    ]


def _reclaim_pair(kind: str, passages: int):
    """p1 runs new_node/retire cycles; p2 stays parked and quiescent."""
    def build() -> Simulator:
        sim = Simulator(2)
        build_reclamation(sim, kind=kind, payload_words=1)
        for pid, ops in ((1, [op for _ in range(passages)
                              for op in (("rc.new_node", {}), ("rc.retire", {}))]),
                         (2, [])):
            nv: dict = {}
            init_reclaimer_nv(nv, 2)
            sim.set_program(pid, driver_program(ops, extra_nv=nv))
        return sim
    return build


def _warm_park_peer_and_passages(count: int):
    def warm(sim: Simulator) -> None:
        run_until_done(sim, 2)  # park the peer in its quiescent state
        nv = sim.st.ctxs[1].nv
        while nv["drv.i"] < 2 * count:
            sim.step_once(1)
    return warm


def reclaim_scenarios(kind: str = "dsm") -> list[Scenario]:
    """Crash inside new_node/retire at every position of the step cycle.

    With n=2 the cycle has six branches; warming k passages parks the cycle
    just before each branch in turn, and the sweep then crashes at every
    interior step of that passage's new_node and retire.
    """
    return [Scenario(f"reclaim-cycle{k}[{kind}]", _reclaim_pair(kind, k + 1),
                     victim=1, warmup=_warm_park_peer_and_passages(k))
            for k in range(7)]


def full_campaign(kind: str = "dsm") -> list[CampaignResult]:
    """Every interior crash point of new_node, retire, bset, and bwait."""
    return [run_scenario(sc)
            for sc in (bset_scenarios(kind) + bwait_scenarios(kind)
                       + reclaim_scenarios(kind))]
