"""Bounded-exhaustive interleaving exploration with crash injection.

Depth-first search over the machine-state graph. Each node is the digest of
the full behavioral state (cells, frames, non-volatile locals, auditor
shadows, remaining crash budget); each edge schedules one process step,
injects one crash, or recovers a crashed process. There is no partial-order
reduction: an edge is only skipped when it provably cannot extend any
interleaving, i.e. it leaves the state bit-for-bit unchanged (a failed spin
re-read). A state whose every edge is such a no-op and whose processes are
not all done is a stall: somebody waits for a wakeup that can never come.

The per-transition safety checks (mutual exclusion, lifecycle legality,
reclamation access, counter sync, usage rules) run on every edge the first
time it is traversed, so a violation anywhere in the interleaving space is
found even though converging states are explored once. The number of
distinct maximal interleavings covered is counted exactly by memoized
summation over the resulting DAG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .events import TraceBundle, Violation
from .machine import CRASHED, DONE, RUNNING, Simulator


@dataclass(frozen=True)
class ExploreBounds:
    crash_budget: int = 0
    max_states: int = 2_000_000
    max_violations: int = 16

    def validate(self, n: int) -> None:
        if n > 3:
            raise ValueError("exploration is desk-scale: n must be <= 3")
        if self.crash_budget < 0 or self.max_states < 1:
            raise ValueError("bad exploration bounds")


@dataclass
class ExplorationReport:
    paths: int = 0
    states: int = 0
    edges: int = 0
    truncated: bool = False
    cycles: int = 0
    stalls: int = 0
    violations: list[Violation] = field(default_factory=list)
    counterexamples: list[TraceBundle] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations and not self.truncated

    def to_dict(self) -> dict:
        return {
            "paths": str(self.paths), "states": self.states, "edges": self.edges,
            "truncated": self.truncated, "cycles": self.cycles, "stalls": self.stalls,
            "violations": [v.to_dict() for v in self.violations],
        }


def _edges(sim: Simulator, state) -> list[tuple[str, int]]:
    out: list[tuple[str, int]] = []
    budget = state.crash_budget or 0
    for pid in range(1, sim.n + 1):
        st = state.ctxs[pid].status
        if st == RUNNING:
            out.append(("step", pid))
            if budget > 0:
                out.append(("crash", pid))
        elif st == CRASHED:
            out.append(("recover", pid))
    return out


def explore(sim: Simulator, bounds: ExploreBounds, *,
            witness: bool = False) -> ExplorationReport:
    """Exhaustively explore sim's interleavings within the given bounds.

    witness=True additionally carries the grace-period witness bits in the
    hashed state so a pool swap without a quiescent instant per peer is
    flagged on any interleaving.
    """
    bounds.validate(sim.n)
    if not sim.started:
        sim.start()
    if witness:
        sim.st.shadow["wit"] = [(1 << (sim.n + 1)) - 1] * (sim.n + 1)
    sim.track_rmr = False  # accounting is not audited here; copies get cheaper
    rep = ExplorationReport()
    meta = sim.build_meta()
    meta["config"] = {"explore": {"crash_budget": bounds.crash_budget}}

    root = sim.st.copy(track_rmr=False)
    root.crash_budget = bounds.crash_budget
    trace: list = []
    sim.trace = trace

    paths_of: dict[bytes, int] = {}
    onstack: set[bytes] = set()
    seen_violations = 0

    def apply(state, edge):
        """Run one edge on a copy; returns (child, new violations)."""
        sim.st = state.copy(track_rmr=False)
        sim.violations = []
        kind, pid = edge
        if kind == "step":
            sim.step_once(pid)
        elif kind == "crash":
            sim.crash_now(pid)
            sim.st.crash_budget -= 1
        else:
            sim.recover_now(pid)
        return sim.st, sim.violations

    def snapshot_counterexample() -> TraceBundle:
        return TraceBundle(meta=dict(meta), events=list(trace))

    def record(vs: list[Violation]) -> None:
        nonlocal seen_violations
        for v in vs:
            rep.violations.append(v)
        seen_violations += len(vs)
        if vs and len(rep.counterexamples) < bounds.max_violations:
            rep.counterexamples.append(snapshot_counterexample())

    root_key = root.key()
    # frame: [state, key, edges, idx, paths, futile, mark]
    stack = [[root, root_key, _edges(sim, root), 0, 0, 0, 0]]
    onstack.add(root_key)
    while stack:
        frame = stack[-1]
        state, key, edges, idx, paths, futile, mark = frame
        if not edges:  # every process finished
            paths_of[key] = 1
            onstack.discard(key)
            stack.pop()
            del trace[mark:]
            if stack:
                stack[-1][4] += 1
            continue
        if idx < len(edges):
            frame[3] += 1
            if len(paths_of) + len(stack) > bounds.max_states:
                rep.truncated = True
                frame[3] = len(edges)
                continue
            mark_here = len(trace)
            child, vs = apply(state, edges[idx])
            rep.edges += 1
            ckey = child.key()
            if vs:
                # record once per unique transition, then keep exploring: a
                # violation must not mask a stall further down the same path
                record(vs)
            if ckey == key:
                frame[5] += 1
                del trace[mark_here:]
                continue
            if ckey in paths_of:
                frame[4] += paths_of[ckey]
                del trace[mark_here:]
                continue
            if ckey in onstack:
                rep.cycles += 1
                del trace[mark_here:]
                continue
            cedges = _edges(sim, child)
            onstack.add(ckey)
            stack.append([child, ckey, cedges, 0, 0, 0, mark_here])
            continue
        # all edges tried
        if futile == len(edges):
            rep.stalls += 1
            blocked = [p for p in range(1, sim.n + 1)
                       if state.ctxs[p].status != DONE]
            record([Violation("stall", blocked[0] if blocked else 0, len(trace),
                              f"no process can make progress, blocked={blocked}")])
            paths = max(paths, 1)
        paths_of[key] = max(paths, 1) if futile == len(edges) else paths
        onstack.discard(key)
        stack.pop()
        del trace[mark:]
        if stack:
            stack[-1][4] += paths_of[key]

    rep.paths = paths_of.get(root_key, 0)
    rep.states = len(paths_of)
    return rep
