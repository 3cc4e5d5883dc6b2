"""Seed-deterministic fair scheduler with crash injection."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from .events import TraceBundle
from .machine import CRASHED, DONE, RUNNING, Simulator, SimulatorError

NONE = "none"
RANDOM = "random"
TARGETED = "targeted"

# safety net for programs that loop without emitting events
_TURNS_PER_EVENT = 64


@dataclass(frozen=True)
class CrashPolicy:
    """When to inject crashes.

    random: before each scheduled step of a running process, crash instead
    with the given probability. targeted: crash a process the first time its
    next step would execute the given program point (pid, fn, pc).
    """

    kind: str = NONE
    prob: float = 0.0
    sites: tuple[tuple[int, str, int], ...] = ()

    def validate(self) -> None:
        if self.kind not in (NONE, RANDOM, TARGETED):
            raise ValueError(f"bad crash policy kind {self.kind!r}")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("crash probability must be in [0,1]")

    @staticmethod
    def random(prob: float) -> "CrashPolicy":
        return CrashPolicy(kind=RANDOM, prob=prob)

    @staticmethod
    def targeted(sites) -> "CrashPolicy":
        return CrashPolicy(kind=TARGETED, sites=tuple((p, f, c) for p, f, c in sites))


@dataclass(frozen=True)
class ScheduleConfig:
    seed: int = 0
    n: int = 1
    max_events: int = 10_000
    crash: CrashPolicy = field(default_factory=CrashPolicy)
    fairness: int = 64  # max consecutive denials of a runnable process

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.max_events < 1:
            raise ValueError("max_events must be >= 1")
        if self.fairness < 1:
            raise ValueError("fairness bound must be >= 1")
        self.crash.validate()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "n": self.n, "max_events": self.max_events,
            "fairness": self.fairness,
            "crash": {"kind": self.crash.kind, "prob": self.crash.prob,
                      "sites": [list(s) for s in self.crash.sites]},
        }

    @staticmethod
    def from_dict(d: dict) -> "ScheduleConfig":
        c = d.get("crash", {})
        cfg = ScheduleConfig(
            seed=d.get("seed", 0), n=d.get("n", 1),
            max_events=d.get("max_events", 10_000),
            fairness=d.get("fairness", 64),
            crash=CrashPolicy(kind=c.get("kind", NONE), prob=c.get("prob", 0.0),
                              sites=tuple(tuple(s) for s in c.get("sites", ()))),
        )
        cfg.validate()
        return cfg

    @staticmethod
    def from_json(path: str) -> "ScheduleConfig":
        with open(path) as fh:
            return ScheduleConfig.from_dict(json.load(fh))


def run(sim: Simulator, cfg: ScheduleConfig, *, stop_on_violation: bool = False,
        workload_meta: dict | None = None) -> TraceBundle:
    """Execute until every program completes or max_events is reached.

    Identical (sim construction, cfg) inputs produce identical traces. The
    scheduler walks processes round-robin with seeded perturbation; a process
    denied cfg.fairness consecutive turns is scheduled next unconditionally.
    """
    cfg.validate()
    if cfg.n != sim.n:
        raise SimulatorError("config process count does not match simulator")
    if not sim.started:
        sim.start()
    rng = random.Random(cfg.seed)
    denied = [0] * (sim.n + 1)
    rr = 1
    fired: set[tuple[int, str, int]] = set()
    truncated = False
    turn_cap = cfg.max_events * _TURNS_PER_EVENT
    turns = 0

    while True:
        runnable = [p for p in range(1, sim.n + 1) if sim.st.ctxs[p].status != DONE]
        if not runnable:
            break
        if len(sim.trace) >= cfg.max_events:
            truncated = True
            break
        turns += 1
        if turns > turn_cap:
            truncated = True
            break

        starving = [p for p in runnable if denied[p] >= cfg.fairness]
        if starving:
            pid = max(starving, key=lambda p: (denied[p], -p))
        else:
            ordered = sorted(runnable, key=lambda p: (p - rr) % (sim.n + 1))
            pid = rng.choice(runnable) if rng.random() < 0.25 else ordered[0]
        for p in runnable:
            denied[p] += 1
        denied[pid] = 0
        rr = pid % sim.n + 1

        ctx = sim.st.ctxs[pid]
        if ctx.status == CRASHED:
            sim.recover_now(pid)
        else:
            crashed = False
            if cfg.crash.kind == RANDOM and cfg.crash.prob > 0.0:
                if rng.random() < cfg.crash.prob:
                    sim.crash_now(pid)
                    crashed = True
            elif cfg.crash.kind == TARGETED:
                frame = ctx.stack[-1]
                site = (pid, frame[0], frame[1])
                if site in cfg.crash.sites and site not in fired:
                    fired.add(site)
                    sim.crash_now(pid)
                    crashed = True
            if not crashed:
                sim.step_once(pid)
        if stop_on_violation and sim.violations:
            break

    bundle = snapshot_bundle(sim, workload_meta=workload_meta)
    bundle.meta["config"]["schedule"] = cfg.to_dict()
    bundle.meta["truncated"] = truncated
    return bundle


def snapshot_bundle(sim: Simulator, *, workload_meta: dict | None = None) -> TraceBundle:
    """Package the simulator's current trace and accounts for auditing."""
    meta = sim.build_meta()
    meta["config"] = {"workload": workload_meta or {}}
    meta["truncated"] = False
    meta["accounts"] = {"cc": list(sim.st.cc), "dsm": list(sim.st.dsm)}
    meta["violations"] = [v.to_dict() for v in sim.violations]
    return TraceBundle(meta=meta, events=list(sim.trace))


def run_script(sim: Simulator, pids) -> None:
    """Step processes in an explicit order; test/oracle helper."""
    if not sim.started:
        sim.start()
    for pid in pids:
        ctx = sim.st.ctxs[pid]
        if ctx.status == CRASHED:
            sim.recover_now(pid)
        else:
            sim.step_once(pid)


def run_until_done(sim: Simulator, pid: int, *, limit: int = 100_000) -> None:
    """Run one process alone until its stack empties (test/oracle helper)."""
    if not sim.started:
        sim.start()
    ctx = sim.st.ctxs[pid]
    for _ in range(limit):
        if ctx.status == DONE:
            return
        if ctx.status == CRASHED:
            sim.recover_now(pid)
        else:
            sim.step_once(pid)
    raise SimulatorError(f"process {pid} did not finish within {limit} solo steps")


def run_until_depth(sim: Simulator, pid: int, depth: int, *, limit: int = 100_000) -> None:
    """Run one process alone until its call stack shrinks to depth."""
    ctx = sim.st.ctxs[pid]
    for _ in range(limit):
        if ctx.status != RUNNING or len(ctx.stack) <= depth:
            return
        sim.step_once(pid)
    raise SimulatorError("stack did not unwind")
