"""rmesim: deterministic simulator and auditors for recoverable mutual
exclusion memory reclamation.

Importing the package registers every step handler (broadcast counter,
two-pool reclaimer, workload harness, test drivers).
"""

from .events import Event, TraceBundle, Violation
from .machine import (ALLOCATED, CENTRAL, FREE, RECLAIMED, RETIRED, Simulator,
                      make_program, step_fn)
from .schedule import CrashPolicy, ScheduleConfig, run, run_script, run_until_done
from .broadcast import BroadcastObject, make_broadcast
from .reclamation import Reclaimer, audit_access, build_reclamation, init_reclaimer_nv
from .harness import (StatsReport, WorkloadConfig, build_workload, check_liveness,
                      check_me, run_workload)
from .explore import ExplorationReport, ExploreBounds, explore
from .metrics import MetricsReport, aggregate, recount_rmrs
from . import auditors, crashpoints

__all__ = [
    "Event", "TraceBundle", "Violation",
    "CENTRAL", "FREE", "ALLOCATED", "RETIRED", "RECLAIMED",
    "Simulator", "make_program", "step_fn",
    "CrashPolicy", "ScheduleConfig", "run", "run_script", "run_until_done",
    "BroadcastObject", "make_broadcast",
    "Reclaimer", "audit_access", "build_reclamation", "init_reclaimer_nv",
    "StatsReport", "WorkloadConfig", "build_workload", "check_liveness",
    "check_me", "run_workload",
    "ExplorationReport", "ExploreBounds", "explore",
    "MetricsReport", "aggregate", "recount_rmrs",
    "auditors", "crashpoints",
]
