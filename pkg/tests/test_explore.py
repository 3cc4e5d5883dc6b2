"""Exhaustive interleaving exploration: counting, stalls, mutants."""

from rmesim.broadcast import make_broadcast
from rmesim.crashpoints import driver_program
from rmesim.explore import ExploreBounds, explore
from rmesim.harness import WorkloadConfig, build_workload
from rmesim.machine import Simulator, make_program, step_fn


@step_fn("t.one")
def _t_one(sim, pid, frame):
    sim.write(pid, sim.pconf(pid)["cid"], pid)
    sim.ret(pid)


def _one_step_sim(n):
    sim = Simulator(n)
    cids = [sim.alloc_cell(p, 0, f"c{p}") for p in range(1, n + 1)]
    for p in range(1, n + 1):
        sim.set_program(p, make_program("t.one", config={"cid": cids[p - 1]}))
    return sim


def _bc_sim(n=2, fault=None, waiters=(2,)):
    sim = Simulator(n)
    make_broadcast(sim, "g", 1, "dsm", fault=fault)
    sim.set_program(1, driver_program([("bc.set", {"o": "g", "x": 1})]))
    for p in range(2, n + 1):
        ops = [("bc.wait", {"o": "g", "x": 1})] if p in waiters else []
        sim.set_program(p, driver_program(ops))
    return sim


def test_single_process_single_path():
    rep = explore(_one_step_sim(1), ExploreBounds())
    assert rep.paths == 1
    assert rep.violations == []
    assert not rep.truncated


def test_two_independent_steps_two_paths():
    rep = explore(_one_step_sim(2), ExploreBounds())
    assert rep.paths == 2
    assert rep.violations == []


def test_three_independent_steps_six_paths():
    rep = explore(_one_step_sim(3), ExploreBounds())
    assert rep.paths == 6


def test_set_vs_wait_no_lost_wakeup():
    rep = explore(_bc_sim(), ExploreBounds())
    assert rep.paths > 10
    assert rep.stalls == 0
    assert rep.violations == []
    assert not rep.truncated


def test_set_vs_wait_with_crashes_still_clean():
    rep = explore(_bc_sim(), ExploreBounds(crash_budget=1))
    assert rep.violations == []
    assert rep.stalls == 0


def test_mutant_skipping_interim_found_stuck():
    rep = explore(_bc_sim(fault="skip_interim"), ExploreBounds())
    assert rep.stalls > 0
    assert any(v.kind == "stall" for v in rep.violations)
    assert rep.counterexamples  # a concrete interleaving is attached


def test_explorer_is_deterministic():
    r1 = explore(_bc_sim(), ExploreBounds())
    r2 = explore(_bc_sim(), ExploreBounds())
    assert r1.to_dict() == r2.to_dict()


def test_truncation_is_flagged():
    rep = explore(_bc_sim(), ExploreBounds(max_states=5))
    assert rep.truncated


def test_small_workload_exploration_clean():
    wl = build_workload(WorkloadConfig(n=2, passages=1, ncs_max=0,
                                       payload_words=1, seed=0))
    rep = explore(wl.sim, ExploreBounds(crash_budget=0))
    assert rep.violations == []
    assert rep.stalls == 0
    assert rep.paths > 100
    assert not rep.truncated
