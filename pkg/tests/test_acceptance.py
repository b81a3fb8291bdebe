"""Acceptance criteria 1-8.

Each test prints one ``[PASS]``/``[FAIL]`` line; the lines are also
repeated in the pytest terminal summary.  Run directly with
``python3 tests/test_acceptance.py`` for the summary lines alone.
"""

import itertools
import json
import time

import numpy as np
import pytest

from haloex.cli import main as cli_main
from haloex.ddcore import DDGrid, home_ranks, wrap_positions
from haloex.exchange import HaloExchange, direct_gather_oracle, direct_scatter_oracle, random_integer_forces
from haloex.pgas import SimDeadlock
from haloex.simtime import calibrate, default_sweep, step_metrics, sweep, synthetic_shape
from haloex.suites import deadlock_fixture, random_system, run_checked_step

from conftest import make_layout

SUMMARY: list[str] = []
LIVENESS = {"runs": 0, "deadlocks": []}


def report(n: int, title: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n} {title}: {detail}"
    SUMMARY.append(line)
    print(line)
    return ok


def checked(layout, schedule, seed, **kw):
    """run_checked_step that also feeds the liveness tally."""
    LIVENESS["runs"] += 1
    try:
        return run_checked_step(layout, schedule, seed, **kw)
    except SimDeadlock as exc:
        LIVENESS["deadlocks"].append((schedule, seed, exc.waiters))
        raise


def _islands(n):
    return [r // 4 for r in range(n)]


# -- 1 ----------------------------------------------------------------------------------------------
ORACLE_GRIDS = [(2, 1, 1), (1, 2, 1), (1, 1, 2), (3, 1, 1), (2, 2, 1), (1, 3, 2), (2, 2, 2), (4, 2, 1),
                (3, 2, 2), (2, 3, 3), (4, 4, 1), (3, 3, 3), (4, 2, 4), (4, 4, 2), (4, 4, 4)]


def _gid_shift_check(ex, layout):
    """Received position minus the atom's wrapped home position is 0 or -L per dimension, exactly."""
    home = wrap_positions(layout.atoms.positions, layout.box)
    lookup = np.empty(layout.atoms.global_ids.max() + 1, dtype=np.int64)
    lookup[layout.atoms.global_ids] = np.arange(len(layout.atoms))
    L = layout.box.array
    for r in range(ex.n_ranks):
        ids, pos = ex.halo_by_id(r)
        shift = pos - home[lookup[ids]]
        ok = (shift == 0.0) | (shift == -L)
        if not ok.all():
            return False
    return True


def test_criterion_1_oracle_equivalence():
    t0 = time.time()
    n_systems = 105
    rng = np.random.default_rng(2024)
    bad, runs = [], 0
    for i in range(n_systems):
        np_ = ORACLE_GRIDS[i % len(ORACLE_GRIDS)]
        if i < 2:
            n_atoms = (1000, 50000)[i]
        else:
            n_atoms = int(round(np.exp(rng.uniform(np.log(1000), np.log(50000)))))
        layout = random_system(5000 + i, np_, n_atoms)
        oracle = direct_gather_oracle(layout.grid, layout.box, layout.atoms)
        for schedule in ("fused", "serialized"):
            ex = HaloExchange(layout, islands=_islands(layout.grid.total_ranks), seed=i, record=False)
            if schedule == "fused":
                ex.fused_coord_exchange(seed=i)
            else:
                ex.serialized_coord_exchange(seed=i)
            runs += 1
            LIVENESS["runs"] += 1
            for r, (oid, opos) in enumerate(oracle):
                ids, pos = ex.halo_by_id(r)
                if not (np.array_equal(ids, oid) and np.array_equal(pos.view(np.uint64), opos.view(np.uint64))):
                    bad.append((i, np_, schedule, r))
                    break
            if not _gid_shift_check(ex, layout):
                bad.append((i, np_, schedule, "shift"))
    dt = time.time() - t0
    ok = not bad and dt < 120
    report(1, "oracle equivalence", ok,
           f"{n_systems} systems, grids (2,1,1)..(4,4,4), 1k-50k atoms, {runs} engine runs, "
           f"{len(bad)} mismatches, {dt:.1f} s (limit 120 s)")
    assert not bad, bad[:5]
    assert dt < 120


# -- 2 ----------------------------------------------------------------------------------------------
def test_criterion_2_schedule_equivalence():
    layout = make_layout((2, 2, 2), 1500, seed=21)
    oracle = direct_gather_oracle(layout.grid, layout.box, layout.atoms)
    islands = [0, 0, 0, 0, 1, 1, 1, 1]
    mismatches = []
    n_seeds = 500
    for seed in range(n_seeds):
        got = {}
        for schedule in ("fused", "serialized"):
            out, ex = checked(layout, schedule, seed, mode="weak", islands=islands, oracle=oracle, buf_length=48)
            coords = np.concatenate([st.coords for st in ex.states])
            got[schedule] = (coords.view(np.uint64), ex.home_forces_by_id()[1])
        (cf, ff), (cs, fs) = got["fused"], got["serialized"]
        if not (np.array_equal(cf, cs) and np.array_equal(ff, fs)):
            mismatches.append(seed)
    ok = not mismatches
    report(2, "schedule equivalence", ok,
           f"np=(2,2,2), {n_seeds} seeds, coords + integer forces, {len(mismatches)} mismatching seeds")
    assert ok, mismatches[:10]


# -- 3 ----------------------------------------------------------------------------------------------
def test_criterion_3_dependency_safety():
    t0 = time.time()
    layout = make_layout((2, 2, 2), 1500, seed=31)
    oracle = direct_gather_oracle(layout.grid, layout.box, layout.atoms)
    islands = [0, 0, 0, 0, 1, 1, 1, 1]
    n_seeds = 500
    leaks = wrong = 0
    for seed in range(n_seeds):
        out, _ = checked(layout, "fused", seed, mode="weak", islands=islands, oracle=oracle, buf_length=48)
        leaks += out.leaks
        wrong += out.wrong
    detected = {}
    for m in ("drop_pack_wait", "relaxed_notify", "skip_dep_mgmt_wait"):
        hits = 0
        for seed in range(n_seeds):
            out, _ = run_checked_step(layout, "fused", seed, "weak", islands, m, oracle, buf_length=48)
            hits += out.wrong
        detected[m] = hits
    dt = time.time() - t0
    ok = leaks == 0 and wrong == 0 and all(v >= 1 for v in detected.values()) and dt < 300
    report(3, "dependency safety", ok,
           f"{n_seeds} weak-adversary seeds: {leaks} sentinel leaks, {wrong} wrong runs; mutation detections "
           + ", ".join(f"{k}={v}/{n_seeds}" for k, v in detected.items()) + f"; {dt:.1f} s (limit 300 s)")
    assert ok


# -- 4 ----------------------------------------------------------------------------------------------
def test_criterion_4_force_conservation():
    layout = make_layout((2, 2, 2), 1500, seed=41)
    bad_atoms = sum_breaks = 0
    n_seeds = 100
    for seed in range(n_seeds):
        for schedule, islands in (("fused", [0, 0, 0, 0, 1, 1, 1, 1]), ("serialized", None)):
            ex = HaloExchange(layout, islands=islands, mode="weak", seed=seed, buf_length=48)
            forces = random_integer_forces(layout, seed)
            ex.set_forces(forces)
            expected = direct_scatter_oracle([(p.local_ids, f) for p, f in zip(layout.plans, forces)])
            LIVENESS["runs"] += 1
            if schedule == "fused":
                ex.fused_force_exchange(seed=seed)
            else:
                ex.serialized_force_exchange(seed=seed)
            ids, got = ex.home_forces_by_id()
            assert np.array_equal(ids, expected[0])
            bad_atoms += int(np.count_nonzero(np.any(got != expected[1], axis=1)))
            before = np.sum([f.sum(axis=0) for f in forces], axis=0)
            sum_breaks += int(not np.array_equal(got.sum(axis=0), before))
    ok = bad_atoms == 0 and sum_breaks == 0
    report(4, "force conservation", ok,
           f"np=(2,2,2), {n_seeds} seeds x 2 engines: {bad_atoms} per-atom mismatches, "
           f"{sum_breaks} global-sum changes")
    assert ok


# -- 5 ----------------------------------------------------------------------------------------------
def test_criterion_5_notification_minimality():
    layout = make_layout((2, 2, 2), 1500, seed=51)
    problems = []
    steps = 3
    for islands in (None, [0, 0, 0, 0, 1, 1, 1, 1], list(range(8))):
        for schedule in ("fused", "serialized"):
            for seed in range(5):
                ex = HaloExchange(layout, islands=islands, mode="weak", seed=seed, buf_length=48)
                for s in range(steps):
                    LIVENESS["runs"] += 1
                    rec = ex.run_step(schedule, seed=100 * seed + s)
                    for kind in ("coords", "forces"):
                        counts = {}
                        for e in rec.select(None, notify=kind):
                            key = (e.tags["target"], e.tags["pulse"], e.tags["step"])
                            counts[key] = counts.get(key, 0) + 1
                        want = {(r, p, s + 1) for r in range(8) for p in range(3)}
                        if set(counts) != want or any(v != 1 for v in counts.values()):
                            problems.append((islands, schedule, seed, s, kind))
    ok = not problems
    report(5, "notification minimality", ok,
           f"3 transport layouts x 2 schedules x 5 seeds x {steps} steps: "
           f"{len(problems)} step/kind combinations without exactly one notification per receiver and pulse")
    assert ok, problems[:5]


# -- 6 ----------------------------------------------------------------------------------------------
def test_criterion_6_timing_calibration():
    fit = calibrate()
    m = fit.machine
    s11 = synthetic_shape(11250, (4, 1, 1))
    ser, fus = (step_metrics(s11, s, m).nonlocal_work for s in ("serialized", "fused"))
    a = abs(ser - 116) <= 0.15 * 116 and abs(fus - 64) <= 0.15 * 64
    m90 = step_metrics(synthetic_shape(90000, (4, 1, 1)), "fused", m)
    b = m90.non_overlap < 0.1 * m90.time_per_step
    nl2 = step_metrics(synthetic_shape(11250, (1, 4, 4)), "serialized", m).nonlocal_work
    nl3 = step_metrics(synthetic_shape(11250, (2, 4, 4)), "serialized", m).nonlocal_work
    ratio = nl3 / nl2
    c = abs(ratio - 1.5) <= 0.2 * 1.5
    rows = sweep(default_sweep(), m)
    tps = {(r["atoms_per_rank"], r["np"], r["schedule"]): r["time_per_step_us"] for r in rows}
    cross = [(a_, g) for (a_, g, s) in tps if s == "serialized" and g == "8x1x1"
             and tps[(a_, g, "serialized")] < tps[(a_, g, "fused")]]
    d = bool(cross)
    ok = a and b and c and d
    report(6, "timing calibration", ok,
           f"(a) 11.25k 1D non-local serialized {ser:.1f} / fused {fus:.1f} us (116 / 64 +-15%) {'ok' if a else 'FAIL'}; "
           f"(b) 90k 1D fused non-overlap {m90.non_overlap:.1f} us = {100 * m90.non_overlap / m90.time_per_step:.1f}% "
           f"of {m90.time_per_step:.1f} us, local {m90.local_work:.1f} / non-local {m90.nonlocal_work:.1f} us "
           f"{'ok' if b else 'FAIL'}; (c) 2D->3D serialized non-local x{ratio:.2f} (1.5 +-20%) {'ok' if c else 'FAIL'}; "
           f"(d) serialized faster at 1D sizes {[a_ for a_, _ in sorted(cross)]} {'ok' if d else 'FAIL'}")
    assert ok


# -- 7 ----------------------------------------------------------------------------------------------
def test_criterion_7_liveness():
    layout = make_layout((2, 2, 2), 1200, seed=71)
    oracle = direct_gather_oracle(layout.grid, layout.box, layout.atoms)
    for seed in range(100):
        for schedule in ("fused", "serialized"):
            checked(layout, schedule, seed, mode="weak", islands=[0, 0, 0, 0, 1, 1, 1, 1], oracle=oracle,
                    buf_length=48)
    for seed in range(5):
        checked(layout, "fused", seed, mode="weak", islands=[0, 0, 0, 0, 1, 1, 1, 1], oracle=oracle,
                buf_length=48, regime="threaded")
    fixture = deadlock_fixture()
    ok = not LIVENESS["deadlocks"] and fixture is not None
    report(7, "liveness", ok,
           f"{LIVENESS['runs']} correct-protocol runs without SimDeadlock ({len(LIVENESS['deadlocks'])} deadlocks); "
           f"circular-wait fixture {'detected' if fixture else 'NOT detected'}"
           + (f" with {len(fixture.waiters)} blocked waiters" if fixture else ""))
    assert ok


# -- 8 ----------------------------------------------------------------------------------------------
def test_criterion_8_determinism(tmp_path):
    cfg = tmp_path / "sweep.json"
    cfg.write_text(json.dumps({"schema_version": 1, "seeds": [3, 4]}))
    outs = []
    for name in ("first", "second"):
        assert cli_main(["sweep", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "sweep.csv").read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    n_rows = len(outs[0].decode().splitlines()) - 2
    report(8, "determinism", ok, f"two sweep runs, {n_rows} rows, {len(outs[0])} bytes, byte-identical: {ok}")
    assert ok


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
