"""Verification and litmus suites shared by the command line and the tests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import RunConfig
from .ddcore import AtomSet, DDGrid, HaloLayout, SimBox, build_grid, build_halo_zones
from .exchange import (MUTATIONS, HaloExchange, direct_gather_oracle, direct_scatter_oracle, force_mismatches,
                       halo_mismatches, synthetic_forces)
from .pgas import SimDeadlock, World

# the three protocol bugs every litmus run must catch
REQUIRED_MUTATIONS = ("drop_pack_wait", "relaxed_notify", "skip_dep_mgmt_wait")


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"check": self.name, "passed": self.passed, **self.details}, sort_keys=True, default=str)


def write_report(path: str | Path, results: Sequence[CheckResult], config: dict, seeds: Sequence[int]) -> Path:
    path = Path(path)
    head = json.dumps({"config": config, "seeds": list(seeds)}, sort_keys=True)
    path.write_text(head + "\n" + "".join(r.to_json() + "\n" for r in results))
    return path


# -- systems -----------------------------------------------------------------------
def build_system(cfg: RunConfig) -> HaloLayout:
    box = SimBox(tuple(cfg.box), cfg.cutoff)
    grid = DDGrid(tuple(cfg.np)) if cfg.np is not None else build_grid(box, cfg.ranks)
    if cfg.atom_file:
        atoms = AtomSet.from_file(cfg.atom_file, box)
    else:
        atoms = AtomSet.random(cfg.atom_count, box, seed=cfg.atom_seed)
    return build_halo_zones(grid, box, atoms)


def random_system(seed: int, np_: Sequence[int], n_atoms: int, cutoff: float = 1.0) -> HaloLayout:
    """Box just large enough for ``np_`` cells wider than the cutoff, slightly anisotropic."""
    rng = np.random.default_rng(seed)
    lengths = tuple(float(n * cutoff * rng.uniform(1.15, 1.8) + (0 if n > 1 else rng.uniform(1.0, 3.0)))
                    for n in np_)
    box = SimBox(lengths, cutoff)
    atoms = AtomSet.random(n_atoms, box, seed=seed)
    return build_halo_zones(DDGrid(tuple(np_)), box, atoms)


@dataclass
class StepOutcome:
    halo_mismatches: int
    force_mismatches: int
    leaks: int
    notifications: dict
    sum_error: float

    @property
    def wrong(self) -> bool:
        return bool(self.halo_mismatches or self.force_mismatches or self.leaks)


def run_checked_step(layout: HaloLayout, schedule: str, seed: int, mode: str = "weak",
                     islands: Optional[Sequence[int]] = None, mutation: Optional[str] = None,
                     oracle=None, buf_length: int = 64, staged_blocks: int = 2,
                     aggressiveness: float = 0.5, regime: str = "interleaved") -> tuple[StepOutcome, HaloExchange]:
    """One exchange step compared against the oracles."""
    oracle = oracle if oracle is not None else direct_gather_oracle(layout.grid, layout.box, layout.atoms)
    ex = HaloExchange(layout, islands=islands, mode=mode, seed=seed, buf_length=buf_length,
                      staged_blocks=staged_blocks, aggressiveness=aggressiveness, regime=regime)
    if schedule == "fused":
        coord_rec = ex.fused_coord_exchange(seed=seed, mutation=mutation)
    else:
        coord_rec = ex.serialized_coord_exchange(seed=seed)
    hm = halo_mismatches(ex, oracle)
    forces = [synthetic_forces(st.coords, st.rank) for st in ex.states]
    ex.set_forces(forces)
    expected = direct_scatter_oracle([(st.plan.local_ids, f) for st, f in zip(ex.states, forces)])
    before = float(np.nansum([f.sum() for f in forces]))
    if schedule == "fused":
        force_rec = ex.fused_force_exchange(seed=seed + 1, mutation=mutation)
    else:
        force_rec = ex.serialized_force_exchange(seed=seed + 1)
    fm = force_mismatches(ex, expected)
    after = float(np.nansum(ex.home_forces_by_id()[1]))
    notes = {
        "coords": [coord_rec.count(None, notify="coords", pulse=p) for p in range(ex.P)],
        "forces": [force_rec.count(None, notify="forces", pulse=p) for p in range(ex.P)],
    }
    return StepOutcome(hm, fm, ex.leaks, notes, abs(after - before)), ex


# -- verify -------------------------------------------------------------------------------
def check_oracle_equivalence(cfg: RunConfig) -> CheckResult:
    grids = [(2, 1, 1), (1, 2, 2), (2, 2, 2), (3, 2, 1), (4, 2, 2), (4, 4, 4)]
    bad, runs = [], 0
    for i in range(cfg.random_systems):
        np_ = grids[i % len(grids)]
        n_atoms = int(np.random.default_rng(1000 + i).integers(1000, 8000))
        layout = random_system(1000 + i, np_, n_atoms)
        oracle = direct_gather_oracle(layout.grid, layout.box, layout.atoms)
        for schedule in ("fused", "serialized"):
            ex = HaloExchange(layout, mode="sequential", seed=i, buf_length=2048, record=False)
            if schedule == "fused":
                ex.fused_coord_exchange(seed=i)
            else:
                ex.serialized_coord_exchange(seed=i)
            runs += 1
            if halo_mismatches(ex, oracle):
                bad.append({"system": i, "np": np_, "schedule": schedule})
    return CheckResult("oracle_equivalence", not bad, {"runs": runs, "failures": bad})


def check_schedule_equivalence(cfg: RunConfig, layout: HaloLayout) -> CheckResult:
    islands = cfg.islands()
    oracle = direct_gather_oracle(layout.grid, layout.box, layout.atoms)
    bad = []
    for seed in cfg.seeds:
        results = {}
        for schedule in ("fused", "serialized"):
            out, ex = run_checked_step(layout, schedule, seed, "sequential", islands, oracle=oracle,
                                       buf_length=cfg.buf_length, staged_blocks=cfg.staged_blocks)
            results[schedule] = (np.concatenate([st.coords for st in ex.states]), ex.home_forces_by_id()[1])
        (cf, ff), (cs, fs) = results["fused"], results["serialized"]
        if not (np.array_equal(cf, cs) and np.array_equal(ff, fs)):
            bad.append(seed)
    return CheckResult("schedule_equivalence", not bad, {"seeds": len(cfg.seeds), "mismatching_seeds": bad})


def check_dependency_safety(cfg: RunConfig, layout: HaloLayout, mutation: Optional[str] = None) -> CheckResult:
    """Correct protocol under the weak adversary: no leaks, no wrong halo or force."""
    islands = cfg.islands()
    oracle = direct_gather_oracle(layout.grid, layout.box, layout.atoms)
    bad, leaks = [], 0
    for seed in cfg.seeds:
        out, _ = run_checked_step(layout, cfg.schedule, seed, cfg.memory_model, islands, mutation, oracle,
                                  cfg.buf_length, cfg.staged_blocks, cfg.aggressiveness)
        leaks += out.leaks
        if out.wrong:
            bad.append(seed)
    details = {"schedule": cfg.schedule, "memory_model": cfg.memory_model, "seeds": len(cfg.seeds),
               "sentinel_leaks": leaks, "failing_seeds": bad}
    if mutation is not None:
        details["mutation"] = mutation
        if bad:
            details["caught_mutation"] = mutation
    return CheckResult("dependency_safety", not bad, details)


def mutation_detected(layout: HaloLayout, mutation: str, seeds: Iterable[int], islands=None,
                      buf_length: int = 64, aggressiveness: float = 0.5) -> Optional[int]:
    """First seed on which the mutated fused protocol visibly misbehaves, or None."""
    oracle = direct_gather_oracle(layout.grid, layout.box, layout.atoms)
    for seed in seeds:
        out, _ = run_checked_step(layout, "fused", seed, "weak", islands, mutation, oracle, buf_length,
                                  aggressiveness=aggressiveness)
        if out.wrong:
            return seed
    return None


def check_conservation(cfg: RunConfig, layout: HaloLayout) -> CheckResult:
    islands = cfg.islands()
    oracle = direct_gather_oracle(layout.grid, layout.box, layout.atoms)
    bad = []
    for seed in cfg.seeds:
        out, _ = run_checked_step(layout, cfg.schedule, seed, cfg.memory_model, islands, oracle=oracle,
                                  buf_length=cfg.buf_length, staged_blocks=cfg.staged_blocks)
        if out.force_mismatches or out.sum_error != 0.0:
            bad.append(seed)
    return CheckResult("conservation", not bad, {"seeds": len(cfg.seeds), "failing_seeds": bad})


def check_notifications(cfg: RunConfig, layout: HaloLayout) -> CheckResult:
    islands = cfg.islands()
    bad = []
    for seed in cfg.seeds[:5]:
        for schedule in ("fused", "serialized"):
            out, ex = run_checked_step(layout, schedule, seed, cfg.memory_model, islands,
                                       buf_length=cfg.buf_length, staged_blocks=cfg.staged_blocks)
            want = [ex.n_ranks] * ex.P
            if out.notifications["coords"] != want or out.notifications["forces"] != want:
                bad.append({"seed": seed, "schedule": schedule, **out.notifications})
    return CheckResult("notification_minimality", not bad, {"failures": bad})


def deadlock_fixture(seed: int = 0) -> Optional[SimDeadlock]:
    """Two PEs that each wait for a flag the other only sets after its own wait."""
    w = World(2, seed=seed)
    flag = w.alloc_symmetric(1, "signal", "flag")

    def prog(c):
        yield from c.signal_wait_until(flag, 0, 1)
        yield from c.signal_store(flag, 1 - c.pe, 0, 1)

    try:
        w.run(prog)
    except SimDeadlock as exc:
        return exc
    return None


def check_liveness(cfg: RunConfig, layout: HaloLayout) -> CheckResult:
    islands = cfg.islands()
    deadlocks = []
    for seed in cfg.seeds:
        for schedule in ("fused", "serialized"):
            try:
                run_checked_step(layout, schedule, seed, cfg.memory_model, islands, buf_length=cfg.buf_length)
            except SimDeadlock as exc:
                deadlocks.append({"seed": seed, "schedule": schedule, "waiters": exc.waiters})
    fixture = deadlock_fixture()
    return CheckResult("liveness", not deadlocks and fixture is not None,
                       {"deadlocks": deadlocks, "fixture_detected": fixture is not None,
                        "fixture_waiters": fixture.waiters if fixture else []})


def run_verify(cfg: RunConfig, mutation: Optional[str] = None) -> list[CheckResult]:
    layout = build_system(cfg)
    return [
        check_oracle_equivalence(cfg),
        check_schedule_equivalence(cfg, layout),
        check_dependency_safety(cfg, layout, mutation),
        check_conservation(cfg, layout),
        check_notifications(cfg, layout),
        check_liveness(cfg, layout),
    ]


# -- litmus ---------------------------------------------------------------------------------
def message_passing(seed: int, how: str, mode: str = "weak", regime: str = "interleaved", n: int = 8,
                    aggressiveness: float = 0.5) -> bool:
    """PE0 publishes ``n`` values then a flag; PE1 waits for the flag and reads. True if PE1 saw stale data.

    ``how``: ``release`` / ``relaxed`` (plain writes then a signal store),
    ``put_relaxed`` (a put then a relaxed signal store) or ``put_with_signal``.
    """
    islands = [0, 1] if how.startswith("put") else [0, 0]
    w = World(2, mode=mode, seed=seed, regime=regime, islands=islands, aggressiveness=aggressiveness)
    data = w.alloc_symmetric(n, "real", "data")
    flag = w.alloc_symmetric(1, "signal", "flag")
    seen = {}

    def writer(c):
        vals = np.arange(1, n + 1, dtype=float)
        if how == "put_with_signal":
            yield from c.put_with_signal(data, 1, 0, vals, flag, 0, 1)
        elif how == "put_relaxed":
            yield from c.put(data, 1, 0, vals)
            yield from c.signal_store(flag, 1, 0, 1, "relaxed")
        else:
            yield from c.write(data, 1, np.arange(n), vals)
            yield from c.signal_store(flag, 1, 0, 1, "release" if how == "release" else "relaxed")

    def reader(c):
        yield from c.signal_wait_until(flag, 0, 1)
        seen["v"] = yield from c.read(data, 1, slice(0, n))

    w.run([writer, reader])
    return not np.array_equal(seen["v"], np.arange(1, n + 1, dtype=float))


def atomic_increments(seed: int, n_pes: int = 4, per_pe: int = 3, mode: str = "weak") -> bool:
    """Every increment of a shared counter sees a distinct old value and none is lost."""
    w = World(n_pes, mode=mode, seed=seed)
    ctr = w.alloc_symmetric(1, "signal", "ctr")
    olds = []

    def prog(c):
        for _ in range(per_pe):
            olds.append((yield from c.atomic_inc_release(ctr, 0, pe=0)))

    w.run(prog)
    total = n_pes * per_pe
    return sorted(olds) == list(range(total)) and int(w.local(ctr, 0)[0]) == total


def store_buffer_outcomes(seeds: Iterable[int], mode: str) -> set[tuple[float, float]]:
    """Classic store-buffering shape: each PE writes its flag then reads the other's."""
    outcomes = set()
    for seed in seeds:
        w = World(2, mode=mode, seed=seed)
        x = w.alloc_symmetric(1, "real", "x")
        got = {}

        def prog(c):
            yield from c.write(x, c.pe, [0], [1.0])
            got[c.pe] = float((yield from c.read(x, 1 - c.pe, [0]))[0])

        w.run(prog)
        outcomes.add((got[0], got[1]))
    return outcomes


def run_litmus(cfg: RunConfig, mutation: Optional[str] = None) -> list[CheckResult]:
    seeds = list(cfg.seeds)
    many = range(max(200, len(seeds)))
    results = []

    for how in ("release", "put_with_signal"):
        stale = [s for s in many if message_passing(s, how)]
        results.append(CheckResult(f"mp_{how}", not stale, {"seeds": len(many), "stale_seeds": stale[:10]}))
    stale = [s for s in seeds[:20] if message_passing(s, "release", regime="threaded")]
    results.append(CheckResult("mp_release_threaded", not stale, {"stale_seeds": stale}))
    for how in ("relaxed", "put_relaxed"):
        caught = next((s for s in many if message_passing(s, how)), None)
        results.append(CheckResult(f"mp_{how}_caught", caught is not None, {"first_seed": caught}))

    lost = [s for s in many if not atomic_increments(s)]
    results.append(CheckResult("atomic_inc_linearizable", not lost, {"failing_seeds": lost[:10]}))

    fixture = deadlock_fixture()
    results.append(CheckResult("deadlock_detector", fixture is not None,
                               {"waiters": fixture.waiters if fixture else []}))

    seq = store_buffer_outcomes(many, "sequential")
    weak = store_buffer_outcomes(many, "weak")
    results.append(CheckResult("sequential_subset_of_weak", seq <= weak,
                               {"sequential": sorted(seq), "weak": sorted(weak)}))

    layout = build_system(cfg)
    islands = cfg.islands()
    probe_seeds = range(max(100, len(seeds)))
    for m in REQUIRED_MUTATIONS:
        seed = mutation_detected(layout, m, probe_seeds, islands, cfg.buf_length, cfg.aggressiveness)
        results.append(CheckResult(f"mutation_caught:{m}", seed is not None,
                                   {"mutation": m, "description": MUTATIONS[m], "first_seed": seed}))

    if mutation is not None:
        weak_cfg = _weak_fused(cfg)
        results.append(check_dependency_safety(weak_cfg, layout, mutation))
    return results


def _weak_fused(cfg: RunConfig) -> RunConfig:
    from dataclasses import replace
    return replace(cfg, schedule="fused", memory_model="weak")
