"""Halo-exchange engines on the simulated PGAS machine.

Two coordinate engines and two force engines share one set of symmetric
buffers per :class:`HaloExchange`:

* the serialized engines run the pulses one after another with a full
  barrier in between, which is how a CPU-driven exchange keeps the
  forwarding dependencies;
* the fused engines launch every pulse at once as task blocks.  Entries
  below ``dep_offset`` are packed and shipped immediately; the rest wait for
  the signals of the pulses that delivered them.  Forces run the pulses in
  reverse, and the last block of each pulse forwards the previous pulse's
  accumulated halo forces once every later pulse has finished accumulating.

Halo slots start as NaN (the sentinel).  Packing or consuming a NaN means
some rank read a slot before its payload was published.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .ddcore import (AtomSet, DDGrid, HaloLayout, PulseData, PulsePlan, SimBox, backward_gap2, cell_edges,
                     dependency_floor, home_ranks, wrap_positions)
from .pgas import Context, ExecutionRecord, SymmetricBuffer, World

BUF_LENGTH = 2048
SENTINEL = np.nan
DATA = "DATA"
DEP_MGMT = "DEP_MGMT"

MUTATIONS = {
    "drop_pack_wait": "dependent entries are packed without waiting for the predecessor signals",
    "relaxed_notify": "direct-transport notification (and the block counter before it) is relaxed after data writes",
    "skip_dep_mgmt_wait": "force forwarding does not wait for later pulses to finish accumulating",
    "predecessor_only_wait": "dependent packing waits only for the immediately preceding pulse",
}


@dataclass(frozen=True)
class TaskBlock:
    pulse_id: int
    block_index: int
    chunks: tuple[tuple[int, int], ...]


@dataclass(eq=False)
class CommContext:
    total_pulses: int
    signals: SymmetricBuffer
    sig_val: int
    transport: tuple[str, ...]
    block_counter: SymmetricBuffer


@dataclass(eq=False)
class RankState:
    rank: int
    plan: PulsePlan
    home_count: int
    world: World = field(repr=False)
    coords_buf: SymmetricBuffer = field(repr=False)
    forces_buf: SymmetricBuffer = field(repr=False)

    @property
    def n_local(self) -> int:
        return self.plan.total_local

    @property
    def coords(self) -> np.ndarray:
        return self.world.local(self.coords_buf, self.rank)[: self.n_local]

    @property
    def forces(self) -> np.ndarray:
        return self.world.local(self.forces_buf, self.rank)[: self.n_local]


def task_blocks(send_size: int, direct: bool, buf_length: int = BUF_LENGTH, staged_blocks: int = 2):
    """Chunking of one pulse: one chunk per block on direct links, strided otherwise."""
    n_chunks = math.ceil(send_size / buf_length)
    chunks = [(c * buf_length, min(buf_length, send_size - c * buf_length)) for c in range(n_chunks)]
    if direct:
        n_blocks = max(1, n_chunks)
        return [TaskBlock(-1, b, tuple(chunks[b:b + 1])) for b in range(n_blocks)]
    n_blocks = max(1, staged_blocks)
    return [TaskBlock(-1, b, tuple(chunks[b::n_blocks])) for b in range(n_blocks)]


class HaloExchange:
    """Symmetric buffers, per-pulse metadata and the four exchange engines."""

    def __init__(self, layout: HaloLayout, islands: Optional[Sequence[int]] = None, mode: str = "sequential",
                 seed: int = 0, buf_length: int = BUF_LENGTH, staged_blocks: int = 2,
                 regime: str = "interleaved", aggressiveness: float = 0.5, record: bool = True, priority_bias: float = 0.5):
        self.layout = layout
        n = layout.grid.total_ranks
        self.n_ranks = n
        self.P = layout.total_pulses
        self.buf_length = buf_length
        self.staged_blocks = staged_blocks
        self.world = World(n, islands=islands, mode=mode, seed=seed, regime=regime,
                           aggressiveness=aggressiveness, record=record, priority_bias=priority_bias)
        w = self.world
        plans = layout.plans
        max_local = max((p.total_local for p in plans), default=0)
        self.coords = w.alloc_symmetric(max_local, "real3", "coords")
        self.forces = w.alloc_symmetric(max_local, "real3", "forces")
        P = self.P
        self.send_bufs = [w.alloc_symmetric(max(pl.pulses[k].send_size for pl in plans), "real3", f"sendBuf{k}")
                          for k in range(P)]
        self.recv_bufs = [w.alloc_symmetric(max(pl.pulses[k].send_size for pl in plans), "real3", f"recvBuf{k}")
                          for k in range(P)]
        self.coord_signal = w.alloc_symmetric(P, "signal", "coordSignal")
        self.force_signal = w.alloc_symmetric(P, "signal", "forceSignal")
        self.force_done = w.alloc_symmetric(P, "signal", "forceDone")
        self.coord_counter = w.alloc_symmetric(P, "signal", "coordBlockCounter")
        self.force_counter = w.alloc_symmetric(P, "signal", "forceBlockCounter")
        self.coord_sig_val = 0
        self.force_sig_val = 0

        self.pulses: list[list[PulseData]] = []
        self.blocks: list[list[list[TaskBlock]]] = []
        self.floors: list[list[Optional[int]]] = []
        for plan in plans:
            r = plan.rank
            metas, blocks = [], []
            for k, meta in enumerate(plan.pulses):
                coord_dst = w.peer_ref(self.coords, r, meta.send_rank)
                direct = coord_dst is not None
                bl = [replace(b, pulse_id=k) for b in task_blocks(meta.send_size, direct, buf_length, staged_blocks)]
                metas.append(replace(
                    meta,
                    blocks_for_pulse=len(bl),
                    send_buf=self.send_bufs[k].handle,
                    recv_buf=self.recv_bufs[k].handle,
                    remote_coord_dst=coord_dst,
                    remote_force_src=w.peer_ref(self.forces, r, meta.send_rank),
                    remote_force_dst=w.peer_ref(self.forces, r, meta.recv_rank),
                ))
                blocks.append(bl)
            self.pulses.append(metas)
            self.blocks.append(blocks)
            self.floors.append([dependency_floor(plan, k) for k in range(len(plan.pulses))])
        self.states = [RankState(p.rank, p, p.home_count, w, self.coords, self.forces) for p in plans]
        self.leaks = 0
        self.reset_coords()

    # -- host-side state --------------------------------------------------------
    def reset_coords(self):
        """Home coordinates from the layout; every halo slot poisoned."""
        for st in self.states:
            c = self.world.local(self.coords, st.rank)
            c[:] = SENTINEL
            c[: st.home_count] = st.plan.local_positions[: st.home_count]

    def set_forces(self, forces: Sequence[np.ndarray]):
        for st, f in zip(self.states, forces):
            mem = self.world.local(self.forces, st.rank)
            mem[:] = 0.0
            mem[: st.n_local] = f

    def comm_context(self, rank: int, kind: str = "coords") -> CommContext:
        metas = self.pulses[rank]
        if kind == "coords":
            transport = tuple("direct" if m.remote_coord_dst is not None else "staged" for m in metas)
            return CommContext(self.P, self.coord_signal, self.coord_sig_val, transport, self.coord_counter)
        transport = tuple("direct" if m.remote_force_src is not None else "staged" for m in metas)
        return CommContext(self.P, self.force_signal, self.force_sig_val, transport, self.force_counter)

    def _begin(self, kind: str, seed: Optional[int]):
        if seed is not None:
            self.world.rng.seed(seed)
            self.world.np_rng = np.random.default_rng(seed)
        counter = self.coord_counter if kind == "coords" else self.force_counter
        for r in range(self.n_ranks):
            self.world.local(counter, r)[:] = 0
        if kind == "coords":
            self.coord_sig_val += 1
            return self.coord_sig_val
        self.force_sig_val += 1
        return self.force_sig_val

    def _run(self, program) -> ExecutionRecord:
        start = len(self.world.record.events)
        self.world.run(program)
        rec = ExecutionRecord(self.n_ranks, self.world.mode, self.world.seed)
        rec.events = self.world.record.events[start:]
        return rec

    # -- shared pieces ------------------------------------------------------------
    def _check_leak(self, c: Context, vals: np.ndarray, stage: str, pulse: int) -> int:
        bad = int(np.count_nonzero(np.isnan(vals).any(axis=-1))) if vals.size else 0
        if bad:
            self.leaks += bad
            c._event("sentinel_leak", "coords", pulse, bad, {"stage": stage})
        return bad

    def _consume_halo(self, c: Context, sig_val: int):
        """Wait for every pulse this rank receives, then read the halo as the non-local work would."""
        st = self.states[c.pe]
        for k in range(self.P):
            yield from c.signal_wait_until(self.coord_signal, k, sig_val)
        halo = yield from c.read(self.coords, c.pe, slice(st.home_count, st.n_local))
        self._check_leak(c, halo, "consume", -1)

    def _notify_tags(self, exchange: str, pulse: int, sig_val: int, mode: str = DATA) -> dict:
        return {"notify": exchange, "pulse": pulse, "step": sig_val, "mode": mode}

    # -- pack independent entries, wait, pack dependent ones ------------
    def pack_with_deps(self, c: Context, block: TaskBlock, meta: PulseData, sig_val: int,
                       mutation: Optional[str] = None):
        r = c.pe
        p = block.pulse_id
        direct = meta.remote_coord_dst is not None
        sizes = [(off, n) for off, n in block.chunks if n > 0]
        phases = []
        for off, n in sizes:
            idx = meta.index_map[off:off + n]
            phases.append((off, idx, np.flatnonzero(idx < meta.dep_offset), np.flatnonzero(idx >= meta.dep_offset)))

        for off, idx, ind, _ in phases:
            if ind.size:
                yield from self._pack_send(c, meta, p, off + ind, idx[ind], direct, False)

        if meta.n_dependent > 0 and mutation != "drop_pack_wait":
            floor = self.floors[r][p]
            if mutation == "predecessor_only_wait":
                floor = p - 1
            if floor is not None:
                for k in range(p - 1, floor - 1, -1):
                    yield from c.signal_wait_until(self.coord_signal, k, sig_val, {"pulse": p})

        for off, idx, _, dep in phases:
            if dep.size:
                yield from self._pack_send(c, meta, p, off + dep, idx[dep], direct, True)

    def _pack_send(self, c: Context, meta: PulseData, p: int, slots: np.ndarray, local_idx: np.ndarray,
                   direct: bool, dependent: bool):
        vals = yield from c.read(self.coords, c.pe, local_idx)
        vals = vals + meta.coord_shift
        self._check_leak(c, vals, "pack", p)
        tags = {"pulse": p, "stage": "pack", "dependent": dependent}
        if direct:
            yield from c.write(self.coords, meta.send_rank, meta.remote_offset + slots, vals, tags)
        else:
            yield from c.write(self.send_bufs[p], c.pe, slots, vals, tags)

    # -- last block notifies (and forwards, for forces) ---------------------
    def sync_and_comm_with_deps(self, c: Context, mode: str, kind: str, p: int, need_last: bool, sig_val: int,
                                mutation: Optional[str] = None):
        r = c.pe
        pulses = self.pulses[r]
        meta = pulses[p]
        if need_last:
            counter = self.coord_counter if kind == "coords" else self.force_counter
            ordering = "relaxed" if mutation == "relaxed_notify" and kind == "coords" else "release"
            old = yield from c.atomic_inc_release(counter, p, ordering=ordering)
            if old != meta.blocks_for_pulse - 1:
                return
        if kind == "coords":
            tags = self._notify_tags("coords", p, sig_val)
            if meta.remote_coord_dst is not None:
                ordering = "relaxed" if mutation == "relaxed_notify" else "release"
                yield from c.signal_store(self.coord_signal, meta.send_rank, p, sig_val, ordering, tags)
            else:
                src = yield from c.read(self.send_bufs[p], r, slice(0, meta.send_size))
                yield from c.put_with_signal(self.coords, meta.send_rank, meta.remote_offset, src,
                                             self.coord_signal, p, sig_val, tags)
            return

        if mode == DEP_MGMT:
            yield from c.signal_store(self.force_done, r, p, sig_val, "release")
            if mutation != "skip_dep_mgmt_wait":
                for k in range(p + 1, self.P):
                    yield from c.signal_wait_until(self.force_done, k, sig_val)
            q = p - 1
        else:
            q = p
        prev = pulses[q]
        tags = self._notify_tags("forces", q, sig_val, mode)
        if prev.remote_force_dst is not None:
            has_data_writes = mode == DEP_MGMT
            ordering = "release" if has_data_writes and mutation != "relaxed_notify" else "relaxed"
            yield from c.signal_store(self.force_signal, prev.recv_rank, q, sig_val, ordering, tags)
        else:
            src = yield from c.read(self.forces, r, slice(prev.atom_offset, prev.atom_offset + prev.recv_size))
            yield from c.put_with_signal(self.recv_bufs[q], prev.recv_rank, 0, src, self.force_signal, q,
                                         sig_val, tags)

    # -- coordinate exchange, per-pulse serialized and fused ----------------------
    def fused_coord_exchange(self, seed: Optional[int] = None, mutation: Optional[str] = None) -> ExecutionRecord:
        _check_mutation(mutation)
        sig_val = self._begin("coords", seed)

        def block_program(block: TaskBlock):
            def run(c: Context):
                meta = self.pulses[c.pe][block.pulse_id]
                yield from self.pack_with_deps(c, block, meta, sig_val, mutation)
                yield from self.sync_and_comm_with_deps(c, DATA, "coords", block.pulse_id,
                                                        meta.blocks_for_pulse > 1, sig_val, mutation)
            return run

        def program(ctx: Context):
            kids = [ctx.spawn(block_program(b), f"X{b.pulse_id}.{b.block_index}")
                    for blocks in self.blocks[ctx.pe] for b in blocks]
            yield from ctx.join(kids)
            yield from self._consume_halo(ctx, sig_val)

        return self._run(program)

    def serialized_coord_exchange(self, seed: Optional[int] = None) -> ExecutionRecord:
        sig_val = self._begin("coords", seed)

        def program(ctx: Context):
            r = ctx.pe
            for p, meta in enumerate(self.pulses[r]):
                slots = np.arange(meta.send_size)
                vals = yield from ctx.read(self.coords, r, meta.index_map)
                vals = vals + meta.coord_shift
                self._check_leak(ctx, vals, "pack", p)
                tags = self._notify_tags("coords", p, sig_val)
                if meta.remote_coord_dst is not None:
                    yield from ctx.write(self.coords, meta.send_rank, meta.remote_offset + slots, vals,
                                         {"pulse": p, "stage": "pack"})
                    yield from ctx.signal_store(self.coord_signal, meta.send_rank, p, sig_val, "release", tags)
                else:
                    yield from ctx.write(self.send_bufs[p], r, slots, vals, {"pulse": p, "stage": "pack"})
                    src = yield from ctx.read(self.send_bufs[p], r, slice(0, meta.send_size))
                    yield from ctx.put_with_signal(self.coords, meta.send_rank, meta.remote_offset, src,
                                                   self.coord_signal, p, sig_val, tags)
                yield from ctx.signal_wait_until(self.coord_signal, p, sig_val)
                yield from ctx.barrier_all()
            yield from self._consume_halo(ctx, sig_val)

        return self._run(program)

    # -- force exchange -------------------------------------------------------------
    def fused_force_exchange(self, accumulate: bool = True, seed: Optional[int] = None,
                             mutation: Optional[str] = None) -> ExecutionRecord:
        _check_mutation(mutation)
        sig_val = self._begin("forces", seed)
        P = self.P

        def block_program(block: TaskBlock):
            def run(c: Context):
                r = c.pe
                p = block.pulse_id
                meta = self.pulses[r][p]
                if p == P - 1 and block.block_index == 0:
                    yield from self.sync_and_comm_with_deps(c, DATA, "forces", p, False, sig_val, mutation)
                direct = meta.remote_force_src is not None
                waited = False
                for off, n in block.chunks:
                    if n == 0:
                        continue
                    if not waited:
                        yield from c.signal_wait_until(self.force_signal, p, sig_val, {"pulse": p})
                        waited = True
                    if direct:
                        vals = yield from c.get(meta.remote_force_src,
                                                slice(meta.remote_offset + off, meta.remote_offset + off + n),
                                                {"pulse": p})
                    else:
                        vals = yield from c.read(self.recv_bufs[p], r, slice(off, off + n))
                    idx = meta.index_map[off:off + n]
                    if accumulate:
                        yield from c.atomic_add(self.forces, r, idx, vals, {"pulse": p})
                    else:
                        yield from c.write(self.forces, r, idx, vals, {"pulse": p})
                if p > 0:
                    yield from self.sync_and_comm_with_deps(c, DEP_MGMT, "forces", p, True, sig_val, mutation)
            return run

        def program(ctx: Context):
            kids = [ctx.spawn(block_program(b), f"F{b.pulse_id}.{b.block_index}")
                    for blocks in self.blocks[ctx.pe] for b in blocks]
            yield from ctx.join(kids)
            yield from ctx.quiet()

        return self._run(program)

    def serialized_force_exchange(self, accumulate: bool = True, seed: Optional[int] = None) -> ExecutionRecord:
        sig_val = self._begin("forces", seed)

        def program(ctx: Context):
            r = ctx.pe
            for p in reversed(range(self.P)):
                meta = self.pulses[r][p]
                tags = self._notify_tags("forces", p, sig_val)
                if meta.remote_force_dst is not None:
                    yield from ctx.signal_store(self.force_signal, meta.recv_rank, p, sig_val, "release", tags)
                else:
                    src = yield from ctx.read(self.forces, r, slice(meta.atom_offset, meta.atom_offset + meta.recv_size))
                    yield from ctx.put_with_signal(self.recv_bufs[p], meta.recv_rank, 0, src, self.force_signal, p,
                                                   sig_val, tags)
                yield from ctx.signal_wait_until(self.force_signal, p, sig_val)
                if meta.send_size:
                    if meta.remote_force_src is not None:
                        vals = yield from ctx.get(meta.remote_force_src,
                                                  slice(meta.remote_offset, meta.remote_offset + meta.send_size))
                    else:
                        vals = yield from ctx.read(self.recv_bufs[p], r, slice(0, meta.send_size))
                    if accumulate:
                        yield from ctx.atomic_add(self.forces, r, meta.index_map, vals)
                    else:
                        yield from ctx.write(self.forces, r, meta.index_map, vals)
                yield from ctx.barrier_all()

        return self._run(program)

    # -- full step ---------------------------------------------------------------------
    def run_step(self, schedule: str = "fused", seed: Optional[int] = None, accumulate: bool = True,
                 mutation: Optional[str] = None) -> ExecutionRecord:
        """One step: coordinate halo, synthetic compute, force halo, integration marker."""
        if schedule not in ("fused", "serialized"):
            raise ValueError(f"unknown schedule {schedule!r}")
        w = self.world
        start = len(w.record.events)
        w._event("launch", -1, "host", tags={"schedule": schedule, "phase": "step_begin"})
        if schedule == "fused":
            self.fused_coord_exchange(seed=seed, mutation=mutation)
        else:
            self.serialized_coord_exchange(seed=seed)
        for st in self.states:
            w._event("compute", st.rank, "host", tags={"stream": "local", "atoms": st.home_count})
            w._event("compute", st.rank, "host", tags={"stream": "non-local", "atoms": st.n_local - st.home_count})
        self.set_forces([synthetic_forces(st.coords, st.rank) for st in self.states])
        fseed = None if seed is None else seed + 1
        if schedule == "fused":
            self.fused_force_exchange(accumulate=accumulate, seed=fseed, mutation=mutation)
        else:
            self.serialized_force_exchange(accumulate=accumulate, seed=fseed)
        for st in self.states:
            w._event("integrate", st.rank, "host", tags={"stream": "update", "atoms": st.home_count})
        return ExecutionRecord(self.n_ranks, w.mode, w.seed, w.record.events[start:])

    # -- inspection ----------------------------------------------------------------------
    def halo_by_id(self, rank: int) -> tuple[np.ndarray, np.ndarray]:
        st = self.states[rank]
        ids = st.plan.local_ids[st.home_count:]
        pos = st.coords[st.home_count:]
        order = np.argsort(ids, kind="stable")
        return ids[order], pos[order]

    def home_forces_by_id(self) -> tuple[np.ndarray, np.ndarray]:
        ids = np.concatenate([st.plan.local_ids[: st.home_count] for st in self.states])
        f = np.concatenate([st.forces[: st.home_count] for st in self.states])
        order = np.argsort(ids, kind="stable")
        return ids[order], f[order]

    def contributions(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(st.plan.local_ids.copy(), st.forces.copy()) for st in self.states]


def _check_mutation(mutation):
    if mutation is not None and mutation not in MUTATIONS:
        raise ValueError(f"unknown mutation {mutation!r}; known: {sorted(MUTATIONS)}")


def synthetic_forces(coords: np.ndarray, rank: int) -> np.ndarray:
    """Integer-valued partial forces that depend on the coordinates actually held.

    A wrong or stale halo coordinate changes (or NaN-poisons) the force it
    produces, so force checks also cover the coordinate path.
    """
    q = np.floor(np.asarray(coords) * 8.0)
    return np.mod(q * 7.0 + 3.0 * rank, 17.0) - 8.0


def random_integer_forces(layout: HaloLayout, seed: int, low: int = -8, high: int = 8) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.integers(low, high + 1, size=(p.total_local, 3)).astype(np.float64) for p in layout.plans]


def direct_gather_oracle(grid: DDGrid, box: SimBox, atoms: AtomSet) -> list[tuple[np.ndarray, np.ndarray]]:
    """Expected halo of every rank by brute force over all (rank, atom) pairs.

    An atom belongs to rank r's halo when it is owned elsewhere and its
    image on r's backward side (each decomposed coordinate taken in the
    window ``[hi - L, hi)``) lies within the cutoff of r's domain.
    Returns per rank ``(ids, positions)`` sorted by id.
    """
    pos = wrap_positions(atoms.positions, box)
    ids = atoms.global_ids
    owner = home_ranks(pos, grid, box)
    edges = [cell_edges(box, grid, d) for d in range(3)]
    rc2 = box.cutoff * box.cutoff
    out = []
    for r in range(grid.total_ranks):
        cell = grid.cell_of(r)
        lower = np.array([edges[d][cell[d]] for d in range(3)])
        q = pos.copy()
        for d in range(3):
            if grid.np[d] > 1:
                hi = edges[d][cell[d] + 1]
                q[:, d] = np.where(pos[:, d] < hi, pos[:, d], pos[:, d] - box.lengths[d])
        inside = np.all(q >= lower, axis=1)
        sel = (owner != r) & ~inside & (backward_gap2(q, lower) <= rc2)
        order = np.argsort(ids[sel], kind="stable")
        out.append((ids[sel][order], q[sel][order]))
    return out


def direct_scatter_oracle(contributions: Iterable[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    """Sum every partial force per global atom id; returns ``(ids, totals)`` sorted by id."""
    contributions = list(contributions)
    if not contributions:
        return np.zeros(0, np.int64), np.zeros((0, 3))
    all_ids = np.concatenate([np.asarray(i, dtype=np.int64) for i, _ in contributions])
    all_f = np.concatenate([np.asarray(f, dtype=np.float64).reshape(-1, 3) for _, f in contributions])
    uniq, inv = np.unique(all_ids, return_inverse=True)
    totals = np.zeros((len(uniq), 3))
    np.add.at(totals, inv, all_f)
    return uniq, totals


def halo_mismatches(ex: HaloExchange, oracle) -> int:
    """Number of ranks whose halo differs from the oracle (ids, order or bits)."""
    bad = 0
    for r, (oid, opos) in enumerate(oracle):
        ids, pos = ex.halo_by_id(r)
        if not (np.array_equal(ids, oid) and pos.shape == opos.shape
                and np.array_equal(pos.view(np.uint64), opos.view(np.uint64))):
            bad += 1
    return bad


def force_mismatches(ex: HaloExchange, expected: tuple[np.ndarray, np.ndarray]) -> int:
    ids, f = ex.home_forces_by_id()
    eids, ef = expected
    if not np.array_equal(ids, eids):
        return max(1, len(ids))
    return int(np.count_nonzero(np.any(f != ef, axis=1)))
