"""A small simulated PGAS machine.

Every PE owns one instance of each symmetric buffer.  Programs are Python
generators that ``yield from`` the operations of their :class:`Context`;
each operation is a scheduling point, so a seeded scheduler can explore
interleavings reproducibly.  The same programs also run on real threads.

Memory model
------------
``sequential``
    Plain writes and puts land immediately.
``weak``
    Plain writes sit in a per-context FIFO and puts sit in flight.  At
    issue time each item is *held* with probability ``aggressiveness``;
    held items only become visible when forced (the writer's release
    operation, ``quiet``, or a global stall).  Other items drain at random
    scheduling points, plain writes element by element.  A context always
    reads its own pending writes.

Signals, atomics and put-with-signal deliveries are coherent: once stored
they are visible to every PE.  A release store or release increment first
publishes the caller's pending plain writes; a relaxed store publishes only
itself.
"""

from __future__ import annotations

import json
import random
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

ELEM_KINDS = {
    "real3": (np.float64, (3,)),
    "real": (np.float64, ()),
    "integer": (np.int64, ()),
    "signal": (np.uint64, ()),
}


class SimDeadlock(RuntimeError):
    def __init__(self, waiters: Sequence[str]):
        self.waiters = list(waiters)
        super().__init__("no runnable context; blocked waiters:\n  " + "\n  ".join(self.waiters))


class CollectiveMismatch(ValueError):
    pass


class OutOfBounds(IndexError):
    pass


@dataclass(frozen=True)
class PE:
    id: int
    island_id: int


@dataclass(frozen=True)
class SymmetricBuffer:
    handle: int
    length: int
    elem_kind: str
    name: str = ""


@dataclass(frozen=True)
class PeerRef:
    """Direct load/store reference to another PE's instance of a buffer."""

    buf: SymmetricBuffer
    pe: int


@dataclass
class Event:
    seq: int
    time: int
    kind: str
    pe: int
    ctx: str
    buf: Optional[str] = None
    slot: Any = None
    value: Any = None
    tags: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"seq": self.seq, "time": self.time, "kind": self.kind, "pe": self.pe, "ctx": self.ctx,
             "buf": self.buf, "slot": self.slot, "value": self.value, **({"tags": self.tags} if self.tags else {})},
            sort_keys=True,
        )


@dataclass
class ExecutionRecord:
    n_pes: int
    mode: str
    seed: Optional[int]
    events: list[Event] = field(default_factory=list)

    def select(self, kind: Optional[str] = None, **tags) -> list[Event]:
        out = []
        for e in self.events:
            if kind is not None and e.kind != kind:
                continue
            if all(e.tags.get(k) == v for k, v in tags.items()):
                out.append(e)
        return out

    def count(self, kind: Optional[str] = None, **tags) -> int:
        return len(self.select(kind, **tags))

    def extend(self, other: "ExecutionRecord"):
        base = len(self.events)
        for i, e in enumerate(other.events):
            e.seq = base + i
            self.events.append(e)

    def to_jsonl(self, path: str | Path | None = None) -> str:
        text = "".join(e.to_json() + "\n" for e in self.events)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_jsonl(cls, text: str, n_pes: int = 0, mode: str = "", seed: Optional[int] = None):
        rec = cls(n_pes=n_pes, mode=mode, seed=seed)
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                rec.events.append(Event(d["seq"], d["time"], d["kind"], d["pe"], d["ctx"], d.get("buf"),
                                        d.get("slot"), d.get("value"), d.get("tags", {})))
        return rec


class _Yield:
    __slots__ = ()


YIELD = _Yield()


class _Wait:
    __slots__ = ("pred", "desc")

    def __init__(self, pred: Callable[[], bool], desc: str):
        self.pred = pred
        self.desc = desc


@dataclass
class _WriteOp:
    buf: SymmetricBuffer
    pe: int
    idx: np.ndarray
    values: np.ndarray
    held: bool
    tags: dict


@dataclass
class _Message:
    source: "Context"
    buf: SymmetricBuffer
    pe: int
    idx: np.ndarray
    values: np.ndarray
    signal: Optional[tuple]  # (buf, slot, value)
    held: bool
    tags: dict


def _to_idx(index, length: int) -> np.ndarray:
    if isinstance(index, slice):
        start, stop, step = index.indices(length)
        if index.stop is not None and index.stop > length or (index.start or 0) < 0:
            raise OutOfBounds(f"slice {index} outside buffer of length {length}")
        return np.arange(start, stop, step, dtype=np.int64)
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= length):
        raise OutOfBounds(f"index range [{idx.min()}, {idx.max()}] outside buffer of length {length}")
    return idx


class Context:
    """An execution context owned by one PE (a rank's program or a task block)."""

    def __init__(self, world: "World", pe: int, name: str, root: bool):
        self.world = world
        self.pe = pe
        self.name = name
        self.root = root
        self.gen = None
        self.pending: deque[_WriteOp] = deque()
        self.done = False
        self.blocked: Optional[_Wait] = None
        self.result = None
        self.priority = world.rng.random()

    # -- helpers --------------------------------------------------------
    def _event(self, kind, buf=None, slot=None, value=None, tags=None):
        self.world._event(kind, self.pe, self.name, buf, slot, value, tags)

    def _read_visible(self, buf: SymmetricBuffer, pe: int, idx: np.ndarray) -> np.ndarray:
        out = self.world._mem(buf, pe)[idx].copy()
        for op in self.pending:
            if op.buf.handle == buf.handle and op.pe == pe and op.idx.size and idx.size:
                _, ia, ib = np.intersect1d(idx, op.idx, assume_unique=False, return_indices=True)
                if ia.size:
                    # intersect1d reports first occurrences only; idx has no repeats in practice
                    out[ia] = op.values[ib]
        return out

    def peer_ref(self, buf: SymmetricBuffer, pe: int) -> Optional[PeerRef]:
        return self.world.peer_ref(buf, self.pe, pe)

    # -- operations (each one is a scheduling point) ----------------------
    def read(self, buf: SymmetricBuffer, pe: int, index):
        yield YIELD
        idx = _to_idx(index, buf.length)
        return self._read_visible(buf, pe, idx)

    def get(self, ref: PeerRef, index, tags=None):
        """Blocking bulk read through a direct peer reference."""
        yield YIELD
        idx = _to_idx(index, ref.buf.length)
        out = self._read_visible(ref.buf, ref.pe, idx)
        self._event("get", ref.buf.name, int(idx.size), ref.pe, tags)
        yield YIELD  # transfer latency
        return out

    def write(self, buf: SymmetricBuffer, pe: int, index, values, tags=None):
        yield YIELD
        idx = _to_idx(index, buf.length)
        vals = np.array(values, dtype=self.world._dtype(buf), copy=True).reshape((idx.size,) + self.world._shape(buf))
        self._event("write", buf.name, int(idx.size), pe, tags)
        if self.world.mode == "sequential":
            self.world._mem(buf, pe)[idx] = vals
        else:
            self.pending.append(_WriteOp(buf, pe, idx, vals, self.world._draw_held(), tags or {}))

    def put(self, buf: SymmetricBuffer, pe: int, offset: int, values, tags=None):
        yield YIELD
        self._issue_put(buf, pe, offset, values, None, tags)

    def put_with_signal(self, buf: SymmetricBuffer, pe: int, offset: int, values,
                        sig: SymmetricBuffer, slot: int, value: int, tags=None):
        yield YIELD
        self._issue_put(buf, pe, offset, values, (sig, slot, int(value)), tags)

    def _issue_put(self, buf, pe, offset, values, signal, tags):
        vals = np.array(values, dtype=self.world._dtype(buf), copy=True).reshape((-1,) + self.world._shape(buf))
        idx = _to_idx(slice(offset, offset + len(vals)), buf.length) if len(vals) else np.zeros(0, np.int64)
        if offset < 0 or offset + len(vals) > buf.length:
            raise OutOfBounds(f"put of {len(vals)} at {offset} outside buffer of length {buf.length}")
        if signal is not None:
            sig, slot, _ = signal
            _to_idx([slot], sig.length)
        kind = "put_signal" if signal is not None else "put"
        self._event(kind, buf.name, int(offset), len(vals), {**(tags or {}), "target": pe})
        msg = _Message(self, buf, pe, idx, vals, signal, self.world._draw_held(), tags or {})
        if self.world.mode == "sequential":
            self.world._deliver(msg)
        else:
            self.world.in_flight.append(msg)

    def signal_store(self, sig: SymmetricBuffer, pe: int, slot: int, value: int,
                     ordering: str = "release", tags=None):
        if ordering not in ("release", "relaxed"):
            raise ValueError(f"unknown ordering {ordering!r}")
        yield YIELD
        _to_idx([slot], sig.length)
        if ordering == "release":
            self.world._flush_writes(self)
        self.world._store_signal(sig, pe, slot, value)
        self._event("signal_" + ordering, sig.name, slot, int(value), {**(tags or {}), "target": pe})

    def signal_wait_until(self, sig: SymmetricBuffer, slot: int, value: int, tags=None):
        """Acquire-wait on this PE's instance until ``signal[slot] >= value``."""
        yield YIELD
        mem = self.world._mem(sig, self.pe)
        target = np.uint64(value)
        if not mem[slot] >= target:
            yield _Wait(lambda: bool(mem[slot] >= target),
                        f"pe{self.pe}/{self.name} waits {sig.name}[{slot}] >= {value} (now {int(mem[slot])})")
        self._event("wait_done", sig.name, slot, int(value), tags)

    def atomic_inc_release(self, counter: SymmetricBuffer, slot: int, pe: Optional[int] = None, tags=None,
                           ordering: str = "release"):
        """Fetch-and-increment; returns the old value.  ``ordering="relaxed"`` skips publishing prior writes."""
        if ordering not in ("release", "relaxed"):
            raise ValueError(f"unknown ordering {ordering!r}")
        yield YIELD
        pe = self.pe if pe is None else pe
        if ordering == "release":
            self.world._flush_writes(self)
        mem = self.world._mem(counter, pe)
        old = int(mem[slot])
        mem[slot] = mem[slot] + 1
        self._event("atomic_inc", counter.name, slot, old, tags)
        return old

    def atomic_add(self, buf: SymmetricBuffer, pe: int, index, values, tags=None):
        yield YIELD
        idx = _to_idx(index, buf.length)
        vals = np.asarray(values, dtype=self.world._dtype(buf)).reshape((idx.size,) + self.world._shape(buf))
        np.add.at(self.world._mem(buf, pe), idx, vals)
        self._event("atomic_add", buf.name, int(idx.size), pe, tags)

    def quiet(self):
        yield YIELD
        self.world._flush_writes(self)
        self.world._deliver_from(self)

    def barrier_all(self):
        if not self.root:
            raise RuntimeError("barrier_all is only available to a PE's root context")
        yield from self.quiet()
        w = self.world
        gen = w._barrier_gen
        w._barrier_arrived += 1
        if w._barrier_arrived == w.n_pes:
            w._barrier_arrived = 0
            w._barrier_gen += 1
        else:
            yield _Wait(lambda: w._barrier_gen > gen, f"pe{self.pe}/{self.name} in barrier_all")
        self._event("barrier")

    def spawn(self, fn: Callable[["Context"], Any], name: str) -> "Context":
        child = Context(self.world, self.pe, name, root=False)
        child.gen = fn(child)
        self.world._add(child)
        return child

    def join(self, children: Iterable["Context"]):
        kids = list(children)
        yield YIELD
        if not all(c.done for c in kids):
            yield _Wait(lambda: all(c.done for c in kids), f"pe{self.pe}/{self.name} joins {len(kids)} contexts")


class World:
    """Owns all cross-PE state and runs one program per PE."""

    def __init__(self, n_pes: int, islands: Optional[Sequence[int]] = None, mode: str = "sequential",
                 seed: int = 0, aggressiveness: float = 0.5, drain_probability: float = 0.5,
                 regime: str = "interleaved", record: bool = True, priority_bias: float = 0.5):
        if n_pes < 1:
            raise ValueError("need at least one PE")
        if mode not in ("sequential", "weak"):
            raise ValueError(f"unknown memory model {mode!r}")
        if regime not in ("interleaved", "threaded"):
            raise ValueError(f"unknown regime {regime!r}")
        islands = list(islands) if islands is not None else [0] * n_pes
        if len(islands) != n_pes:
            raise ValueError("islands must assign one island id per PE")
        self.n_pes = n_pes
        self.pes = [PE(i, int(islands[i])) for i in range(n_pes)]
        self.mode = mode
        self.seed = seed
        self.aggressiveness = float(aggressiveness)
        self.drain_probability = float(drain_probability)
        self.regime = regime
        self.recording = record
        self.priority_bias = float(priority_bias)
        self.rng = random.Random(seed)
        self.np_rng = np.random.default_rng(seed)
        self.time = 0
        self.record = ExecutionRecord(n_pes=n_pes, mode=mode, seed=seed)
        self._heap: dict[int, list[np.ndarray]] = {}
        self._buffers: list[SymmetricBuffer] = []
        self.in_flight: list[_Message] = []
        self._contexts: list[Context] = []
        self._barrier_gen = 0
        self._barrier_arrived = 0
        self._cond = threading.Condition()
        self._threads: list[threading.Thread] = []
        self._errors: list[BaseException] = []
        self._deadlock: Optional[SimDeadlock] = None

    # -- allocation ---------------------------------------------------------
    def alloc_symmetric(self, length: int | Sequence[int], elem_kind: str = "real", name: str = "") -> SymmetricBuffer:
        """Collective allocation; ``length`` may be given per PE to model each caller's argument."""
        if elem_kind not in ELEM_KINDS:
            raise ValueError(f"unknown element kind {elem_kind!r}")
        if not isinstance(length, (int, np.integer)):
            lengths = [int(v) for v in length]
            if len(lengths) != self.n_pes or len(set(lengths)) != 1:
                raise CollectiveMismatch(f"alloc_symmetric called with differing lengths {lengths}")
            length = lengths[0]
        if length < 0:
            raise ValueError("length must be non-negative")
        buf = SymmetricBuffer(len(self._buffers), int(length), elem_kind, name or f"buf{len(self._buffers)}")
        dtype, shape = ELEM_KINDS[elem_kind]
        self._heap[buf.handle] = [np.zeros((int(length),) + shape, dtype=dtype) for _ in range(self.n_pes)]
        self._buffers.append(buf)
        return buf

    def local(self, buf: SymmetricBuffer, pe: int) -> np.ndarray:
        """Host-side view of a PE's instance (outside of running programs)."""
        return self._heap[buf.handle][pe]

    def peer_ref(self, buf: SymmetricBuffer, caller: int, pe: int) -> Optional[PeerRef]:
        if self.pes[caller].island_id == self.pes[pe].island_id:
            return PeerRef(buf, pe)
        return None

    def _mem(self, buf: SymmetricBuffer, pe: int) -> np.ndarray:
        return self._heap[buf.handle][pe]

    @staticmethod
    def _dtype(buf):
        return ELEM_KINDS[buf.elem_kind][0]

    @staticmethod
    def _shape(buf):
        return ELEM_KINDS[buf.elem_kind][1]

    # -- memory model ------------------------------------------------------
    def _event(self, kind, pe, ctx, buf=None, slot=None, value=None, tags=None):
        if self.recording:
            self.record.events.append(Event(len(self.record.events), self.time, kind, pe, ctx, buf, slot,
                                            value, dict(tags) if tags else {}))

    def _draw_held(self) -> bool:
        return self.rng.random() < self.aggressiveness

    def _flush_writes(self, ctx: Context):
        while ctx.pending:
            op = ctx.pending.popleft()
            self._mem(op.buf, op.pe)[op.idx] = op.values

    def _deliver(self, msg: _Message):
        if msg.idx.size:
            self._mem(msg.buf, msg.pe)[msg.idx] = msg.values
        if msg.signal is not None:
            sig, slot, value = msg.signal
            self._store_signal(sig, msg.pe, slot, value)

    def _deliver_from(self, ctx: Context):
        keep = []
        for m in self.in_flight:
            if m.source is ctx:
                self._deliver(m)
            else:
                keep.append(m)
        self.in_flight = keep

    def _store_signal(self, sig, pe, slot, value):
        self._mem(sig, pe)[slot] = np.uint64(value)

    def _pending_any(self) -> bool:
        return bool(self.in_flight) or any(c.pending for c in self._contexts)

    def _adversary_step(self):
        if self.mode != "weak":
            return
        rng = self.rng
        p = self.drain_probability
        for c in self._contexts:
            if c.pending:
                op = c.pending[0]
                if not op.held and rng.random() < p:
                    mask = self.np_rng.random(op.idx.size) < 0.5
                    if mask.all() or op.idx.size == 0:
                        self._mem(op.buf, op.pe)[op.idx] = op.values
                        c.pending.popleft()
                    elif mask.any():
                        self._mem(op.buf, op.pe)[op.idx[mask]] = op.values[mask]
                        op.idx = op.idx[~mask]
                        op.values = op.values[~mask]
        if self.in_flight:
            keep = []
            for m in self.in_flight:
                if not m.held and rng.random() < p:
                    self._deliver(m)
                else:
                    keep.append(m)
            self.in_flight = keep

    def _force_progress(self) -> bool:
        """Make one held item visible; used when every context is blocked."""
        candidates = [("msg", m) for m in self.in_flight] + [("ctx", c) for c in self._contexts if c.pending]
        if not candidates:
            return False
        kind, item = candidates[self.rng.randrange(len(candidates))]
        if kind == "msg":
            self.in_flight.remove(item)
            self._deliver(item)
        else:
            op = item.pending.popleft()
            self._mem(op.buf, op.pe)[op.idx] = op.values
        self._event("adversary_release", -1, "adversary")
        return True

    def _drain_all(self):
        for c in self._contexts:
            self._flush_writes(c)
        msgs, self.in_flight = self.in_flight, []
        for m in msgs:
            self._deliver(m)

    # -- execution -----------------------------------------------------------
    def _add(self, ctx: Context):
        self._contexts.append(ctx)
        if self.regime == "threaded" and self._running_threads:
            self._start_thread(ctx)

    _running_threads = False

    def run(self, programs: Sequence[Callable[[Context], Any]] | Callable[[Context], Any]) -> ExecutionRecord:
        """Run one program per PE to completion and return the event record.

        ``programs`` is either one callable used by every PE or a sequence of
        ``n_pes`` callables; each receives its PE's root context.
        """
        if callable(programs):
            programs = [programs] * self.n_pes
        if len(programs) != self.n_pes:
            raise ValueError("need one program per PE")
        self._contexts = [c for c in self._contexts if not c.done]
        roots = []
        for pe, prog in enumerate(programs):
            ctx = Context(self, pe, f"main{pe}", root=True)
            ctx.gen = prog(ctx)
            roots.append(ctx)
            self._contexts.append(ctx)
        if self.regime == "interleaved":
            self._run_interleaved()
        else:
            self._run_threaded(roots)
        self._drain_all()
        self._contexts = []
        return self.record

    def _step(self, ctx: Context):
        try:
            req = ctx.gen.send(None)
        except StopIteration as stop:
            ctx.done = True
            ctx.result = stop.value
            return
        if isinstance(req, _Wait):
            ctx.blocked = req
        elif req is not YIELD:
            raise TypeError(f"context {ctx.name} yielded {req!r}; use 'yield from ctx.<op>(...)'")

    def _run_interleaved(self):
        rng = self.rng
        while True:
            live = [c for c in self._contexts if not c.done]
            if not live:
                return
            if len(live) < len(self._contexts):
                # finished contexts keep their buffered writes until drained
                self._contexts = [c for c in self._contexts if not c.done or c.pending]
            self._adversary_step()
            runnable = []
            for c in live:
                if c.blocked is None:
                    runnable.append(c)
                elif c.blocked.pred():
                    c.blocked = None
                    runnable.append(c)
            if not runnable:
                if self._force_progress():
                    continue
                raise SimDeadlock([c.blocked.desc for c in live if c.blocked is not None])
            ctx = self._pick(runnable) if len(runnable) > 1 else runnable[0]
            self.time += 1
            self._step(ctx)

    def _pick(self, runnable: list[Context]) -> Context:
        """Uniform pick, or (with ``priority_bias``) the highest-priority context.

        Priorities are reshuffled now and then, so some contexts get starved
        for long stretches; that exposes ordering bugs a uniform pick rarely hits.
        """
        rng = self.rng
        if rng.random() < 0.05:
            runnable[rng.randrange(len(runnable))].priority = rng.random()
        if rng.random() < self.priority_bias:
            return max(runnable, key=lambda c: c.priority)
        return runnable[rng.randrange(len(runnable))]

    # threaded regime: every context is a real thread; one lock serialises
    # the operations themselves, so the memory model is unchanged.
    def _start_thread(self, ctx: Context):
        t = threading.Thread(target=self._thread_main, args=(ctx,), name=ctx.name, daemon=True)
        self._threads.append(t)
        t.start()

    def _stalled(self) -> bool:
        live = [c for c in self._contexts if not c.done]
        return bool(live) and all(c.blocked is not None and not c.blocked.pred() for c in live)

    def _thread_main(self, ctx: Context):
        cond = self._cond
        with cond:
            try:
                while not ctx.done:
                    if self._deadlock is not None or self._errors:
                        return
                    self._adversary_step()
                    self.time += 1
                    self._step(ctx)
                    cond.notify_all()
                    if ctx.blocked is not None:
                        while not ctx.blocked.pred():
                            if self._deadlock is not None or self._errors:
                                return
                            if self._stalled():
                                if self._force_progress():
                                    cond.notify_all()
                                    continue
                                live = [c for c in self._contexts if not c.done]
                                self._deadlock = SimDeadlock([c.blocked.desc for c in live])
                                cond.notify_all()
                                return
                            cond.wait(timeout=0.01)
                        ctx.blocked = None
                    else:
                        cond.wait(timeout=0)
            except BaseException as exc:  # surfaced by _run_threaded
                self._errors.append(exc)
                cond.notify_all()
            finally:
                cond.notify_all()

    def _run_threaded(self, roots: Sequence[Context]):
        self._running_threads = True
        try:
            with self._cond:
                for c in list(self._contexts):
                    if not c.done:
                        self._start_thread(c)
            i = 0
            while i < len(self._threads):
                self._threads[i].join()
                i += 1
        finally:
            self._running_threads = False
            self._threads = []
        if self._errors:
            raise self._errors[0]
        if self._deadlock is not None:
            dead, self._deadlock = self._deadlock, None
            raise dead


def run_world(n_pes: int, programs, islands=None, mode: str = "sequential", seed: int = 0,
              regime: str = "interleaved", aggressiveness: float = 0.5, setup=None):
    """Build a world, let ``setup(world)`` allocate, run the programs.

    ``programs`` may also be a callable ``programs(world, state) -> per-PE
    programs`` when ``setup`` returns state the programs need.
    Returns ``(world, record)``.
    """
    world = World(n_pes, islands=islands, mode=mode, seed=seed, regime=regime, aggressiveness=aggressiveness)
    state = setup(world) if setup is not None else None
    progs = programs(world, state) if setup is not None else programs
    record = world.run(progs)
    return world, record
