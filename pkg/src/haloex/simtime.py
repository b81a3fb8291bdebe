"""Discrete-event timing model for one steady-state MD step.

A step is reduced to a :class:`StepShape` (home and halo atom counts plus
one entry per pulse) and replayed on a :class:`MachineModel` under either
the serialized schedule (host-driven: a kernel launch per pulse and host
waits around every transfer) or the fused schedule (one coordinate kernel
and one force kernel, device-side coordination, but SM contention on
overlapping local work).  All times are microseconds.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from .ddcore import CutoffTooLarge, DDGrid, HaloLayout, dependency_floor
from .pgas import ExecutionRecord

STREAMS = ("local", "non-local", "update", "low-priority-prune")
SCHEDULES = ("serialized", "fused")
BYTES_PER_ENTRY = 24  # three float64
DENSITY = 100.0  # atoms per nm^3, water-like
CUTOFF = 1.1  # nm


@dataclass(frozen=True)
class MachineModel:
    launch_latency: float = 5.0
    event_api_latency: float = 1.0
    direct_link_latency: float = 3.0
    direct_link_bandwidth: float = 400.0  # GB/s
    net_link_latency: float = 20.0
    net_link_bandwidth: float = 50.0
    compute_rate: float = 1.7  # ns per atom
    sm_contention_penalty: float = 0.1
    other_per_step_cost: float = 35.0
    pack_rate: float = 0.5  # ns per packed or unpacked entry
    update_rate: float = 0.05  # ns per home atom
    nonlocal_intensity: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.direct_link_bandwidth <= 0 or self.net_link_bandwidth <= 0:
            raise ValueError("bandwidths must be positive")

    @property
    def host_wait(self) -> float:
        return self.launch_latency + self.event_api_latency

    def transfer(self, entries: int, transport: str) -> float:
        nbytes = entries * BYTES_PER_ENTRY
        if transport == "direct":
            return self.direct_link_latency + nbytes / (self.direct_link_bandwidth * 1e3)
        return self.net_link_latency + nbytes / (self.net_link_bandwidth * 1e3)

    def pack(self, entries: int) -> float:
        return entries * self.pack_rate / 1e3

    def compute(self, atoms: float) -> float:
        return atoms * self.compute_rate / 1e3


@dataclass(frozen=True)
class PulseShape:
    dim: int
    send_size: int
    n_dependent: int
    transport: str = "direct"
    floor: Optional[int] = None

    @property
    def n_independent(self) -> int:
        return self.send_size - self.n_dependent


@dataclass(frozen=True)
class StepShape:
    home_atoms: int
    halo_atoms: int
    pulses: tuple[PulseShape, ...] = ()


@dataclass(frozen=True)
class Interval:
    stream: str
    kind: str
    start: float
    end: float
    pulse: Optional[int] = None

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Timeline:
    """Per-stream intervals; ``subtasks`` holds the per-pulse breakdown inside fused kernels."""

    schedule: str
    intervals: list[Interval] = field(default_factory=list)
    subtasks: list[Interval] = field(default_factory=list)

    def add(self, stream: str, kind: str, start: float, end: float, pulse: Optional[int] = None) -> Interval:
        if stream not in STREAMS:
            raise ValueError(f"unknown stream {stream!r}")
        iv = Interval(stream, kind, float(start), float(end), pulse)
        self.intervals.append(iv)
        return iv

    def stream(self, name: str) -> list[Interval]:
        return sorted((iv for iv in self.intervals if iv.stream == name), key=lambda iv: iv.start)

    def of_kind(self, kind: str) -> list[Interval]:
        return [iv for iv in self.intervals + self.subtasks if iv.kind == kind]

    def check(self):
        for s in STREAMS:
            ivs = self.stream(s)
            for a, b in zip(ivs, ivs[1:]):
                if b.start < a.end - 1e-9:
                    raise AssertionError(f"overlap on stream {s}: {a} / {b}")
            for iv in ivs:
                if iv.end < iv.start:
                    raise AssertionError(f"negative interval {iv}")

    def trace_rows(self) -> list[tuple[str, str, float, float]]:
        rows = [(iv.stream, iv.kind if iv.pulse is None else f"{iv.kind}{iv.pulse}", iv.start, iv.end)
                for iv in self.intervals]
        return sorted(rows, key=lambda r: (r[2], STREAMS.index(r[0]), r[1]))


@dataclass(frozen=True)
class StepMetrics:
    local_work: float
    nonlocal_work: float
    non_overlap: float
    time_per_step: float


# -- shapes ------------------------------------------------------------------------
def _orthant_ball(k: int, r: float) -> float:
    """Volume of the positive orthant of a k-ball of radius r."""
    return math.pi ** (k / 2) / math.gamma(k / 2 + 1) * r ** k / 2 ** k


def synthetic_shape(atoms_per_rank: float, np_: Sequence[int], gpus_per_node: int = 4,
                    density: float = DENSITY, cutoff: float = CUTOFF) -> StepShape:
    """Shape of a homogeneous system in a cubic box, halo volumes with rounded corners.

    The region received by the pulse along ``d`` is split by which earlier
    dimensions it sticks out of; each piece is an orthant of a ball of radius
    ``cutoff`` times the domain widths of the remaining dimensions.
    """
    np_ = tuple(int(v) for v in np_)
    ranks = int(np.prod(np_))
    length = (atoms_per_rank * ranks / density) ** (1 / 3)
    widths = [length / n for n in np_]
    grid = DDGrid(np_)
    order = grid.decomposed
    for d in order:
        if widths[d] <= cutoff:
            raise CutoffTooLarge(f"domain width {widths[d]:.3f} along {'xyz'[d]} is not larger than the cutoff")
    islands = [r // gpus_per_node for r in range(ranks)]
    pulses = []
    halo = 0.0
    for i, d in enumerate(order):
        prev = order[:i]
        later = [e for e in range(3) if e != d and e not in prev]
        total = dep = 0.0
        for mask in range(1 << len(prev)):
            out = [prev[j] for j in range(len(prev)) if mask >> j & 1]
            inside = [e for e in prev if e not in out] + later
            vol = _orthant_ball(len(out) + 1, cutoff) * float(np.prod([widths[e] for e in inside]))
            total += vol
            if out:
                dep += vol
        transport = "direct"
        if any(islands[r] != islands[grid.forward(r, d)] for r in range(ranks)):
            transport = "net"
        send = int(round(total * density))
        pulses.append(PulseShape(d, send, int(round(dep * density)), transport, 0 if i > 0 else None))
        halo += total * density
    return StepShape(int(round(atoms_per_rank)), int(round(halo)), tuple(pulses))


def shape_from_layout(layout: HaloLayout, islands: Optional[Sequence[int]] = None) -> StepShape:
    """Shape of the most loaded rank of a concrete halo layout."""
    n = layout.grid.total_ranks
    islands = list(islands) if islands is not None else [0] * n
    plans = layout.plans
    pulses = []
    for k in range(layout.total_pulses):
        metas = [p.pulses[k] for p in plans]
        transport = "net" if any(islands[m.send_rank] != islands[p.rank] for p, m in zip(plans, metas)) else "direct"
        send = max(m.send_size for m in metas)
        dep = max(m.n_dependent for m in metas)
        floors = [dependency_floor(p, k) for p in plans]
        floor = min((f for f in floors if f is not None), default=None)
        pulses.append(PulseShape(metas[0].dim, send, dep, transport, floor))
    home = max(p.home_count for p in plans)
    halo = max(p.total_local - p.home_count for p in plans)
    return StepShape(home, halo, tuple(pulses))


def shape_from_record(record: ExecutionRecord) -> StepShape:
    """Rebuild a shape from a fused or serialized step record.

    Entry counts come from the coordinate writes and puts tagged with their
    pulse; dependent counts are only known for fused records.
    """
    sizes: dict[tuple[int, int], int] = {}
    dep: dict[tuple[int, int], int] = {}
    net: set[int] = set()
    for e in record.events:
        p = e.tags.get("pulse")
        if p is None:
            continue
        if e.kind == "write" and e.tags.get("stage") == "pack":
            sizes[(e.pe, p)] = sizes.get((e.pe, p), 0) + int(e.slot)
            if e.tags.get("dependent"):
                dep[(e.pe, p)] = dep.get((e.pe, p), 0) + int(e.slot)
        elif e.kind == "put_signal" and e.buf == "coords":
            net.add(p)
    home = [e.tags["atoms"] for e in record.events if e.kind == "compute" and e.tags.get("stream") == "local"]
    halo = [e.tags["atoms"] for e in record.events if e.kind == "compute" and e.tags.get("stream") == "non-local"]
    n_pulses = 1 + max((p for _, p in sizes), default=-1)
    pulses = []
    for p in range(n_pulses):
        send = max((v for (_, q), v in sizes.items() if q == p), default=0)
        d = max((v for (_, q), v in dep.items() if q == p), default=0)
        pulses.append(PulseShape(-1, send, d, "net" if p in net else "direct", 0 if p > 0 else None))
    return StepShape(max(home, default=0), max(halo, default=0), tuple(pulses))


# -- schedules ------------------------------------------------------------------------
def _contended_end(start: float, work: float, busy: Sequence[tuple[float, float]], penalty: float) -> float:
    """End of ``work`` µs of compute starting at ``start``; it runs 1/(1+penalty) slower inside ``busy``."""
    t, left = start, work
    slow = 1.0 / (1.0 + penalty)
    for a, b in sorted(busy):
        if left <= 0:
            break
        if b <= t:
            continue
        if a > t:
            run = min(left, a - t)
            t += run
            left -= run
            if left <= 0:
                break
        span = b - max(a, t)
        done = min(left, span * slow)
        t = max(a, t) + done / slow
        left -= done
    return t + max(left, 0.0)


def simulate_step(shape: StepShape, schedule: str, machine: MachineModel) -> Timeline:
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown schedule {schedule!r}")
    m = machine
    L, H = m.launch_latency, m.host_wait
    tl = Timeline(schedule)
    P = len(shape.pulses)
    local_work = m.compute(shape.home_atoms)
    nl_work = m.compute(shape.halo_atoms) * m.nonlocal_intensity
    xfer = [m.transfer(ps.send_size, ps.transport) for ps in shape.pulses]

    if schedule == "serialized":
        tl.add("local", "local", L, L + local_work)
        t = 2 * L
        for p, ps in enumerate(shape.pulses):
            if p > 0:
                t += L
            t = tl.add("non-local", "pack", t, t + m.pack(ps.send_size), p).end + H
            t = tl.add("non-local", "transfer", t, t + xfer[p], p).end + H
        t += L
        t = tl.add("non-local", "nonlocal", t, t + nl_work).end
        for p in reversed(range(P)):
            t += H
            t = tl.add("non-local", "transfer", t, t + xfer[p], p).end + H + L
            t = tl.add("non-local", "unpack", t, t + m.pack(shape.pulses[p].send_size), p).end
        last_unpack = t
        launch_update = t + L
    else:
        start = 2 * L
        arrive = [0.0] * P
        for p, ps in enumerate(shape.pulses):
            a = tl.subtasks
            ind_end = start + m.pack(ps.n_independent)
            a.append(Interval("non-local", "pack", start, ind_end, p))
            ready = ind_end
            if ps.n_dependent and p > 0:
                lo = 0 if ps.floor is None else ps.floor
                ready = max([ind_end] + arrive[lo:p])
            dep_end = ready + m.pack(ps.n_dependent)
            if ps.n_dependent:
                a.append(Interval("non-local", "pack", ready, dep_end, p))
            arrive[p] = dep_end + xfer[p]
            a.append(Interval("non-local", "transfer", dep_end, arrive[p], p))
        coord = tl.add("non-local", "coord_exchange", start, max(arrive, default=start))
        nl = tl.add("non-local", "nonlocal", max(3 * L, coord.end), max(3 * L, coord.end) + nl_work)
        fstart = max(4 * L, nl.end)
        done = [0.0] * P
        for p in reversed(range(P)):
            send = fstart if p == P - 1 else max(done[p + 1:])
            arr = send + xfer[p]
            done[p] = arr + m.pack(shape.pulses[p].send_size)
            tl.subtasks.append(Interval("non-local", "transfer", send, arr, p))
            tl.subtasks.append(Interval("non-local", "unpack", arr, done[p], p))
        force = tl.add("non-local", "force_exchange", fstart, max(done, default=fstart))
        busy = [(coord.start, coord.end), (force.start, force.end)] if P else []
        tl.add("local", "local", L, _contended_end(L, local_work, busy, m.sm_contention_penalty))
        last_unpack = force.end
        launch_update = 5 * L
    local_end = tl.stream("local")[0].end
    u0 = max(local_end, last_unpack, launch_update)
    tl.add("update", "integrate", u0, u0 + shape.home_atoms * m.update_rate / 1e3)
    return tl


def metrics(timeline: Timeline, machine: Optional[MachineModel] = None) -> StepMetrics:
    other = (machine or MachineModel()).other_per_step_cost
    local = [iv for iv in timeline.intervals if iv.kind == "local"]
    local_start = min(iv.start for iv in local)
    local_end = max(iv.end for iv in local)
    firsts = [iv.start for iv in timeline.intervals + timeline.subtasks if iv.kind in ("pack", "coord_exchange")]
    lasts = [iv.end for iv in timeline.intervals + timeline.subtasks if iv.kind in ("unpack", "force_exchange")]
    if firsts and lasts:
        nl_start, nl_end = min(firsts), max(lasts)
    else:
        nl = [iv for iv in timeline.intervals if iv.stream == "non-local"]
        nl_start = min((iv.start for iv in nl), default=local_start)
        nl_end = max((iv.end for iv in nl), default=nl_start)
    extent = max(iv.end for iv in timeline.intervals) - min(0.0, min(iv.start for iv in timeline.intervals))
    return StepMetrics(
        local_work=local_end - local_start,
        nonlocal_work=nl_end - nl_start,
        non_overlap=max(0.0, nl_end - local_end),
        time_per_step=extent + other,
    )


def step_metrics(shape: StepShape, schedule: str, machine: MachineModel) -> StepMetrics:
    return metrics(simulate_step(shape, schedule, machine), machine)


# -- calibration -------------------------------------------------------------------------
@dataclass(frozen=True)
class CalibrationTarget:
    name: str
    atoms_per_rank: float
    np: tuple[int, int, int]
    schedule: str
    metric: str
    value: float


ANCHORS = (
    CalibrationTarget("serialized_nonlocal_11k", 11250, (4, 1, 1), "serialized", "nonlocal_work", 116.0),
    CalibrationTarget("fused_nonlocal_11k", 11250, (4, 1, 1), "fused", "nonlocal_work", 64.0),
    CalibrationTarget("serialized_local_90k", 90000, (4, 1, 1), "serialized", "local_work", 152.0),
    CalibrationTarget("fused_nonlocal_90k", 90000, (4, 1, 1), "fused", "nonlocal_work", 152.0),
)
FIT_PARAMS = ("launch_latency", "direct_link_latency", "compute_rate", "nonlocal_intensity")


@dataclass
class CalibrationResult:
    machine: MachineModel
    residuals: dict[str, float]
    predictions: dict[str, float]


def calibrate(targets: Sequence[CalibrationTarget] = ANCHORS, base: Optional[MachineModel] = None,
              params: Sequence[str] = FIT_PARAMS, gpus_per_node: int = 4) -> CalibrationResult:
    """Least-squares fit of ``params`` so the model hits each target metric."""
    base = base or MachineModel()
    shapes = [synthetic_shape(t.atoms_per_rank, t.np, gpus_per_node) for t in targets]

    def predict(x):
        mm = replace(base, **dict(zip(params, map(float, x))))
        return [getattr(step_metrics(s, t.schedule, mm), t.metric) for s, t in zip(shapes, targets)]

    def resid(x):
        return np.array(predict(x)) - np.array([t.value for t in targets])

    x0 = np.array([getattr(base, p) for p in params], dtype=float)
    fit = least_squares(resid, x0, bounds=(np.zeros(len(params)), np.full(len(params), np.inf)),
                        x_scale="jac", xtol=1e-12, ftol=1e-12, gtol=1e-12)
    machine = replace(base, **{p: float(round(v, 6)) for p, v in zip(params, fit.x)})
    pred = predict([getattr(machine, p) for p in params])
    return CalibrationResult(machine, {t.name: v - t.value for t, v in zip(targets, pred)},
                             {t.name: v for t, v in zip(targets, pred)})


# -- sweeps -------------------------------------------------------------------------------------
@dataclass(frozen=True)
class SweepConfig:
    atoms_per_rank: int
    np: tuple[int, int, int]
    schedule: str
    gpus_per_node: int = 4

    @property
    def dims(self) -> int:
        return sum(1 for v in self.np if v > 1)

    @property
    def ranks(self) -> int:
        return int(np.prod(self.np))


DEFAULT_ATOMS = (11250, 45000, 90000, 360000, 1440000)
DEFAULT_GRIDS = ((8, 1, 1), (1, 4, 4), (2, 4, 4))


def default_sweep(atoms: Iterable[int] = DEFAULT_ATOMS, grids: Iterable[Sequence[int]] = DEFAULT_GRIDS,
                  schedules: Iterable[str] = SCHEDULES, gpus_per_node: int = 4) -> list[SweepConfig]:
    grids = [tuple(int(v) for v in g) for g in grids]
    schedules = list(schedules)
    return [SweepConfig(int(a), g, s, gpus_per_node) for a in atoms for g in grids for s in schedules]


SWEEP_COLUMNS = ("atoms_per_rank", "ranks", "dims", "np", "schedule", "pulses", "local_work_us", "nonlocal_work_us",
                 "non_overlap_us", "time_per_step_us", "speedup_vs_serialized")


def sweep(configs: Sequence[SweepConfig], machine: MachineModel) -> list[dict]:
    """One row per config; speedup is serialized time per step over this row's."""
    rows = []
    cache: dict[tuple, StepMetrics] = {}
    for c in configs:
        shape = synthetic_shape(c.atoms_per_rank, c.np, c.gpus_per_node)
        for s in {c.schedule, "serialized"}:
            key = (c.atoms_per_rank, c.np, c.gpus_per_node, s)
            if key not in cache:
                cache[key] = step_metrics(shape, s, machine)
        met = cache[(c.atoms_per_rank, c.np, c.gpus_per_node, c.schedule)]
        ser = cache[(c.atoms_per_rank, c.np, c.gpus_per_node, "serialized")]
        rows.append({
            "atoms_per_rank": c.atoms_per_rank,
            "ranks": c.ranks,
            "dims": c.dims,
            "np": "x".join(map(str, c.np)),
            "schedule": c.schedule,
            "pulses": len(shape.pulses),
            "local_work_us": met.local_work,
            "nonlocal_work_us": met.nonlocal_work,
            "non_overlap_us": met.non_overlap,
            "time_per_step_us": met.time_per_step,
            "speedup_vs_serialized": ser.time_per_step / met.time_per_step,
        })
    return rows


def _fmt(v) -> str:
    return f"{v:.3f}" if isinstance(v, float) else str(v)


def rows_to_csv(rows: Sequence[dict], header_comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in header_comments:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def write_sweep_csv(path: str | Path, rows: Sequence[dict], config: dict) -> Path:
    path = Path(path)
    path.write_text(rows_to_csv(rows, ["config: " + json.dumps(config, sort_keys=True)]))
    return path


def trace_to_csv(timeline: Timeline, header_comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in header_comments:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("stream", "kind", "start_us", "end_us"))
    for s, k, a, b in timeline.trace_rows():
        w.writerow((s, k, f"{a:.3f}", f"{b:.3f}"))
    return buf.getvalue()


def machine_to_dict(machine: MachineModel) -> dict:
    return asdict(machine)
